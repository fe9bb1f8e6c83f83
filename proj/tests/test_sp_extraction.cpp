#include <doctest.h>

#include "spd/scenario.hpp"
#include "spd/toy_denoiser.hpp"

#include "helpers.hpp"

using namespace spd;
using namespace testing;

namespace {

Vector vec(std::initializer_list<Real> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (Real x : v) out(i++) = x;
  return out;
}

Mask bits(std::initializer_list<int> v) {
  Mask out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (int x : v) out(i++) = x != 0;
  return out;
}

ParsedPrompt token_level(const std::string& prompt, Template t) {
  return map_to_tokens(parse_template(prompt, t), ToyTokenizer{}.tokenize(prompt));
}

ScenarioConfig flat_config() {
  ScenarioConfig cfg;
  cfg.layers = {{0, {8, 8}}, {1, {8, 8}}};
  return cfg;
}

oracle::Extraction run_oracle(std::span<const AttentionRecord> records, const ParsedPrompt& parsed, Real s_ca,
                              Real s_sa) {
  std::vector<oracle::Table> cross, self;
  for (const auto& r : records) {
    cross.push_back(to_table(r.cross.values));
    self.push_back(to_table(r.self.values));
  }
  std::vector<std::vector<int>> cols;
  for (const auto& c : parsed.concepts) {
    std::vector<int> t;
    for (int i = c.noun.start; i < c.noun.end; ++i) t.push_back(i);
    cols.push_back(t);
  }
  return oracle::extract(cross, self, cols, s_ca, s_sa);
}

bool subset(const Mask& a, const Mask& b) { return !(a && !b).any(); }

}  // namespace

TEST_CASE("anchor thresholding") {
  CHECK((anchor_points(vec({0.95, 0.5, 0.91}), 0.9) == bits({1, 0, 1})).all());
  CHECK((anchor_points(vec({0.3, 0.7, 0.2}), 0.9) == bits({0, 1, 0})).all());
}

TEST_CASE("a high threshold keeps only the brighter of two blobs") {
  const ParsedPrompt parsed = token_level("a red car and a blue bench", Template::CC500);
  const Scenario sc = make_scenario(parsed, {}, 5);
  const AttnMap agg = aggregate(sc.records, AttnKind::cross);
  const Vector col = concept_column(agg, parsed.concepts[1], AnchorNorm::per_column);
  for (Real s : {0.9, 0.5}) {
    const Mask m = anchor_points(col, s);
    for (Eigen::Index i = 0; i < col.size(); ++i) CHECK(m(i) == (col(i) >= s));
  }
  const Mask high = anchor_points(col, 0.9), low = anchor_points(col, 0.5);
  CHECK(subset(high, sc.truth[1]));
  CHECK_FALSE((high && sc.truth[0]).any());
  CHECK((low && sc.truth[0]).any());
  CHECK((low && sc.truth[1]).any());
}

TEST_CASE("cross-normalization") {
  SUBCASE("hand arithmetic") {
    Matrix self(2, 2);
    self << 0.8, 0.1, 0.2, 0.9;
    const AttnMap agg{self, {2, 1}, AttnKind::self};
    const auto out = cross_normalize(agg, {bits({1, 0}), bits({0, 1})});
    CHECK((out[0] == vec({1, 0})));
    CHECK((out[1] == vec({0, 1})));
  }
  SUBCASE("identical concepts cancel") {
    Rng rng(21);
    const AttnMap agg{minmax_norm(random_stochastic(rng, 16, 16)), {4, 4}, AttnKind::self};
    const Mask m = random_mask(rng, 16, 0.3) || bits({1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    for (const auto& v : cross_normalize(agg, {m, m})) CHECK(v.isZero(0));
  }
  SUBCASE("one concept is only normalized") {
    Rng rng(22);
    const AttnMap agg{random_stochastic(rng, 9, 9), {3, 3}, AttnKind::self};
    const auto out = cross_normalize(agg, {bits({0, 0, 0, 0, 1, 0, 0, 0, 0})});
    CHECK(out[0] == minmax_norm(Vector(agg.values.col(4))));
  }
}

TEST_CASE("concept regions") {
  const Grid g{4, 1};
  SUBCASE("disjoint halves") {
    const auto rs = concept_regions({vec({1, 0.8, 0, 0}), vec({0, 0, 0.9, 1})}, 0.2, g,
                                    {bits({1, 0, 0, 0}), bits({0, 0, 0, 1})});
    CHECK((rs.regions[0] == bits({1, 1, 0, 0})).all());
    CHECK((rs.regions[1] == bits({0, 0, 1, 1})).all());
  }
  SUBCASE("ties go to the lower index") {
    const auto rs = concept_regions({vec({0.5, 0, 0, 1}), vec({0.5, 1, 0, 0})}, 0.2, g,
                                    {bits({0, 0, 0, 1}), bits({0, 1, 0, 0})});
    CHECK(rs.regions[0](0));
    CHECK_FALSE(rs.regions[1](0));
    CHECK(rs.candidates[1](0));
  }
  SUBCASE("overlaps go to the larger value") {
    const auto rs = concept_regions({vec({0.4, 1, 0, 0}), vec({0.6, 0, 0, 1})}, 0.2, g,
                                    {bits({0, 1, 0, 0}), bits({0, 0, 0, 1})});
    CHECK(rs.regions[1](0));
    CHECK_FALSE(rs.regions[0](0));
  }
}

TEST_CASE("extraction on scenarios equals the brute-force oracle") {
  const std::vector<std::pair<std::string, Template>> prompts{
      {"a red car and a blue bench", Template::CC500},
      {"a blue coat bear and red hat mouse", Template::Animals100},
      {"a woman, red shirt, blue pants, green hat, yellow scarf", Template::Wearing100}};
  for (const auto& [prompt, t] : prompts) {
    const ParsedPrompt parsed = token_level(prompt, t);
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const Scenario sc = make_scenario(parsed, flat_config(), seed);
      const RegionSet rs = extract(sc.records, parsed);
      const auto ex = run_oracle(sc.records, parsed, 0.9, 0.2);
      for (std::size_t k = 0; k < parsed.concepts.size(); ++k) {
        CHECK(to_bits(rs.anchors[k]) == ex.anchors[k]);
        CHECK(to_bits(rs.candidates[k]) == ex.candidates[k]);
        CHECK(to_bits(rs.regions[k]) == ex.regions[k]);
        CHECK(iou(rs.regions[k], sc.truth[k]) >= 0.9);
      }
    }
  }
}

TEST_CASE("single concept with uniform attention falls back to the anchor") {
  ParsedPrompt p;
  p.token_count = 3;
  p.concepts.push_back({1, {1, 2, "car", {}}, {}});
  AttentionRecord r;
  r.cross = {Matrix::Constant(16, 3, 1.0 / 3), {4, 4}, AttnKind::cross};
  r.self = {Matrix::Constant(16, 16, 1.0 / 16), {4, 4}, AttnKind::self};
  const std::vector<AttentionRecord> rs{r};
  const RegionSet out = extract(rs, p);
  REQUIRE(out.regions.size() == 1);
  CHECK(out.regions[0].count() == 1);
  CHECK((out.regions[0] == out.anchors[0]).all());
}

TEST_CASE("extraction properties on the scenario") {
  const ParsedPrompt parsed = token_level("a woman, red shirt, blue pants, green hat, yellow scarf", Template::Wearing100);
  const Scenario sc = make_scenario(parsed, {}, 9);

  SUBCASE("deterministic") {
    const auto a = extract(sc.records, parsed), b = extract(sc.records, parsed);
    for (std::size_t k = 0; k < a.size(); ++k) CHECK((a.regions[k] == b.regions[k]).all());
  }
  SUBCASE("regions are pairwise disjoint") {
    const auto rs = extract(sc.records, parsed);
    for (std::size_t i = 0; i < rs.size(); ++i)
      for (std::size_t j = i + 1; j < rs.size(); ++j) CHECK_FALSE((rs.regions[i] && rs.regions[j]).any());
  }
  SUBCASE("raising s_sa never grows a candidate region") {
    ExtractionConfig cfg;
    std::optional<RegionSet> prev;
    for (Real s : {0.05, 0.1, 0.2, 0.4, 0.6, 0.8}) {
      cfg.s_sa = s;
      RegionSet rs = extract(sc.records, parsed, cfg);
      if (prev)
        for (std::size_t k = 0; k < rs.size(); ++k)
          if (rs.candidates[k].count() > rs.anchors[k].count() || (rs.candidates[k] != rs.anchors[k]).any())
            CHECK(subset(rs.candidates[k], prev->candidates[k]));
      prev = std::move(rs);
    }
  }
  SUBCASE("raising s_ca never grows the anchors") {
    const AttnMap agg = aggregate(sc.records, AttnKind::cross);
    for (const auto& c : parsed.concepts) {
      const Vector col = concept_column(agg, c, AnchorNorm::per_column);
      Mask prev = Mask::Constant(col.size(), true);
      for (Real s : {0.2, 0.4, 0.6, 0.8, 0.9, 0.95}) {
        const Mask m = anchor_points(col, s);
        if ((col.array() >= s).any()) CHECK(subset(m, prev));
        prev = m;
      }
    }
  }
  SUBCASE("anchors lie inside their candidate regions") {
    const AttnMap agg_cross = aggregate(sc.records, AttnKind::cross);
    RecordSelection same;
    same.canonical_grid = agg_cross.grid;
    const AttnMap agg_self = aggregate(sc.records, AttnKind::self, same);
    std::vector<Mask> anchors;
    for (const auto& c : parsed.concepts) anchors.push_back(anchor_points(agg_cross, c, 0.9));
    const auto normed = cross_normalize(agg_self, anchors);
    for (std::size_t k = 0; k < anchors.size(); ++k) {
      Real lowest = 1;
      for (Eigen::Index i = 0; i < anchors[k].size(); ++i)
        if (anchors[k](i)) lowest = std::min(lowest, normed[k](i));
      if (lowest <= 0) continue;
      const auto rs = concept_regions(normed, lowest, agg_cross.grid, anchors);
      CHECK(subset(anchors[k], rs.candidates[k]));
    }
  }
  SUBCASE("permuting concepts permutes regions") {
    ParsedPrompt rev = parsed;
    std::reverse(rev.concepts.begin(), rev.concepts.end());
    const auto a = extract(sc.records, parsed), b = extract(sc.records, rev);
    const std::size_t n = a.size();
    for (std::size_t k = 0; k < n; ++k) CHECK((a.regions[k] == b.regions[n - 1 - k]).all());
  }
}

TEST_CASE("swapping two concepts' maps swaps the outputs") {
  Rng rng(23);
  const Grid g{6, 6};
  ParsedPrompt p;
  p.token_count = 4;
  p.concepts.push_back({1, {1, 2, "x", {}}, {}});
  p.concepts.push_back({2, {2, 3, "y", {}}, {}});
  AttentionRecord r;
  r.cross = {random_stochastic(rng, 36, 4), g, AttnKind::cross};
  r.self = {random_stochastic(rng, 36, 36), g, AttnKind::self};
  AttentionRecord swapped = r;
  swapped.cross.values.col(1).swap(swapped.cross.values.col(2));
  const std::vector<AttentionRecord> a{r}, b{swapped};
  const auto ra = extract(a, p), rb = extract(b, p);
  CHECK((ra.regions[0] == rb.regions[1]).all());
  CHECK((ra.regions[1] == rb.regions[0]).all());
}

TEST_CASE("global anchor normalization uses the aggregate as is") {
  const ParsedPrompt parsed = token_level("a red car and a blue bench", Template::CC500);
  const Scenario sc = make_scenario(parsed, {}, 2);
  const AttnMap agg = aggregate(sc.records, AttnKind::cross);
  const Vector g = concept_column(agg, parsed.concepts[0], AnchorNorm::global);
  const Vector per = concept_column(agg, parsed.concepts[0], AnchorNorm::per_column);
  CHECK(g == Vector(agg.values.col(parsed.concepts[0].noun.start)));
  CHECK(per == minmax_norm(g));
  ExtractionConfig cfg;
  cfg.anchor_norm = AnchorNorm::global;
  CHECK(extract(sc.records, parsed, cfg).size() == 2);
}

TEST_CASE("direct cross-attention thresholding misses area at a high threshold") {
  const ParsedPrompt parsed = token_level("a red car and a blue bench", Template::CC500);
  const Scenario sc = make_scenario(parsed, {}, 1);
  ExtractionConfig cfg;
  cfg.method = RegionMethod::cross_attn_only;
  const RegionSet ca = extract(sc.records, parsed, cfg);
  const RegionSet sp = extract(sc.records, parsed);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(recall(ca.regions[k], sc.truth[k]) < 0.9);
    CHECK(iou(sp.regions[k], sc.truth[k]) >= 0.9);
  }
}

TEST_CASE("empty selection propagates") {
  CHECK_THROWS_AS(extract(std::vector<AttentionRecord>{}, ParsedPrompt{}), EmptySelection);
}
