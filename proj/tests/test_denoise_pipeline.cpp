#include <doctest.h>

#include "spd/attention_dump.hpp"
#include "spd/bench_harness.hpp"
#include "spd/scenario.hpp"
#include "spd/toy_denoiser.hpp"

#include "helpers.hpp"

using namespace spd;
using namespace testing;

namespace {

const std::string kPrompt = "a red car and a blue bench";

const DenoiserBackend& toy() { return *default_toy_backend(); }

ParsedPrompt parsed_for(const DenoiserBackend& b, const std::string& prompt) {
  return tokenize_parsed(b, parse_freeform(prompt));
}

PipelineConfig config(std::uint64_t seed, int ts = 2) {
  PipelineConfig cfg;
  cfg.seed = seed;
  cfg.protection_steps = ts;
  return cfg;
}

}  // namespace

TEST_CASE("defaults") {
  const PipelineConfig cfg;
  CHECK(cfg.total_steps == 20);
  CHECK(cfg.protection_steps == 2);
  CHECK(cfg.guidance_scale == 7.5);
  CHECK(cfg.extraction.s_ca == 0.9);
  CHECK(cfg.extraction.s_sa == 0.2);
  CHECK(cfg.image_width == 768);
  PipelineConfig bad;
  bad.protection_steps = 21;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("DDIM timesteps use leading spacing") {
  const DdimScheduler s;
  const auto ts = s.timesteps(20);
  REQUIRE(ts.size() == 20);
  CHECK(ts.front() == 951);
  CHECK(ts.back() == 1);
  for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i - 1] - ts[i] == 50);
  CHECK(s.alpha_cumprod(0) > s.alpha_cumprod(999));
}

TEST_CASE("a DDIM step with the exact noise recovers x0") {
  const DdimScheduler s;
  Rng rng(41);
  const Matrix x0 = random_matrix(rng, 16, 4), eps = random_matrix(rng, 16, 4);
  const int t = 951;
  const Real a = s.alpha_cumprod(t);
  const Matrix xt = std::sqrt(a) * x0 + std::sqrt(1 - a) * eps;
  Matrix x = xt;
  const auto ts = s.timesteps(20);
  x = s.step(eps, x, ts[0], 20);
  const Real a_prev = s.alpha_cumprod(ts[1]);
  CHECK((x - (std::sqrt(a_prev) * x0 + std::sqrt(1 - a_prev) * eps)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("pass 1 recording") {
  const ParsedPrompt p = parsed_for(toy(), kPrompt);
  SUBCASE("no protection steps records nothing but still returns the noise") {
    const Pass1Result r = pass1_record(config(1, 0), p, toy());
    CHECK(r.records.empty());
    CHECK(r.x_T == initial_noise(toy().latent_grid(), toy().latent_channels(), 1));
  }
  SUBCASE("two steps record every layer with the layer's grid") {
    const Pass1Result r = pass1_record(config(1), p, toy());
    const auto layers = toy().attention_layers();
    REQUIRE(r.records.size() == 2 * layers.size());
    for (const auto& rec : r.records) {
      const auto it = std::find_if(layers.begin(), layers.end(), [&](const LayerInfo& l) { return l.id == rec.layer; });
      REQUIRE(it != layers.end());
      CHECK(rec.cross.grid == it->grid);
      CHECK(rec.cross.values.rows() == it->grid.size());
      CHECK(rec.cross.values.cols() == p.token_count);
      CHECK(rec.self.values.rows() == it->grid.size());
      CHECK(rec.self.values.cols() == it->grid.size());
      CHECK(rec.step < 2);
      CHECK((rec.cross.values.rowwise().sum().array() - 1).abs().maxCoeff() < 1e-5);
    }
  }
  SUBCASE("same seed records bit-identical maps") {
    const Pass1Result a = pass1_record(config(4), p, toy()), b = pass1_record(config(4), p, toy());
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
      CHECK(a.records[i].cross.values == b.records[i].cross.values);
      CHECK(a.records[i].self.values == b.records[i].self.values);
    }
  }
}

TEST_CASE("a zero mask reproduces the plain run") {
  const ParsedPrompt p = parsed_for(toy(), kPrompt);
  for (int ts : {2, 20}) {
    const PipelineConfig cfg = config(6, ts);
    const Pass1Result p1 = pass1_record(cfg, p, toy());
    const Pass2Result zero = pass2_protected(cfg, p, toy(), SPMask::zeros({8, 8}, p.token_count), p1.records, p1.x_T);
    const Pass2Result plain = run_plain(cfg, kPrompt, toy());
    CHECK(zero.latent == plain.latent);
    CHECK(zero.image == plain.image);
  }
}

TEST_CASE("missing records for a replaced step") {
  const ParsedPrompt p = parsed_for(toy(), kPrompt);
  const PipelineConfig cfg = config(1);
  const Pass1Result p1 = pass1_record(cfg, p, toy());
  const std::vector<AttentionRecord> first_step(p1.records.begin(), p1.records.begin() + 1);
  CHECK_THROWS_AS(pass2_protected(cfg, p, toy(), SPMask::zeros({8, 8}, p.token_count), first_step, p1.x_T),
                  RecordMismatch);
}

TEST_CASE("the backend rejects a malformed latent") {
  const auto text = encode_prompt(toy(), kPrompt);
  CHECK_THROWS_AS(toy().predict(Matrix::Zero(3, 3), text.cond, text.uncond, 7.5, 0, 951, {}), BackendFailure);
}

TEST_CASE("generation") {
  SUBCASE("a single concept runs plain") {
    const GenerationResult g = generate("a red car", config(2), toy());
    CHECK_FALSE(g.diagnostics.protection_active);
    CHECK(g.latent == run_plain(config(2), "a red car", toy()).latent);
  }
  SUBCASE("protection can be switched off") {
    PipelineConfig cfg = config(2);
    cfg.protect = false;
    const GenerationResult g = generate(kPrompt, cfg, toy());
    CHECK_FALSE(g.diagnostics.protection_active);
    CHECK(g.diagnostics.backend_steps == 20);
  }
  SUBCASE("golden image hash") {
    const GenerationResult g = generate(kPrompt, config(3), toy());
    CHECK(g.diagnostics.protection_active);
    CHECK(sha256_hex(encode_png(g.image)) == "cbed1a4a64e5d2206c10da5352d87eeb05a7587fdd95c692b79d3c660d0ced21");
    CHECK(g.image.width == 128);
  }
  SUBCASE("both passes start from the seeded noise") {
    const GenerationResult g = generate(kPrompt, config(8), toy());
    CHECK(g.x_T == initial_noise(toy().latent_grid(), toy().latent_channels(), 8));
  }
}

TEST_CASE("backend step accounting") {
  CountingBackend counter(toy());
  for (int ts : {1, 2, 5}) {
    counter.reset();
    const GenerationResult g = generate(kPrompt, config(0, ts), counter);
    CHECK(counter.calls() == 20 + ts);
    CHECK(g.diagnostics.backend_steps == 20 + ts);
  }
  counter.reset();
  const GenerationResult zero = generate(kPrompt, config(0, 0), counter);
  CHECK(counter.calls() == 21);
  CHECK(zero.diagnostics.replaced_self_maps == 0);
  CHECK(zero.diagnostics.masked_entries > 0);
  CHECK(zero.diagnostics.reason == "protected (mask only, T_s = 0)");
}

TEST_CASE("pass 2 on the entangled scenario") {
  const auto backend = BackendRegistry::instance().make("adapter:scenario", kPrompt, 3);
  PipelineConfig cfg = config(3);
  cfg.record_pass2 = true;
  const GenerationResult g = generate(kPrompt, cfg, *backend);
  REQUIRE(g.diagnostics.protection_active);
  REQUIRE(g.pass2_records.size() == 20 * toy().attention_layers().size());

  const AttentionDump back = decode_dump(encode_dump(make_dump(g)));
  REQUIRE(back.pass2_records.size() == g.pass2_records.size());
  const auto foreign = g.parsed.concepts[1].token_indices();
  for (const auto& rec : back.pass2_records) {
    const Mask d1 = resample_mask(g.regions.regions[0], g.regions.grid, rec.cross.grid);
    REQUIRE(d1.any());
    Real sum = 0;
    for (Eigen::Index i = 0; i < d1.size(); ++i)
      if (d1(i))
        for (int t : foreign) sum += rec.cross.values(i, t);
    CHECK(sum == 0.0);
  }

  SUBCASE("replaced steps use the stored self-attention") {
    int compared = 0;
    for (const auto& rec : g.pass2_records) {
      if (rec.step >= cfg.protection_steps) continue;
      for (const auto& stored : g.records)
        if (stored.step == rec.step && stored.layer == rec.layer) {
          CHECK(rec.self.values == stored.self.values);
          ++compared;
        }
    }
    CHECK(compared == cfg.protection_steps * static_cast<int>(toy().attention_layers().size()));
    CHECK(g.diagnostics.replaced_self_maps == compared);
  }
}

TEST_CASE("replacement fidelity on the toy backend") {
  PipelineConfig cfg = config(5);
  cfg.record_pass2 = true;
  const GenerationResult g = generate(kPrompt, cfg, toy());
  for (const auto& rec : g.pass2_records) {
    if (rec.step >= cfg.protection_steps) continue;
    for (const auto& stored : g.records)
      if (stored.step == rec.step && stored.layer == rec.layer) CHECK(rec.self.values == stored.self.values);
  }
}

TEST_CASE("concurrent generations match serial ones") {
  std::vector<Matrix> serial, parallel(4);
  for (std::uint64_t s = 0; s < 4; ++s) serial.push_back(generate(kPrompt, config(s), toy()).latent);
  parallel_for(4, 2, [&](std::size_t i) { parallel[i] = generate(kPrompt, config(i), toy()).latent; });
  for (std::size_t i = 0; i < 4; ++i) CHECK(serial[i] == parallel[i]);
}
