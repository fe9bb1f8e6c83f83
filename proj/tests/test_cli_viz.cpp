#include <doctest.h>

#include "spd/attention_dump.hpp"
#include "spd/cli.hpp"
#include "spd/image_io.hpp"
#include "spd/scenario.hpp"
#include "spd/viz.hpp"

#include "helpers.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace spd;
using namespace testing;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kPrompt = "a red car and a blue bench";

struct Run {
  int code = 0;
  std::string out, err;
};

Run spdiff(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

int components(const Mask& m, Grid g) {
  std::vector<int> seen(static_cast<std::size_t>(g.size()), 0);
  int n = 0;
  for (int s = 0; s < g.size(); ++s) {
    if (!m(s) || seen[static_cast<std::size_t>(s)]) continue;
    ++n;
    std::vector<int> stack{s};
    seen[static_cast<std::size_t>(s)] = 1;
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      const int x = i % g.w, y = i / g.w;
      const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
      for (const auto& p : nb) {
        if (p[0] < 0 || p[1] < 0 || p[0] >= g.w || p[1] >= g.h) continue;
        const int j = p[1] * g.w + p[0];
        if (m(j) && !seen[static_cast<std::size_t>(j)]) {
          seen[static_cast<std::size_t>(j)] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  return n;
}

}  // namespace

TEST_CASE("generate") {
  const std::string dir = scratch_dir("cli_generate");
  SUBCASE("defaults are recorded in the manifest") {
    const Run r = spdiff({"generate", "--prompt", kPrompt, "--seed", "3", "--out", dir + "/a"});
    REQUIRE(r.code == 0);
    CHECK(r.out.starts_with("protected: 2 concept(s), 22 backend steps"));
    const json m = read_json(dir + "/a/manifest.json");
    CHECK(m["config"]["steps"] == 20);
    CHECK(m["config"]["ts"] == 2);
    CHECK(m["config"]["s_ca"] == 0.9);
    CHECK(m["config"]["s_sa"] == 0.2);
    CHECK(m["config"]["guidance"] == 7.5);
    CHECK(m["config"]["backend"] == "toy");
    CHECK(m["seeds"] == json::array({3}));
    CHECK(m["hashes"]["image.png"] == "cbed1a4a64e5d2206c10da5352d87eeb05a7587fdd95c692b79d3c660d0ced21");
    CHECK(sha256_file(dir + "/a/image.png") == m["hashes"]["image.png"]);
    CHECK(fs::exists(dir + "/a/sp_mask.txt"));
    CHECK_FALSE(fs::exists(dir + "/a/attention.spda"));
  }
  SUBCASE("--no-protect equals a protected run with a zero mask") {
    REQUIRE(spdiff({"generate", "--prompt", kPrompt, "--seed", "5", "--no-protect", "--out", dir + "/b"}).code == 0);
    const auto& toy = *default_toy_backend();
    PipelineConfig cfg;
    cfg.seed = 5;
    const ParsedPrompt p = tokenize_parsed(toy, parse_freeform(kPrompt));
    const Pass1Result p1 = pass1_record(cfg, p, toy);
    const Pass2Result zero = pass2_protected(cfg, p, toy, SPMask::zeros({8, 8}, p.token_count), p1.records, p1.x_T);
    CHECK(sha256_file(dir + "/b/image.png") == sha256_hex(encode_png(zero.image)));
    CHECK(read_json(dir + "/b/manifest.json")["diagnostics"]["protection_active"] == false);
  }
  SUBCASE("--ts 0 still masks but replaces nothing") {
    REQUIRE(spdiff({"generate", "--prompt", kPrompt, "--ts", "0", "--out", dir + "/c"}).code == 0);
    const json d = read_json(dir + "/c/manifest.json")["diagnostics"];
    CHECK(d["masked_entries"].get<int>() > 0);
    CHECK(d["replaced_self_maps"] == 0);
    CHECK(d["backend_steps"] == 21);
  }
  SUBCASE("flag over config over default") {
    const std::string cfg = dir + "/run.cfg";
    std::ofstream(cfg) << "# thresholds\ns_sa = 0.7\ns-ca = 0.8\n";
    REQUIRE(spdiff({"generate", "--prompt", kPrompt, "--config", cfg, "--s-sa", "0.5", "--out", dir + "/d"}).code == 0);
    const json c = read_json(dir + "/d/manifest.json")["config"];
    CHECK(c["s_sa"] == 0.5);
    CHECK(c["s_ca"] == 0.8);
    CHECK(c["ts"] == 2);
    std::ofstream(cfg) << "s_sa 0.7\n";
    CHECK(spdiff({"generate", "--prompt", kPrompt, "--config", cfg, "--out", dir + "/e"}).code != 0);
  }
  SUBCASE("an unknown backend is a one-line error") {
    const Run r = spdiff({"generate", "--prompt", kPrompt, "--backend", "adapter:nope", "--out", dir + "/f"});
    CHECK(r.code != 0);
    CHECK(r.err.starts_with("spdiff: generate: "));
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  }
}

TEST_CASE("flat config files") {
  const std::string dir = scratch_dir("cli_config");
  std::ofstream(dir + "/ok.cfg") << "# comment\n\nseed = 4   # trailing\nprompt = a red car\n";
  const auto kv = read_flat_config(dir + "/ok.cfg");
  REQUIRE(kv.size() == 2);
  CHECK(kv[0] == std::pair<std::string, std::string>{"seed", "4"});
  CHECK(kv[1].second == "a red car");
  std::ofstream(dir + "/bad.cfg") << "seed\n";
  CHECK_THROWS_AS(read_flat_config(dir + "/bad.cfg"), FormatError);
}

TEST_CASE("inspect") {
  const std::string dir = scratch_dir("cli_inspect");
  REQUIRE(spdiff({"generate", "--prompt", kPrompt, "--seed", "3", "--backend", "adapter:scenario", "--dump-attn",
                  "--out", dir})
              .code == 0);
  const std::string container = dir + "/attention.spda";
  const AttentionDump dump = read_dump(container);
  const auto backend = BackendRegistry::instance().make("adapter:scenario", kPrompt, 3);
  const Scenario& sc = dynamic_cast<const ScenarioBackend&>(*backend).scenario();

  SUBCASE("the leaking concept shows one blob at a high threshold and two at a low one") {
    const Inspection high = inspect(dump, 2, 0.9), low = inspect(dump, 2, 0.5);
    const auto truth = sc.truth_at(high.grid);
    CHECK(components(high.anchors, high.grid) == 1);
    CHECK_FALSE((high.anchors && truth[0]).any());
    CHECK((high.anchors && truth[1]).any());
    CHECK(components(low.anchors, low.grid) == 2);
    CHECK((low.anchors && truth[0]).any());
    CHECK((low.anchors && truth[1]).any());
  }
  SUBCASE("heatmaps carry a legend matching the manifest") {
    const Run r = spdiff({"inspect", container, "--concept", "2", "--threshold", "0.5", "--out", dir + "/k2"});
    REQUIRE(r.code == 0);
    const json m = read_json(dir + "/k2/manifest.json");
    std::map<std::string, std::string> text;
    decode_png(read_file(dir + "/k2/cross_k2.png"), &text);
    CHECK(std::stod(text.at("min")) == doctest::Approx(m["legend"]["cross"]["min"].get<double>()));
    CHECK(std::stod(text.at("max")) == doctest::Approx(m["legend"]["cross"]["max"].get<double>()));
    CHECK(text.at("kind") == "cross");
    const Inspection ins = inspect(dump, 2, 0.5);
    CHECK(m["legend"]["cross"]["min"].get<double>() == doctest::Approx(ins.cross.minCoeff()));
    CHECK(m["legend"]["cross"]["max"].get<double>() == doctest::Approx(ins.cross.maxCoeff()));
    CHECK(m["anchors"] == static_cast<int>(ins.anchors.count()));
    for (const std::string f : {"cross_k2.png", "self_k2_s0.5.png", "points_k2_s0.5.png"})
      CHECK(fs::exists(dir + "/k2/" + f));
  }
  SUBCASE("a container without records is refused") {
    AttentionDump empty;
    write_dump(dir + "/empty.spda", empty);
    CHECK_THROWS_AS(inspect(empty, 1, 0.9), MissingRecord);
    const Run r = spdiff({"inspect", dir + "/empty.spda"});
    CHECK(r.code != 0);
    CHECK(r.err.starts_with("spdiff: inspect: "));
    CHECK_THROWS_AS(inspect(dump, 3, 0.9), MissingRecord);
  }
}

TEST_CASE("heatmaps") {
  SUBCASE("an all-zero map renders uniformly") {
    const Heatmap h = render_heatmap(Vector::Zero(64), {8, 8}, 4);
    const Rgb low = colormap(0);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const auto* p = h.image.at(x, y);
        CHECK((Rgb{p[0], p[1], p[2]} == low));
      }
    CHECK(h.min == 0.0);
    CHECK(h.max == 0.0);
  }
  SUBCASE("cells follow the values") {
    Vector v(4);
    v << 0, 1, 2, 3;
    const Heatmap h = render_heatmap(v, {2, 2}, 3);
    const auto* first = h.image.at(1, 1);
    const auto* last = h.image.at(4, 4);
    CHECK((Rgb{first[0], first[1], first[2]} == colormap(0)));
    CHECK((Rgb{last[0], last[1], last[2]} == colormap(1)));
    CHECK(h.min == 0.0);
    CHECK(h.max == 3.0);
  }
}

TEST_CASE("attention container") {
  Rng rng(61);
  AttentionDump d;
  d.metadata = {{"prompt", kPrompt}};
  AttentionRecord r;
  r.step = 1;
  r.layer = 0;
  r.cross = {random_stochastic(rng, 16, 5), {4, 4}, AttnKind::cross};
  r.self = {random_stochastic(rng, 16, 16), {4, 4}, AttnKind::self};
  d.records = {r};
  d.latent = random_matrix(rng, 16, 4);
  RegionDump rd;
  rd.grid = {4, 4};
  rd.anchors = {random_mask(rng, 16)};
  rd.regions = {random_mask(rng, 16)};
  d.regions = rd;
  Matrix mask = Matrix::Zero(16, 5);
  mask(3, 2) = masked_value<Real>();
  d.sp_mask = MaskDump{{4, 4}, mask};

  const auto bytes = encode_dump(d);
  const AttentionDump back = decode_dump(bytes);
  CHECK(back.metadata == d.metadata);
  REQUIRE(back.records.size() == 1);
  CHECK((back.records[0].cross.values - r.cross.values).cwiseAbs().maxCoeff() < 1e-7);
  CHECK(back.records[0].self.grid == r.self.grid);
  CHECK(back.records[0].step == 1);
  CHECK((back.latent->cast<float>() == d.latent->cast<float>()));
  CHECK((back.regions->regions[0] == rd.regions[0]).all());
  CHECK(is_masked(back.sp_mask->values(3, 2)));
  CHECK(back.sp_mask->values(0, 0) == 0.0);
  CHECK_FALSE(back.x_T.has_value());

  SUBCASE("unknown sections are skipped") {
    auto extended = bytes;
    const std::uint32_t count = extended[8] | extended[9] << 8 | extended[10] << 16 | extended[11] << 24;
    const std::uint32_t bumped = count + 1;
    for (int i = 0; i < 4; ++i) extended[static_cast<std::size_t>(8 + i)] = static_cast<std::uint8_t>(bumped >> (8 * i));
    const std::uint8_t section[] = {99, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0, 'x', 'y', 'z'};
    extended.insert(extended.end(), std::begin(section), std::end(section));
    const AttentionDump skipped = decode_dump(extended);
    CHECK(skipped.records.size() == 1);
  }
  SUBCASE("bad input") {
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_dump(bad), FormatError);
    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2));
    CHECK_THROWS_AS(decode_dump(truncated), FormatError);
    CHECK_THROWS_AS(read_dump("/nonexistent/attention.spda"), FormatError);
  }
}

TEST_CASE("bench") {
  const std::string dir = scratch_dir("cli_bench");
  SUBCASE("the default CC500 run scores 400 items") {
    const Run r = spdiff({"bench", "--dataset", "cc500", "--out", dir + "/full"});
    REQUIRE(r.code == 0);
    std::ifstream in(dir + "/full/items.jsonl");
    int lines = 0;
    for (std::string l; std::getline(in, l);) lines += !l.empty();
    CHECK(lines == 400);
    CHECK(read_json(dir + "/full/manifest.json")["status"] == "complete");
    CHECK(fs::exists(dir + "/full/summary.txt"));

    const Run replay = spdiff({"replay", dir + "/full/manifest.json"});
    CHECK(replay.code == 0);
    CHECK(replay.out.find("MISMATCH") == std::string::npos);
  }
  SUBCASE("an interrupted run leaves a resumable manifest") {
    REQUIRE(spdiff({"bench", "--prompts", "3", "--seeds", "2", "--limit", "2", "--out", dir + "/part"}).code == 0);
    CHECK(read_json(dir + "/part/manifest.json")["status"] == "partial");
    REQUIRE(spdiff({"bench", "--prompts", "3", "--seeds", "2", "--out", dir + "/part"}).code == 0);
    const json m = read_json(dir + "/part/manifest.json");
    CHECK(m["status"] == "complete");
    CHECK(m["completed"] == 6);
    CHECK(spdiff({"bench", "--prompts", "3", "--seeds", "2", "--s-sa", "0.4", "--out", dir + "/part"}).code != 0);
  }
  SUBCASE("a sweep stays within its time budget") {
    const auto t0 = std::chrono::steady_clock::now();
    REQUIRE(spdiff({"bench", "--sweep", "--prompts", "10", "--seeds", "1", "--out", dir + "/sweep"}).code == 0);
    CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(60));
    std::ifstream in(dir + "/sweep/sweep_cc500.csv");
    int lines = 0;
    for (std::string l; std::getline(in, l);) ++lines;
    CHECK(lines == 19);
  }
}

TEST_CASE("replay") {
  const std::string dir = scratch_dir("cli_replay");
  REQUIRE(spdiff({"generate", "--prompt", kPrompt, "--seed", "2", "--dump-attn", "--backend", "adapter:scenario",
                  "--out", dir + "/g"})
              .code == 0);
  const Run g = spdiff({"replay", dir + "/g/manifest.json"});
  CHECK(g.code == 0);
  CHECK(g.out.find("match") != std::string::npos);
  CHECK(g.out.find("MISMATCH") == std::string::npos);
  CHECK(fs::exists(dir + "/g/replay/image.png"));
  CHECK(spdiff({"replay", dir + "/g/manifest.json"}).code == 0);
  CHECK(fs::exists(dir + "/g/replay-2/image.png"));

  REQUIRE(spdiff({"inspect", dir + "/g/attention.spda", "--out", dir + "/i"}).code == 0);
  const Run i = spdiff({"replay", dir + "/i/manifest.json"});
  CHECK(i.code == 0);
  CHECK(i.out.find("MISMATCH") == std::string::npos);

  json m = read_json(dir + "/g/manifest.json");
  m["hashes"]["image.png"] = std::string(64, '0');
  std::ofstream(dir + "/g/tampered.json") << m.dump();
  const Run bad = spdiff({"replay", dir + "/g/tampered.json", "--out", dir + "/t"});
  CHECK(bad.code != 0);
  CHECK(bad.out.find("MISMATCH") != std::string::npos);
}
