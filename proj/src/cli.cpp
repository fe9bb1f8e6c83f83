#include "spd/cli.hpp"

#include "spd/bench_harness.hpp"
#include "spd/viz.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace spd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string num(Real v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

// Applies config entries to options the command line left unset.
void apply_config(CLI::App& cmd, const std::string& path) {
  if (path.empty()) return;
  for (auto& [key, value] : read_flat_config(path)) {
    if (key == "config") throw ConfigError(path + ": a config file cannot name another config file");
    CLI::Option* opt = cmd.get_option_no_throw("--" + key);
    if (!opt) throw ConfigError(path + ": unknown key '" + key + "' for " + cmd.get_name());
    if (opt->count() > 0) continue;
    opt->add_result(value);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError(path + ": bad value for '" + key + "': " + e.what());
    }
  }
}

std::vector<std::string> stored_argv(const std::vector<std::string>& args, const std::vector<std::string>& path_values) {
  std::vector<std::string> out = args;
  for (auto& a : out) {
    for (const auto& p : path_values) {
      if (p.empty()) continue;
      if (a == p) {
        a = fs::absolute(p).lexically_normal().string();
      } else if (a.ends_with("=" + p) && a.starts_with("--")) {
        a = a.substr(0, a.size() - p.size()) + fs::absolute(p).lexically_normal().string();
      }
    }
  }
  return out;
}

json hash_files(const fs::path& dir, const std::vector<std::string>& names) {
  json h = json::object();
  for (const auto& n : names) h[n] = sha256_file((dir / n).string());
  return h;
}

void write_json(const fs::path& path, const json& j) { write_file(path.string(), j.dump(2) + "\n"); }

AnchorNorm parse_norm(const std::string& s) {
  if (s == "per_column") return AnchorNorm::per_column;
  if (s == "global") return AnchorNorm::global;
  throw ConfigError("unknown anchor norm '" + s + "' (expected per_column or global)");
}

struct GenerateArgs {
  std::string prompt;
  std::uint64_t seed = 0;
  int steps = 20;
  int ts = 2;
  Real s_ca = 0.9;
  Real s_sa = 0.2;
  Real guidance = 7.5;
  std::string backend = "toy";
  std::string out;
  bool dump_attn = false;
  bool no_protect = false;
  std::string anchor_norm = "per_column";
  std::string config;
};

struct InspectArgs {
  std::string container;
  int concept_index = 1;
  Real threshold = 0.9;
  std::string out;
  int cell_px = 16;
  std::string anchor_norm = "per_column";
  std::string config;
};

struct BenchArgs {
  std::string dataset = "cc500";
  std::uint64_t dataset_seed = 0;
  int prompts = 100;
  int seeds = 4;
  bool sweep = false;
  std::vector<Real> sweep_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::string ablation;
  std::string scorer = "stub";
  std::string backend = "adapter:scenario";
  int workers = 1;
  int limit = -1;
  bool baseline = false;
  std::uint64_t seed = 0;
  int steps = 20;
  int ts = 2;
  Real s_ca = 0.9;
  Real s_sa = 0.2;
  Real guidance = 7.5;
  std::string out;
  std::string config;
};

struct ReplayArgs {
  std::string manifest;
  std::string out;
};

void add_pipeline_flags(CLI::App* cmd, int& steps, int& ts, Real& s_ca, Real& s_sa, Real& guidance) {
  cmd->add_option("--steps", steps, "denoising steps T")->capture_default_str();
  cmd->add_option("--ts", ts, "recorded / self-attention replacement steps T_s")->capture_default_str();
  cmd->add_option("--s-ca", s_ca, "cross-attention anchor threshold")->capture_default_str();
  cmd->add_option("--s-sa", s_sa, "self-attention region threshold")->capture_default_str();
  cmd->add_option("--guidance", guidance, "classifier-free guidance scale")->capture_default_str();
}

PipelineConfig pipeline_config(int steps, int ts, Real s_ca, Real s_sa, Real guidance, std::uint64_t seed) {
  PipelineConfig cfg;
  cfg.total_steps = steps;
  cfg.protection_steps = ts;
  cfg.extraction.s_ca = s_ca;
  cfg.extraction.s_sa = s_sa;
  cfg.guidance_scale = guidance;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

int cmd_generate(const GenerateArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  if (a.prompt.empty()) throw ConfigError("--prompt is required");
  if (a.out.empty()) throw ConfigError("--out is required");
  PipelineConfig cfg = pipeline_config(a.steps, a.ts, a.s_ca, a.s_sa, a.guidance, a.seed);
  cfg.extraction.anchor_norm = parse_norm(a.anchor_norm);
  cfg.protect = !a.no_protect;
  cfg.record_pass2 = a.dump_attn;

  const auto backend = BackendRegistry::instance().make(a.backend, a.prompt, a.seed);
  const GenerationResult g = generate(a.prompt, cfg, *backend);
  const Diagnostics& d = g.diagnostics;

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::vector<std::string> files{"image.png", "sp_mask.txt"};
  write_file((dir / "image.png").string(), encode_png(g.image));

  std::ostringstream table;
  table << "prompt: " << a.prompt << "\n"
        << "status: " << d.reason << "\n"
        << "concepts: " << d.concepts << "\n"
        << "backend steps: " << d.backend_steps << " (pass 1: " << d.pass1_steps << ", pass 2: " << d.pass2_steps
        << ")\n"
        << "replaced self-attention maps: " << d.replaced_self_maps << "\n"
        << "masked entries: " << d.masked_entries << "\n";
  if (d.protection_active) table << g.sp_mask.debug_table(token_surfaces(g.parsed, g.tokens));
  write_file((dir / "sp_mask.txt").string(), table.str());

  json config{{"prompt", a.prompt},     {"seed", a.seed},         {"steps", a.steps},
              {"ts", a.ts},             {"s_ca", a.s_ca},         {"s_sa", a.s_sa},
              {"guidance", a.guidance}, {"backend", a.backend},   {"protect", !a.no_protect},
              {"dump_attn", a.dump_attn}, {"anchor_norm", a.anchor_norm}};
  if (a.dump_attn) {
    write_dump((dir / "attention.spda").string(), make_dump(g, {{"config", config}}));
    files.push_back("attention.spda");
  }

  json outputs = json::object();
  for (const auto& f : files) outputs[fs::path(f).stem().string()] = f;
  json manifest{{"command", "generate"},
                {"argv", argv},
                {"config", config},
                {"prompts", {a.prompt}},
                {"seeds", {a.seed}},
                {"outputs", outputs},
                {"diagnostics",
                 {{"protection_active", d.protection_active},
                  {"reason", d.reason},
                  {"concepts", d.concepts},
                  {"backend_steps", d.backend_steps},
                  {"replaced_self_maps", d.replaced_self_maps},
                  {"masked_entries", d.masked_entries}}},
                {"hashes", hash_files(dir, files)}};
  write_json(dir / "manifest.json", manifest);

  out << d.reason << ": " << d.concepts << " concept(s), " << d.backend_steps << " backend steps, "
      << d.masked_entries << " masked entries\n";
  out << "image: " << (dir / "image.png").string() << "\n";
  return 0;
}

int cmd_inspect(const InspectArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  if (a.container.empty()) throw ConfigError("a container path is required");
  if (!fs::exists(a.container)) throw MissingRecord("no container at " + a.container);
  const AttentionDump dump = read_dump(a.container);
  const Inspection ins = inspect(dump, a.concept_index, a.threshold, parse_norm(a.anchor_norm));

  const std::string k = std::to_string(a.concept_index);
  const std::string s = num(a.threshold);
  const fs::path dir = a.out.empty() ? fs::path(a.container).parent_path() / ("inspect_k" + k + "_s" + s) : fs::path(a.out);
  fs::create_directories(dir);

  const std::map<std::string, std::string> tags{{"concept", ins.surface}, {"k", k}, {"threshold", s}};
  auto with = [&](std::string kind) {
    auto t = tags;
    t["kind"] = std::move(kind);
    return t;
  };
  const std::string cross_name = "cross_k" + k + ".png";
  const std::string self_name = "self_k" + k + "_s" + s + ".png";
  const std::string points_name = "points_k" + k + "_s" + s + ".png";

  const Heatmap cross = render_heatmap(ins.cross, ins.grid, a.cell_px);
  write_file((dir / cross_name).string(), heatmap_png(cross, with("cross")));
  const Heatmap self = render_heatmap(ins.self, ins.grid, a.cell_px);
  write_file((dir / self_name).string(), heatmap_png(self, with("self")));
  Heatmap points = cross;
  overlay_mask(points, ins.anchors, ins.grid, Rgb{80, 200, 255});
  write_file((dir / points_name).string(), heatmap_png(points, with("points")));

  const std::vector<std::string> files{cross_name, self_name, points_name};
  json manifest{{"command", "inspect"},
                {"argv", argv},
                {"config",
                 {{"container", fs::absolute(a.container).lexically_normal().string()},
                  {"concept", a.concept_index},
                  {"threshold", a.threshold},
                  {"cell_px", a.cell_px},
                  {"anchor_norm", a.anchor_norm}}},
                {"legend",
                 {{"cross", {{"min", cross.min}, {"max", cross.max}}},
                  {"self", {{"min", self.min}, {"max", self.max}}}}},
                {"anchors", static_cast<int>(ins.anchors.count())},
                {"outputs", files},
                {"hashes", hash_files(dir, files)}};
  write_json(dir / "manifest.json", manifest);

  out << "concept " << k << " '" << ins.surface << "' at s=" << s << ": " << ins.anchors.count() << " of "
      << ins.grid.size() << " anchor positions\n";
  out << "cross min=" << num(cross.min) << " max=" << num(cross.max) << " -> " << (dir / cross_name).string()
      << "\n";
  out << "self min=" << num(self.min) << " max=" << num(self.max) << " -> " << (dir / self_name).string() << "\n";
  out << "points -> " << (dir / points_name).string() << "\n";
  return 0;
}

std::vector<Template> parse_datasets(const std::string& name) {
  if (name == "all") return {Template::CC500, Template::Wearing100, Template::Animals100};
  const auto t = template_from_name(name);
  if (!t) throw ConfigError("unknown dataset '" + name + "' (expected cc500, wearing100, animals100 or all)");
  return {*t};
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// A replayed run should produce the full item set.
std::vector<std::string> without_limit(const std::vector<std::string>& argv) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < argv.size(); ++i) {
    if (argv[i] == "--limit") {
      ++i;
      continue;
    }
    if (argv[i].starts_with("--limit=")) continue;
    out.push_back(argv[i]);
  }
  return out;
}

int cmd_bench(const BenchArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  if (a.out.empty()) throw ConfigError("--out is required");
  const fs::path dir(a.out);
  fs::create_directories(dir);

  BenchConfig cfg;
  cfg.datasets = parse_datasets(a.dataset);
  cfg.dataset_seed = a.dataset_seed;
  cfg.prompts = a.prompts;
  cfg.seeds = a.seeds;
  if (a.baseline) cfg.methods.push_back(BenchMethod::baseline);
  cfg.pipeline = pipeline_config(a.steps, a.ts, a.s_ca, a.s_sa, a.guidance, a.seed);
  cfg.backend = a.backend;
  cfg.scorer = a.scorer;
  cfg.workers = a.workers;
  if (a.limit >= 0) cfg.limit = a.limit;

  json manifest{{"command", "bench"}, {"argv", without_limit(argv)}};
  std::vector<std::string> files;

  if (!a.ablation.empty()) {
    const AblationSpec spec = read_ablation(a.ablation);
    const auto backend = BackendRegistry::instance().make(a.backend, spec.prompt, a.seed);
    const AblationResult orig = token_mask_ablation(spec, cfg.pipeline, *backend);
    write_file((dir / "ablation_original.png").string(), encode_png(orig.generation.image));
    files.push_back("ablation_original.png");
    std::ostringstream report;
    report << "prompt: " << spec.prompt << "\n[original]\n"
           << (orig.protection_active ? orig.debug_table : std::string("no regions: plain generation\n"));
    if (spec.regions.size() >= 2) {
      const AblationResult swapped = token_mask_ablation(swap_groups(spec), cfg.pipeline, *backend);
      write_file((dir / "ablation_swapped.png").string(), encode_png(swapped.generation.image));
      files.push_back("ablation_swapped.png");
      report << "[swapped]\n" << swapped.debug_table;
    }
    write_file((dir / "ablation.txt").string(), report.str());
    files.push_back("ablation.txt");
    manifest["config"] = {{"ablation", fs::absolute(a.ablation).lexically_normal().string()},
                          {"prompt", spec.prompt},
                          {"backend", a.backend},
                          {"seed", a.seed},
                          {"steps", a.steps},
                          {"guidance", a.guidance}};
    manifest["prompts"] = {spec.prompt};
    manifest["seeds"] = {a.seed};
    out << report.str();
  } else if (a.sweep) {
    for (Template t : cfg.datasets) {
      const auto points = comparison_sweep(cfg, t, a.sweep_grid);
      const std::string name = "sweep_" + lower(template_name(t)) + ".csv";
      write_file((dir / name).string(), sweep_csv(points));
      files.push_back(name);
      out << template_name(t) << "\n";
      for (const auto& p : points) {
        out << "  " << (p.mode == RegionMethod::sp_extraction ? "sp_extraction  " : "cross_attn_only")
            << " s_ca=" << num(p.s_ca) << " s_sa=" << num(p.s_sa) << " score=" << num(p.score)
            << " (failed " << p.failed << ")\n";
      }
    }
    json cj = cfg.to_json();
    cj["sweep_grid"] = a.sweep_grid;
    manifest["config"] = cj;
    manifest["status"] = "complete";
  } else {
    cfg.out_dir = dir.string();
    json seeded = manifest;
    if (fs::exists(dir / "manifest.json")) {
      try {
        seeded = json::parse(std::ifstream(dir / "manifest.json"));
        seeded["argv"] = manifest["argv"];
      } catch (const json::exception&) {
        throw FormatError("unreadable manifest in " + dir.string());
      }
    }
    write_json(dir / "manifest.json", seeded);
    const ScoreReport report = run_benchmark(cfg);
    files = {"items.jsonl", "summary.txt", "summary.csv"};
    manifest = json::parse(std::ifstream(dir / "manifest.json"));
    int failed = 0;
    for (const auto& r : report.items) failed += r.ok ? 0 : 1;
    out << summary_table(report.summary);
    out << report.items.size() << " item(s), " << failed << " failed, "
        << (report.complete ? "complete" : "partial (re-run the same command to resume)") << "\n";
  }

  manifest["outputs"] = files;
  manifest["hashes"] = hash_files(dir, files);
  write_json(dir / "manifest.json", manifest);
  return 0;
}

fs::path fresh_dir(const fs::path& base) {
  if (!fs::exists(base)) return base;
  for (int i = 2;; ++i) {
    fs::path p = base.string() + "-" + std::to_string(i);
    if (!fs::exists(p)) return p;
  }
}

int cmd_replay(const ReplayArgs& a, std::ostream& out, std::ostream& err) {
  json m;
  try {
    m = json::parse(std::ifstream(a.manifest));
  } catch (const json::exception& e) {
    throw FormatError("unreadable manifest " + a.manifest + ": " + e.what());
  }
  if (!m.contains("argv") || !m["argv"].is_array() || m["argv"].empty())
    throw FormatError("manifest " + a.manifest + " has no argv");
  if (!m.contains("hashes")) throw FormatError("manifest " + a.manifest + " has no hashes");
  std::vector<std::string> argv = m["argv"].get<std::vector<std::string>>();
  if (argv.front() == "replay") throw ConfigError("cannot replay a replay");

  const fs::path dir = a.out.empty() ? fresh_dir(fs::path(a.manifest).parent_path() / "replay") : fs::path(a.out);
  if (fs::exists(dir) && !fs::is_empty(dir)) throw ConfigError("replay directory " + dir.string() + " is not empty");
  bool replaced = false;
  for (std::size_t i = 0; i < argv.size(); ++i) {
    if (argv[i] == "--out" && i + 1 < argv.size()) {
      argv[i + 1] = dir.string();
      replaced = true;
    } else if (argv[i].starts_with("--out=")) {
      argv[i] = "--out=" + dir.string();
      replaced = true;
    }
  }
  if (!replaced) {
    argv.push_back("--out");
    argv.push_back(dir.string());
  }

  std::ostringstream sink;
  if (const int rc = run_cli(argv, sink, err); rc != 0) return rc;

  int differ = 0;
  for (const auto& [name, expected] : m["hashes"].items()) {
    const fs::path p = dir / name;
    const std::string got = fs::exists(p) ? sha256_file(p.string()) : std::string("missing");
    if (got == expected.get<std::string>()) {
      out << "match    " << name << "\n";
    } else {
      out << "MISMATCH " << name << " (expected " << expected.get<std::string>() << ", got " << got << ")\n";
      ++differ;
    }
  }
  out << "replayed into " << dir.string() << "\n";
  if (differ) {
    err << "spdiff: replay: " << differ << " of " << m["hashes"].size() << " artifact(s) differ\n";
    return 1;
  }
  return 0;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> read_flat_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path + ":" + std::to_string(n) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.starts_with("--")) key.erase(0, 2);
    for (auto& c : key) c = c == '_' ? '-' : c;
    if (key.empty()) throw FormatError(path + ":" + std::to_string(n) + ": empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Region-protected text-to-image generation, attention inspection and benchmarks", "spdiff"};
  app.require_subcommand(1);

  GenerateArgs g;
  auto* gen = app.add_subcommand("generate", "Generate one image");
  gen->add_option("--prompt", g.prompt, "text prompt");
  gen->add_option("--seed", g.seed, "noise seed")->capture_default_str();
  add_pipeline_flags(gen, g.steps, g.ts, g.s_ca, g.s_sa, g.guidance);
  gen->add_option("--backend", g.backend, "toy or adapter:<name>")->capture_default_str();
  gen->add_option("--out", g.out, "output directory");
  gen->add_flag("--dump-attn", g.dump_attn, "write attention.spda");
  gen->add_flag("--no-protect", g.no_protect, "plain generation");
  gen->add_option("--anchor-norm", g.anchor_norm, "per_column or global")->capture_default_str();
  gen->add_option("--config", g.config, "flat key = value config file");

  InspectArgs in;
  auto* insp = app.add_subcommand("inspect", "Render attention heatmaps from a container");
  insp->add_option("container", in.container, "attention.spda path");
  insp->add_option("--concept", in.concept_index, "concept index k (1-based)")->capture_default_str();
  insp->add_option("--threshold", in.threshold, "anchor threshold s")->capture_default_str();
  insp->add_option("--out", in.out, "output directory (default next to the container)");
  insp->add_option("--cell-px", in.cell_px, "pixels per grid cell")->capture_default_str();
  insp->add_option("--anchor-norm", in.anchor_norm, "per_column or global")->capture_default_str();
  insp->add_option("--config", in.config, "flat key = value config file");

  BenchArgs b;
  auto* bench = app.add_subcommand("bench", "Score prompt sets, sweep thresholds or run a token-mask ablation");
  bench->add_option("--dataset", b.dataset, "cc500, wearing100, animals100 or all")->capture_default_str();
  bench->add_option("--dataset-seed", b.dataset_seed, "prompt-set seed")->capture_default_str();
  bench->add_option("--prompts", b.prompts, "prompts per set")->capture_default_str();
  bench->add_option("--seeds", b.seeds, "images per prompt")->capture_default_str();
  bench->add_flag("--sweep", b.sweep, "threshold sweep instead of scoring");
  bench->add_option("--sweep-grid", b.sweep_grid, "sweep thresholds")->delimiter(',');
  bench->add_option("--ablation-tokens", b.ablation, "region/token assignment JSON");
  bench->add_option("--scorer", b.scorer, "stub or service:<url>")->capture_default_str();
  bench->add_option("--backend", b.backend, "toy or adapter:<name>")->capture_default_str();
  bench->add_option("--workers", b.workers, "worker threads")->capture_default_str();
  bench->add_option("--limit", b.limit, "stop after this many new items");
  bench->add_flag("--baseline", b.baseline, "also score unprotected generation");
  bench->add_option("--seed", b.seed, "noise seed for the ablation")->capture_default_str();
  add_pipeline_flags(bench, b.steps, b.ts, b.s_ca, b.s_sa, b.guidance);
  bench->add_option("--out", b.out, "output directory");
  bench->add_option("--config", b.config, "flat key = value config file");

  ReplayArgs r;
  auto* replay = app.add_subcommand("replay", "Re-run a manifest and compare artifact hashes");
  replay->add_option("manifest", r.manifest, "manifest.json path")->required();
  replay->add_option("--out", r.out, "replay directory (default <manifest dir>/replay)");

  try {
    app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "spdiff: " << e.what() << "\n";
    return e.get_exit_code();
  }

  std::string command = "spdiff";
  try {
    if (gen->parsed()) {
      command = "generate";
      apply_config(*gen, g.config);
      return cmd_generate(g, stored_argv(args, {g.config}), out);
    }
    if (insp->parsed()) {
      command = "inspect";
      apply_config(*insp, in.config);
      return cmd_inspect(in, stored_argv(args, {in.config, in.container}), out);
    }
    if (bench->parsed()) {
      command = "bench";
      apply_config(*bench, b.config);
      return cmd_bench(b, stored_argv(args, {b.config, b.ablation}), out);
    }
    command = "replay";
    return cmd_replay(r, out, err);
  } catch (const std::exception& e) {
    std::string what = e.what();
    for (auto& c : what) c = c == '\n' ? ' ' : c;
    err << "spdiff: " << command << ": " << what << "\n";
    return 1;
  }
}

}  // namespace spd
