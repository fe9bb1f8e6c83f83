#include "spd/bench_harness.hpp"

#include "spd/rng.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace spd {

namespace fs = std::filesystem;
using nlohmann::json;

std::string data_dir() {
  if (const char* env = std::getenv("SPD_DATA_DIR"); env && *env) return env;
  return SPD_DATA_DIR;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> read_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open vocabulary file " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (!line.empty() && line[0] != '#') out.push_back(line);
  }
  if (out.empty()) throw FormatError("vocabulary file " + path + " is empty");
  return out;
}

// k distinct entries in random order.
std::vector<std::string> pick(const std::vector<std::string>& from, std::size_t k, Rng& rng) {
  if (k > from.size()) throw ConfigError("vocabulary too small for the template");
  std::vector<std::size_t> idx(from.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(from[idx[i]]);
  return out;
}

}  // namespace

Vocabulary Vocabulary::load(const std::string& dir) {
  const std::string base = dir + "/vocab/";
  return {read_list(base + "colors.txt"), read_list(base + "objects.txt"), read_list(base + "clothing.txt"),
          read_list(base + "animals.txt")};
}

PromptDataset generate_dataset(Template name, std::uint64_t seed, int count) {
  return generate_dataset(name, seed, Vocabulary::load(), count);
}

PromptDataset generate_dataset(Template name, std::uint64_t seed, const Vocabulary& vocab, int count) {
  PromptDataset ds;
  ds.name = name;
  Rng rng(mix_seed(seed, 0xda7a0000ULL + static_cast<std::uint64_t>(name)));
  for (int i = 0; i < count; ++i) {
    DatasetItem item;
    switch (name) {
      case Template::CC500: {
        const auto colors = pick(vocab.colors, 2, rng);
        const auto objects = pick(vocab.objects, 2, rng);
        item.text = "a " + colors[0] + " " + objects[0] + " and a " + colors[1] + " " + objects[1];
        item.gold = {{objects[0], {colors[0]}}, {objects[1], {colors[1]}}};
        break;
      }
      case Template::Wearing100: {
        const std::string person = rng.below(2) == 0 ? "man" : "woman";
        const auto colors = pick(vocab.colors, 4, rng);
        const auto clothes = pick(vocab.clothing, 4, rng);
        item.text = "a " + person;
        for (int k = 0; k < 4; ++k) {
          item.text += ", " + colors[k] + " " + clothes[k];
          item.gold.push_back({clothes[k], {colors[k]}});
        }
        break;
      }
      case Template::Animals100: {
        const auto colors = pick(vocab.colors, 2, rng);
        const auto clothes = pick(vocab.clothing, 2, rng);
        const auto animals = pick(vocab.animals, 2, rng);
        item.text = "a " + colors[0] + " " + clothes[0] + " " + animals[0] + " and " + colors[1] + " " +
                    clothes[1] + " " + animals[1];
        item.gold = {{animals[0], {colors[0], clothes[0]}}, {animals[1], {colors[1], clothes[1]}}};
        break;
      }
    }
    ds.prompts.push_back(std::move(item));
  }
  return ds;
}

std::vector<std::string> blip_vqa_questions(const ParsedPrompt& parsed) {
  std::vector<std::string> out;
  for (const auto& c : parsed.concepts) {
    std::vector<TokenSpan> attrs = c.attributes;
    std::sort(attrs.begin(), attrs.end(), [](const auto& a, const auto& b) { return a.chars.begin < b.chars.begin; });
    std::string q;
    for (const auto& a : attrs) q += a.surface + " ";
    out.push_back(q + c.noun.surface + "?");
  }
  return out;
}

InternVLScript internvl_protocol(std::string_view prompt) {
  InternVLScript s;
  s.round1 =
      "You are my assistant to identify the animals or objects in the image and their attributes. "
      "Briefly describe the image within 50 words.";
  s.round2 = "According to the image and your previous answer, evaluate how well the image aligns with the text prompt: ";
  s.round2 += prompt;
  s.round2 +=
      ".\n"
      "100: the image perfectly matches the content of the text prompt, with no discrepancies.\n"
      "80: the image portrayed most of the actions, events and relationships but with minor discrepancies.\n"
      "60: the image depicted some elements in the text prompt, but ignored some key parts or details.\n"
      "40: the image did not depict any actions or events that match the text.\n"
      "20: the image failed to convey the full scope in the text prompt.\n"
      "Provide your analysis and explanation in JSON format with the following keys: "
      "explanation (within 20 words),score (e.g., 85).";
  return s;
}

InternVLAnswer parse_internvl_response(std::string_view reply) {
  const auto open = reply.find('{');
  if (open == std::string_view::npos) throw MalformedResponse("no JSON object in reply");
  // matching close brace, skipping string contents
  int depth = 0;
  bool in_string = false;
  std::size_t close = std::string_view::npos;
  for (std::size_t i = open; i < reply.size() && close == std::string_view::npos; ++i) {
    const char c = reply[i];
    if (in_string) {
      if (c == '\\') ++i;
      else if (c == '"') in_string = false;
    } else if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}' && --depth == 0) {
      close = i;
    }
  }
  if (close == std::string_view::npos) throw MalformedResponse("unterminated JSON object in reply");
  json j;
  try {
    j = json::parse(reply.substr(open, close - open + 1));
  } catch (const json::exception& e) {
    throw MalformedResponse(std::string("reply is not valid JSON: ") + e.what());
  }
  if (!j.contains("score")) throw MalformedResponse("reply has no 'score' key");
  InternVLAnswer a;
  const auto& s = j["score"];
  if (s.is_number()) {
    a.score = s.get<Real>();
  } else if (s.is_string()) {
    try {
      a.score = std::stod(s.get<std::string>());
    } catch (const std::exception&) {
      throw MalformedResponse("score is not numeric");
    }
  } else {
    throw MalformedResponse("score is not numeric");
  }
  if (!std::isfinite(a.score)) throw MalformedResponse("score is not finite");
  a.score = std::clamp(a.score, 0.0, 100.0);
  if (j.contains("explanation") && j["explanation"].is_string()) a.explanation = j["explanation"];
  return a;
}

Real parse_probability(std::string_view reply) {
  const std::string t = trim(reply);
  char* end = nullptr;
  const Real p = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || !std::isfinite(p)) {
    throw MalformedResponse("expected a probability, got '" + t + "'");
  }
  return std::clamp(p, 0.0, 1.0);
}

json ScoreRequest::to_json() const {
  json j{{"image", image_base64}, {"text", text}, {"round", round}};
  if (!history.empty()) j["history"] = history;
  return j;
}

std::string StubScorer::ask(const ScoreRequest& request) const {
  std::ostringstream os;
  os.precision(6);
  switch (request.round) {
    case 0:
      os << std::fixed << iou_;
      break;
    case 1:
      os << "Synthetic scene; concept regions overlap the prompt layout at " << std::fixed << iou_ << ".";
      break;
    default:
      os << json{{"explanation", "region overlap stand-in"}, {"score", std::round(10000.0 * iou_) / 100.0}}.dump();
  }
  return os.str();
}

HttpScorer::HttpScorer(std::string url) : HttpScorer(std::move(url), Options{}) {}

HttpScorer::HttpScorer(std::string url, Options options) : url_(std::move(url)), opts_(options) {
  if (!url_.starts_with("http://")) throw ConfigError("scorer URL must start with http:// (got '" + url_ + "')");
  const auto slash = url_.find('/', 7);
  host_ = url_.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : url_.substr(slash);
}

std::string HttpScorer::ask(const ScoreRequest& request) const {
  httplib::Client client(host_);
  const auto secs = std::chrono::duration_cast<std::chrono::microseconds>(opts_.timeout);
  client.set_connection_timeout(secs);
  client.set_read_timeout(secs);
  client.set_write_timeout(secs);
  const std::string body = request.to_json().dump();
  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt <= opts_.retries; ++attempt) {
    auto res = client.Post(path_, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw BackendFailure("scorer returned HTTP " + std::to_string(res->status));
    json j;
    try {
      j = json::parse(res->body);
    } catch (const json::exception&) {
      throw MalformedResponse("scorer response is not JSON");
    }
    if (!j.contains("text") || !j["text"].is_string()) throw MalformedResponse("scorer response lacks 'text'");
    return j["text"];
  }
  throw BackendFailure("scorer " + url_ + " unavailable after " + std::to_string(opts_.retries + 1) +
                       " attempts: " + last_error);
}

ScorerFactory make_scorer_factory(const std::string& spec) {
  if (spec == "stub") {
    return [](const ItemContext& ctx) -> std::unique_ptr<ScorerClient> {
      return std::make_unique<StubScorer>(ctx.region_iou);
    };
  }
  if (spec.starts_with("service:")) {
    const std::string url = spec.substr(8);
    HttpScorer probe(url);  // validates the URL up front
    return [url](const ItemContext&) -> std::unique_ptr<ScorerClient> { return std::make_unique<HttpScorer>(url); };
  }
  throw ConfigError("unknown scorer '" + spec + "' (expected stub or service:<url>)");
}

Real blip_vqa_score(const ScorerClient& scorer, const std::string& image_base64, const ParsedPrompt& parsed) {
  const auto questions = blip_vqa_questions(parsed);
  if (questions.empty()) throw EmptySelection("no concept to ask about");
  Real sum = 0;
  for (const auto& q : questions) sum += parse_probability(scorer.ask({image_base64, q, 0, {}}));
  return sum / static_cast<Real>(questions.size());
}

Real internvl_vqa_score(const ScorerClient& scorer, const std::string& image_base64, std::string_view prompt) {
  const auto script = internvl_protocol(prompt);
  const std::string description = scorer.ask({image_base64, script.round1, 1, {}});
  return parse_internvl_response(scorer.ask({image_base64, script.round2, 2, {script.round1, description}})).score;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(workers, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr first;
  std::mutex mu;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        while (!stop) {
          const std::size_t i = next++;
          if (i >= n) break;
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!first) first = std::current_exception();
            stop = true;
          }
        }
      });
    }
  }
  if (first) std::rethrow_exception(first);
}

std::string_view method_name(BenchMethod m) { return m == BenchMethod::spdiffusion ? "SPDiffusion" : "baseline"; }

std::string ItemRecord::key() const {
  return dataset + "/" + std::to_string(prompt_index) + "/" + std::to_string(seed) + "/" + method;
}

json ItemRecord::to_json() const {
  return {{"dataset", dataset},     {"prompt_index", prompt_index}, {"seed", seed},
          {"method", method},       {"prompt", prompt},             {"ok", ok},
          {"error", error},         {"questions", questions},       {"probabilities", probabilities},
          {"blip", blip},           {"internvl", internvl},         {"region_iou", region_iou},
          {"image_sha256", image_sha256}};
}

ItemRecord ItemRecord::from_json(const json& j) {
  ItemRecord r;
  try {
    r.dataset = j.at("dataset");
    r.prompt_index = j.at("prompt_index");
    r.seed = j.at("seed");
    r.method = j.at("method");
    r.prompt = j.at("prompt");
    r.ok = j.at("ok");
    r.error = j.value("error", "");
    r.questions = j.value("questions", std::vector<std::string>{});
    r.probabilities = j.value("probabilities", std::vector<Real>{});
    r.blip = j.value("blip", 0.0);
    r.internvl = j.value("internvl", 0.0);
    r.region_iou = j.value("region_iou", 0.0);
    r.image_sha256 = j.value("image_sha256", "");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed item record: ") + e.what());
  }
  return r;
}

std::vector<MethodSummary> summarize(std::span<const ItemRecord> items) {
  std::vector<MethodSummary> out;
  for (const auto& it : items) {
    auto s = std::find_if(out.begin(), out.end(),
                          [&](const MethodSummary& m) { return m.dataset == it.dataset && m.method == it.method; });
    if (s == out.end()) {
      out.push_back({it.dataset, it.method});
      s = out.end() - 1;
    }
    if (!it.ok) {
      ++s->failed;
      continue;
    }
    ++s->items;
    s->blip += it.blip;
    s->internvl += it.internvl;
  }
  for (auto& s : out) {
    if (s.items > 0) {
      s.blip /= s.items;
      s.internvl /= s.items;
    }
  }
  return out;
}

namespace {

const std::vector<std::string>& table_datasets() {
  static const std::vector<std::string> names{"CC500", "Wearing100", "Animals100"};
  return names;
}

std::vector<std::string> table_methods(std::span<const MethodSummary> summary) {
  std::vector<std::string> methods;
  for (const auto& s : summary)
    if (std::find(methods.begin(), methods.end(), s.method) == methods.end()) methods.push_back(s.method);
  return methods;
}

const MethodSummary* find_summary(std::span<const MethodSummary> summary, const std::string& ds,
                                  const std::string& method) {
  for (const auto& s : summary)
    if (s.dataset == ds && s.method == method) return &s;
  return nullptr;
}

std::string fmt(Real v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace

std::string summary_table(std::span<const MethodSummary> summary) {
  std::ostringstream os;
  os << std::left;
  os.width(14);
  os << "Method";
  for (const auto& ds : table_datasets()) {
    os << " | ";
    os.width(25);
    os << ds;
  }
  os << "\n";
  os.width(14);
  os << "";
  for (std::size_t i = 0; i < table_datasets().size(); ++i) os << " | BLIP-VQA    InternVL-VQA ";
  os << "\n";
  for (const auto& m : table_methods(summary)) {
    os.width(14);
    os << m;
    for (const auto& ds : table_datasets()) {
      const auto* s = find_summary(summary, ds, m);
      os << " | ";
      os.width(12);
      os << (s && s->items ? fmt(s->blip, 4) : "-");
      os.width(13);
      os << (s && s->items ? fmt(s->internvl, 2) : "-");
    }
    os << "\n";
  }
  for (const auto& s : summary) {
    if (s.failed) os << s.dataset << "/" << s.method << ": " << s.failed << " failed item(s) excluded\n";
  }
  return os.str();
}

std::string summary_csv(std::span<const MethodSummary> summary) {
  std::ostringstream os;
  os << "method";
  for (const auto& ds : table_datasets()) os << "," << ds << "_blip_vqa," << ds << "_internvl_vqa";
  os << "\n";
  for (const auto& m : table_methods(summary)) {
    os << m;
    for (const auto& ds : table_datasets()) {
      const auto* s = find_summary(summary, ds, m);
      os << "," << (s && s->items ? fmt(s->blip, 6) : "") << "," << (s && s->items ? fmt(s->internvl, 4) : "");
    }
    os << "\n";
  }
  return os.str();
}

json BenchConfig::to_json() const {
  json ds = json::array();
  for (auto t : datasets) ds.push_back(std::string(template_name(t)));
  json ms = json::array();
  for (auto m : methods) ms.push_back(std::string(method_name(m)));
  return {{"datasets", ds},
          {"dataset_seed", dataset_seed},
          {"prompts", prompts},
          {"seeds", seeds},
          {"methods", ms},
          {"backend", backend},
          {"scorer", scorer},
          {"steps", pipeline.total_steps},
          {"ts", pipeline.protection_steps},
          {"guidance", pipeline.guidance_scale},
          {"s_ca", pipeline.extraction.s_ca},
          {"s_sa", pipeline.extraction.s_sa}};
}

namespace {

struct PendingItem {
  Template dataset;
  int prompt_index;
  std::uint64_t seed;
  BenchMethod method;
  const DatasetItem* item;
};

Real mean_iou(const std::vector<Mask>& regions, const std::vector<Mask>& truth) {
  if (truth.empty()) return 0.0;
  Real sum = 0;
  for (std::size_t k = 0; k < truth.size(); ++k) sum += k < regions.size() ? iou(regions[k], truth[k]) : 0.0;
  return sum / static_cast<Real>(truth.size());
}

ItemRecord score_item(const BenchConfig& cfg, const ScorerFactory& scorers, const PendingItem& p) {
  ItemRecord rec;
  rec.dataset = std::string(template_name(p.dataset));
  rec.prompt_index = p.prompt_index;
  rec.seed = p.seed;
  rec.method = std::string(method_name(p.method));
  rec.prompt = p.item->text;
  try {
    const auto backend = BackendRegistry::instance().make(cfg.backend, rec.prompt, p.seed);
    PipelineConfig pc = cfg.pipeline;
    pc.seed = p.seed;
    pc.protect = p.method == BenchMethod::spdiffusion;
    const GenerationResult g = generate(parse_template(rec.prompt, p.dataset), pc, *backend);

    ItemContext ctx{rec.prompt, p.seed, 0.0};
    if (const auto* sb = dynamic_cast<const ScenarioBackend*>(backend.get())) {
      const Scenario& sc = sb->scenario();
      if (g.diagnostics.protection_active) {
        ctx.region_iou = mean_iou(g.regions.regions, sc.truth_at(g.regions.grid));
      } else {
        // an unprotected model's concept layout: its cross-attention at the
        // best direct threshold
        ExtractionConfig ec = pc.extraction;
        ec.s_ca = 0.5;
        const RegionSet rs = cross_attention_regions(sc.records, sc.parsed, ec);
        ctx.region_iou = mean_iou(rs.regions, sc.truth_at(rs.grid));
      }
    }
    rec.region_iou = ctx.region_iou;

    const auto png = encode_png(g.image);
    rec.image_sha256 = sha256_hex(png);
    const auto scorer = scorers(ctx);
    const std::string image = scorer->needs_image() ? base64_encode(png) : std::string();
    rec.questions = blip_vqa_questions(g.parsed);
    Real sum = 0;
    for (const auto& q : rec.questions) {
      rec.probabilities.push_back(parse_probability(scorer->ask({image, q, 0, {}})));
      sum += rec.probabilities.back();
    }
    rec.blip = rec.questions.empty() ? 0.0 : sum / static_cast<Real>(rec.questions.size());
    rec.internvl = internvl_vqa_score(*scorer, image, rec.prompt);
    rec.ok = true;
  } catch (const Error& e) {
    rec.ok = false;
    rec.error = e.what();
  }
  return rec;
}

std::vector<ItemRecord> read_items(const fs::path& path) {
  std::vector<ItemRecord> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    try {
      out.push_back(ItemRecord::from_json(json::parse(line)));
    } catch (const json::exception&) {
      // a torn last line from an interrupted run; the item is redone
    }
  }
  return out;
}

json comparable_config(json j) {
  j.erase("workers");
  j.erase("limit");
  return j;
}

}  // namespace

ScoreReport run_benchmark(const BenchConfig& cfg) {
  const ScorerFactory scorers = make_scorer_factory(cfg.scorer);
  std::vector<PromptDataset> datasets;
  for (auto t : cfg.datasets) datasets.push_back(generate_dataset(t, cfg.dataset_seed, cfg.prompts));

  std::vector<PendingItem> all;
  for (const auto& ds : datasets)
    for (int p = 0; p < static_cast<int>(ds.prompts.size()); ++p)
      for (int s = 0; s < cfg.seeds; ++s)
        for (auto m : cfg.methods)
          all.push_back({ds.name, p, static_cast<std::uint64_t>(s), m, &ds.prompts[static_cast<std::size_t>(p)]});

  const bool persist = !cfg.out_dir.empty();
  const fs::path dir = cfg.out_dir;
  const fs::path items_path = dir / "items.jsonl";
  const fs::path manifest_path = dir / "manifest.json";
  std::vector<ItemRecord> done;
  if (persist) {
    fs::create_directories(dir);
    if (fs::exists(manifest_path)) {
      json old;
      try {
        old = json::parse(std::ifstream(manifest_path));
      } catch (const json::exception&) {
        throw FormatError("unreadable manifest in " + dir.string());
      }
      if (old.contains("config") && comparable_config(old["config"]) != comparable_config(cfg.to_json())) {
        throw ConfigError("output directory " + dir.string() + " holds a run with a different configuration");
      }
    }
    done = read_items(items_path);
  }
  std::set<std::string> done_keys;
  for (const auto& r : done) done_keys.insert(r.key());

  std::vector<PendingItem> todo;
  for (const auto& p : all) {
    ItemRecord probe;
    probe.dataset = std::string(template_name(p.dataset));
    probe.prompt_index = p.prompt_index;
    probe.seed = p.seed;
    probe.method = std::string(method_name(p.method));
    if (!done_keys.contains(probe.key())) todo.push_back(p);
  }
  if (cfg.limit && static_cast<int>(todo.size()) > *cfg.limit) todo.resize(static_cast<std::size_t>(*cfg.limit));

  auto write_manifest = [&](const std::string& status, std::size_t completed) {
    json m{{"command", "bench"},
           {"status", status},
           {"config", cfg.to_json()},
           {"completed", completed},
           {"total", all.size()}};
    if (fs::exists(manifest_path)) {
      // keep fields added by callers (argv, hashes)
      try {
        json old = json::parse(std::ifstream(manifest_path));
        for (auto& [k, v] : m.items()) old[k] = v;
        m = std::move(old);
      } catch (const json::exception&) {
      }
    }
    write_file(manifest_path.string(), m.dump(2) + "\n");
  };

  std::vector<ItemRecord> fresh(todo.size());
  std::mutex io;
  std::ofstream append;
  if (persist) {
    write_manifest("partial", done.size());
    append.open(items_path, std::ios::app);
  }
  parallel_for(todo.size(), cfg.workers, [&](std::size_t i) {
    fresh[i] = score_item(cfg, scorers, todo[i]);
    if (persist) {
      std::lock_guard lock(io);
      append << fresh[i].to_json().dump() << "\n";
      append.flush();
    }
  });
  if (append.is_open()) append.close();

  // single-threaded reduce
  ScoreReport report;
  std::map<std::string, ItemRecord> by_key;
  for (auto& r : done) by_key[r.key()] = std::move(r);
  for (auto& r : fresh) by_key[r.key()] = std::move(r);
  for (const auto& p : all) {
    ItemRecord probe;
    probe.dataset = std::string(template_name(p.dataset));
    probe.prompt_index = p.prompt_index;
    probe.seed = p.seed;
    probe.method = std::string(method_name(p.method));
    if (auto it = by_key.find(probe.key()); it != by_key.end()) report.items.push_back(it->second);
  }
  report.complete = report.items.size() == all.size();
  report.summary = summarize(report.items);
  report.metadata = cfg.to_json();
  report.metadata["completed"] = report.items.size();
  report.metadata["total"] = all.size();

  if (persist) {
    std::string lines;
    for (const auto& r : report.items) lines += r.to_json().dump() + "\n";
    write_file(items_path.string(), lines);
    write_file((dir / "summary.txt").string(), summary_table(report.summary));
    write_file((dir / "summary.csv").string(), summary_csv(report.summary));
    write_manifest(report.complete ? "complete" : "partial", report.items.size());
  }
  return report;
}

std::vector<SweepPoint> threshold_sweep(const BenchConfig& cfg, Template dataset, std::span<const Real> s_ca_grid,
                                        std::span<const Real> s_sa_grid, RegionMethod mode) {
  const ScorerFactory scorers = make_scorer_factory(cfg.scorer);
  const PromptDataset ds = generate_dataset(dataset, cfg.dataset_seed, cfg.prompts);

  std::vector<SweepPoint> points;
  for (Real ca : s_ca_grid) {
    if (mode == RegionMethod::cross_attn_only) {
      points.push_back({mode, ca, 0.0});
      continue;
    }
    for (Real sa : s_sa_grid) points.push_back({mode, ca, sa});
  }

  struct Cell {
    bool ok = false;
    Real score = 0;
  };
  const std::size_t n_items = ds.prompts.size() * static_cast<std::size_t>(cfg.seeds);
  std::vector<std::vector<Cell>> cells(n_items, std::vector<Cell>(points.size()));

  parallel_for(n_items, cfg.workers, [&](std::size_t i) {
    const auto& item = ds.prompts[i / static_cast<std::size_t>(cfg.seeds)];
    const std::uint64_t seed = i % static_cast<std::size_t>(cfg.seeds);
    try {
      const auto backend = BackendRegistry::instance().make(cfg.backend, item.text, seed);
      PipelineConfig pc = cfg.pipeline;
      pc.seed = seed;
      const ParsedPrompt parsed = tokenize_parsed(*backend, parse_template(item.text, dataset));
      PipelineConfig record_cfg = pc;
      record_cfg.protection_steps = std::max(pc.protection_steps, 1);
      const Pass1Result p1 = pass1_record(record_cfg, parsed, *backend);
      const auto* sb = dynamic_cast<const ScenarioBackend*>(backend.get());

      for (std::size_t k = 0; k < points.size(); ++k) {
        try {
          ExtractionConfig ec = pc.extraction;
          ec.method = mode;
          ec.s_ca = points[k].s_ca;
          if (mode == RegionMethod::sp_extraction) ec.s_sa = points[k].s_sa;
          const RegionSet rs = extract(p1.records, parsed, ec);
          ItemContext ctx{item.text, seed, sb ? mean_iou(rs.regions, sb->scenario().truth_at(rs.grid)) : 0.0};
          const auto scorer = scorers(ctx);
          std::string image;
          if (scorer->needs_image()) {
            const SPMask mask = build_sp_mask(rs, parsed);
            const Pass2Result p2 = pass2_protected(pc, parsed, *backend, mask, p1.records, p1.x_T);
            image = base64_encode(encode_png(p2.image));
          }
          cells[i][k] = {true, internvl_vqa_score(*scorer, image, item.text)};
        } catch (const Error&) {
          cells[i][k] = {false, 0.0};
        }
      }
    } catch (const Error&) {
      // every point of this item stays failed
    }
  });

  for (std::size_t k = 0; k < points.size(); ++k) {
    for (std::size_t i = 0; i < n_items; ++i) {
      if (!cells[i][k].ok) {
        ++points[k].failed;
        continue;
      }
      ++points[k].items;
      points[k].score += cells[i][k].score;
    }
    if (points[k].items) points[k].score /= points[k].items;
  }
  return points;
}

std::vector<SweepPoint> comparison_sweep(const BenchConfig& cfg, Template dataset, std::span<const Real> grid) {
  const Real anchor[] = {0.9};
  auto sp = threshold_sweep(cfg, dataset, anchor, grid, RegionMethod::sp_extraction);
  const auto ca = threshold_sweep(cfg, dataset, grid, {}, RegionMethod::cross_attn_only);
  sp.insert(sp.end(), ca.begin(), ca.end());
  return sp;
}

std::string sweep_csv(std::span<const SweepPoint> points) {
  std::ostringstream os;
  os << "mode,s_ca,s_sa,score,items,failed\n";
  for (const auto& p : points) {
    const bool sp = p.mode == RegionMethod::sp_extraction;
    os << (sp ? "sp_extraction" : "cross_attn_only") << "," << fmt(p.s_ca, 2) << "," << (sp ? fmt(p.s_sa, 2) : "")
       << "," << fmt(p.score, 4) << "," << p.items << "," << p.failed << "\n";
  }
  return os.str();
}

AblationSpec parse_ablation(const json& j) {
  AblationSpec spec;
  try {
    spec.prompt = j.at("prompt");
    if (j.contains("grid")) spec.grid = {j["grid"].at(0).get<int>(), j["grid"].at(1).get<int>()};
    if (spec.grid.w <= 0 || spec.grid.h <= 0) throw FormatError("ablation grid must be positive");
    for (const auto& r : j.value("regions", json::array())) {
      RegionAssignment a;
      a.label = r.value("label", "");
      a.region = Mask::Constant(spec.grid.size(), false);
      if (r.contains("box")) {
        const auto& b = r["box"];
        const Real x0 = b.at(0), y0 = b.at(1), x1 = b.at(2), y1 = b.at(3);
        for (int i = 0; i < spec.grid.size(); ++i) {
          const Real x = (i % spec.grid.w + 0.5) / spec.grid.w, y = (i / spec.grid.w + 0.5) / spec.grid.h;
          a.region(i) = x >= x0 && x < x1 && y >= y0 && y < y1;
        }
      } else if (r.contains("mask")) {
        const auto& m = r["mask"];
        if (static_cast<int>(m.size()) != spec.grid.size()) throw FormatError("ablation mask size does not match grid");
        for (int i = 0; i < spec.grid.size(); ++i) a.region(i) = m[static_cast<std::size_t>(i)].get<int>() != 0;
      } else {
        throw FormatError("ablation region needs 'box' or 'mask'");
      }
      a.masked_tokens = r.value("mask_tokens", std::vector<int>{});
      a.masked_phrases = r.value("mask_text", std::vector<std::string>{});
      spec.regions.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed ablation file: ") + e.what());
  }
  return spec;
}

AblationSpec read_ablation(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  try {
    return parse_ablation(json::parse(in));
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

AblationSpec swap_groups(const AblationSpec& spec, std::size_t a, std::size_t b) {
  if (a >= spec.regions.size() || b >= spec.regions.size()) throw InvalidAssignment("swap_groups: no such region");
  AblationSpec out = spec;
  std::swap(out.regions[a].masked_tokens, out.regions[b].masked_tokens);
  std::swap(out.regions[a].masked_phrases, out.regions[b].masked_phrases);
  return out;
}

SPMask ablation_mask(const AblationSpec& spec, std::span<const Token> tokens, std::string_view prompt) {
  std::set<int> specials;
  for (std::size_t t = 0; t < tokens.size(); ++t)
    if (tokens[t].special) specials.insert(static_cast<int>(t));
  std::vector<ProtectedRegion> regions;
  for (const auto& a : spec.regions) {
    ProtectedRegion pr{a.region, a.masked_tokens, a.label};
    for (const auto& phrase : a.masked_phrases) {
      const auto pos = prompt.find(phrase);
      if (phrase.empty() || pos == std::string_view::npos) {
        throw InvalidAssignment("phrase '" + phrase + "' does not occur in the prompt");
      }
      const CharRange range{static_cast<int>(pos), static_cast<int>(pos + phrase.size())};
      for (std::size_t t = 0; t < tokens.size(); ++t)
        if (!tokens[t].special && tokens[t].chars.intersects(range)) pr.masked_tokens.push_back(static_cast<int>(t));
    }
    regions.push_back(std::move(pr));
  }
  return SPMask::from_regions(spec.grid, static_cast<int>(tokens.size()), std::move(regions), specials);
}

AblationResult token_mask_ablation(const AblationSpec& spec, const PipelineConfig& cfg,
                                   const DenoiserBackend& backend) {
  const auto tokens = backend.tokenize(spec.prompt);
  AblationResult out;
  if (spec.regions.empty()) {
    out.mask = SPMask::zeros(spec.grid, static_cast<int>(tokens.size()));
    out.generation = run_plain(cfg, spec.prompt, backend);
    return out;
  }
  out.mask = ablation_mask(spec, tokens, spec.prompt);
  out.generation = run_with_mask(cfg, spec.prompt, backend, out.mask);
  out.protection_active = true;
  ParsedPrompt raw;
  raw.raw = spec.prompt;
  out.debug_table = out.mask.debug_table(token_surfaces(raw, tokens));
  return out;
}

}  // namespace spd
