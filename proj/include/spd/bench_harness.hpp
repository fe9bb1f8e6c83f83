#pragma once

// Benchmark prompt sets, VQA question scripts, scorer clients and the
// generation / threshold-sweep / token-mask-ablation runners.

#include "spd/denoise_pipeline.hpp"
#include "spd/scenario.hpp"

#include <json.hpp>

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace spd {

/// Bundled data directory: $SPD_DATA_DIR when set, else the build-time path.
std::string data_dir();

struct Vocabulary {
  std::vector<std::string> colors;
  std::vector<std::string> objects;
  std::vector<std::string> clothing;
  std::vector<std::string> animals;

  /// Reads <dir>/vocab/{colors,objects,clothing,animals}.txt, one entry per line.
  static Vocabulary load(const std::string& dir = data_dir());
};

struct DatasetItem {
  std::string text;
  std::vector<GoldConcept> gold;  // concept surface + attribute surfaces, prompt order
};

struct PromptDataset {
  Template name = Template::CC500;
  std::vector<DatasetItem> prompts;
  int seeds_per_prompt = 4;
};

/// `count` prompts in the exact template, deterministic for (name, seed).
PromptDataset generate_dataset(Template name, std::uint64_t seed, const Vocabulary& vocab, int count = 100);
PromptDataset generate_dataset(Template name, std::uint64_t seed, int count = 100);

/// One "[attributes] [concept]?" question per concept, attributes in prompt order.
std::vector<std::string> blip_vqa_questions(const ParsedPrompt& parsed);

struct InternVLScript {
  std::string round1;
  std::string round2;
};

/// The two-round describe-then-score script for a prompt.
InternVLScript internvl_protocol(std::string_view prompt);

struct InternVLAnswer {
  std::string explanation;
  Real score = 0;  // clamped to [0, 100]
};

/// Parses the first JSON object in a round-2 reply. Throws MalformedResponse.
InternVLAnswer parse_internvl_response(std::string_view reply);

/// Parses a BLIP-style reply (a probability) clamped to [0, 1]. Throws MalformedResponse.
Real parse_probability(std::string_view reply);

/// Wire format: request {"image": base64 PNG, "text", "round", "history"?},
/// response {"text"}. Round 0 is a BLIP-VQA question, rounds 1-2 the
/// InternVL script; round 2 carries round 1's question and answer in
/// "history" because the service is stateless.
struct ScoreRequest {
  std::string image_base64;
  std::string text;
  int round = 0;
  std::vector<std::string> history;

  nlohmann::json to_json() const;
};

class ScorerClient {
 public:
  virtual ~ScorerClient() = default;
  virtual std::string name() const = 0;
  /// Throws BackendFailure on transport errors, MalformedResponse on bad replies.
  virtual std::string ask(const ScoreRequest& request) const = 0;
  /// False when replies do not depend on the image (lets sweeps skip pass 2).
  virtual bool needs_image() const { return true; }
};

/// Per-item facts a scorer may use.
struct ItemContext {
  std::string prompt;
  std::uint64_t seed = 0;
  Real region_iou = 0;  // mean IoU of the item's regions against scenario truth
};

using ScorerFactory = std::function<std::unique_ptr<ScorerClient>(const ItemContext&)>;

/// Desk-scale stand-in for the VQA models: answers from the item's region
/// IoU (probability = IoU, InternVL score = 100 * IoU).
class StubScorer final : public ScorerClient {
 public:
  explicit StubScorer(Real region_iou) : iou_(region_iou) {}
  std::string name() const override { return "stub"; }
  std::string ask(const ScoreRequest& request) const override;
  bool needs_image() const override { return false; }

 private:
  Real iou_;
};

/// POSTs the request JSON to an HTTP endpoint. Each attempt is bounded by
/// `timeout`; at most `retries` extra attempts follow a failure.
class HttpScorer final : public ScorerClient {
 public:
  struct Options {
    std::chrono::milliseconds timeout{10000};
    int retries = 2;
  };
  explicit HttpScorer(std::string url);
  HttpScorer(std::string url, Options options);
  std::string name() const override { return "service:" + url_; }
  std::string ask(const ScoreRequest& request) const override;

 private:
  std::string url_;
  std::string host_;
  std::string path_;
  Options opts_;
};

/// "stub" or "service:<url>". Throws ConfigError.
ScorerFactory make_scorer_factory(const std::string& spec);

/// Mean BLIP probability over the prompt's questions.
Real blip_vqa_score(const ScorerClient& scorer, const std::string& image_base64, const ParsedPrompt& parsed);
/// Two-round InternVL score in [0, 100].
Real internvl_vqa_score(const ScorerClient& scorer, const std::string& image_base64, std::string_view prompt);

/// Run fn(i) for i in [0, n) on at most `workers` threads. Exceptions from
/// fn are rethrown after all workers stop (the first one wins).
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

enum class BenchMethod { spdiffusion, baseline };
std::string_view method_name(BenchMethod m);

struct ItemRecord {
  std::string dataset;
  int prompt_index = 0;
  std::uint64_t seed = 0;
  std::string method;
  std::string prompt;
  bool ok = false;
  std::string error;
  std::vector<std::string> questions;
  std::vector<Real> probabilities;
  Real blip = 0;
  Real internvl = 0;
  Real region_iou = 0;
  std::string image_sha256;

  std::string key() const;
  nlohmann::json to_json() const;
  static ItemRecord from_json(const nlohmann::json& j);
};

struct MethodSummary {
  std::string dataset;
  std::string method;
  int items = 0;
  int failed = 0;
  Real blip = 0;
  Real internvl = 0;
};

struct ScoreReport {
  std::vector<ItemRecord> items;     // sorted by key
  std::vector<MethodSummary> summary;
  nlohmann::json metadata;
  bool complete = false;
};

/// Means over successful items per (dataset, method).
std::vector<MethodSummary> summarize(std::span<const ItemRecord> items);

/// One row per method, BLIP-VQA / InternVL-VQA column pairs per dataset.
std::string summary_table(std::span<const MethodSummary> summary);
std::string summary_csv(std::span<const MethodSummary> summary);

struct BenchConfig {
  std::vector<Template> datasets{Template::CC500};
  std::uint64_t dataset_seed = 0;
  int prompts = 100;
  int seeds = 4;
  std::vector<BenchMethod> methods{BenchMethod::spdiffusion};
  PipelineConfig pipeline;
  std::string backend = "adapter:scenario";
  std::string scorer = "stub";
  int workers = 1;
  std::string out_dir;               // empty: nothing written
  std::optional<int> limit;          // stop after this many new items (simulated interruption)

  nlohmann::json to_json() const;
};

/// Scores every prompt x seed x method item. With out_dir set, items are
/// appended to items.jsonl as they finish, already finished items are
/// skipped, and manifest.json records status "partial" or "complete".
ScoreReport run_benchmark(const BenchConfig& cfg);

struct SweepPoint {
  RegionMethod mode = RegionMethod::sp_extraction;
  Real s_ca = 0;
  Real s_sa = 0;
  Real score = 0;  // mean InternVL-style score; the stub answers 100 x region IoU
  int items = 0;
  int failed = 0;
};

/// Score-vs-threshold curve. sp_extraction evaluates every (s_ca, s_sa)
/// pair; cross_attn_only thresholds cross-attention directly at each s_ca.
/// Pass 1 runs once per item and is shared by all points.
std::vector<SweepPoint> threshold_sweep(const BenchConfig& cfg, Template dataset, std::span<const Real> s_ca_grid,
                                        std::span<const Real> s_sa_grid, RegionMethod mode);

/// Method comparison: sp_extraction at s_ca = 0.9 with s_sa over
/// `grid`, against cross_attn_only with s_ca over `grid`.
std::vector<SweepPoint> comparison_sweep(const BenchConfig& cfg, Template dataset, std::span<const Real> grid);
std::string sweep_csv(std::span<const SweepPoint> points);

/// Manually assigned protection: each region excludes a group of tokens.
struct RegionAssignment {
  Mask region;
  std::vector<int> masked_tokens;
  std::vector<std::string> masked_phrases;  // resolved against the prompt text
  std::string label;
};

struct AblationSpec {
  std::string prompt;
  Grid grid{8, 8};
  std::vector<RegionAssignment> regions;
};

/// {"prompt", "grid": [w, h], "regions": [{"label", "box": [x0, y0, x1, y1]
/// in unit coordinates | "mask": [0/1 ...], "mask_tokens": [int ...] |
/// "mask_text": ["phrase" ...]}]}. Throws FormatError.
AblationSpec parse_ablation(const nlohmann::json& j);
AblationSpec read_ablation(const std::string& path);

/// Exchange the token groups of regions a and b.
AblationSpec swap_groups(const AblationSpec& spec, std::size_t a = 0, std::size_t b = 1);

/// Resolve phrases and indices to token columns and build the mask. Throws
/// InvalidAssignment for out-of-range or special tokens and unknown phrases.
SPMask ablation_mask(const AblationSpec& spec, std::span<const Token> tokens, std::string_view prompt);

struct AblationResult {
  SPMask mask;
  Pass2Result generation;
  bool protection_active = false;
  std::string debug_table;
};

/// Generate with the manual mask (plain generation when no region is given).
AblationResult token_mask_ablation(const AblationSpec& spec, const PipelineConfig& cfg,
                                   const DenoiserBackend& backend);

}  // namespace spd
