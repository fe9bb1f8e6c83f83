#pragma once

// Synthetic attention stacks with known concept regions. Each concept owns
// an elliptical blob; its tokens' cross-attention is a bump over that blob,
// and the last concept's tokens optionally leak onto the first blob
// (entanglement). Self-attention favours positions of the same region.

#include "spd/denoise_pipeline.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>

namespace spd {

struct Ellipse {
  Real cx = 0.5, cy = 0.5;  // unit-square centre
  Real rx = 0.25, ry = 0.25;

  /// Normalized distance: 1 on the boundary.
  Real distance(Real x, Real y) const;
};

struct ScenarioConfig {
  Grid canonical{8, 8};
  std::vector<LayerInfo> layers{{0, {16, 16}}, {1, {8, 8}}};
  int steps = 2;
  int heads = 2;
  bool entangled = true;
  Real leak = 0.9;         // relative strength of the entangled bump on blob 0
  Real cross_gain = 2.0;   // logit amplitude of a concept bump
  Real bump_sigma = 0.8;   // bump width in normalized ellipse distance
  Real sink_logit = 3.0;   // start-token attention sink
  Real self_gain = 6.0;    // same-region self-attention logit
  Real local_gain = 0.5;   // spatial closeness logit
  Real noise = 0.05;
};

struct Scenario {
  ParsedPrompt parsed;             // token-level
  Grid canonical;
  std::vector<Ellipse> blobs;      // one per concept
  std::vector<Mask> truth;         // per concept, at the canonical grid
  std::vector<AttentionRecord> records;

  /// Ground truth resampled to `grid` (nearest neighbour from the canonical grid).
  std::vector<Mask> truth_at(Grid grid) const;
  /// Cross / self maps for one (step, layer), as stored in records.
  const AttentionRecord& record(int step, int layer) const;
};

/// Deterministic for (parsed, cfg, seed). Concepts are laid out side by side
/// for n <= 2 and on a near-square grid of cells otherwise.
Scenario make_scenario(const ParsedPrompt& token_level, const ScenarioConfig& cfg, std::uint64_t seed);

/// Intersection over union; 1 when both masks are empty.
Real iou(const Mask& a, const Mask& b);
/// |a & truth| / |truth|; 1 when truth is empty.
Real recall(const Mask& detected, const Mask& truth);

/// Wraps a backend and substitutes the scenario's maps into every unmasked
/// recording step, so extraction sees attention with known ground truth
/// while denoising still runs through the wrapped network.
class ScenarioBackend final : public DenoiserBackend {
 public:
  ScenarioBackend(std::shared_ptr<const DenoiserBackend> inner, Scenario scenario);

  const Scenario& scenario() const { return scenario_; }

  std::string name() const override { return "adapter:scenario"; }
  std::vector<Token> tokenize(std::string_view p) const override { return inner_->tokenize(p); }
  Matrix encode_text(std::span<const Token> t) const override { return inner_->encode_text(t); }
  Grid latent_grid() const override { return inner_->latent_grid(); }
  int latent_channels() const override { return inner_->latent_channels(); }
  std::vector<LayerInfo> attention_layers() const override { return inner_->attention_layers(); }
  StepOutput predict(const Matrix& latent, const Matrix& cond, const Matrix& uncond, Real guidance, int step,
                     int timestep, const StepHooks& hooks) const override;
  Image decode(const Matrix& latent) const override { return inner_->decode(latent); }

 private:
  std::shared_ptr<const DenoiserBackend> inner_;
  Scenario scenario_;
};

/// Backend factory keyed by name: "toy" and "adapter:<name>". Factories get
/// the prompt and seed because scenario-style adapters are per prompt.
using BackendFactory =
    std::function<std::shared_ptr<const DenoiserBackend>(std::string_view prompt, std::uint64_t seed)>;

class BackendRegistry {
 public:
  /// Registry holding "toy" and "adapter:scenario".
  static BackendRegistry& instance();

  void add(std::string name, BackendFactory factory);
  bool contains(const std::string& name) const { return factories_.contains(name); }
  std::vector<std::string> names() const;
  /// Throws ConfigError for unknown names.
  std::shared_ptr<const DenoiserBackend> make(const std::string& name, std::string_view prompt,
                                              std::uint64_t seed) const;

 private:
  std::map<std::string, BackendFactory> factories_;
};

/// Shared default toy backend.
std::shared_ptr<const DenoiserBackend> default_toy_backend();

/// Scenario for a prompt on the toy backend's tokenization and layers.
Scenario toy_scenario(const DenoiserBackend& backend, std::string_view prompt, std::uint64_t seed,
                      ScenarioConfig cfg = {});

}  // namespace spd
