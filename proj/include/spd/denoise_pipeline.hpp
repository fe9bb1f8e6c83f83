#pragma once

// Two-pass protected generation. Pass 1 denoises the first T_s steps from
// seeded noise and records attention; regions are extracted and the
// protection mask built; pass 2 restarts from the same noise, masks
// cross-attention at every step and substitutes the recorded self-attention
// during the first T_s steps.

#include "spd/attention_core.hpp"
#include "spd/image_io.hpp"
#include "spd/prompt_parser.hpp"
#include "spd/sp_attention.hpp"
#include "spd/sp_extraction.hpp"

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace spd {

struct LayerInfo {
  int id = 0;
  Grid grid;
};

/// Per-step attention control for the conditional branch.
struct StepHooks {
  /// Cross-attention masks indexed by layer id; empty means unmasked.
  std::span<const SPMask> cross_masks;
  /// Self-attention maps to substitute this step, one record per layer.
  std::span<const AttentionRecord> self_replacement;
  /// Return the maps actually used by each layer.
  bool record = false;
};

struct StepOutput {
  Matrix noise;  // guided noise prediction, positions x channels
  std::vector<AttentionRecord> records;
};

/// A denoising network with hookable attention sites. One predict() call is
/// one denoising step (both guidance branches). Implementations must be
/// deterministic and safe to call concurrently.
class DenoiserBackend {
 public:
  virtual ~DenoiserBackend() = default;

  virtual std::string name() const = 0;
  virtual std::vector<Token> tokenize(std::string_view prompt) const = 0;
  virtual Matrix encode_text(std::span<const Token> tokens) const = 0;
  virtual Grid latent_grid() const = 0;
  virtual int latent_channels() const = 0;
  virtual std::vector<LayerInfo> attention_layers() const = 0;
  virtual StepOutput predict(const Matrix& latent, const Matrix& cond, const Matrix& uncond, Real guidance,
                             int step, int timestep, const StepHooks& hooks) const = 0;
  virtual Image decode(const Matrix& latent) const = 0;
};

/// Deterministic DDIM (eta = 0) over a scaled-linear beta schedule with
/// "leading" timestep spacing.
class DdimScheduler {
 public:
  struct Config {
    int train_steps = 1000;
    Real beta_start = 0.00085;
    Real beta_end = 0.012;
    int steps_offset = 1;
  };

  DdimScheduler();
  explicit DdimScheduler(Config cfg);

  std::vector<int> timesteps(int inference_steps) const;
  Matrix step(const Matrix& noise, const Matrix& latent, int timestep, int inference_steps) const;
  Real alpha_cumprod(int timestep) const { return alphas_cumprod_[static_cast<std::size_t>(timestep)]; }

 private:
  Config cfg_;
  std::vector<Real> alphas_cumprod_;
};

enum class Scheduler { ddim };

struct PipelineConfig {
  int total_steps = 20;
  int protection_steps = 2;
  Real guidance_scale = 7.5;
  std::uint64_t seed = 0;
  ExtractionConfig extraction;
  int image_width = 768;
  int image_height = 768;
  Scheduler scheduler = Scheduler::ddim;
  bool protect = true;
  bool record_pass2 = false;

  void validate() const;
};

/// Seeded standard-normal latent, positions x channels.
Matrix initial_noise(Grid grid, int channels, std::uint64_t seed);

struct TextConditioning {
  std::vector<Token> tokens;
  Matrix cond;
  Matrix uncond;
};

TextConditioning encode_prompt(const DenoiserBackend& backend, std::string_view prompt);

/// Tokenize with the backend and align a parsed prompt to its tokens.
ParsedPrompt tokenize_parsed(const DenoiserBackend& backend, const ParsedPrompt& word_level);

struct Pass1Result {
  Matrix x_T;
  std::vector<AttentionRecord> records;
  int steps = 0;
};

struct Pass2Result {
  Matrix latent;
  Image image;
  std::vector<AttentionRecord> records;  // filled when cfg.record_pass2
  int steps = 0;
  int replaced_self_maps = 0;
};

/// First T_s steps from seeded noise, recording every layer's maps.
Pass1Result pass1_record(const PipelineConfig& cfg, const ParsedPrompt& parsed, const DenoiserBackend& backend);

/// Full T-step run from x_T with cross-attention masked by sp_mask and the
/// recorded self-attention substituted for steps < T_s. Throws
/// RecordMismatch when a substituted (step, layer) has no record.
Pass2Result pass2_protected(const PipelineConfig& cfg, const ParsedPrompt& parsed, const DenoiserBackend& backend,
                            const SPMask& sp_mask, std::span<const AttentionRecord> records, const Matrix& x_T);

/// Plain T-step run without any attention control.
Pass2Result run_plain(const PipelineConfig& cfg, std::string_view prompt, const DenoiserBackend& backend);

/// T-step run with a fixed mask and no self-attention substitution.
Pass2Result run_with_mask(const PipelineConfig& cfg, std::string_view prompt, const DenoiserBackend& backend,
                          const SPMask& sp_mask);

struct Diagnostics {
  bool protection_active = false;
  std::string reason;
  int concepts = 0;
  int pass1_steps = 0;
  int pass2_steps = 0;
  int backend_steps = 0;
  int replaced_self_maps = 0;
  std::size_t masked_entries = 0;
};

struct GenerationResult {
  Image image;
  Matrix latent;
  Matrix x_T;
  ParsedPrompt parsed;
  std::vector<Token> tokens;
  std::vector<AttentionRecord> records;        // pass 1
  std::vector<AttentionRecord> pass2_records;  // when cfg.record_pass2
  RegionSet regions;
  SPMask sp_mask;
  Diagnostics diagnostics;
};

/// parse -> pass 1 -> extract -> build_sp_mask -> pass 2. Prompts with at
/// most one concept or cfg.protect == false run a single plain pass. With
/// T_s == 0 pass 1 records a single step for extraction and pass 2 applies
/// the mask only (T + 1 backend steps).
GenerationResult generate(std::string_view prompt, const PipelineConfig& cfg, const DenoiserBackend& backend);
GenerationResult generate(const ParsedPrompt& word_level, const PipelineConfig& cfg, const DenoiserBackend& backend);

/// Wraps a backend and counts predict() calls.
class CountingBackend final : public DenoiserBackend {
 public:
  explicit CountingBackend(const DenoiserBackend& inner) : inner_(inner) {}

  int calls() const { return calls_.load(); }
  void reset() { calls_ = 0; }

  std::string name() const override { return inner_.name(); }
  std::vector<Token> tokenize(std::string_view p) const override { return inner_.tokenize(p); }
  Matrix encode_text(std::span<const Token> t) const override { return inner_.encode_text(t); }
  Grid latent_grid() const override { return inner_.latent_grid(); }
  int latent_channels() const override { return inner_.latent_channels(); }
  std::vector<LayerInfo> attention_layers() const override { return inner_.attention_layers(); }
  StepOutput predict(const Matrix& latent, const Matrix& cond, const Matrix& uncond, Real guidance, int step,
                     int timestep, const StepHooks& hooks) const override {
    ++calls_;
    return inner_.predict(latent, cond, uncond, guidance, step, timestep, hooks);
  }
  Image decode(const Matrix& latent) const override { return inner_.decode(latent); }

 private:
  const DenoiserBackend& inner_;
  mutable std::atomic<int> calls_{0};
};

}  // namespace spd
