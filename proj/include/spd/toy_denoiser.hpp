#pragma once

// Desk-scale denoiser: two transformer blocks (self-attention,
// cross-attention, feed-forward) over a small latent grid with fixed-seed
// random weights, a hash-based tokenizer and a deterministic text embedder.

#include "spd/denoise_pipeline.hpp"

#include <cstdint>

namespace spd {

/// Splits words into pieces of at most `max_piece` characters, wraps them
/// in start/end tokens and pads to `context_length`.
class ToyTokenizer {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPad = 2;

  explicit ToyTokenizer(int context_length = 32, int max_piece = 6)
      : context_length_(context_length), max_piece_(max_piece) {}

  std::vector<Token> tokenize(std::string_view prompt) const;
  int context_length() const { return context_length_; }

 private:
  int context_length_;
  int max_piece_;
};

struct ToyDenoiserConfig {
  Grid grid{16, 16};
  int channels = 8;
  int model_dim = 16;
  int heads = 2;
  int context_length = 32;
  std::uint64_t weight_seed = 20240901;
};

class ToyDenoiser final : public DenoiserBackend {
 public:
  explicit ToyDenoiser(ToyDenoiserConfig cfg = {});

  std::string name() const override { return "toy"; }
  std::vector<Token> tokenize(std::string_view prompt) const override { return tokenizer_.tokenize(prompt); }
  Matrix encode_text(std::span<const Token> tokens) const override;
  Grid latent_grid() const override { return cfg_.grid; }
  int latent_channels() const override { return cfg_.channels; }
  std::vector<LayerInfo> attention_layers() const override;
  StepOutput predict(const Matrix& latent, const Matrix& cond, const Matrix& uncond, Real guidance, int step,
                     int timestep, const StepHooks& hooks) const override;
  /// First three channels, squashed to [0, 255], each latent cell an 8x8 block.
  Image decode(const Matrix& latent) const override;

  const ToyDenoiserConfig& config() const { return cfg_; }

 private:
  struct Block {
    Grid grid;
    Matrix wq_self, wk_self, wv_self, wo_self;
    Matrix wq_cross, wk_cross, wv_cross, wo_cross;
    Matrix w_ff1, w_ff2;
    Matrix positional;
  };

  Matrix forward(const Matrix& latent, const Matrix& text, int timestep, const StepHooks* hooks,
                 std::vector<AttentionRecord>* records) const;
  Matrix run_block(const Block& block, int layer, const Matrix& features, const Matrix& text,
                   const StepHooks* hooks, std::vector<AttentionRecord>* records) const;

  ToyDenoiserConfig cfg_;
  ToyTokenizer tokenizer_;
  Matrix w_in_, w_out_;
  std::vector<Block> blocks_;
};

}  // namespace spd
