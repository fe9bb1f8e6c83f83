#include "spd/toy_denoiser.hpp"

#include "spd/rng.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace spd {

namespace {

constexpr int kVocab = 49408;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Matrix random_matrix(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(rows));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
  return m;
}

Matrix rms_norm(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real ms = x.row(r).squaredNorm() / static_cast<Real>(x.cols());
    out.row(r) = x.row(r) / std::sqrt(ms + 1e-6);
  }
  return out;
}

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](Real v) {
    return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
  });
}

// Sinusoidal 2-D position code: half the channels encode x, half y.
Matrix grid_positional(Grid g, int dim) {
  Matrix p(g.size(), dim);
  const int half = dim / 2;
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) {
      const int i = g.index(x, y);
      for (int c = 0; c < dim; ++c) {
        const int axis_c = c < half ? c : c - half;
        const Real coord = c < half ? (x + 0.5) / g.w : (y + 0.5) / g.h;
        const Real freq = std::pow(2.0, axis_c / 2);
        p(i, c) = 0.5 * ((axis_c % 2 == 0) ? std::sin(std::numbers::pi * freq * coord)
                                           : std::cos(std::numbers::pi * freq * coord));
      }
    }
  return p;
}

Eigen::Matrix<Real, 1, Eigen::Dynamic> timestep_embedding(int timestep, int dim) {
  Eigen::Matrix<Real, 1, Eigen::Dynamic> e(dim);
  for (int c = 0; c < dim; ++c) {
    const Real freq = std::exp(-std::log(10000.0) * (c / 2) / (dim / 2));
    e(c) = 0.5 * ((c % 2 == 0) ? std::sin(timestep * freq) : std::cos(timestep * freq));
  }
  return e;
}

Matrix pool2(const Matrix& x, Grid from) {
  const Grid to{from.w / 2, from.h / 2};
  Matrix out = Matrix::Zero(to.size(), x.cols());
  for (int y = 0; y < from.h; ++y)
    for (int x2 = 0; x2 < from.w; ++x2) out.row(to.index(x2 / 2, y / 2)) += x.row(from.index(x2, y));
  return out / 4.0;
}

Matrix upsample2(const Matrix& x, Grid to) {
  const Grid from{to.w / 2, to.h / 2};
  Matrix out(to.size(), x.cols());
  for (int y = 0; y < to.h; ++y)
    for (int x2 = 0; x2 < to.w; ++x2) out.row(to.index(x2, y)) = x.row(from.index(x2 / 2, y / 2));
  return out;
}

}  // namespace

std::vector<Token> ToyTokenizer::tokenize(std::string_view prompt) const {
  std::vector<Token> out;
  out.push_back({kBos, {}, true});
  for (const auto& w : split_words(prompt)) {
    for (int p = 0; p < static_cast<int>(w.text.size()); p += max_piece_) {
      if (static_cast<int>(out.size()) >= context_length_ - 1) break;
      const int len = std::min<int>(max_piece_, static_cast<int>(w.text.size()) - p);
      std::string piece = w.text.substr(static_cast<std::size_t>(p), static_cast<std::size_t>(len));
      for (auto& c : piece) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      const int id = static_cast<int>(fnv1a(piece) % (kVocab - 3)) + 3;
      out.push_back({id, {w.chars.begin + p, w.chars.begin + p + len}, false});
    }
  }
  out.push_back({kEos, {}, true});
  while (static_cast<int>(out.size()) < context_length_) out.push_back({kPad, {}, true});
  return out;
}

ToyDenoiser::ToyDenoiser(ToyDenoiserConfig cfg) : cfg_(cfg), tokenizer_(cfg.context_length) {
  if (cfg_.grid.w % 2 != 0 || cfg_.grid.h % 2 != 0) throw ConfigError("toy denoiser grid must be even");
  if (cfg_.model_dim % cfg_.heads != 0) throw ConfigError("model_dim must be divisible by heads");
  Rng rng(cfg_.weight_seed);
  const int d = cfg_.model_dim;
  w_in_ = random_matrix(rng, cfg_.channels, d);
  w_out_ = random_matrix(rng, d, cfg_.channels);
  for (Grid g : {cfg_.grid, Grid{cfg_.grid.w / 2, cfg_.grid.h / 2}}) {
    Block b;
    b.grid = g;
    b.wq_self = random_matrix(rng, d, d);
    b.wk_self = random_matrix(rng, d, d);
    b.wv_self = random_matrix(rng, d, d);
    b.wo_self = random_matrix(rng, d, d);
    b.wq_cross = random_matrix(rng, d, d);
    b.wk_cross = random_matrix(rng, d, d);
    b.wv_cross = random_matrix(rng, d, d);
    b.wo_cross = random_matrix(rng, d, d);
    b.w_ff1 = random_matrix(rng, d, 2 * d);
    b.w_ff2 = random_matrix(rng, 2 * d, d);
    b.positional = grid_positional(g, d);
    blocks_.push_back(std::move(b));
  }
}

Matrix ToyDenoiser::encode_text(std::span<const Token> tokens) const {
  const int d = cfg_.model_dim;
  Matrix e(static_cast<Eigen::Index>(tokens.size()), d);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    Rng rng(mix_seed(cfg_.weight_seed ^ 0x7e47ULL, static_cast<std::uint64_t>(tokens[t].id)));
    for (int c = 0; c < d; ++c) {
      const Real pos = 0.1 * std::sin((static_cast<Real>(t) + 1.0) * (c + 1) * 0.37);
      e(static_cast<Eigen::Index>(t), c) = rng.normal() + pos;
    }
  }
  return e;
}

std::vector<LayerInfo> ToyDenoiser::attention_layers() const {
  std::vector<LayerInfo> out;
  for (std::size_t l = 0; l < blocks_.size(); ++l) out.push_back({static_cast<int>(l), blocks_[l].grid});
  return out;
}

Matrix ToyDenoiser::run_block(const Block& b, int layer, const Matrix& features, const Matrix& text,
                              const StepHooks* hooks, std::vector<AttentionRecord>* records) const {
  const int d = cfg_.model_dim;
  const int dh = d / cfg_.heads;
  Matrix h = features;

  const AttentionRecord* replacement = nullptr;
  if (hooks) {
    for (const auto& r : hooks->self_replacement)
      if (r.layer == layer) replacement = &r;
  }

  // self-attention
  std::vector<Matrix> self_heads;
  {
    const Matrix a = rms_norm(h);
    const Matrix q = a * b.wq_self, k = a * b.wk_self, v = a * b.wv_self;
    Matrix mixed = Matrix::Zero(h.rows(), d);
    for (int head = 0; head < cfg_.heads; ++head) {
      Matrix probs;
      if (replacement) {
        if (replacement->self_heads.size() != static_cast<std::size_t>(cfg_.heads) ||
            replacement->self_heads[head].rows() != h.rows() || replacement->self_heads[head].cols() != h.rows()) {
          throw RecordMismatch("replacement self-attention for layer " + std::to_string(layer) +
                               " does not match the layer's heads/grid");
        }
        probs = replacement->self_heads[static_cast<std::size_t>(head)];
      } else {
        probs = attention(q.middleCols(head * dh, dh), k.middleCols(head * dh, dh), dh);
      }
      mixed.middleCols(head * dh, dh) = probs * v.middleCols(head * dh, dh);
      if (records) self_heads.push_back(std::move(probs));
    }
    h += mixed * b.wo_self;
  }

  // cross-attention
  std::vector<Matrix> cross_heads;
  {
    const Matrix a = rms_norm(h);
    const Matrix q = a * b.wq_cross, k = text * b.wk_cross, v = text * b.wv_cross;
    const SPMask* mask = nullptr;
    if (hooks && static_cast<std::size_t>(layer) < hooks->cross_masks.size()) {
      mask = &hooks->cross_masks[static_cast<std::size_t>(layer)];
    }
    Matrix out = Matrix::Zero(h.rows(), d);
    for (int head = 0; head < cfg_.heads; ++head) {
      const auto wo = b.wo_cross.middleRows(head * dh, dh);
      if (mask) {
        AttentionOutput po = protected_attention(q.middleCols(head * dh, dh), k.middleCols(head * dh, dh),
                                                 v.middleCols(head * dh, dh), *mask, b.grid, wo);
        out += po.features;
        if (records) cross_heads.push_back(std::move(po.weights));
      } else {
        Matrix probs = attention(q.middleCols(head * dh, dh), k.middleCols(head * dh, dh), dh);
        out += (probs * v.middleCols(head * dh, dh)) * wo;
        if (records) cross_heads.push_back(std::move(probs));
      }
    }
    h += out;
  }

  h += gelu(rms_norm(h) * b.w_ff1) * b.w_ff2;

  if (records) {
    AttentionRecord r;
    r.layer = layer;
    r.cross = {apply_heads_mean<Real>(cross_heads), b.grid, AttnKind::cross};
    r.self = {apply_heads_mean<Real>(self_heads), b.grid, AttnKind::self};
    r.self_heads = std::move(self_heads);
    records->push_back(std::move(r));
  }
  return h;
}

Matrix ToyDenoiser::forward(const Matrix& latent, const Matrix& text, int timestep, const StepHooks* hooks,
                            std::vector<AttentionRecord>* records) const {
  const Block& top = blocks_[0];
  const Block& mid = blocks_[1];
  Matrix h = latent * w_in_ + top.positional;
  h.rowwise() += timestep_embedding(timestep, cfg_.model_dim);
  h = run_block(top, 0, h, text, hooks, records);

  const Matrix pooled = pool2(h, top.grid) + mid.positional;
  const Matrix inner = run_block(mid, 1, pooled, text, hooks, records);
  h += upsample2(inner - pooled, top.grid);
  return rms_norm(h) * w_out_;
}

StepOutput ToyDenoiser::predict(const Matrix& latent, const Matrix& cond, const Matrix& uncond, Real guidance,
                                int /*step*/, int timestep, const StepHooks& hooks) const {
  if (latent.rows() != cfg_.grid.size() || latent.cols() != cfg_.channels) {
    throw BackendFailure("toy denoiser: latent shape " + std::to_string(latent.rows()) + "x" +
                         std::to_string(latent.cols()) + " does not match the model");
  }
  StepOutput out;
  const Matrix eps_cond = forward(latent, cond, timestep, &hooks, hooks.record ? &out.records : nullptr);
  const Matrix eps_uncond = forward(latent, uncond, timestep, nullptr, nullptr);
  out.noise = eps_uncond + guidance * (eps_cond - eps_uncond);
  return out;
}

Image ToyDenoiser::decode(const Matrix& latent) const {
  constexpr int kScale = 8;
  const Grid g = cfg_.grid;
  Image img(g.w * kScale, g.h * kScale);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const int i = g.index(x / kScale, y / kScale);
      auto* px = img.at(x, y);
      for (int c = 0; c < 3; ++c) {
        const Real v = latent(i, std::min(c, cfg_.channels - 1));
        px[c] = static_cast<std::uint8_t>(std::lround(255.0 * (0.5 + 0.5 * std::tanh(0.5 * v))));
      }
    }
  return img;
}

}  // namespace spd
