#include "spd/scenario.hpp"

#include "spd/rng.hpp"
#include "spd/toy_denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

namespace spd {

Real Ellipse::distance(Real x, Real y) const {
  const Real dx = (x - cx) / rx;
  const Real dy = (y - cy) / ry;
  return std::sqrt(dx * dx + dy * dy);
}

namespace {

Real cell_x(Grid g, int i) { return (i % g.w + 0.5) / g.w; }
Real cell_y(Grid g, int i) { return (i / g.w + 0.5) / g.h; }

std::vector<Ellipse> layout_blobs(int n, Rng& rng) {
  const int cols = n <= 2 ? std::max(n, 1) : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int rows = (n + cols - 1) / cols;
  const Real cw = 1.0 / cols, ch = 1.0 / rows;
  std::vector<Ellipse> out;
  for (int k = 0; k < n; ++k) {
    Ellipse e;
    e.cx = (k % cols + 0.5) * cw + rng.uniform(-0.06, 0.06) * cw;
    e.cy = (k / cols + 0.5) * ch + rng.uniform(-0.06, 0.06) * ch;
    e.rx = rng.uniform(0.30, 0.42) * cw;
    e.ry = rng.uniform(0.30, 0.42) * ch;
    out.push_back(e);
  }
  return out;
}

Mask rasterize(const Ellipse& e, Grid g) {
  Mask m(g.size());
  for (int i = 0; i < g.size(); ++i) m(i) = e.distance(cell_x(g, i), cell_y(g, i)) <= 1.0;
  const int cx = std::clamp(static_cast<int>(e.cx * g.w), 0, g.w - 1);
  const int cy = std::clamp(static_cast<int>(e.cy * g.h), 0, g.h - 1);
  m(g.index(cx, cy)) = true;
  return m;
}

Matrix row_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Real mx = logits.row(r).maxCoeff();
    Real sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += (out(r, c) = std::exp(logits(r, c) - mx));
    for (Eigen::Index c = 0; c < logits.cols(); ++c) out(r, c) /= sum;
  }
  return out;
}

}  // namespace

std::vector<Mask> Scenario::truth_at(Grid grid) const {
  std::vector<Mask> out;
  for (const auto& m : truth) out.push_back(resample_mask(m, canonical, grid));
  return out;
}

const AttentionRecord& Scenario::record(int step, int layer) const {
  for (const auto& r : records)
    if (r.step == step && r.layer == layer) return r;
  throw MissingRecord("scenario has no record for step " + std::to_string(step) + ", layer " +
                      std::to_string(layer));
}

Scenario make_scenario(const ParsedPrompt& token_level, const ScenarioConfig& cfg, std::uint64_t seed) {
  Scenario sc;
  sc.parsed = token_level;
  sc.canonical = cfg.canonical;
  const int n = static_cast<int>(token_level.concepts.size());
  Rng rng(mix_seed(seed, 0x5ce0ULL));
  sc.blobs = layout_blobs(n, rng);
  for (const auto& e : sc.blobs) sc.truth.push_back(rasterize(e, cfg.canonical));

  std::vector<int> owner(static_cast<std::size_t>(token_level.token_count), -1);
  for (int k = 0; k < n; ++k)
    for (int t : token_level.concepts[k].token_indices()) owner[t] = k;
  const int sink = token_level.special_token_indices.empty() ? -1 : *token_level.special_token_indices.begin();
  const Real two_sigma2 = 2.0 * cfg.bump_sigma * cfg.bump_sigma;

  for (int step = 0; step < cfg.steps; ++step) {
    for (const auto& layer : cfg.layers) {
      const Grid g = layer.grid;
      Rng noise(mix_seed(seed, 0x1000ULL + static_cast<std::uint64_t>(step) * 64 + layer.id));

      // region label per position: canonical membership, -1 for background
      std::vector<int> label(static_cast<std::size_t>(g.size()), -1);
      const auto truth = sc.truth_at(g);
      for (int k = 0; k < n; ++k)
        for (int i = 0; i < g.size(); ++i)
          if (truth[k](i)) label[i] = k;

      Matrix cross_logits(g.size(), token_level.token_count);
      for (int i = 0; i < g.size(); ++i) {
        const Real x = cell_x(g, i), y = cell_y(g, i);
        for (int t = 0; t < token_level.token_count; ++t) {
          Real v = t == sink ? cfg.sink_logit : 0.0;
          if (owner[t] >= 0) {
            const int k = owner[t];
            const Real d = sc.blobs[k].distance(x, y);
            Real bump = std::exp(-d * d / two_sigma2);
            if (cfg.entangled && n >= 2 && k == n - 1) {
              const Real d0 = sc.blobs[0].distance(x, y);
              bump = std::max(bump, cfg.leak * std::exp(-d0 * d0 / two_sigma2));
            }
            v += cfg.cross_gain * bump;
          }
          cross_logits(i, t) = v + cfg.noise * noise.normal();
        }
      }

      Matrix self_logits(g.size(), g.size());
      const Real cell = 1.0 / std::max(cfg.canonical.w, cfg.canonical.h);
      for (int i = 0; i < g.size(); ++i)
        for (int j = 0; j < g.size(); ++j) {
          const Real dx = cell_x(g, i) - cell_x(g, j), dy = cell_y(g, i) - cell_y(g, j);
          const Real close = std::exp(-(dx * dx + dy * dy) / (2.0 * cell * cell));
          self_logits(i, j) = (label[i] == label[j] ? cfg.self_gain : 0.0) + cfg.local_gain * close +
                              cfg.noise * noise.normal();
        }

      AttentionRecord r;
      r.step = step;
      r.layer = layer.id;
      r.cross = {row_softmax(cross_logits), g, AttnKind::cross};
      r.self = {row_softmax(self_logits), g, AttnKind::self};
      r.self_heads.assign(static_cast<std::size_t>(cfg.heads), r.self.values);
      sc.records.push_back(std::move(r));
    }
  }
  return sc;
}

Real iou(const Mask& a, const Mask& b) {
  const auto inter = (a && b).count();
  const auto uni = (a || b).count();
  return uni == 0 ? 1.0 : static_cast<Real>(inter) / static_cast<Real>(uni);
}

Real recall(const Mask& detected, const Mask& truth) {
  const auto t = truth.count();
  return t == 0 ? 1.0 : static_cast<Real>((detected && truth).count()) / static_cast<Real>(t);
}

ScenarioBackend::ScenarioBackend(std::shared_ptr<const DenoiserBackend> inner, Scenario scenario)
    : inner_(std::move(inner)), scenario_(std::move(scenario)) {}

StepOutput ScenarioBackend::predict(const Matrix& latent, const Matrix& cond, const Matrix& uncond, Real guidance,
                                    int step, int timestep, const StepHooks& hooks) const {
  StepOutput out = inner_->predict(latent, cond, uncond, guidance, step, timestep, hooks);
  if (!hooks.record || !hooks.cross_masks.empty() || !hooks.self_replacement.empty()) return out;
  int last = 0;
  for (const auto& r : scenario_.records) last = std::max(last, r.step);
  for (auto& r : out.records) {
    const AttentionRecord& s = scenario_.record(std::min(step, last), r.layer);
    r.cross = s.cross;
    r.self = s.self;
    r.self_heads = s.self_heads;
  }
  return out;
}

void BackendRegistry::add(std::string name, BackendFactory factory) { factories_[std::move(name)] = std::move(factory); }

std::vector<std::string> BackendRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : factories_) out.push_back(k);
  return out;
}

std::shared_ptr<const DenoiserBackend> BackendRegistry::make(const std::string& name, std::string_view prompt,
                                                             std::uint64_t seed) const {
  auto it = factories_.find(name);
  if (it == factories_.end()) {
    std::string known;
    for (const auto& n : names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown backend '" + name + "' (known: " + known + ")");
  }
  return it->second(prompt, seed);
}

std::shared_ptr<const DenoiserBackend> default_toy_backend() {
  static const std::shared_ptr<const DenoiserBackend> toy = std::make_shared<ToyDenoiser>();
  return toy;
}

Scenario toy_scenario(const DenoiserBackend& backend, std::string_view prompt, std::uint64_t seed,
                      ScenarioConfig cfg) {
  const ParsedPrompt parsed = map_to_tokens(parse_freeform(prompt), backend.tokenize(prompt));
  cfg.layers = backend.attention_layers();
  Grid smallest = cfg.layers.front().grid;
  for (const auto& l : cfg.layers)
    if (l.grid.size() < smallest.size()) smallest = l.grid;
  cfg.canonical = smallest;
  return make_scenario(parsed, cfg, seed);
}

BackendRegistry& BackendRegistry::instance() {
  static BackendRegistry reg;
  static std::once_flag once;
  std::call_once(once, [] {
    reg.add("toy", [](std::string_view, std::uint64_t) { return default_toy_backend(); });
    reg.add("adapter:scenario", [](std::string_view prompt, std::uint64_t seed) {
      auto toy = default_toy_backend();
      return std::static_pointer_cast<const DenoiserBackend>(
          std::make_shared<ScenarioBackend>(toy, toy_scenario(*toy, prompt, seed)));
    });
  });
  return reg;
}

}  // namespace spd
