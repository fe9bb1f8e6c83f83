#include "spd/denoise_pipeline.hpp"

#include "spd/rng.hpp"

#include <algorithm>
#include <cmath>

namespace spd {

DdimScheduler::DdimScheduler() : DdimScheduler(Config{}) {}

DdimScheduler::DdimScheduler(Config cfg) : cfg_(cfg) {
  const Real lo = std::sqrt(cfg_.beta_start);
  const Real hi = std::sqrt(cfg_.beta_end);
  Real prod = 1.0;
  alphas_cumprod_.reserve(static_cast<std::size_t>(cfg_.train_steps));
  for (int i = 0; i < cfg_.train_steps; ++i) {
    const Real s = lo + (hi - lo) * i / (cfg_.train_steps - 1);
    prod *= 1.0 - s * s;
    alphas_cumprod_.push_back(prod);
  }
}

std::vector<int> DdimScheduler::timesteps(int inference_steps) const {
  if (inference_steps <= 0 || inference_steps > cfg_.train_steps) {
    throw ConfigError("inference steps must be in [1, " + std::to_string(cfg_.train_steps) + "]");
  }
  const int ratio = cfg_.train_steps / inference_steps;
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(inference_steps));
  for (int i = inference_steps - 1; i >= 0; --i) {
    ts.push_back(std::min(i * ratio + cfg_.steps_offset, cfg_.train_steps - 1));
  }
  return ts;
}

Matrix DdimScheduler::step(const Matrix& noise, const Matrix& latent, int timestep, int inference_steps) const {
  const int prev = timestep - cfg_.train_steps / inference_steps;
  const Real a_t = alpha_cumprod(timestep);
  const Real a_prev = prev >= 0 ? alpha_cumprod(prev) : alphas_cumprod_.front();
  const Matrix x0 = (latent - std::sqrt(1.0 - a_t) * noise) / std::sqrt(a_t);
  return std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * noise;
}

void PipelineConfig::validate() const {
  if (total_steps <= 0) throw ConfigError("total steps must be positive");
  if (protection_steps < 0 || protection_steps > total_steps) {
    throw ConfigError("protection steps must lie in [0, total steps]");
  }
  if (!(extraction.s_ca > 0.0 && extraction.s_ca <= 1.0)) throw ConfigError("s_ca must lie in (0, 1]");
  if (!(extraction.s_sa > 0.0 && extraction.s_sa <= 1.0)) throw ConfigError("s_sa must lie in (0, 1]");
  if (image_width <= 0 || image_height <= 0) throw ConfigError("image size must be positive");
}

Matrix initial_noise(Grid grid, int channels, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6e6f697365ULL));
  Matrix x(grid.size(), channels);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

TextConditioning encode_prompt(const DenoiserBackend& backend, std::string_view prompt) {
  TextConditioning tc;
  tc.tokens = backend.tokenize(prompt);
  tc.cond = backend.encode_text(tc.tokens);
  const auto empty = backend.tokenize("");
  tc.uncond = backend.encode_text(empty);
  return tc;
}

ParsedPrompt tokenize_parsed(const DenoiserBackend& backend, const ParsedPrompt& word_level) {
  const auto tokens = backend.tokenize(word_level.raw);
  return map_to_tokens(word_level, tokens);
}

namespace {

struct LoopResult {
  Matrix latent;
  std::vector<AttentionRecord> records;
  int steps = 0;
  int replaced = 0;
};

// Runs `run_steps` steps of a `cfg.total_steps` schedule from x_T.
LoopResult denoise(const PipelineConfig& cfg, const TextConditioning& text, const DenoiserBackend& backend,
                   const Matrix& x_T, const SPMask* mask, std::span<const AttentionRecord> replacement,
                   int replace_steps, bool record, int run_steps) {
  const DdimScheduler scheduler;
  const auto timesteps = scheduler.timesteps(cfg.total_steps);
  const auto layers = backend.attention_layers();

  std::vector<SPMask> layer_masks;
  if (mask) {
    int max_id = 0;
    for (const auto& l : layers) max_id = std::max(max_id, l.id);
    layer_masks.resize(static_cast<std::size_t>(max_id) + 1);
    for (const auto& l : layers) layer_masks[static_cast<std::size_t>(l.id)] = mask->at_grid(l.grid);
  }

  LoopResult out;
  out.latent = x_T;
  for (int i = 0; i < run_steps; ++i) {
    std::vector<AttentionRecord> step_replacement;
    if (i < replace_steps) {
      for (const auto& l : layers) {
        auto it = std::find_if(replacement.begin(), replacement.end(),
                               [&](const AttentionRecord& r) { return r.step == i && r.layer == l.id; });
        if (it == replacement.end()) {
          throw RecordMismatch("no recorded self-attention for step " + std::to_string(i) + ", layer " +
                               std::to_string(l.id));
        }
        step_replacement.push_back(*it);
      }
      out.replaced += static_cast<int>(step_replacement.size());
    }
    StepHooks hooks;
    hooks.cross_masks = layer_masks;
    hooks.self_replacement = step_replacement;
    hooks.record = record;
    StepOutput so = backend.predict(out.latent, text.cond, text.uncond, cfg.guidance_scale, i,
                                    timesteps[static_cast<std::size_t>(i)], hooks);
    if (record) {
      for (auto& r : so.records) {
        r.step = i;
        out.records.push_back(std::move(r));
      }
    }
    out.latent = scheduler.step(so.noise, out.latent, timesteps[static_cast<std::size_t>(i)], cfg.total_steps);
    ++out.steps;
  }
  return out;
}

Pass2Result finish_pass(LoopResult&& loop, const DenoiserBackend& backend) {
  Pass2Result r;
  r.image = backend.decode(loop.latent);
  r.latent = std::move(loop.latent);
  r.records = std::move(loop.records);
  r.steps = loop.steps;
  r.replaced_self_maps = loop.replaced;
  return r;
}

}  // namespace

Pass1Result pass1_record(const PipelineConfig& cfg, const ParsedPrompt& parsed, const DenoiserBackend& backend) {
  cfg.validate();
  const TextConditioning text = encode_prompt(backend, parsed.raw);
  Pass1Result r;
  r.x_T = initial_noise(backend.latent_grid(), backend.latent_channels(), cfg.seed);
  LoopResult loop = denoise(cfg, text, backend, r.x_T, nullptr, {}, 0, true, cfg.protection_steps);
  r.records = std::move(loop.records);
  r.steps = loop.steps;
  return r;
}

Pass2Result pass2_protected(const PipelineConfig& cfg, const ParsedPrompt& parsed, const DenoiserBackend& backend,
                            const SPMask& sp_mask, std::span<const AttentionRecord> records, const Matrix& x_T) {
  cfg.validate();
  const TextConditioning text = encode_prompt(backend, parsed.raw);
  if (sp_mask.token_count() != static_cast<int>(text.tokens.size())) {
    throw ShapeMismatch("SP mask has " + std::to_string(sp_mask.token_count()) + " token columns, prompt has " +
                        std::to_string(text.tokens.size()));
  }
  return finish_pass(denoise(cfg, text, backend, x_T, &sp_mask, records, cfg.protection_steps, cfg.record_pass2,
                             cfg.total_steps),
                     backend);
}

Pass2Result run_plain(const PipelineConfig& cfg, std::string_view prompt, const DenoiserBackend& backend) {
  cfg.validate();
  const TextConditioning text = encode_prompt(backend, prompt);
  const Matrix x_T = initial_noise(backend.latent_grid(), backend.latent_channels(), cfg.seed);
  return finish_pass(denoise(cfg, text, backend, x_T, nullptr, {}, 0, cfg.record_pass2, cfg.total_steps), backend);
}

Pass2Result run_with_mask(const PipelineConfig& cfg, std::string_view prompt, const DenoiserBackend& backend,
                          const SPMask& sp_mask) {
  cfg.validate();
  const TextConditioning text = encode_prompt(backend, prompt);
  if (sp_mask.token_count() != static_cast<int>(text.tokens.size())) {
    throw ShapeMismatch("SP mask token columns do not match the prompt tokenization");
  }
  const Matrix x_T = initial_noise(backend.latent_grid(), backend.latent_channels(), cfg.seed);
  return finish_pass(denoise(cfg, text, backend, x_T, &sp_mask, {}, 0, cfg.record_pass2, cfg.total_steps), backend);
}

GenerationResult generate(std::string_view prompt, const PipelineConfig& cfg, const DenoiserBackend& backend) {
  return generate(parse_freeform(prompt), cfg, backend);
}

GenerationResult generate(const ParsedPrompt& word_level, const PipelineConfig& cfg, const DenoiserBackend& backend) {
  cfg.validate();
  GenerationResult g;
  g.tokens = backend.tokenize(word_level.raw);
  g.parsed = map_to_tokens(word_level, g.tokens);
  auto& d = g.diagnostics;
  d.concepts = static_cast<int>(g.parsed.concepts.size());

  auto plain = [&](std::string reason) {
    Pass2Result r = run_plain(cfg, g.parsed.raw, backend);
    g.x_T = initial_noise(backend.latent_grid(), backend.latent_channels(), cfg.seed);
    g.sp_mask = SPMask::zeros(backend.latent_grid(), g.parsed.token_count);
    g.image = std::move(r.image);
    g.latent = std::move(r.latent);
    g.pass2_records = std::move(r.records);
    d.protection_active = false;
    d.reason = std::move(reason);
    d.pass2_steps = r.steps;
    d.backend_steps = r.steps;
  };

  if (!cfg.protect) {
    plain("protection disabled");
    return g;
  }
  if (d.concepts <= 1) {
    plain("fewer than two concepts");
    return g;
  }
  // With T_s = 0 one step is still recorded so regions can be extracted;
  // pass 2 then masks cross-attention without any replacement.
  PipelineConfig record_cfg = cfg;
  record_cfg.protection_steps = std::max(cfg.protection_steps, 1);
  Pass1Result p1 = pass1_record(record_cfg, g.parsed, backend);
  g.regions = extract(p1.records, g.parsed, cfg.extraction);
  g.sp_mask = build_sp_mask(g.regions, g.parsed);
  Pass2Result p2 = pass2_protected(cfg, g.parsed, backend, g.sp_mask, p1.records, p1.x_T);

  g.x_T = std::move(p1.x_T);
  g.records = std::move(p1.records);
  g.image = std::move(p2.image);
  g.latent = std::move(p2.latent);
  g.pass2_records = std::move(p2.records);
  d.protection_active = true;
  d.reason = cfg.protection_steps == 0 ? "protected (mask only, T_s = 0)" : "protected";
  d.pass1_steps = p1.steps;
  d.pass2_steps = p2.steps;
  d.backend_steps = p1.steps + p2.steps;
  d.replaced_self_maps = p2.replaced_self_maps;
  d.masked_entries = g.sp_mask.masked_entries();
  return g;
}

}  // namespace spd
