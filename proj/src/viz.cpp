#include "spd/viz.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

namespace spd {

Rgb colormap(Real t) {
  // black -> indigo -> crimson -> orange -> pale yellow
  static constexpr std::array<std::array<Real, 3>, 5> stops{{
      {0, 0, 4},
      {87, 16, 110},
      {188, 55, 84},
      {249, 142, 9},
      {252, 255, 164},
  }};
  if (!std::isfinite(t)) t = 0;
  t = std::clamp(t, 0.0, 1.0) * (stops.size() - 1);
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(t), stops.size() - 2);
  const Real f = t - static_cast<Real>(i);
  auto mix = [&](int c) {
    return static_cast<std::uint8_t>(std::lround(stops[i][c] + f * (stops[i + 1][c] - stops[i][c])));
  };
  return {mix(0), mix(1), mix(2)};
}

Heatmap render_heatmap(const Vector& values, Grid grid, int cell_px) {
  if (values.size() != grid.size()) throw ShapeMismatch("render_heatmap: values do not match grid");
  if (cell_px <= 0) throw ConfigError("render_heatmap: cell size must be positive");
  Heatmap hm;
  hm.cell_px = cell_px;
  hm.min = values.size() ? values.minCoeff() : 0.0;
  hm.max = values.size() ? values.maxCoeff() : 0.0;
  const Real range = hm.max - hm.min;
  constexpr int kBar = 8;
  hm.image = Image(grid.w * cell_px, grid.h * cell_px + kBar);
  for (int y = 0; y < grid.h * cell_px; ++y)
    for (int x = 0; x < grid.w * cell_px; ++x) {
      const Real v = values(grid.index(x / cell_px, y / cell_px));
      const Rgb c = colormap(range > 0 ? (v - hm.min) / range : 0.0);
      auto* px = hm.image.at(x, y);
      px[0] = c.r;
      px[1] = c.g;
      px[2] = c.b;
    }
  for (int x = 0; x < hm.image.width; ++x) {
    const Rgb c = colormap(hm.image.width > 1 ? static_cast<Real>(x) / (hm.image.width - 1) : 0.0);
    for (int y = grid.h * cell_px; y < hm.image.height; ++y) {
      auto* px = hm.image.at(x, y);
      px[0] = c.r;
      px[1] = c.g;
      px[2] = c.b;
    }
  }
  return hm;
}

void overlay_mask(Heatmap& hm, const Mask& mask, Grid grid, Rgb colour) {
  if (mask.size() != grid.size()) throw ShapeMismatch("overlay_mask: mask does not match grid");
  const int c = hm.cell_px;
  for (int i = 0; i < grid.size(); ++i) {
    if (!mask(i)) continue;
    const int x0 = (i % grid.w) * c, y0 = (i / grid.w) * c;
    for (int d = 0; d < c; ++d)
      for (auto [x, y] : {std::pair{x0 + d, y0}, {x0 + d, y0 + c - 1}, {x0, y0 + d}, {x0 + c - 1, y0 + d}}) {
        auto* px = hm.image.at(x, y);
        px[0] = colour.r;
        px[1] = colour.g;
        px[2] = colour.b;
      }
  }
}

std::vector<std::uint8_t> heatmap_png(const Heatmap& hm, std::map<std::string, std::string> extra) {
  auto num = [](Real v) {
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
  };
  extra["min"] = num(hm.min);
  extra["max"] = num(hm.max);
  return encode_png(hm.image, extra);
}

Inspection inspect(const AttentionDump& dump, int concept_index, Real threshold, AnchorNorm norm) {
  if (dump.records.empty()) throw MissingRecord("the container holds no pass-1 attention records");
  if (!dump.metadata.contains("parsed")) throw MissingRecord("the container has no parsed-prompt metadata");
  const ParsedPrompt parsed = parsed_from_json(dump.metadata["parsed"]);
  if (concept_index < 1 || concept_index > static_cast<int>(parsed.concepts.size())) {
    throw MissingRecord("no concept " + std::to_string(concept_index) + " (the prompt has " +
                        std::to_string(parsed.concepts.size()) + ")");
  }
  const ConceptSpan& c = parsed.concepts[static_cast<std::size_t>(concept_index - 1)];
  const AttnMap agg_cross = aggregate(dump.records, AttnKind::cross);
  RecordSelection same_grid;
  same_grid.canonical_grid = agg_cross.grid;
  const AttnMap agg_self = aggregate(dump.records, AttnKind::self, same_grid);

  Inspection out;
  out.concept_index = concept_index;
  out.threshold = threshold;
  out.grid = agg_cross.grid;
  out.surface = c.noun.surface;
  out.cross = concept_column(agg_cross, c, norm);
  out.anchors = anchor_points(out.cross, threshold);
  out.self = Vector::Zero(agg_self.values.rows());
  int count = 0;
  for (Eigen::Index j = 0; j < out.anchors.size(); ++j) {
    if (!out.anchors(j)) continue;
    out.self += agg_self.values.col(j);
    ++count;
  }
  out.self /= static_cast<Real>(count);
  return out;
}

}  // namespace spd
