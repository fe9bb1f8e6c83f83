#pragma once

// Heatmaps and mask overlays for attention inspection.

#include "spd/attention_dump.hpp"

namespace spd {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

/// Fixed dark-to-bright colour map, t clamped to [0, 1].
Rgb colormap(Real t);

struct Heatmap {
  Image image;
  Real min = 0;
  Real max = 0;
  int cell_px = 16;
};

/// One cell_px x cell_px block per grid cell, scaled between the values'
/// min and max, with a colour-bar strip along the bottom. A constant map
/// renders uniformly in the lowest colour.
Heatmap render_heatmap(const Vector& values, Grid grid, int cell_px = 16);

/// Outline the cells set in `mask` on a heatmap.
void overlay_mask(Heatmap& heatmap, const Mask& mask, Grid grid, Rgb colour);

/// PNG bytes with "min"/"max" (and any extra) text annotations.
std::vector<std::uint8_t> heatmap_png(const Heatmap& heatmap, std::map<std::string, std::string> extra = {});

struct Inspection {
  int concept_index = 1;
  Real threshold = 0.9;
  Grid grid;
  Vector cross;            // the concept's aggregated cross-attention column
  Vector self;             // mean aggregated self-attention into the anchors
  Mask anchors;            // cross >= threshold (argmax fallback)
  std::string surface;
};

/// Aggregate a dump's pass-1 records for concept k (1-based). Throws
/// MissingRecord when the dump holds no records or no such concept.
Inspection inspect(const AttentionDump& dump, int concept_index, Real threshold,
                   AnchorNorm norm = AnchorNorm::per_column);

}  // namespace spd
