#pragma once

// Concept-region extraction from recorded attention: anchor points from
// aggregated cross-attention, concept regions from cross-normalized
// self-attention at those anchors.

#include "spd/attention_core.hpp"
#include "spd/prompt_parser.hpp"

#include <vector>

namespace spd {

/// How a concept's cross-attention column is scaled before anchor thresholding.
enum class AnchorNorm {
  per_column,  // re-apply min-max to the concept's own column
  global,      // use the globally normalized aggregate as is
};

/// Region source: the two-stage anchor/self-attention method, or the direct
/// cross-attention thresholding baseline it is compared against.
enum class RegionMethod { sp_extraction, cross_attn_only };

struct ExtractionConfig {
  Real s_ca = 0.9;
  Real s_sa = 0.2;
  RecordSelection selection;
  AnchorNorm anchor_norm = AnchorNorm::per_column;
  RegionMethod method = RegionMethod::sp_extraction;
};

/// anchors[k] and regions[k] belong to concepts[k]. candidates holds the
/// thresholded regions before overlap resolution; regions are pairwise
/// disjoint.
struct RegionSet {
  Grid grid;
  std::vector<ConceptSpan> concepts;
  std::vector<Mask> anchors;
  std::vector<Mask> candidates;
  std::vector<Mask> regions;

  std::size_t size() const { return regions.size(); }
};

/// The concept's column of an aggregated cross map: mean over its sub-word
/// token columns, re-normalized when norm == per_column.
Vector concept_column(const AttnMap& agg_cross, const ConceptSpan& span_k, AnchorNorm norm);

/// m[i] = column[i] >= s_ca; the argmax position alone when nothing passes.
Mask anchor_points(const Vector& column, Real s_ca);
Mask anchor_points(const AttnMap& agg_cross, const ConceptSpan& span_k, Real s_ca,
                   AnchorNorm norm = AnchorNorm::per_column);

/// Mean self-attention into each concept's anchors, minus the mean of the
/// other concepts', clamped at zero and min-max normalized. With a single
/// concept only the normalization is applied.
std::vector<Vector> cross_normalize(const AttnMap& agg_self, const std::vector<Mask>& anchors);

/// Threshold each vector at s_sa, falling back to the concept's anchors when
/// nothing passes; positions claimed twice go to the larger value, ties to
/// the lower index.
RegionSet concept_regions(const std::vector<Vector>& cross_normed, Real s_sa, Grid grid,
                          const std::vector<Mask>& anchors);

/// Assign multiply-claimed positions by score (ties: lower index).
std::vector<Mask> resolve_overlaps(const std::vector<Mask>& claims, const std::vector<Vector>& scores);

/// Full extraction per cfg.method. Throws EmptySelection when no record is selected.
RegionSet extract(std::span<const AttentionRecord> records, const ParsedPrompt& parsed,
                  const ExtractionConfig& cfg = {});

/// Baseline: concept regions thresholded straight from cross-attention at s_ca.
RegionSet cross_attention_regions(std::span<const AttentionRecord> records, const ParsedPrompt& parsed,
                                  const ExtractionConfig& cfg = {});

}  // namespace spd
