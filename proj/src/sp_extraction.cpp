#include "spd/sp_extraction.hpp"

namespace spd {

Vector concept_column(const AttnMap& agg_cross, const ConceptSpan& span_k, AnchorNorm norm) {
  const auto& span = span_k.noun;
  if (span.start < 0 || span.end > agg_cross.values.cols() || span.size() <= 0) {
    throw ShapeMismatch("concept '" + span.surface + "' token span outside the cross-attention map");
  }
  Vector col = agg_cross.values.col(span.start);
  for (int t = span.start + 1; t < span.end; ++t) col += agg_cross.values.col(t);
  col /= static_cast<Real>(span.size());
  return norm == AnchorNorm::per_column ? Vector(minmax_norm(col)) : col;
}

Mask anchor_points(const Vector& column, Real s_ca) {
  Mask m = column.array() >= s_ca;
  if (!m.any()) {
    Eigen::Index best = 0;
    column.maxCoeff(&best);
    m.setConstant(false);
    m(best) = true;
  }
  return m;
}

Mask anchor_points(const AttnMap& agg_cross, const ConceptSpan& span_k, Real s_ca, AnchorNorm norm) {
  return anchor_points(concept_column(agg_cross, span_k, norm), s_ca);
}

std::vector<Vector> cross_normalize(const AttnMap& agg_self, const std::vector<Mask>& anchors) {
  const Eigen::Index n_pos = agg_self.values.rows();
  std::vector<Vector> at_anchor;
  at_anchor.reserve(anchors.size());
  for (const auto& m : anchors) {
    if (m.size() != agg_self.values.cols()) throw ShapeMismatch("cross_normalize: anchor mask size");
    Vector acc = Vector::Zero(n_pos);
    int count = 0;
    for (Eigen::Index j = 0; j < m.size(); ++j) {
      if (!m(j)) continue;
      acc += agg_self.values.col(j);
      ++count;
    }
    if (count == 0) throw EmptySelection("cross_normalize: empty anchor set");
    at_anchor.push_back(acc / static_cast<Real>(count));
  }

  const std::size_t n = anchors.size();
  std::vector<Vector> out;
  out.reserve(n);
  if (n == 1) {
    out.push_back(minmax_norm(at_anchor[0]));
    return out;
  }
  for (std::size_t k = 0; k < n; ++k) {
    Vector others = Vector::Zero(n_pos);
    for (std::size_t i = 0; i < n; ++i)
      if (i != k) others += at_anchor[i];
    others /= static_cast<Real>(n - 1);
    const Vector diff = (at_anchor[k] - others).cwiseMax(0.0);
    out.push_back(minmax_norm(diff));
  }
  return out;
}

std::vector<Mask> resolve_overlaps(const std::vector<Mask>& claims, const std::vector<Vector>& scores) {
  std::vector<Mask> out = claims;
  if (claims.empty()) return out;
  const Eigen::Index n_pos = claims.front().size();
  for (Eigen::Index i = 0; i < n_pos; ++i) {
    int owner = -1;
    for (std::size_t k = 0; k < claims.size(); ++k) {
      if (!claims[k](i)) continue;
      if (owner < 0 || scores[k](i) > scores[owner](i)) owner = static_cast<int>(k);
    }
    if (owner < 0) continue;
    for (std::size_t k = 0; k < claims.size(); ++k) out[k](i) = static_cast<int>(k) == owner;
  }
  return out;
}

RegionSet concept_regions(const std::vector<Vector>& cross_normed, Real s_sa, Grid grid,
                          const std::vector<Mask>& anchors) {
  RegionSet rs;
  rs.grid = grid;
  rs.anchors = anchors;
  for (std::size_t k = 0; k < cross_normed.size(); ++k) {
    if (cross_normed[k].size() != grid.size()) throw ShapeMismatch("concept_regions: vector length");
    Mask d = cross_normed[k].array() >= s_sa;
    if (!d.any() && k < anchors.size()) d = anchors[k];
    rs.candidates.push_back(std::move(d));
  }
  rs.regions = resolve_overlaps(rs.candidates, cross_normed);
  return rs;
}

RegionSet extract(std::span<const AttentionRecord> records, const ParsedPrompt& parsed,
                  const ExtractionConfig& cfg) {
  if (cfg.method == RegionMethod::cross_attn_only) return cross_attention_regions(records, parsed, cfg);

  const AttnMap agg_cross = aggregate(records, AttnKind::cross, cfg.selection);
  RecordSelection same_grid = cfg.selection;
  same_grid.canonical_grid = agg_cross.grid;
  const AttnMap agg_self = aggregate(records, AttnKind::self, same_grid);

  std::vector<Mask> anchors;
  for (const auto& c : parsed.concepts) anchors.push_back(anchor_points(agg_cross, c, cfg.s_ca, cfg.anchor_norm));
  RegionSet rs = concept_regions(cross_normalize(agg_self, anchors), cfg.s_sa, agg_cross.grid, anchors);
  rs.concepts = parsed.concepts;
  return rs;
}

RegionSet cross_attention_regions(std::span<const AttentionRecord> records, const ParsedPrompt& parsed,
                                  const ExtractionConfig& cfg) {
  const AttnMap agg_cross = aggregate(records, AttnKind::cross, cfg.selection);
  RegionSet rs;
  rs.grid = agg_cross.grid;
  rs.concepts = parsed.concepts;
  std::vector<Vector> columns;
  for (const auto& c : parsed.concepts) {
    columns.push_back(concept_column(agg_cross, c, cfg.anchor_norm));
    Mask d = anchor_points(columns.back(), cfg.s_ca);
    rs.anchors.push_back(d);
    rs.candidates.push_back(std::move(d));
  }
  rs.regions = resolve_overlaps(rs.candidates, columns);
  return rs;
}

}  // namespace spd
