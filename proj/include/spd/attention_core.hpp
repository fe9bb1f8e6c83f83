#pragma once

// Numeric kernels shared by region extraction and protected denoising:
// scaled dot-product attention with an additive {0, -inf} mask, head
// reduction, min-max normalization, aggregation of recorded maps and
// nearest-neighbour resampling between latent grids.

#include "spd/errors.hpp"
#include "spd/types.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace spd {

enum class AttnKind { cross, self };

/// A post-softmax attention map. Rows are latent positions of `grid`;
/// columns are tokens (cross) or latent positions (self).
struct AttnMap {
  Matrix values;
  Grid grid;
  AttnKind kind = AttnKind::cross;
};

/// Attention captured at one (step, layer) site of the conditional branch.
/// `self_heads` keeps the per-head self-attention probabilities so a later
/// pass can substitute them exactly; `self` is their mean.
struct AttentionRecord {
  int step = 0;
  int layer = 0;
  AttnMap cross;
  AttnMap self;
  std::vector<Matrix> self_heads;
};

/// Stand-in for -inf in additive masks: the most negative finite value.
template <typename Scalar>
constexpr Scalar masked_value() {
  return std::numeric_limits<Scalar>::lowest();
}

template <typename Scalar>
constexpr bool is_masked(Scalar v) {
  return v <= std::numeric_limits<Scalar>::lowest();
}

namespace detail {

// Row-wise softmax((logits + mask) / sqrt(d)). Masked entries are excluded
// from the max and the normaliser and written as exact zeros. The same code
// path serves the masked and unmasked cases so a zero mask is bit-identical
// to no mask.
template <typename Scalar, typename MaskAt>
RowMatrix<Scalar> masked_softmax(const RowMatrix<Scalar>& logits, Eigen::Index scale_dim,
                                 MaskAt&& mask_at) {
  const Scalar scale = std::sqrt(static_cast<Scalar>(scale_dim));
  RowMatrix<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Scalar row_max = -std::numeric_limits<Scalar>::infinity();
    bool any_open = false;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const Scalar m = mask_at(r, c);
      if (is_masked(m)) {
        out(r, c) = Scalar(0);
        continue;
      }
      const Scalar v = (logits(r, c) + m) / scale;
      out(r, c) = v;
      if (!any_open || v > row_max) row_max = v;
      any_open = true;
    }
    if (!any_open) {
      throw DegenerateRow("attention row " + std::to_string(r) + " has every column masked");
    }
    Scalar sum = Scalar(0);
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      if (is_masked(mask_at(r, c))) continue;
      const Scalar e = std::exp(out(r, c) - row_max);
      out(r, c) = e;
      sum += e;
    }
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      if (is_masked(mask_at(r, c))) continue;
      out(r, c) = out(r, c) / sum;
    }
  }
  return out;
}

template <typename DQ, typename DK>
void check_attention_shapes(const Eigen::MatrixBase<DQ>& q, const Eigen::MatrixBase<DK>& k,
                            Eigen::Index scale_dim) {
  if (q.cols() != k.cols() || q.cols() != scale_dim) {
    throw ShapeMismatch("attention: query/key width " + std::to_string(q.cols()) + "/" +
                        std::to_string(k.cols()) + " does not match scale_dim " +
                        std::to_string(scale_dim));
  }
}

}  // namespace detail

/// softmax(Q K^T / sqrt(d)) row-wise.
template <typename DQ, typename DK>
RowMatrix<typename DQ::Scalar> attention(const Eigen::MatrixBase<DQ>& queries,
                                         const Eigen::MatrixBase<DK>& keys,
                                         Eigen::Index scale_dim) {
  using Scalar = typename DQ::Scalar;
  detail::check_attention_shapes(queries, keys, scale_dim);
  const RowMatrix<Scalar> logits = queries * keys.transpose();
  return detail::masked_softmax<Scalar>(logits, scale_dim,
                                        [](Eigen::Index, Eigen::Index) { return Scalar(0); });
}

/// softmax((Q K^T + M) / sqrt(d)) row-wise, M with entries in {0, -inf}.
/// Throws DegenerateRow if some row of M is masked everywhere.
template <typename DQ, typename DK, typename DM>
RowMatrix<typename DQ::Scalar> attention(const Eigen::MatrixBase<DQ>& queries,
                                         const Eigen::MatrixBase<DK>& keys,
                                         Eigen::Index scale_dim,
                                         const Eigen::MatrixBase<DM>& additive_mask) {
  using Scalar = typename DQ::Scalar;
  detail::check_attention_shapes(queries, keys, scale_dim);
  if (additive_mask.rows() != queries.rows() || additive_mask.cols() != keys.rows()) {
    throw ShapeMismatch("attention: mask shape does not match (queries, keys)");
  }
  const RowMatrix<Scalar> logits = queries * keys.transpose();
  const auto& mask = additive_mask.derived();
  return detail::masked_softmax<Scalar>(
      logits, scale_dim, [&](Eigen::Index r, Eigen::Index c) { return Scalar(mask(r, c)); });
}

/// (x - min) / (max - min) over the whole matrix; all zeros when max == min.
template <typename Derived>
typename Derived::PlainObject minmax_norm(const Eigen::MatrixBase<Derived>& values) {
  using Scalar = typename Derived::Scalar;
  typename Derived::PlainObject out(values.rows(), values.cols());
  if (values.size() == 0) return out;
  const Scalar lo = values.minCoeff();
  const Scalar hi = values.maxCoeff();
  if (!(hi > lo)) {
    out.setZero();
    return out;
  }
  const Scalar range = hi - lo;
  for (Eigen::Index i = 0; i < values.rows(); ++i)
    for (Eigen::Index j = 0; j < values.cols(); ++j) out(i, j) = (values(i, j) - lo) / range;
  return out;
}

/// Element-wise mean over heads.
template <typename Scalar>
RowMatrix<Scalar> apply_heads_mean(std::span<const RowMatrix<Scalar>> per_head) {
  if (per_head.empty()) throw ShapeMismatch("apply_heads_mean: no heads");
  RowMatrix<Scalar> acc = per_head.front();
  for (std::size_t h = 1; h < per_head.size(); ++h) {
    if (per_head[h].rows() != acc.rows() || per_head[h].cols() != acc.cols()) {
      throw ShapeMismatch("apply_heads_mean: head " + std::to_string(h) + " has a different shape");
    }
    acc += per_head[h];
  }
  return acc / static_cast<Scalar>(per_head.size());
}

AttnMap apply_heads_mean(std::span<const AttnMap> per_head);

/// Nearest-neighbour resampling of a binary mask between grids.
Mask resample_mask(const Mask& mask, Grid source, Grid target);

/// Resample an attention map to another grid. Rows are block-averaged when
/// shrinking and replicated when growing; self-attention columns are summed
/// or split so rows stay stochastic.
AttnMap resample_map(const AttnMap& map, Grid target);

/// Which records take part in an aggregation.
struct RecordSelection {
  std::function<bool(int layer)> layer_filter;  // empty: every layer
  int step_begin = 0;
  int step_end = std::numeric_limits<int>::max();  // exclusive
  std::optional<Grid> canonical_grid;              // default: smallest selected grid

  bool accepts(const AttentionRecord& r) const {
    return r.step >= step_begin && r.step < step_end && (!layer_filter || layer_filter(r.layer));
  }
};

/// Smallest grid (by position count) among the selected records.
Grid canonical_grid(std::span<const AttentionRecord> records, const RecordSelection& selection);

/// MinMaxNorm of the mean over selected steps and layers, every map first
/// resampled to the canonical grid. Throws EmptySelection.
AttnMap aggregate(std::span<const AttentionRecord> records, AttnKind kind,
                  const RecordSelection& selection = {});

}  // namespace spd
