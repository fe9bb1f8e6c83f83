#pragma once

// Scalar re-implementations used as test oracles. Plain loops over
// std::vector; nothing here calls the library's kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <vector>

namespace oracle {

using Row = std::vector<double>;
using Table = std::vector<Row>;  // table[position][column]
using Bits = std::vector<bool>;

/// softmax(logits / sqrt(d)) for one row.
inline Row softmax(const Row& logits, double scale_dim) {
  const double s = std::sqrt(scale_dim);
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v / s);
  Row out(logits.size());
  double sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += out[i] = std::exp(logits[i] / s - mx);
  for (double& v : out) v /= sum;
  return out;
}

/// Delete masked columns, softmax what is left, put zeros back.
inline Row softmax_deleting(const Row& logits, const Bits& masked, double scale_dim) {
  Row kept;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (!masked[i]) kept.push_back(logits[i]);
  const Row sm = softmax(kept, scale_dim);
  Row out(logits.size(), 0.0);
  std::size_t j = 0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (!masked[i]) out[i] = sm[j++];
  return out;
}

inline Table minmax(const Table& t) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : t)
    for (double v : r) lo = std::min(lo, v), hi = std::max(hi, v);
  Table out = t;
  for (auto& r : out)
    for (double& v : r) v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
  return out;
}

inline Row minmax(const Row& r) { return minmax(Table{r})[0]; }

inline Table mean(const std::vector<Table>& maps) {
  Table acc = maps[0];
  for (std::size_t m = 1; m < maps.size(); ++m)
    for (std::size_t i = 0; i < acc.size(); ++i)
      for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += maps[m][i][j];
  for (auto& r : acc)
    for (double& v : r) v /= static_cast<double>(maps.size());
  return acc;
}

struct Extraction {
  std::vector<Bits> anchors;
  std::vector<Bits> candidates;
  std::vector<Bits> regions;
};

/// Anchors from the per-concept re-normalized cross column (>= s_ca, argmax
/// fallback), anchor-mean self-attention columns, subtraction of the other
/// concepts' mean, clamp, min-max, >= s_sa (anchor fallback), and overlap
/// resolution by larger value with ties to the lower index. All maps share
/// one grid.
inline Extraction extract(const std::vector<Table>& cross, const std::vector<Table>& self,
                          const std::vector<std::vector<int>>& concept_columns, double s_ca, double s_sa) {
  const Table ca = minmax(mean(cross));
  const Table sa = minmax(mean(self));
  const std::size_t P = ca.size(), n = concept_columns.size();
  Extraction ex;
  for (const auto& cols : concept_columns) {
    Row col(P, 0.0);
    for (std::size_t i = 0; i < P; ++i) {
      for (int t : cols) col[i] += ca[i][static_cast<std::size_t>(t)];
      col[i] /= static_cast<double>(cols.size());
    }
    col = minmax(col);
    Bits m(P);
    bool any = false;
    for (std::size_t i = 0; i < P; ++i) any |= (m[i] = col[i] >= s_ca);
    if (!any) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < P; ++i)
        if (col[i] > col[best]) best = i;
      m[best] = true;
    }
    ex.anchors.push_back(m);
  }
  std::vector<Row> at(n, Row(P, 0.0));
  for (std::size_t k = 0; k < n; ++k) {
    int count = 0;
    for (std::size_t j = 0; j < P; ++j) {
      if (!ex.anchors[k][j]) continue;
      for (std::size_t i = 0; i < P; ++i) at[k][i] += sa[i][j];
      ++count;
    }
    for (double& v : at[k]) v /= count;
  }
  std::vector<Row> normed(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (n == 1) {
      normed[k] = minmax(at[k]);
      continue;
    }
    Row d(P);
    for (std::size_t i = 0; i < P; ++i) {
      double others = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != k) others += at[j][i];
      d[i] = std::max(at[k][i] - others / static_cast<double>(n - 1), 0.0);
    }
    normed[k] = minmax(d);
  }
  for (std::size_t k = 0; k < n; ++k) {
    Bits c(P);
    bool any = false;
    for (std::size_t i = 0; i < P; ++i) any |= (c[i] = normed[k][i] >= s_sa);
    if (!any) c = ex.anchors[k];
    ex.candidates.push_back(c);
  }
  ex.regions.assign(n, Bits(P, false));
  for (std::size_t i = 0; i < P; ++i) {
    int owner = -1;
    for (std::size_t k = 0; k < n; ++k)
      if (ex.candidates[k][i] && (owner < 0 || normed[k][i] > normed[static_cast<std::size_t>(owner)][i]))
        owner = static_cast<int>(k);
    if (owner >= 0) ex.regions[static_cast<std::size_t>(owner)][i] = true;
  }
  return ex;
}

/// masked[i][t] for a protection mask: a position owned by concept k masks
/// every token of every other concept; unowned positions mask nothing.
/// owner[i] is the owning concept index or -1.
inline std::vector<Bits> protection(const std::vector<int>& owner, int tokens,
                                    const std::vector<std::set<int>>& concept_tokens) {
  std::vector<Bits> out(owner.size(), Bits(static_cast<std::size_t>(tokens), false));
  for (std::size_t i = 0; i < owner.size(); ++i) {
    if (owner[i] < 0) continue;
    for (std::size_t j = 0; j < concept_tokens.size(); ++j) {
      if (static_cast<int>(j) == owner[i]) continue;
      for (int t : concept_tokens[j]) out[i][static_cast<std::size_t>(t)] = true;
    }
  }
  return out;
}

}  // namespace oracle
