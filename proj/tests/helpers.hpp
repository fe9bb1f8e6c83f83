#pragma once

#include "spd/attention_core.hpp"
#include "spd/sp_attention.hpp"
#include "spd/rng.hpp"

#include "oracles.hpp"

#include <filesystem>
#include <string>

namespace testing {

using namespace spd;

inline Matrix random_matrix(Rng& rng, int rows, int cols, Real scale = 1.0) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

/// Rows are softmaxes of random logits.
inline Matrix random_stochastic(Rng& rng, int rows, int cols, Real sharpness = 2.0) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    Real sum = 0;
    for (int j = 0; j < cols; ++j) sum += m(i, j) = std::exp(sharpness * rng.normal());
    for (int j = 0; j < cols; ++j) m(i, j) /= sum;
  }
  return m;
}

inline Mask random_mask(Rng& rng, int n, Real p = 0.5) {
  Mask m(n);
  for (int i = 0; i < n; ++i) m(i) = rng.uniform() < p;
  return m;
}

inline oracle::Table to_table(const Matrix& m) {
  oracle::Table t(static_cast<std::size_t>(m.rows()), oracle::Row(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  return t;
}

inline oracle::Bits to_bits(const Mask& m) {
  oracle::Bits b(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) b[static_cast<std::size_t>(i)] = m(i);
  return b;
}

/// Random token-level prompt: specials at both ends, 1-4 concepts with
/// contiguous disjoint spans, shared tokens sprinkled between them.
inline ParsedPrompt random_parsed(Rng& rng, int max_concepts = 4) {
  ParsedPrompt p;
  const int n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_concepts)));
  int t = 1;
  for (int k = 1; k <= n; ++k) {
    t += static_cast<int>(rng.below(3));
    ConceptSpan c;
    c.index = k;
    const int attrs = static_cast<int>(rng.below(3));
    for (int a = 0; a < attrs; ++a) {
      const int len = 1 + static_cast<int>(rng.below(2));
      c.attributes.push_back({t, t + len, "a" + std::to_string(k), {}});
      t += len;
    }
    const int len = 1 + static_cast<int>(rng.below(2));
    c.noun = {t, t + len, "c" + std::to_string(k), {}};
    t += len;
    p.concepts.push_back(c);
  }
  t += static_cast<int>(rng.below(3));
  p.token_count = t + 1 + static_cast<int>(rng.below(4));
  p.special_token_indices.insert(0);
  for (int i = t; i < p.token_count; ++i) p.special_token_indices.insert(i);
  return p;
}

/// Disjoint regions over a random grid: each position owned by one concept or none.
inline RegionSet random_regions(Rng& rng, const ParsedPrompt& p, std::vector<int>* owner = nullptr) {
  RegionSet rs;
  rs.grid = {1 + static_cast<int>(rng.below(8)), 1 + static_cast<int>(rng.below(8))};
  rs.concepts = p.concepts;
  const int n = static_cast<int>(p.concepts.size());
  rs.regions.assign(static_cast<std::size_t>(n), Mask::Constant(rs.grid.size(), false));
  std::vector<int> own(static_cast<std::size_t>(rs.grid.size()), -1);
  for (int i = 0; i < rs.grid.size(); ++i) {
    const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(n + 1))) - 1;
    own[static_cast<std::size_t>(i)] = k;
    if (k >= 0) rs.regions[static_cast<std::size_t>(k)](i) = true;
  }
  rs.anchors = rs.regions;
  rs.candidates = rs.regions;
  if (owner) *owner = own;
  return rs;
}

inline std::vector<std::set<int>> concept_token_sets(const ParsedPrompt& p) {
  std::vector<std::set<int>> out;
  for (const auto& c : p.concepts) {
    std::set<int> s;
    for (int t = c.noun.start; t < c.noun.end; ++t) s.insert(t);
    for (const auto& a : c.attributes)
      for (int t = a.start; t < a.end; ++t) s.insert(t);
    out.push_back(s);
  }
  return out;
}

/// Fresh empty directory under the build tree's temp area.
inline std::string scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("spd_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace testing
