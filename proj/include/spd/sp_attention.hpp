#pragma once

// Semantic-protection mask and the masked cross-attention that uses it.

#include "spd/attention_core.hpp"
#include "spd/prompt_parser.hpp"
#include "spd/sp_extraction.hpp"

#include <string>
#include <vector>

namespace spd {

/// A latent region and the token columns it must not attend to.
struct ProtectedRegion {
  Mask region;
  std::vector<int> masked_tokens;  // ascending, unique
  std::string label;
};

/// Additive cross-attention mask with entries in {0, -inf} (-inf realised as
/// masked_value<Real>()). Built from disjoint regions, so a position is
/// masked against at most one token group. Immutable once built.
class SPMask {
 public:
  SPMask() = default;

  /// Generic form. Throws InvalidAssignment on out-of-range or special
  /// token indices and OverlapError when regions overlap.
  static SPMask from_regions(Grid grid, int token_count, std::vector<ProtectedRegion> regions,
                             const std::set<int>& special_tokens = {});

  /// All-zero mask (no protection).
  static SPMask zeros(Grid grid, int token_count);

  const Matrix& values() const { return values_; }
  Grid grid() const { return grid_; }
  int token_count() const { return token_count_; }
  const std::vector<ProtectedRegion>& regions() const { return regions_; }
  const std::set<int>& special_tokens() const { return special_; }

  bool is_zero() const;
  bool masked(int position, int token) const { return is_masked(values_(position, token)); }
  std::size_t masked_entries() const;

  /// Resample the region masks to `target` and rebuild the mask there.
  SPMask at_grid(Grid target) const;

  /// One line per region: "region k [label] (n positions): masked tokens 'a' 'b' ...".
  std::string debug_table(std::span<const std::string> token_surfaces) const;

 private:
  Grid grid_;
  int token_count_ = 0;
  std::vector<ProtectedRegion> regions_;
  std::set<int> special_;
  Matrix values_;
};

/// Rows inside region d_k mask every token of the other concepts' concept
/// and attribute spans; every other entry is zero. Throws OverlapError.
SPMask build_sp_mask(const RegionSet& regions, const ParsedPrompt& parsed);

/// Token surfaces by index for debug tables (specials shown as <s>).
std::vector<std::string> token_surfaces(const ParsedPrompt& parsed, std::span<const Token> tokens);

struct AttentionOutput {
  Matrix weights;   // softmax((QK^T + M)/sqrt(d))
  Matrix features;  // (weights V) W_out
};

/// Cross-attention with the protection mask applied. The mask is rebuilt at
/// layer_grid when its grid differs.
template <typename DQ, typename DK, typename DV, typename DO>
AttentionOutput protected_attention(const Eigen::MatrixBase<DQ>& queries, const Eigen::MatrixBase<DK>& keys,
                                    const Eigen::MatrixBase<DV>& values, const SPMask& sp_mask,
                                    Grid layer_grid, const Eigen::MatrixBase<DO>& out_projection) {
  const SPMask& mask = sp_mask.grid() == layer_grid ? sp_mask : sp_mask.at_grid(layer_grid);
  AttentionOutput out;
  out.weights = attention(queries, keys, queries.cols(), mask.values());
  out.features = (out.weights * values) * out_projection;
  return out;
}

}  // namespace spd
