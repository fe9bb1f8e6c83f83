#include "spd/sp_attention.hpp"

#include <algorithm>
#include <sstream>

namespace spd {

SPMask SPMask::from_regions(Grid grid, int token_count, std::vector<ProtectedRegion> regions,
                            const std::set<int>& special_tokens) {
  SPMask m;
  m.grid_ = grid;
  m.token_count_ = token_count;
  m.special_ = special_tokens;
  m.values_ = Matrix::Zero(grid.size(), token_count);

  std::vector<int> owner(static_cast<std::size_t>(grid.size()), -1);
  for (std::size_t r = 0; r < regions.size(); ++r) {
    auto& pr = regions[r];
    if (pr.region.size() != grid.size()) {
      throw InvalidAssignment("region " + std::to_string(r) + " does not match grid " + to_string(grid));
    }
    std::sort(pr.masked_tokens.begin(), pr.masked_tokens.end());
    pr.masked_tokens.erase(std::unique(pr.masked_tokens.begin(), pr.masked_tokens.end()),
                           pr.masked_tokens.end());
    for (int t : pr.masked_tokens) {
      if (t < 0 || t >= token_count) {
        throw InvalidAssignment("token index " + std::to_string(t) + " outside [0, " +
                                std::to_string(token_count) + ")");
      }
      if (special_tokens.contains(t)) {
        throw InvalidAssignment("token index " + std::to_string(t) + " is a special token");
      }
    }
    if (!pr.masked_tokens.empty() && static_cast<int>(pr.masked_tokens.size()) >= token_count) {
      throw InvalidAssignment("region " + std::to_string(r) + " would mask every token");
    }
    for (int i = 0; i < grid.size(); ++i) {
      if (!pr.region(i)) continue;
      if (owner[i] >= 0) {
        throw OverlapError("regions " + std::to_string(owner[i]) + " and " + std::to_string(r) +
                           " overlap at position " + std::to_string(i));
      }
      owner[i] = static_cast<int>(r);
      for (int t : pr.masked_tokens) m.values_(i, t) = masked_value<Real>();
    }
  }
  m.regions_ = std::move(regions);
  return m;
}

SPMask SPMask::zeros(Grid grid, int token_count) { return from_regions(grid, token_count, {}); }

bool SPMask::is_zero() const { return (values_.array() == 0.0).all(); }

std::size_t SPMask::masked_entries() const {
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < values_.size(); ++i) n += is_masked(values_.data()[i]) ? 1 : 0;
  return n;
}

SPMask SPMask::at_grid(Grid target) const {
  if (target == grid_) return *this;
  std::vector<ProtectedRegion> resampled = regions_;
  for (auto& r : resampled) r.region = resample_mask(r.region, grid_, target);
  return from_regions(target, token_count_, std::move(resampled), special_);
}

std::string SPMask::debug_table(std::span<const std::string> token_surfaces) const {
  std::ostringstream os;
  for (std::size_t r = 0; r < regions_.size(); ++r) {
    const auto& pr = regions_[r];
    os << "region " << (r + 1);
    if (!pr.label.empty()) os << " [" << pr.label << "]";
    os << " (" << pr.region.count() << " positions): masked tokens";
    if (pr.masked_tokens.empty()) os << " (none)";
    for (int t : pr.masked_tokens) {
      os << " '" << (t < static_cast<int>(token_surfaces.size()) ? token_surfaces[t] : std::to_string(t)) << "'";
    }
    os << '\n';
  }
  return os.str();
}

SPMask build_sp_mask(const RegionSet& regions, const ParsedPrompt& parsed) {
  if (regions.regions.size() != parsed.concepts.size()) {
    throw ShapeMismatch("build_sp_mask: " + std::to_string(regions.regions.size()) + " regions for " +
                        std::to_string(parsed.concepts.size()) + " concepts");
  }
  std::vector<ProtectedRegion> groups;
  for (std::size_t k = 0; k < parsed.concepts.size(); ++k) {
    ProtectedRegion pr;
    pr.region = regions.regions[k];
    pr.label = parsed.concepts[k].noun.surface;
    for (std::size_t j = 0; j < parsed.concepts.size(); ++j) {
      if (j == k) continue;
      const auto idx = parsed.concepts[j].token_indices();
      pr.masked_tokens.insert(pr.masked_tokens.end(), idx.begin(), idx.end());
    }
    groups.push_back(std::move(pr));
  }
  return SPMask::from_regions(regions.grid, parsed.token_count, std::move(groups),
                              parsed.special_token_indices);
}

std::vector<std::string> token_surfaces(const ParsedPrompt& parsed, std::span<const Token> tokens) {
  std::vector<std::string> out;
  for (const auto& t : tokens) {
    if (t.special || t.chars.empty()) {
      out.emplace_back("<s>");
    } else {
      out.push_back(parsed.raw.substr(t.chars.begin, t.chars.end - t.chars.begin));
    }
  }
  return out;
}

}  // namespace spd
