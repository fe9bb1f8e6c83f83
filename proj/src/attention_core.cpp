#include "spd/attention_core.hpp"

#include <algorithm>

namespace spd {

namespace {

// One axis of a grid resampling. rows maps target cells to source cells for
// query rows; cols maps them for self-attention key columns.
struct AxisOperator {
  Matrix rows;
  Matrix cols;
};

AxisOperator axis_operator(int source, int target) {
  AxisOperator op{Matrix::Zero(target, source), Matrix::Zero(target, source)};
  if (target <= source) {
    std::vector<int> count(target, 0);
    for (int p = 0; p < source; ++p) ++count[static_cast<long>(p) * target / source];
    for (int p = 0; p < source; ++p) {
      const int c = static_cast<int>(static_cast<long>(p) * target / source);
      op.rows(c, p) = 1.0 / count[c];
      op.cols(c, p) = 1.0;
    }
  } else {
    std::vector<int> count(source, 0);
    for (int q = 0; q < target; ++q) ++count[static_cast<long>(q) * source / target];
    for (int q = 0; q < target; ++q) {
      const int s = static_cast<int>(static_cast<long>(q) * source / target);
      op.rows(q, s) = 1.0;
      op.cols(q, s) = 1.0 / count[s];
    }
  }
  return op;
}

// Kronecker product for row-major position indices i = y * w + x.
Matrix grid_operator(const Matrix& along_y, const Matrix& along_x) {
  Matrix out(along_y.rows() * along_x.rows(), along_y.cols() * along_x.cols());
  for (Eigen::Index ty = 0; ty < along_y.rows(); ++ty)
    for (Eigen::Index sy = 0; sy < along_y.cols(); ++sy)
      out.block(ty * along_x.rows(), sy * along_x.cols(), along_x.rows(), along_x.cols()) =
          along_y(ty, sy) * along_x;
  return out;
}

}  // namespace

AttnMap apply_heads_mean(std::span<const AttnMap> per_head) {
  if (per_head.empty()) throw ShapeMismatch("apply_heads_mean: no heads");
  std::vector<Matrix> values;
  values.reserve(per_head.size());
  for (const auto& m : per_head) {
    if (m.grid != per_head.front().grid || m.kind != per_head.front().kind) {
      throw ShapeMismatch("apply_heads_mean: heads disagree on grid or kind");
    }
    values.push_back(m.values);
  }
  return {apply_heads_mean<Real>(values), per_head.front().grid, per_head.front().kind};
}

Mask resample_mask(const Mask& mask, Grid source, Grid target) {
  if (mask.size() != source.size()) throw ShapeMismatch("resample_mask: mask does not match grid");
  if (source == target) return mask;
  Mask out(target.size());
  for (int y = 0; y < target.h; ++y) {
    const int sy = static_cast<int>(static_cast<long>(y) * source.h / target.h);
    for (int x = 0; x < target.w; ++x) {
      const int sx = static_cast<int>(static_cast<long>(x) * source.w / target.w);
      out(target.index(x, y)) = mask(source.index(sx, sy));
    }
  }
  return out;
}

AttnMap resample_map(const AttnMap& map, Grid target) {
  if (map.values.rows() != map.grid.size()) throw ShapeMismatch("resample_map: rows do not match grid");
  if (map.kind == AttnKind::self && map.values.cols() != map.grid.size()) {
    throw ShapeMismatch("resample_map: self map is not square over the grid");
  }
  if (map.grid == target) return map;
  const AxisOperator ax = axis_operator(map.grid.w, target.w);
  const AxisOperator ay = axis_operator(map.grid.h, target.h);
  AttnMap out{grid_operator(ay.rows, ax.rows) * map.values, target, map.kind};
  if (map.kind == AttnKind::self) {
    out.values = out.values * grid_operator(ay.cols, ax.cols).transpose();
  }
  return out;
}

Grid canonical_grid(std::span<const AttentionRecord> records, const RecordSelection& selection) {
  if (selection.canonical_grid) return *selection.canonical_grid;
  std::optional<Grid> best;
  for (const auto& r : records) {
    if (!selection.accepts(r)) continue;
    if (!best || r.cross.grid.size() < best->size()) best = r.cross.grid;
  }
  if (!best) throw EmptySelection("no attention record matches the step/layer selection");
  return *best;
}

AttnMap aggregate(std::span<const AttentionRecord> records, AttnKind kind,
                  const RecordSelection& selection) {
  const Grid grid = canonical_grid(records, selection);
  Matrix acc;
  int count = 0;
  for (const auto& r : records) {
    if (!selection.accepts(r)) continue;
    const AttnMap& src = kind == AttnKind::cross ? r.cross : r.self;
    const AttnMap map = resample_map(src, grid);
    if (count == 0) {
      acc = map.values;
    } else {
      if (map.values.rows() != acc.rows() || map.values.cols() != acc.cols()) {
        throw ShapeMismatch("aggregate: records disagree on map shape");
      }
      acc += map.values;
    }
    ++count;
  }
  if (count == 0) throw EmptySelection("no attention record matches the step/layer selection");
  acc /= static_cast<Real>(count);
  return {minmax_norm(acc), grid, kind};
}

}  // namespace spd
