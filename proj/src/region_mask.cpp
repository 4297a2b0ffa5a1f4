#include "ulast/region_mask.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "ulast/error.hpp"

namespace ulast {

namespace {

// Cells whose extent can intersect [lo, hi] along one axis.
std::pair<std::size_t, std::size_t> cell_range(double lo, double hi, double origin, double cell, std::size_t n) {
  const double a = std::floor((lo - origin) / cell), b = std::ceil((hi - origin) / cell);
  const auto clampi = [n](double v) { return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n))); };
  return {clampi(a), clampi(b)};
}

}  // namespace

Var grid_overlap_batch(Var boxes, const GridSpec& grid) {
  const auto& s = boxes.shape();
  if (s.size() != 2 || s[1] != 4) throw ShapeError("grid_overlap: boxes must be [K x 4], got " + shape_str(s));
  const std::size_t K = s[0], H = grid.rows, W = grid.cols, N = H * W;
  const double area = grid.cell_w * grid.cell_h;
  const auto& b = boxes.value().data;
  for (std::size_t k = 0; k < K; ++k)
    if (!(b[4 * k + 2] > b[4 * k] && b[4 * k + 3] > b[4 * k + 1]))
      throw ContractError("grid_overlap: degenerate box " + std::to_string(k));

  Tensor out({K, H, W});
  for (std::size_t k = 0; k < K; ++k) {
    const double x1 = b[4 * k], y1 = b[4 * k + 1], x2 = b[4 * k + 2], y2 = b[4 * k + 3];
    const auto [i0, i1] = cell_range(y1, y2, grid.origin_y, grid.cell_h, H);
    const auto [j0, j1] = cell_range(x1, x2, grid.origin_x, grid.cell_w, W);
    for (std::size_t i = i0; i < i1; ++i)
      for (std::size_t j = j0; j < j1; ++j) {
        const Box c = grid.cell(i, j);
        const double w = std::min(x2, c.x2) - std::max(x1, c.x1);
        const double h = std::min(y2, c.y2) - std::max(y1, c.y1);
        out.data[k * N + i * W + j] = std::max(0.0, w) * std::max(0.0, h) / area;
      }
  }

  return boxes.tape().record(std::move(out), {boxes}, [boxes, grid, K, H, W, N, area](Tape& t, Var o) {
    const auto& g = t.grad(o);
    const auto& b = t.value(boxes).data;
    auto& gb = t.grad(boxes);
    for (std::size_t k = 0; k < K; ++k) {
      const double x1 = b[4 * k], y1 = b[4 * k + 1], x2 = b[4 * k + 2], y2 = b[4 * k + 3];
      const auto [i0, i1] = cell_range(y1, y2, grid.origin_y, grid.cell_h, H);
      const auto [j0, j1] = cell_range(x1, x2, grid.origin_x, grid.cell_w, W);
      double g1x = 0, g1y = 0, g2x = 0, g2y = 0;
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) {
          const double go = g[k * N + i * W + j];
          if (go == 0.0) continue;
          const Box c = grid.cell(i, j);
          // max/min pick the first argument on ties; max(0, .) selects 0 when
          // the side is not positive
          const double w = std::min(x2, c.x2) - std::max(x1, c.x1);
          const double h = std::min(y2, c.y2) - std::max(y1, c.y1);
          if (!(w > 0.0) || !(h > 0.0)) continue;
          const double gw = go * h / area, gh = go * w / area;
          if (x1 >= c.x1) g1x -= gw;
          if (x2 <= c.x2) g2x += gw;
          if (y1 >= c.y1) g1y -= gh;
          if (y2 <= c.y2) g2y += gh;
        }
      gb[4 * k] += g1x;
      gb[4 * k + 1] += g1y;
      gb[4 * k + 2] += g2x;
      gb[4 * k + 3] += g2y;
    }
  });
}

Var grid_overlap(Var box, const GridSpec& grid) {
  if (box.numel() != 4) throw ShapeError("grid_overlap: box must have 4 coordinates");
  return reshape(grid_overlap_batch(reshape(box, {1, 4}), grid), {grid.rows, grid.cols});
}

Var suppress_duplicates(Var maps, Var scores, std::vector<int>* provenance) {
  const auto& s = maps.shape();
  if (s.size() != 3) throw ShapeError("suppress_duplicates: maps must be [K x H x W]");
  const std::size_t K = s[0], N = s[1] * s[2];
  if (scores.numel() != K)
    throw ContractError("suppress_duplicates: " + std::to_string(K) + " maps but " + std::to_string(scores.numel()) +
                        " scores");
  const auto& m = maps.value().data;
  const auto& sc = scores.value().data;
  auto winner = std::make_shared<std::vector<int>>(N, -1);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t c = 0; c < N; ++c)
      if (m[k * N + c] > 0.0 && ((*winner)[c] < 0 || sc[k] > sc[static_cast<std::size_t>((*winner)[c])]))
        (*winner)[c] = static_cast<int>(k);
  Tensor out(s);
  for (std::size_t c = 0; c < N; ++c)
    if ((*winner)[c] >= 0) {
      const std::size_t idx = static_cast<std::size_t>((*winner)[c]) * N + c;
      out.data[idx] = m[idx];
    }
  if (provenance) *provenance = *winner;
  return maps.tape().record(std::move(out), {maps}, [maps, winner, N](Tape& t, Var o) {
    const auto& g = t.grad(o);
    auto& gm = t.grad(maps);
    for (std::size_t c = 0; c < N; ++c)
      if ((*winner)[c] >= 0) {
        const std::size_t idx = static_cast<std::size_t>((*winner)[c]) * N + c;
        gm[idx] += g[idx];
      }
  });
}

Var aggregate_mask(Var maps, Var scores, double th) {
  const auto& s = maps.shape();
  if (s.size() != 3) throw ShapeError("aggregate_mask: maps must be [K x H x W]");
  const std::size_t K = s[0], N = s[1] * s[2];
  if (scores.numel() != K) throw ContractError("aggregate_mask: map/score count mismatch");
  const auto& m = maps.value().data;
  const auto& sc = scores.value().data;
  Tensor out({s[1], s[2]});
  for (std::size_t k = 0; k < K; ++k) {
    if (!(sc[k] >= th)) continue;
    for (std::size_t c = 0; c < N; ++c) out.data[c] += sc[k] * m[k * N + c];
  }
  return maps.tape().record(std::move(out), {maps, scores}, [maps, scores, th, K, N](Tape& t, Var o) {
    const auto& g = t.grad(o);
    const auto& m = t.value(maps).data;
    const auto& sc = t.value(scores).data;
    const bool gm = t.requires_grad(maps), gs = t.requires_grad(scores);
    for (std::size_t k = 0; k < K; ++k) {
      if (!(sc[k] >= th)) continue;
      if (gm) {
        auto& dm = t.grad(maps);
        for (std::size_t c = 0; c < N; ++c) dm[k * N + c] += g[c] * sc[k];
      }
      if (gs) {
        double acc = 0.0;
        for (std::size_t c = 0; c < N; ++c) acc += g[c] * m[k * N + c];
        t.grad(scores)[k] += acc;
      }
    }
  });
}

RegionMask region_mask(Var boxes, Var scores, const GridSpec& grid, double th, bool detach_boxes) {
  if (detach_boxes) boxes = detach(boxes);
  RegionMask rm;
  rm.threshold_used = th;
  Var maps = grid_overlap_batch(boxes, grid);
  Var kept = suppress_duplicates(maps, scores, &rm.provenance);
  rm.grid = aggregate_mask(kept, scores, th);
  const auto& sc = scores.value().data;
  for (double v : sc)
    if (v >= th) rm.max_score = std::max(rm.max_score, v);
  return rm;
}

RegionMask mask_from_single_box(Var box, const GridSpec& grid) {
  Tape& t = box.tape();
  return region_mask(reshape(box, {1, 4}), t.constant(Tensor({1}, 1.0)), grid, 0.0);
}

RegionMask mask_from_single_box(Tape& tape, const Box& box, const GridSpec& grid) {
  return mask_from_single_box(tape.constant(Tensor({4}, {box.x1, box.y1, box.x2, box.y2})), grid);
}

void write_matrix(const std::vector<double>& values, std::size_t rows, std::size_t cols,
                  const std::filesystem::path& path) {
  if (values.size() != rows * cols) throw ShapeError("write_matrix: size mismatch");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  char buf[32];
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      std::snprintf(buf, sizeof(buf), "%.4f", values[i * cols + j]);
      os << (j ? " " : "") << buf;
    }
    os << '\n';
  }
}

}  // namespace ulast
