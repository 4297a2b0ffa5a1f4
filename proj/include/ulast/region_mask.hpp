#pragma once

// Differentiable region mask: every candidate box paints the fraction of each
// grid cell it covers; per cell only the highest-scoring covering box
// survives; the survivors are weighted by their scores and summed.

#include <filesystem>
#include <vector>

#include "ulast/geometry.hpp"
#include "ulast/tensor.hpp"

namespace ulast {

struct GridSpec {
  std::size_t rows = 0, cols = 0;
  double cell_w = 1, cell_h = 1;
  double origin_x = 0, origin_y = 0;

  Box cell(std::size_t i, std::size_t j) const {
    return {origin_x + static_cast<double>(j) * cell_w, origin_y + static_cast<double>(i) * cell_h,
            origin_x + static_cast<double>(j + 1) * cell_w, origin_y + static_cast<double>(i + 1) * cell_h};
  }
};

// boxes [K x 4] -> [K x rows x cols] overlap fractions. Throws ContractError
// on a degenerate box.
Var grid_overlap_batch(Var boxes, const GridSpec& grid);
// box [4] -> [rows x cols].
Var grid_overlap(Var box, const GridSpec& grid);

// Per cell, keeps the value of the highest-scoring box among those with a
// positive value there (lowest index on ties) and zeroes the rest. The
// selection is constant under differentiation. `provenance` (optional)
// receives the winning box per cell, or -1.
Var suppress_duplicates(Var maps, Var scores, std::vector<int>* provenance = nullptr);

// M = sum_k [s_k >= th] * s_k * maps_k. Result [rows x cols].
Var aggregate_mask(Var maps, Var scores, double th);

struct RegionMask {
  Var grid;                     // [rows x cols]
  double threshold_used = 0.0;
  double max_score = 0.0;       // largest score among the contributing candidates
  std::vector<int> provenance;  // per cell: contributing box or -1
};

// Full pipeline over K candidates. With `detach_boxes` the box coordinates
// receive no gradient; scores still do.
RegionMask region_mask(Var boxes, Var scores, const GridSpec& grid, double th, bool detach_boxes = false);

// Mask of one box with unit score and zero threshold.
RegionMask mask_from_single_box(Var box, const GridSpec& grid);
RegionMask mask_from_single_box(Tape& tape, const Box& box, const GridSpec& grid);

// One row per line, values with four decimals.
void write_matrix(const std::vector<double>& values, std::size_t rows, std::size_t cols,
                  const std::filesystem::path& path);

}  // namespace ulast
