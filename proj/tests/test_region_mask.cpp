#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "ulast/error.hpp"
#include "ulast/region_mask.hpp"

using namespace ulast;

namespace {

GridSpec grid9() {
  GridSpec g;
  g.rows = g.cols = 9;
  g.cell_w = g.cell_h = 4;
  g.origin_x = 2;
  g.origin_y = -1;
  return g;
}

// Point sampling at n x n cell sub-centres.
double raster(const Box& b, const Box& cell, int n) {
  int hit = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double x = cell.x1 + (j + 0.5) * cell.width() / n, y = cell.y1 + (i + 0.5) * cell.height() / n;
      hit += (x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2);
    }
  return double(hit) / (n * n);
}

Tensor boxes_tensor(const std::vector<Box>& bs) {
  Tensor t({bs.size(), 4});
  for (std::size_t k = 0; k < bs.size(); ++k) {
    t.data[4 * k] = bs[k].x1;
    t.data[4 * k + 1] = bs[k].y1;
    t.data[4 * k + 2] = bs[k].x2;
    t.data[4 * k + 3] = bs[k].y2;
  }
  return t;
}

}  // namespace

TEST_CASE("overlap matches a raster on random boxes") {
  const auto g = grid9();
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(-4, 42);
  for (int n = 0; n < 50; ++n) {
    double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    const Box box{std::min(a, b), std::min(c, d), std::max(a, b) + 0.1, std::max(c, d) + 0.1};
    Tape t;
    const auto m = grid_overlap(t.constant(Tensor({4}, {box.x1, box.y1, box.x2, box.y2})), g).value();
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t j = 0; j < 9; ++j) CHECK(std::abs(m.data[i * 9 + j] - raster(box, g.cell(i, j), 200)) <= 1e-2);
  }
}

TEST_CASE("cell fully inside and fully outside") {
  const auto g = grid9();
  Tape t;
  const auto m = grid_overlap(t.constant(Tensor({4}, {g.cell(3, 3).x1, g.cell(3, 3).y1, g.cell(4, 5).x2, g.cell(4, 5).y2})), g).value();
  double s = 0;
  for (double v : m.data) s += v;
  CHECK(s == doctest::Approx(6.0));
  CHECK(m.data[3 * 9 + 3] == 1.0);
  CHECK(m.data[0] == 0.0);
}

TEST_CASE("degenerate and malformed boxes") {
  Tape t;
  CHECK_THROWS_AS(grid_overlap(t.constant(Tensor({4}, {5, 5, 5, 9})), grid9()), ContractError);
  CHECK_THROWS_AS(grid_overlap(t.constant(Tensor({3}, {5, 5, 5})), grid9()), ShapeError);
  CHECK_THROWS_AS(grid_overlap_batch(t.constant(Tensor({2, 3})), grid9()), ShapeError);
}

TEST_CASE("suppression keeps the best covering box per cell") {
  GridSpec g;
  g.rows = 1;
  g.cols = 3;
  Tape t;
  // box 0 covers cells 0-1, box 1 covers cells 1-2, box 2 duplicates box 1 at equal score
  const Var maps = grid_overlap_batch(t.constant(boxes_tensor({{0, 0, 2, 1}, {1, 0, 3, 1}, {1, 0, 3, 1}})), g);
  const Var sc = t.constant(Tensor({3}, {0.6, 0.8, 0.8}));
  std::vector<int> prov;
  const auto kept = suppress_duplicates(maps, sc, &prov).value();
  CHECK(prov == std::vector<int>{0, 1, 1});
  CHECK(kept.data == std::vector<double>{1, 0, 0, 0, 1, 1, 0, 0, 0});
  const auto rm = region_mask(t.constant(boxes_tensor({{0, 0, 2, 1}, {1, 0, 3, 1}})), t.constant(Tensor({2}, {0.6, 0.8})), g, 0.0);
  CHECK(rm.grid.value().data == std::vector<double>{0.6, 0.8, 0.8});
  CHECK(rm.max_score == 0.8);
  CHECK_THROWS_AS(suppress_duplicates(maps, t.constant(Tensor({2})), nullptr), ContractError);
}

TEST_CASE("threshold removes low-score boxes and sum never grows") {
  const auto g = grid9();
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> pos(0, 30), side(2, 12), sc(0, 1);
  std::vector<Box> bs;
  Tensor scores({40});
  for (std::size_t k = 0; k < 40; ++k) {
    const double x = pos(rng), y = pos(rng);
    bs.push_back({x, y, x + side(rng), y + side(rng)});
    scores.data[k] = sc(rng);
  }
  double prev = 1e300;
  for (double th : {0.0, 0.25, 0.5, 0.75, 0.9, 1.0}) {
    Tape t;
    const auto rm = region_mask(t.constant(boxes_tensor(bs)), t.constant(scores), g, th);
    double s = 0;
    for (double v : rm.grid.value().data) s += v;
    CHECK(s <= prev);
    prev = s;
    CHECK(rm.threshold_used == th);
  }
}

TEST_CASE("mask gradients match finite differences") {
  const auto g = grid9();
  const Tensor b = boxes_tensor({{5.3, 6.1, 17.7, 14.2}, {12.9, 3.3, 30.6, 21.4}, {22.2, 19.1, 35.5, 33.7}});
  const Tensor s({3}, {0.7, 0.55, 0.9});
  const Tensor w = [] {
    Tensor t({9, 9});
    for (std::size_t i = 0; i < 81; ++i) t.data[i] = std::sin(0.37 * double(i)) + 1.1;
    return t;
  }();
  CHECK(grad_check([&](Tape& t, Var x) { return sum(mul(region_mask(x, t.constant(s), g, 0.0).grid, t.constant(w))); }, b) <
        1e-6);
  CHECK(grad_check([&](Tape& t, Var x) { return sum(mul(region_mask(t.constant(b), x, g, 0.0).grid, t.constant(w))); }, s) <
        1e-6);
}

TEST_CASE("detached boxes get no gradient but keep values") {
  const auto g = grid9();
  const Tensor b = boxes_tensor({{5.3, 6.1, 17.7, 14.2}, {12.9, 3.3, 30.6, 21.4}});
  const Tensor s({2}, {0.7, 0.55});
  std::vector<double> vals[2], bgrad[2], sgrad[2];
  for (int d = 0; d < 2; ++d) {
    Tape t;
    Var bv = t.leaf(b), sv = t.leaf(s);
    const auto rm = region_mask(bv, sv, g, 0.0, d == 1);
    t.backward(sum(rm.grid));
    vals[d] = rm.grid.value().data;
    bgrad[d] = bv.grad();
    sgrad[d] = sv.grad();
  }
  CHECK(vals[0] == vals[1]);
  for (double v : bgrad[1]) CHECK(v == 0.0);
  double mag = 0;
  for (double v : bgrad[0]) mag += std::abs(v);
  CHECK(mag > 1e-8);
  CHECK(sgrad[0] == sgrad[1]);
}

TEST_CASE("single-box mask and matrix export") {
  const auto g = grid9();
  Tape t;
  const auto rm = mask_from_single_box(t, Box{6, 3, 14, 11}, g);
  double s = 0;
  for (double v : rm.grid.value().data) s += v;
  CHECK(s == doctest::Approx(64.0 / 16.0));
  const auto p = std::filesystem::temp_directory_path() / "ulast_mask.txt";
  write_matrix(rm.grid.value().data, 9, 9, p);
  std::ifstream is(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) ++n;
  CHECK(n == 9);
  std::filesystem::remove(p);
  CHECK_THROWS_AS(write_matrix({1, 2, 3}, 2, 2, p), ShapeError);
}
