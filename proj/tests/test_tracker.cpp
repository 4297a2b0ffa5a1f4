#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "ulast/error.hpp"
#include "ulast/tracker.hpp"

using namespace ulast;

namespace {

MemoryEntry entry(double score, std::size_t frame) { return {Tensor({1}), Tensor({1}), score, frame}; }

// IoU by counting unit pixels; exact for integer corners.
double pixel_iou(const Box& a, const Box& b) {
  long inter = 0, ua = 0, ub = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const bool ia = px > a.x1 && px < a.x2 && py > a.y1 && py < a.y2;
      const bool ib = px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2;
      inter += ia && ib;
      ua += ia;
      ub += ib;
    }
  return double(inter) / double(ua + ub - inter);
}

SyntheticSequence seq(std::size_t frames, std::uint64_t seed) {
  SceneSpec s;
  s.n_frames = frames;
  return generate_sequence(s, seed);
}

}  // namespace

TEST_CASE("fusion endpoints are exact and the middle is linear") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> l(405), m(405);
  for (auto& v : l) v = u(rng);
  for (auto& v : m) v = u(rng);
  CHECK(fuse_maps(l, m, 0.0) == l);
  CHECK(fuse_maps(l, m, 1.0) == m);
  const auto f = fuse_maps(l, m, 0.3);
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(std::abs(f[i] - (0.7 * l[i] + 0.3 * m[i])) <= 1e-12);
  CHECK_THROWS_AS(fuse_maps(l, {1.0}, 0.5), ShapeError);
}

TEST_CASE("memory queue keeps the pin and the best scores") {
  MemoryQueue q(3);
  CHECK(q.offer(entry(1.0, 0)));
  CHECK(q.offer(entry(0.5, 1)));
  CHECK(q.offer(entry(0.6, 2)));
  CHECK(q.size() == 3);
  CHECK_FALSE(q.offer(entry(0.4, 3)));   // below everything
  CHECK_FALSE(q.offer(entry(0.5, 4)));   // equal to the minimum: older kept
  CHECK(q.offer(entry(0.7, 5)));
  CHECK(q.entries()[0].frame == 0);
  CHECK(q.entries()[1].frame == 5);
  CHECK(q.entries()[2].frame == 2);
  // pinned entry survives even with the lowest score
  MemoryQueue p(2);
  p.offer(entry(0.01, 0));
  p.offer(entry(0.5, 1));
  CHECK(p.offer(entry(0.9, 2)));
  CHECK(p.entries()[0].frame == 0);
  MemoryQueue one(1);
  CHECK(one.offer(entry(0.1, 0)));
  CHECK_FALSE(one.offer(entry(0.9, 1)));
}

TEST_CASE("equal minima: the newest goes first") {
  MemoryQueue q(4);
  q.offer(entry(1.0, 0));
  q.offer(entry(0.3, 1));
  q.offer(entry(0.3, 2));
  q.offer(entry(0.8, 3));
  CHECK(q.offer(entry(0.5, 4)));
  CHECK(q.entries()[1].frame == 1);
  CHECK(q.entries()[2].frame == 4);
}

TEST_CASE("evaluate closed forms") {
  const Box a{0, 0, 1, 1}, b{0.5, 0, 1.5, 1};
  auto m = evaluate({a}, {b});
  CHECK(m.mean_iou == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  m = evaluate({a, b}, {a, b});
  CHECK(m.mean_iou == 1.0);
  CHECK(m.success_auc == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(m.precision == 1.0);
  // far off: zero overlap and no precision hit; only the t=0 threshold counts
  m = evaluate({Box{0, 0, 2, 2}}, {Box{30, 30, 32, 32}});
  CHECK(m.mean_iou == 0.0);
  CHECK(m.precision == 0.0);
  CHECK(m.success_auc == doctest::Approx(1.0 / 21.0));
  // centre error exactly at the radius counts
  CHECK(evaluate({Box{5, 0, 7, 2}}, {Box{0, 0, 2, 2}}).precision == 1.0);
  CHECK_THROWS_AS(evaluate({}, {}), ContractError);
  CHECK_THROWS_AS(evaluate({a}, {a, b}), ContractError);
}

TEST_CASE("evaluate against a pixel-count oracle") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> c(0, 40), s(1, 20);
  std::vector<Box> r, g;
  for (int i = 0; i < 200; ++i) {
    const double x = c(rng), y = c(rng);
    r.push_back({x, y, x + s(rng), y + s(rng)});
    const double x2 = c(rng) / 2.0 + 10, y2 = c(rng) / 2.0 + 10;
    g.push_back({std::floor(x2), std::floor(y2), std::floor(x2) + s(rng), std::floor(y2) + s(rng)});
  }
  const auto m = evaluate(r, g);
  double mean = 0, auc = 0;
  std::vector<double> ref;
  for (std::size_t i = 0; i < r.size(); ++i) ref.push_back(pixel_iou(r[i], g[i]));
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(std::abs(m.ious[i] - ref[i]) <= 1e-9);
    mean += ref[i] / double(r.size());
  }
  for (int t = 0; t <= 20; ++t)
    auc += double(std::count_if(ref.begin(), ref.end(), [&](double v) { return v >= t * 0.05 - 1e-12; })) / 200.0 / 21.0;
  CHECK(std::abs(m.mean_iou - mean) <= 1e-9);
  CHECK(std::abs(m.success_auc - auc) <= 1e-9);
}

TEST_CASE("cosine window peaks in the centre") {
  const auto g = build_anchors(9, 9, 4.0, {1.0, 2.0}, 4.0, 64.0);
  const auto w = cosine_window(g);
  CHECK(w.size() == g.count());
  CHECK(w[40] == doctest::Approx(1.0));
  CHECK(w[81 + 40] == doctest::Approx(1.0));
  CHECK(w[0] == doctest::Approx(0.0));
}

TEST_CASE("init seeds the queue and the memory kernel") {
  Model m({}, 1);
  const auto s = seq(4, 3);
  Tracker t(m);
  const auto st = t.init(s.frames[0], s.gt_boxes[0]);
  CHECK(st.initialized);
  CHECK(st.queue.size() == 1);
  CHECK(st.memory_kernel.shape == Shape{16, 8, 8});
  CHECK(st.hidden.data == st.legacy_kernel.data);
  const auto again = t.init(s.frames[0], s.gt_boxes[0]);
  CHECK(again.memory_kernel.data == st.memory_kernel.data);
  CHECK_THROWS_AS(t.init(s.frames[0], Box{5, 5, 5, 9}), ContractError);
  CHECK_THROWS_AS(t.init(s.frames[0], Box{500, 500, 510, 510}), ContractError);
  TrackerState blank;
  CHECK_THROWS_AS(t.track_frame(blank, s.frames[1]), ContractError);
}

TEST_CASE("offline mode makes no propagation calls and matches the legacy map") {
  Model m({}, 2);
  const auto s = seq(25, 4);
  TrackerConfig cfg;
  cfg.lambda_m = 0.0;
  Tracker off(m, cfg);
  auto st = off.init(s.frames[0], s.gt_boxes[0]);
  for (std::size_t f = 1; f < s.frames.size(); ++f) {
    const auto r = off.track_frame(st, s.frames[f]);
    CHECK(r.fused_map == r.legacy_map);
    CHECK(r.memory_map.empty());
  }
  CHECK(st.cpt_calls == 0);
  CHECK(st.queue.size() == 0);

  TrackerConfig nomem;
  nomem.use_memory = false;
  Tracker off2(m, nomem);
  auto st2 = off2.init(s.frames[0], s.gt_boxes[0]);
  off2.track_frame(st2, s.frames[1]);
  CHECK(st2.cpt_calls == 0);
}

TEST_CASE("online mode fuses and refreshes every interval") {
  Model m({}, 2);
  const auto s = seq(23, 5);
  TrackerConfig cfg;
  cfg.hidden_interval = 5;
  cfg.memory_capacity = 3;
  Tracker t(m, cfg);
  auto st = t.init(s.frames[0], s.gt_boxes[0]);
  const auto hidden0 = st.hidden.data;
  for (std::size_t f = 1; f < s.frames.size(); ++f) {
    const auto r = t.track_frame(st, s.frames[f]);
    const auto ref = fuse_maps(r.legacy_map, r.memory_map, 0.3);
    CHECK(r.fused_map == ref);
    CHECK(r.box.valid());
    CHECK(st.queue.size() <= 3);
    CHECK(st.queue.entries()[0].frame == 0);
  }
  CHECK(st.frame == 22);
  CHECK(st.hidden.data != hidden0);
  CHECK(st.queue.size() == 3);
  CHECK(st.cpt_calls > 0);
}

TEST_CASE("run_sequence starts from the initial box") {
  Model m({}, 2);
  const auto s = seq(6, 8);
  Tracker t(m);
  const auto run = run_sequence(t, s);
  CHECK(run.boxes.size() == 6);
  CHECK(run.boxes[0] == s.gt_boxes[0]);
  const auto met = evaluate_model(m, {s}, TrackerConfig{});
  CHECK(met.ious.size() == 5);
  // same weights, same sequence: identical
  CHECK(run_sequence(t, s).boxes == run.boxes);
}

TEST_CASE("queue stress keeps invariants") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0, 1);
  MemoryQueue q(6);
  q.offer(entry(1.0, 0));
  std::vector<double> offered;
  for (std::size_t f = 1; f <= 1000; ++f) {
    const double sc = std::round(u(rng) * 50) / 50;  // coarse scores force ties
    q.offer(entry(sc, f));
    offered.push_back(sc);
    REQUIRE(q.size() <= 6);
    REQUIRE(q.entries()[0].frame == 0);
    // the kept scores are the best ones offered so far
    std::vector<double> kept;
    for (std::size_t i = 1; i < q.size(); ++i) kept.push_back(q.entries()[i].score);
    std::sort(kept.rbegin(), kept.rend());
    std::vector<double> best = offered;
    std::sort(best.rbegin(), best.rend());
    best.resize(kept.size());
    REQUIRE(kept == best);
  }
}
