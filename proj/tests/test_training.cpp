#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "ulast/error.hpp"
#include "ulast/training.hpp"

using namespace ulast;

namespace {

// Exhaustive ATSS: score every anchor, sort all of them, no partial sort.
std::vector<std::size_t> atss_reference(const std::vector<Box>& anchors, const Box& label, std::size_t topk) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t k = 0; k < anchors.size(); ++k)
    d.push_back({std::hypot(anchors[k].cx() - label.cx(), anchors[k].cy() - label.cy()), k});
  std::sort(d.begin(), d.end());
  d.resize(std::min(topk, d.size()));
  auto overlap = [](const Box& a, const Box& b) {
    const double w = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double h = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    return w * h / (a.area() + b.area() - w * h);
  };
  std::vector<double> v;
  for (auto& [_, k] : d) v.push_back(overlap(anchors[k], label));
  double m = 0, q = 0;
  for (double x : v) m += x;
  m /= double(v.size());
  for (double x : v) q += (x - m) * (x - m);
  const double thr = m + (v.size() > 1 ? std::sqrt(q / double(v.size() - 1)) : 0.0);
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Box& a = anchors[d[i].second];
    if (v[i] >= thr && v[i] > 0 && a.cx() > label.x1 && a.cx() < label.x2 && a.cy() > label.y1 && a.cy() < label.y2)
      pos.push_back(d[i].second);
  }
  std::sort(pos.begin(), pos.end());
  return pos;
}

SyntheticSequence seq10(std::uint64_t seed) {
  SceneSpec s;
  s.n_frames = 10;
  return generate_sequence(s, seed);
}

TrainConfig small_cfg() {
  TrainConfig c;
  c.batch = 2;
  c.legacy_epochs = 1;
  c.cycle_epochs = 1;
  c.steps_per_epoch = 2;
  c.n_eval_sequences = 1;
  c.eval_frames = 6;
  c.n_train_sequences = 4;
  return c;
}

}  // namespace

TEST_CASE("learning-rate schedule endpoints and log-linearity") {
  TrainConfig c;
  c.legacy_epochs = 2;
  c.cycle_epochs = 3;
  c.steps_per_epoch = 10;
  CHECK(learning_rate(c, 0) == 1e-3);
  CHECK(learning_rate(c, 49) == 5e-5);
  const double mid = learning_rate(c, 24) * learning_rate(c, 25);
  CHECK(mid == doctest::Approx(1e-3 * 5e-5).epsilon(1e-3));
  for (std::size_t s = 1; s < 50; ++s) CHECK(learning_rate(c, s) < learning_rate(c, s - 1));
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.gamma = 1.0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.lambda_c = 1.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.beta_factor = 0.0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.alpha = 0.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
  CHECK_NOTHROW(validate(TrainConfig{}));
}

TEST_CASE("atss on a 3x3x2 grid matches the exhaustive reference") {
  const auto g = build_anchors(3, 3, 4.0, {0.5, 2.0}, 4.0, 16.0);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> c(2, 14), s(2, 14);
  std::size_t with_pos = 0;
  for (int n = 0; n < 300; ++n) {
    const Box label = Box::from_center(c(rng), c(rng), s(rng), s(rng));
    for (std::size_t topk : {1u, 4u, 9u, 18u}) {
      const auto a = atss_assign(g, label, topk);
      CHECK(a.positives == atss_reference(g.anchors, label, topk));
      CHECK(a.positives.size() <= topk);
      with_pos += !a.positives.empty();
    }
  }
  CHECK(with_pos > 0);
}

TEST_CASE("atss: anchor-shaped label is positive") {
  const auto g = build_anchors(9, 9, 4.0, {0.33, 0.5, 1.0, 2.0, 3.0}, 4.0, 64.0);
  for (std::size_t k : {0u, 40u, 200u, 404u}) {
    const auto a = atss_assign(g, g.anchors[k]);
    CHECK(a.positive[k] == 1);
    CHECK(a.positives.size() <= 15);
    for (double d : a.target_deltas[k]) CHECK(std::abs(d) < 1e-12);
  }
  CHECK_THROWS_AS(atss_assign(g, Box{5, 5, 4, 9}), ContractError);
}

TEST_CASE("focal loss closed forms") {
  AssignedTargets t;
  t.positive = {1, 0, 0};
  t.positives = {0};
  t.target_deltas.assign(3, {0, 0, 0, 0});
  Tape tape;
  // p = 0.5 on the positive, negatives pushed to p ~ 0
  const Var x = tape.leaf(Tensor({3}, {0.0, -60.0, -60.0}));
  CHECK(focal_loss(x, t, 2.0, 0.25).value().item() == doctest::Approx(-0.25 * 0.25 * std::log(0.5)).epsilon(1e-12));
  CHECK(-0.25 * 0.25 * std::log(0.5) == doctest::Approx(0.04333).epsilon(1e-4));

  // gamma 0, alpha 0.5 is half the cross-entropy
  const Var y = tape.leaf(Tensor({3}, {0.7, -0.3, 1.2}));
  auto sig = [](double v) { return 1 / (1 + std::exp(-v)); };
  const double ce = -std::log(sig(0.7)) - std::log(1 - sig(-0.3)) - std::log(1 - sig(1.2));
  CHECK(focal_loss(y, t, 0.0, 0.5).value().item() == doctest::Approx(0.5 * ce).epsilon(1e-12));

  // confident and right
  const Var z = tape.leaf(Tensor({3}, {40.0, -40.0, -40.0}));
  CHECK(focal_loss(z, t, 2.0, 0.25).value().item() < 1e-30);

  CHECK(grad_check([&](Tape&, Var v) { return focal_loss(v, t, 2.0, 0.25); }, Tensor({3}, {0.3, -1.1, 2.0})) < 1e-7);
}

TEST_CASE("l1 regression loss") {
  AssignedTargets t;
  t.positive = {0, 1, 1};
  t.positives = {1, 2};
  t.target_deltas = {{9, 9, 9, 9}, {0.1, 0.2, 0.3, 0.4}, {-1, 0, 1, 2}};
  Tape tape;
  Tensor d({3, 4});
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t c = 0; c < 4; ++c) d.data[4 * k + c] = t.target_deltas[k][c];
  CHECK(l1_reg_loss(tape.leaf(d), t).value().item() == 0.0);
  for (auto& v : d.data) v += 0.5;
  CHECK(l1_reg_loss(tape.leaf(d), t).value().item() == doctest::Approx(0.5).epsilon(1e-12));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  double ref = 0;
  for (std::size_t k = 1; k < 3; ++k)
    for (std::size_t c = 0; c < 4; ++c) {
      d.data[4 * k + c] = n(rng);
      ref += std::abs(d.data[4 * k + c] - t.target_deltas[k][c]) / 8;
    }
  CHECK(std::abs(l1_reg_loss(tape.leaf(d), t).value().item() - ref) <= 1e-12);
  AssignedTargets none;
  none.positive.assign(3, 0);
  CHECK(l1_reg_loss(tape.leaf(d), none).value().item() == 0.0);
  CHECK_THROWS_AS(l1_reg_loss(tape.leaf(Tensor({2, 4})), t), ShapeError);
}

TEST_CASE("base loss combines with the configured weights and reaches both heads") {
  Model m({}, 3);
  const auto seq = seq10(3);
  std::mt19937_64 rng(1);
  TrainConfig cfg;
  const auto pair = make_legacy_pair(seq.frames[0], seq.gt_boxes[0], seq.gt_boxes[0], m.config(), cfg, rng);
  Tape t;
  Bound net(t, m);
  const auto p = rpn_forward(net, encode(net, pair.template_patch.image), encode(net, pair.search_patch.image));
  const auto b = base_loss(p, m.anchors(), pair.label, cfg);
  CHECK(b.total.value().item() == doctest::Approx(10.0 * b.cls.value().item() + 1.2 * b.reg.value().item()).epsilon(1e-14));
  t.backward(b.total);
  auto mag = [&](const char* n) {
    double s = 0;
    for (double v : net[n].grad()) s += std::abs(v);
    return s;
  };
  CHECK(mag("rpn.cls.w") > 0);
  CHECK(mag("rpn.reg.w") > 0);
}

TEST_CASE("reweight formula") {
  CHECK(reweight_from_ratio(2.0, 5.0, 7.0) == 1.0);
  CHECK(reweight_from_ratio(1.0, 5.0, 7.0) == doctest::Approx(1.1132827525593785).epsilon(1e-14));
  CHECK(reweight_from_ratio(6.0, 5.0, 7.0) == 0.0);
  CHECK(reweight_from_ratio(9.0, 5.0, 7.0) == 0.0);
  double prev = 1e9;
  for (double r = 0; r <= 10.0; r += 0.01) {
    const double w = reweight_from_ratio(r, 5.0, 7.0);
    CHECK(w >= 0.0);
    CHECK(w <= prev);
    prev = w;
  }
}

TEST_CASE("reweight counts cells against beta") {
  TrainConfig c;
  std::vector<double> pred(16, 0.0), label(16, 0.0);
  for (int i = 0; i < 4; ++i) label[i] = 1.0;
  for (int i = 0; i < 8; ++i) pred[i] = 0.9;
  auto r = reweight(pred, label, 0.9, c);
  CHECK(r.n_pred == 8);
  CHECK(r.n_label == 4);
  CHECK(r.ratio == 2.0);
  CHECK(r.weight == 1.0);
  // a wider high-response area lowers the weight
  for (int i = 0; i < 12; ++i) pred[i] = 0.9;
  CHECK(reweight(pred, label, 0.9, c).weight < 1.0);
  // empty label mask floors the denominator at one cell
  r = reweight(pred, std::vector<double>(16, 0.0), 0.9, c);
  CHECK(r.n_label == 0);
  CHECK(r.ratio == 12.0);
  CHECK(r.weight == 0.0);
  CHECK_THROWS_AS(reweight(pred, std::vector<double>(4), 0.9, c), ShapeError);
}

TEST_CASE("legacy pair places the label inside the search patch") {
  const auto seq = seq10(5);
  TrainConfig cfg;
  NetConfig net;
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto p = make_legacy_pair(seq.frames[0], seq.gt_boxes[0], seq.gt_boxes[0], net, cfg, rng);
    CHECK(p.template_patch.image.height == 32);
    CHECK(p.search_patch.image.height == 64);
    CHECK(p.label.cx() > 0);
    CHECK(p.label.cx() < 64);
    const Box back = p.search_patch.transform.to_frame(p.label);
    CHECK(back.x1 == doctest::Approx(seq.gt_boxes[0].x1));
  }
}

TEST_CASE("cycle with lambda_c = 0 equals the single-frame loss") {
  Model m({}, 4);
  const auto seq = seq10(6);
  const auto sample = sample_palindrome(seq, 3, 3, 1, 0.2);
  TrainConfig cfg;
  cfg.lambda_c = 0.0;
  Tape t1;
  const auto c = cycle_forward(Bound(t1, m), sample, cfg, false, 77);
  std::mt19937_64 rng(77);
  const auto pair = make_legacy_pair(sample.template_frame(), sample.pseudo_label.box, sample.pseudo_label.box,
                                     m.config(), cfg, rng);
  Tape t2;
  const auto l = legacy_forward(Bound(t2, m), pair, cfg);
  CHECK(c.total.value().item() == l.loss.value().item());
}

TEST_CASE("cycle visits the palindrome and ends on frame one") {
  Model m({}, 4);
  const auto sample = sample_palindrome(seq10(7), 3, 3, 1, 0.2);
  Tape t;
  const auto c = cycle_forward(Bound(t, m), sample, TrainConfig{}, false, 5);
  CHECK(c.visits == std::vector<std::size_t>{2, 3, 4, 3, 2, 1});
  CHECK(c.kernels.size() == 6);
  CHECK(c.boxes.size() == 5);
  CHECK(std::isfinite(c.total.value().item()));
}

TEST_CASE("detach changes gradients, not values") {
  Model m({}, 8);
  const auto sample = sample_palindrome(seq10(8), 3, 3, 1, 0.2);
  std::vector<double> loss(2), box_grad(2);
  for (int d = 0; d < 2; ++d) {
    Tape t;
    const auto c = cycle_forward(Bound(t, m), sample, TrainConfig{}, d == 1, 5);
    t.backward(c.total);
    loss[d] = c.total.value().item();
    for (std::size_t i = 0; i + 1 < c.boxes.size(); ++i)
      for (double g : c.boxes[i].grad()) box_grad[d] = std::max(box_grad[d], std::abs(g));
  }
  CHECK(loss[0] == loss[1]);
  CHECK(box_grad[1] == 0.0);
  CHECK(box_grad[0] > 1e-8);
}

TEST_CASE("batched steps are independent of thread count") {
  Model a({}, 2), b({}, 2);
  const auto seq = seq10(9), seq2 = seq10(10);
  std::vector<CycleSample> batch{sample_palindrome(seq, 3, 3, 1, 0.2), sample_palindrome(seq2, 3, 3, 2, 0.2)};
  TrainConfig c1;
  TrainConfig c2;
  c2.threads = 2;
  const auto s1 = cycle_step(a, batch, {11, 12}, c1);
  const auto s2 = cycle_step(b, batch, {11, 12}, c2);
  CHECK(s1.loss == s2.loss);
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params().items()[i].tensor.grad == b.params().items()[i].tensor.grad);
  CHECK_THROWS_AS(cycle_step(a, batch, {1}, c1), ContractError);
  CHECK_THROWS_AS(legacy_step(a, {}, c1), ContractError);
}

TEST_CASE("legacy step with unit weights is the mean base loss") {
  Model m({}, 3);
  const auto seq = seq10(12);
  TrainConfig cfg;
  cfg.reloss = false;
  std::mt19937_64 rng(4);
  std::vector<LegacyPair> batch;
  for (int i = 0; i < 3; ++i)
    batch.push_back(make_legacy_pair(seq.frames[0], seq.gt_boxes[0], seq.gt_boxes[0], m.config(), cfg, rng));
  double ref = 0;
  for (const auto& p : batch) {
    Tape t;
    ref += legacy_forward(Bound(t, m), p, cfg).base.total.value().item() / 3;
  }
  CHECK(legacy_step(m, batch, cfg).loss == doctest::Approx(ref).epsilon(1e-14));
  const auto one = legacy_step(m, {batch[0]}, cfg);
  Tape t;
  CHECK(one.loss == legacy_forward(Bound(t, m), batch[0], cfg).loss.value().item());
}

TEST_CASE("training loop is deterministic and logs every step") {
  const TrainConfig cfg = small_cfg();
  SceneSpec scene;
  std::ostringstream log1, log2, met;
  Model a({}, cfg.seed), b({}, cfg.seed);
  TrainHooks h1;
  h1.step_log = &log1;
  h1.metrics_log = &met;
  TrainHooks h2;
  h2.step_log = &log2;
  h2.evaluate_epochs = false;
  std::size_t calls = 0;
  h2.on_step = [&](std::size_t) { ++calls; };
  const auto r = train(a, cfg, scene, TrackerConfig{}, h1);
  train(b, cfg, scene, TrackerConfig{}, h2);
  CHECK(r.steps == 4);
  CHECK(calls == 4);
  CHECK(log1.str() == log2.str());
  const std::string steps = log1.str(), metrics = met.str();
  CHECK(std::count(steps.begin(), steps.end(), '\n') == 4);
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 2);
  CHECK(met.str().find("\"mean_iou\"") != std::string::npos);
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params().items()[i].tensor.data == b.params().items()[i].tensor.data);
}

TEST_CASE("zero epochs leave the weights untouched") {
  TrainConfig cfg = small_cfg();
  cfg.legacy_epochs = cfg.cycle_epochs = 0;
  Model a({}, 1), b({}, 1);
  train(a, cfg, SceneSpec{}, TrackerConfig{});
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params().items()[i].tensor.data == b.params().items()[i].tensor.data);
}

TEST_CASE("seed helpers") {
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(mix_seed(1, 2, 3) != mix_seed(1, 2, 4));
  TrainConfig c;
  CHECK(training_scene(SceneSpec{}, c).n_frames == 10);
  const auto ev = eval_sequences(SceneSpec{}, small_cfg());
  CHECK(ev.size() == 1);
  CHECK(ev[0].frames.size() == 6);
}
