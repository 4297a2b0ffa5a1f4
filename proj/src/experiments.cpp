#include "ulast/experiments.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <random>
#include <sstream>

#include "ulast/error.hpp"
#include "ulast/region_mask.hpp"

namespace ulast {

// ---- gradient checks ---------------------------------------------------------

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.data) v = u(rng);
  return t;
}

// Weighted sum so that every output coordinate matters.
Var probe_sum(Var y, const Tensor& w) { return sum(mul(y, y.tape().constant(w))); }

// Box corners strictly inside cells (never on a cell edge).
Tensor interior_boxes(std::size_t k, const GridSpec& g, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cell_x(0, static_cast<int>(g.cols) - 1), cell_y(0, static_cast<int>(g.rows) - 1);
  std::uniform_real_distribution<double> frac(0.15, 0.85);
  Tensor t({k, 4});
  for (std::size_t i = 0; i < k; ++i) {
    int a = cell_x(rng), b = cell_x(rng), c = cell_y(rng), d = cell_y(rng);
    if (a == b) b = (a + 1) % static_cast<int>(g.cols);
    if (c == d) d = (c + 1) % static_cast<int>(g.rows);
    const double x1 = g.origin_x + (std::min(a, b) + frac(rng)) * g.cell_w;
    const double x2 = g.origin_x + (std::max(a, b) + frac(rng)) * g.cell_w;
    const double y1 = g.origin_y + (std::min(c, d) + frac(rng)) * g.cell_h;
    const double y2 = g.origin_y + (std::max(c, d) + frac(rng)) * g.cell_h;
    t.data[4 * i] = x1;
    t.data[4 * i + 1] = y1;
    t.data[4 * i + 2] = x2;
    t.data[4 * i + 3] = y2;
  }
  return t;
}

}  // namespace

std::vector<GradcheckResult> run_gradchecks(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradcheckResult> out;
  auto check = [&](const std::string& name, const GraphBuilder& f, const Tensor& x, double tol = 1e-4) {
    const double e = grad_check(f, x);
    out.push_back({name, e, tol, e <= tol});
  };

  {
    const Tensor w = random_tensor({3, 4}, rng);
    check("elementwise", [w](Tape&, Var x) {
      Var a = mul(sigmoid(x), exp(scale(x, 0.3)));
      Var b = log(add_scalar(mul(x, x), 1.0));
      return probe_sum(sub(add(a, b), scale(x, 0.5)), w);
    }, random_tensor({3, 4}, rng));
  }
  {
    const Tensor w = random_tensor({3, 3}, rng);
    check("matmul", [w](Tape&, Var x) { return probe_sum(matmul(x, transpose(x)), w); }, random_tensor({3, 4}, rng));
  }
  for (std::size_t axis : {0, 1}) {
    const Tensor w = random_tensor({4, 5}, rng);
    check("softmax_axis" + std::to_string(axis), [w, axis](Tape&, Var x) { return probe_sum(softmax_axis(x, axis), w); },
          random_tensor({4, 5}, rng, -2, 2));
  }
  {
    const Tensor wt = random_tensor({3, 2, 3, 3}, rng), probe = random_tensor({3, 3, 3}, rng);
    check("conv2d_input", [wt, probe](Tape& t, Var x) { return probe_sum(conv2d(x, t.constant(wt), 2, 1), probe); },
          random_tensor({2, 6, 6}, rng));
    const Tensor in = random_tensor({2, 6, 6}, rng);
    check("conv2d_weight", [in, probe](Tape& t, Var w) { return probe_sum(conv2d(t.constant(in), w, 2, 1), probe); },
          random_tensor({3, 2, 3, 3}, rng));
  }
  {
    const Tensor search = random_tensor({2, 6, 6}, rng), probe = random_tensor({2, 4, 4}, rng);
    check("dw_xcorr", [search, probe](Tape& t, Var k) { return probe_sum(dw_xcorr(k, t.constant(search)), probe); },
          random_tensor({2, 3, 3}, rng));
  }
  {
    const Tensor gain = random_tensor({3}, rng, 0.5, 1.5), bias = random_tensor({3}, rng), probe = random_tensor({3, 4, 4}, rng);
    check("norm_affine", [gain, bias, probe](Tape& t, Var x) {
      return probe_sum(norm_affine(x, t.constant(gain), t.constant(bias)), probe);
    }, random_tensor({3, 4, 4}, rng));
  }
  {
    GridSpec g{9, 9, 4.0, 4.0, 0.0, 0.0};
    const Tensor boxes = interior_boxes(6, g, rng);
    const Tensor scores = random_tensor({6}, rng, 0.05, 0.95);
    check("region_mask_boxes", [g, scores](Tape& t, Var b) {
      return sum(region_mask(b, t.constant(scores), g, 0.0).grid);
    }, boxes);
    check("region_mask_scores", [g, boxes](Tape& t, Var s) {
      return sum(region_mask(t.constant(boxes), s, g, 0.0).grid);
    }, scores);
  }
  {
    const AnchorGrid anchors = build_anchors(3, 3, 4.0, {0.5, 1.0, 2.0}, 4.0, 32.0);
    const Tensor probe = random_tensor({27, 4}, rng);
    check("decode_boxes", [anchors, probe](Tape&, Var d) { return probe_sum(decode_boxes(d, anchors, 32.0), probe); },
          random_tensor({27, 4}, rng, -0.2, 0.2));
  }
  {
    AssignedTargets tg;
    tg.positive.assign(12, 0);
    tg.target_deltas.assign(12, {0, 0, 0, 0});
    for (std::size_t k : {2, 5, 9}) {
      tg.positive[k] = 1;
      tg.positives.push_back(k);
      tg.target_deltas[k] = {0.7, -0.6, 0.8, -0.9};
    }
    check("focal_loss", [tg](Tape&, Var x) { return focal_loss(x, tg, 2.0, 0.25); }, random_tensor({12}, rng, -3, 3));
    check("l1_loss", [tg](Tape&, Var d) { return l1_reg_loss(d, tg); }, random_tensor({12, 4}, rng, -0.5, 0.5));
  }
  {
    NetConfig nc;
    nc.channels = 4;
    auto model = std::make_shared<Model>(nc, seed);
    const Tensor mask = random_tensor({16, 16}, rng, 0.0, 1.0);
    const Tensor t1 = random_tensor({4, 8, 8}, rng);
    const Tensor probe = random_tensor({4, 8, 8}, rng);
    check("cpt_forward", [model, mask, t1, probe](Tape& t, Var s) {
      Bound b(t, *model);
      Var tv = t.constant(t1);
      return probe_sum(cpt_forward(b, s, t.constant(mask), tv, tv).kernel, probe);
    }, random_tensor({4, 16, 16}, rng));
    const Tensor search = random_tensor({4, 16, 16}, rng);
    check("cpt_forward_mask", [model, search, t1, probe](Tape& t, Var m) {
      Bound b(t, *model);
      Var tv = t.constant(t1);
      return probe_sum(cpt_forward(b, t.constant(search), m, tv, tv).kernel, probe);
    }, mask);
  }
  return out;
}

// ---- studies -----------------------------------------------------------------

const ArmResult& ExperimentReport::at(const std::string& arm, std::uint64_t seed) const {
  for (const auto& r : rows)
    if (r.arm == arm && r.seed == seed) return r;
  throw ContractError("report has no row for arm '" + arm + "' seed " + std::to_string(seed));
}

std::string ExperimentReport::to_json() const {
  nlohmann::json j;
  j["experiment"] = name;
  j["settings"] = settings_json.empty() ? nlohmann::json(nullptr) : nlohmann::json::parse(settings_json);
  j["arms"] = arms;
  j["seeds"] = seeds;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows)
    j["rows"].push_back({{"arm", r.arm},
                         {"seed", r.seed},
                         {"mean_iou", r.mean_iou},
                         {"success_auc", r.success_auc},
                         {"precision", r.precision},
                         {"untrained_iou", r.untrained_iou},
                         {"steps", r.steps},
                         {"seconds", r.seconds}});
  return j.dump(2);
}

std::string ExperimentReport::to_markdown() const {
  std::ostringstream os;
  os << "| arm | seed | mean IoU | success AUC | precision | steps |\n|---|---|---|---|---|---|\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "| %s | %llu | %.4f | %.4f | %.4f | %zu |\n", r.arm.c_str(),
                  static_cast<unsigned long long>(r.seed), r.mean_iou, r.success_auc, r.precision, r.steps);
    os << buf;
  }
  for (const auto& arm : arms) {
    double m = 0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (r.arm == arm) m += r.mean_iou, ++n;
    if (n) {
      std::snprintf(buf, sizeof(buf), "| %s | mean | %.4f | | | |\n", arm.c_str(), m / static_cast<double>(n));
      os << buf;
    }
  }
  return os.str();
}

ArmResult run_arm(const RunConfig& cfg, const std::string& arm, std::uint64_t seed, bool evaluate_untrained) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  Model model(cfg.net, seed);
  TrainHooks hooks;
  hooks.evaluate_untrained = evaluate_untrained;
  hooks.evaluate_epochs = false;
  const TrackerConfig trk = tracker_config(cfg);
  TrainResult tr = train(model, tc, cfg.scene, trk, hooks);
  const Metrics m = evaluate_model(model, eval_sequences(cfg.scene, tc), trk);
  ArmResult r;
  r.arm = arm;
  r.seed = seed;
  r.mean_iou = m.mean_iou;
  r.success_auc = m.success_auc;
  r.precision = m.precision;
  r.untrained_iou = tr.untrained.mean_iou;
  r.steps = tr.steps;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

namespace {

using Mutator = std::function<void(RunConfig&)>;

struct Study {
  std::string name;
  std::vector<std::pair<std::string, Mutator>> arms;
};

const std::vector<Study>& studies() {
  static const std::vector<Study> s{
      {"detach",
       {{"detach_off", [](RunConfig& c) { c.train.detach_boxes = false; }},
        {"detach_on", [](RunConfig& c) { c.train.detach_boxes = true; }}}},
      {"residual",
       {{"residual_off", [](RunConfig& c) { c.train.cpt.residual = false; }},
        {"residual_on", [](RunConfig& c) { c.train.cpt.residual = true; }}}},
      {"lt_st",
       {{"lt_st", [](RunConfig& c) { c.train.cpt.terms = CptTerms::LongShort; }},
        {"lt", [](RunConfig& c) { c.train.cpt.terms = CptTerms::LongOnly; }},
        {"st", [](RunConfig& c) { c.train.cpt.terms = CptTerms::ShortOnly; }}}},
      {"threshold",
       {{"th_0", [](RunConfig& c) { c.train.th = 0.0; }},
        {"th_0.5", [](RunConfig& c) { c.train.th = 0.5; }},
        {"th_0.9", [](RunConfig& c) { c.train.th = 0.9; }}}},
      {"reloss",
       {{"reloss_off", [](RunConfig& c) { c.train.reloss = false; }},
        {"reloss_on", [](RunConfig& c) { c.train.reloss = true; }}}},
      {"misalignment",
       {{"clean", [](RunConfig& c) { c.train.template_jitter = 0.0; }},
        {"jitter_1.0", [](RunConfig& c) { c.train.template_jitter = 1.0; }}}},
  };
  return s;
}

}  // namespace

std::vector<std::string> study_names() {
  std::vector<std::string> n;
  for (const auto& s : studies()) n.push_back(s.name);
  return n;
}

ExperimentReport run_study(const RunConfig& cfg, const std::string& study, const ArmLogger& log) {
  const Study* st = nullptr;
  for (const auto& s : studies())
    if (s.name == study) st = &s;
  if (!st) {
    std::string names;
    for (const auto& n : study_names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown study '" + study + "' (expected one of " + names + ")");
  }
  validate(cfg);
  ExperimentReport rep;
  rep.name = study;
  rep.settings_json = config_to_json(cfg);
  rep.seeds = cfg.study_seeds;
  for (const auto& [arm, mutate] : st->arms) rep.arms.push_back(arm);
  for (std::uint64_t seed : cfg.study_seeds)
    for (const auto& [arm, mutate] : st->arms) {
      RunConfig c = cfg;
      mutate(c);
      rep.rows.push_back(run_arm(c, arm, seed));
      if (log) log(rep.rows.back());
    }
  return rep;
}

ExperimentReport run_misalignment_study(const RunConfig& cfg, const ArmLogger& log) {
  return run_study(cfg, "misalignment", log);
}

}  // namespace ulast
