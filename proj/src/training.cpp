#include "ulast/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "ulast/error.hpp"

namespace ulast {

void validate(const TrainConfig& c) {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(c.gamma > 1.0, "gamma must be > 1");
  need(c.alpha > 1.0, "alpha must be > 1");
  need(c.beta_factor > 0.0 && c.beta_factor <= 1.0, "beta_factor must be in (0, 1]");
  need(c.lambda_c >= 0.0 && c.lambda_c <= 1.0, "lambda_c must be in [0, 1]");
  need(c.lambda1 >= 0.0 && c.lambda2 >= 0.0, "loss weights must be >= 0");
  need(c.focal_gamma >= 0.0, "focal_gamma must be >= 0");
  need(c.focal_alpha >= 0.0 && c.focal_alpha <= 1.0, "focal_alpha must be in [0, 1]");
  need(c.atss_topk >= 1, "atss_topk must be >= 1");
  need(c.batch >= 1, "batch must be >= 1");
  need(c.steps_per_epoch >= 1, "steps_per_epoch must be >= 1");
  need(c.lr_start > 0.0 && c.lr_end > 0.0, "learning rates must be > 0");
  need(c.momentum >= 0.0 && c.momentum < 1.0, "momentum must be in [0, 1)");
  need(c.grad_clip >= 0.0, "grad_clip must be >= 0");
  need(c.n_search >= 1, "n_search must be >= 1");
  need(c.frame_gap >= 1, "frame_gap must be >= 1");
  need(c.pseudo_jitter >= 0.0 && c.template_jitter >= 0.0, "jitter levels must be >= 0");
  need(c.shift_max >= 0.0 && c.shift_max < 1.0, "shift_max must be in [0, 1)");
  need(c.scale_min > 0.0 && c.scale_min <= c.scale_max, "need 0 < scale_min <= scale_max");
  need(c.context_amount >= 0.0, "context_amount must be >= 0");
  need(c.n_train_sequences >= 1, "n_train_sequences must be >= 1");
  need(c.n_eval_sequences >= 1, "n_eval_sequences must be >= 1");
  need(c.eval_frames >= 2, "eval_frames must be >= 2");
  need(c.threads >= 1, "threads must be >= 1");
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  const std::size_t total = cfg.total_steps();
  if (total <= 1) return cfg.lr_start;
  const double t = static_cast<double>(std::min(step, total - 1)) / static_cast<double>(total - 1);
  if (step == 0) return cfg.lr_start;
  if (step >= total - 1) return cfg.lr_end;
  return std::exp(std::log(cfg.lr_start) + t * (std::log(cfg.lr_end) - std::log(cfg.lr_start)));
}

// ---- assignment --------------------------------------------------------------

AssignedTargets atss_assign(const AnchorGrid& anchors, const Box& label, std::size_t topk) {
  if (!label.valid()) throw ContractError("atss_assign: invalid label box");
  const std::size_t K = anchors.count();
  AssignedTargets t;
  t.positive.assign(K, 0);
  t.target_deltas.assign(K, {0, 0, 0, 0});
  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> dist(K);
  for (std::size_t k = 0; k < K; ++k) dist[k] = center_distance(anchors.anchors[k], label);
  const std::size_t n = std::min(topk, K);
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(n), order.end(),
                    [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
  order.resize(n);
  std::vector<double> ious(n);
  double m = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ious[i] = iou(anchors.anchors[order[i]], label);
    m += ious[i];
  }
  m /= static_cast<double>(n);
  double var = 0;
  for (double v : ious) var += (v - m) * (v - m);
  const double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
  const double thr = m + sd;
  for (std::size_t i = 0; i < n; ++i) {
    const Box& a = anchors.anchors[order[i]];
    const bool inside = a.cx() > label.x1 && a.cx() < label.x2 && a.cy() > label.y1 && a.cy() < label.y2;
    if (ious[i] >= thr && ious[i] > 0.0 && inside) t.positives.push_back(order[i]);
  }
  std::sort(t.positives.begin(), t.positives.end());
  for (std::size_t k : t.positives) {
    t.positive[k] = 1;
    t.target_deltas[k] = encode_deltas(label, anchors.anchors[k]);
  }
  return t;
}

// ---- losses ------------------------------------------------------------------

namespace {

// log(sigmoid(x)) without overflow
double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

}  // namespace

Var focal_loss(Var logits, const AssignedTargets& targets, double gamma, double alpha) {
  const std::size_t K = logits.numel();
  if (targets.positive.size() != K) throw ShapeError("focal_loss: targets do not match logits");
  const double norm = static_cast<double>(std::max<std::size_t>(targets.positives.size(), 1));
  const auto& x = logits.value().data;
  auto dx = std::make_shared<std::vector<double>>(K);
  double total = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const double lp = log_sigmoid(x[k]), lq = log_sigmoid(-x[k]);
    const double p = std::exp(lp), q = std::exp(lq);
    if (targets.positive[k]) {
      total += -alpha * std::pow(q, gamma) * lp;
      (*dx)[k] = alpha * std::pow(q, gamma) * (gamma * p * lp - q);
    } else {
      total += -(1.0 - alpha) * std::pow(p, gamma) * lq;
      (*dx)[k] = -(1.0 - alpha) * std::pow(p, gamma) * (gamma * q * lq - p);
    }
  }
  return logits.tape().record(Tensor::scalar(total / norm), {logits}, [logits, dx, norm](Tape& t, Var o) {
    const double g = t.grad(o)[0] / norm;
    auto& gl = t.grad(logits);
    for (std::size_t k = 0; k < dx->size(); ++k) gl[k] += g * (*dx)[k];
  });
}

Var l1_reg_loss(Var pred_deltas, const AssignedTargets& targets) {
  const auto& s = pred_deltas.shape();
  if (s.size() != 2 || s[1] != 4 || s[0] != targets.positive.size())
    throw ShapeError("l1_reg_loss: deltas must be [K x 4], got " + shape_str(s));
  const auto& pos = targets.positives;
  if (pos.empty()) return pred_deltas.tape().constant(Tensor::scalar(0.0));
  const double n = 4.0 * static_cast<double>(pos.size());
  const auto& d = pred_deltas.value().data;
  double total = 0;
  auto sign = std::make_shared<std::vector<double>>(4 * pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i)
    for (std::size_t c = 0; c < 4; ++c) {
      const double e = d[4 * pos[i] + c] - targets.target_deltas[pos[i]][c];
      total += std::abs(e);
      (*sign)[4 * i + c] = e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0);
    }
  return pred_deltas.tape().record(Tensor::scalar(total / n), {pred_deltas}, [pred_deltas, sign, pos, n](Tape& t, Var o) {
    const double g = t.grad(o)[0] / n;
    auto& gd = t.grad(pred_deltas);
    for (std::size_t i = 0; i < pos.size(); ++i)
      for (std::size_t c = 0; c < 4; ++c) gd[4 * pos[i] + c] += g * (*sign)[4 * i + c];
  });
}

BaseLoss base_loss(const Prediction& pred, const AnchorGrid& anchors, const Box& label, const TrainConfig& cfg) {
  BaseLoss b;
  b.targets = atss_assign(anchors, label, cfg.atss_topk);
  b.cls = focal_loss(pred.logits, b.targets, cfg.focal_gamma, cfg.focal_alpha);
  b.reg = l1_reg_loss(pred.deltas, b.targets);
  b.total = add(scale(b.cls, cfg.lambda1), scale(b.reg, cfg.lambda2));
  return b;
}

// ---- re-weighting ------------------------------------------------------------

double reweight_from_ratio(double ratio, double gamma, double alpha) {
  const double arg = std::max(alpha - ratio, 1e-3);
  return std::max(0.0, std::log(arg) / std::log(gamma));
}

Reweight reweight(const std::vector<double>& predicted_mask, const std::vector<double>& label_mask, double s_max,
                  const TrainConfig& cfg) {
  if (predicted_mask.size() != label_mask.size()) throw ShapeError("reweight: masks on different grids");
  const double beta = cfg.beta_factor * s_max;
  Reweight r;
  for (double v : predicted_mask)
    if (v >= beta) ++r.n_pred;
  for (double v : label_mask)
    if (v >= beta) ++r.n_label;
  r.ratio = static_cast<double>(r.n_pred) / static_cast<double>(std::max<std::size_t>(r.n_label, 1));
  r.weight = reweight_from_ratio(r.ratio, cfg.gamma, cfg.alpha);
  return r;
}

// ---- samples -----------------------------------------------------------------

GridSpec search_grid(const NetConfig& net) {
  GridSpec g;
  g.rows = g.cols = net.search_feat();
  g.cell_w = g.cell_h = static_cast<double>(net.stride);
  return g;
}

double template_context(const Box& box, double context_amount) {
  const double p = context_amount * (box.width() + box.height());
  return std::sqrt((box.width() + p) * (box.height() + p));
}

LegacyPair make_legacy_pair(const Image& frame, const Box& pseudo_box, const Box& template_box, const NetConfig& net,
                            const TrainConfig& cfg, std::mt19937_64& rng) {
  if (!pseudo_box.valid() || !template_box.valid()) throw ContractError("make_legacy_pair: degenerate box");
  LegacyPair p;
  p.template_patch = crop_patch(frame, template_box.cx(), template_box.cy(), net.template_size,
                                template_context(template_box, cfg.context_amount));
  const double s_x = template_context(pseudo_box, cfg.context_amount) * static_cast<double>(net.search_size) /
                     static_cast<double>(net.template_size);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> us(cfg.scale_min, cfg.scale_max);
  const double dx = u(rng) * cfg.shift_max * s_x;
  const double dy = u(rng) * cfg.shift_max * s_x;
  const double f = us(rng);
  p.search_patch = crop_patch(frame, pseudo_box.cx() + dx, pseudo_box.cy() + dy, net.search_size, s_x * f);
  p.label = p.search_patch.transform.to_patch(pseudo_box);
  return p;
}

namespace {

std::vector<double> values(Var v) { return v.value().data; }

// Mask-guided weight from a prediction and the label box, both in patch pixels.
Reweight weight_for(const Prediction& pred, const Box& label, const GridSpec& grid, const TrainConfig& cfg,
                    RegionMask* predicted, RegionMask* label_mask) {
  Tape& tape = pred.boxes.tape();
  RegionMask mp = region_mask(pred.boxes, pred.scores, grid, cfg.th, cfg.detach_boxes);
  RegionMask ml = mask_from_single_box(tape, label, grid);
  Reweight w;
  if (cfg.reloss) w = reweight(values(mp.grid), values(ml.grid), mp.max_score, cfg);
  if (predicted) *predicted = mp;
  if (label_mask) *label_mask = ml;
  return w;
}

bool finite(Var v) { return std::isfinite(v.value().item()); }

}  // namespace

LegacyOutput legacy_forward(const Bound& net, const LegacyPair& pair, const TrainConfig& cfg) {
  Var t1 = encode(net, pair.template_patch.image);
  Var s = encode(net, pair.search_patch.image);
  LegacyOutput out;
  out.pred = rpn_forward(net, t1, s);
  const auto& model = net.model();
  out.base = base_loss(out.pred, model.anchors(), pair.label, cfg);
  out.weight = weight_for(out.pred, pair.label, search_grid(model.config()), cfg, &out.predicted_mask, &out.label_mask);
  out.loss = scale(out.base.total, out.weight.weight);
  return out;
}

CycleOutput cycle_forward(const Bound& net, const CycleSample& sample, const TrainConfig& cfg, bool detach_boxes,
                          std::uint64_t rng_seed) {
  const auto& model = net.model();
  const auto& ncfg = model.config();
  const GridSpec grid = search_grid(ncfg);
  const Image& f1 = sample.template_frame();
  const double fw = static_cast<double>(f1.width), fh = static_cast<double>(f1.height);
  const Box pseudo = sample.pseudo_label.box;
  const Box template_box =
      cfg.template_jitter > 0 ? jitter_box(pseudo, cfg.template_jitter, mix_seed(rng_seed, 0x7e), fw, fh) : pseudo;

  // single-frame term; its masks also give the weight of the cycle term
  std::mt19937_64 rng(rng_seed);
  const LegacyPair pair = make_legacy_pair(f1, pseudo, template_box, ncfg, cfg, rng);
  Var t1 = encode(net, pair.template_patch.image);
  Var s1 = encode(net, pair.search_patch.image);
  Prediction p1 = rpn_forward(net, t1, s1);
  BaseLoss l1 = base_loss(p1, model.anchors(), pair.label, cfg);

  CycleOutput out;
  out.weight = weight_for(p1, pair.label, grid, cfg, nullptr, nullptr);
  out.legacy = scale(l1.total, out.weight.weight);

  Var kernel = t1, hidden = t1;
  out.kernels.push_back(t1);
  Box est = pseudo;
  bool first = true;
  auto crop_at = [&](const Image& frame, double cx, double cy, const Box& size_ref) {
    return crop_patch(frame, cx, cy, ncfg.search_size, search_context(size_ref, ncfg, cfg.context_amount));
  };
  for (std::size_t pos : sample.search_order()) {
    const Image& frame = sample.frames.at(pos - 1);
    double cx = est.cx(), cy = est.cy();
    if (first) {
      cx = sample.pseudo_label.centers.at(pos - 1)[0];
      cy = sample.pseudo_label.centers.at(pos - 1)[1];
      first = false;
    }
    const Patch sp = crop_at(frame, cx, cy, est);
    Var s = encode(net, sp.image);
    Prediction p = rpn_forward(net, kernel, s);
    out.boxes.push_back(p.boxes);
    const std::size_t k = argmax(values(p.scores));
    const Box b = sp.transform.to_frame(box_at(p.boxes, k));
    const double w = std::clamp(b.width(), 0.8 * est.width(), 1.25 * est.width());
    const double h = std::clamp(b.height(), 0.8 * est.height(), 1.25 * est.height());
    est = Box::from_center(std::clamp(b.cx(), 0.0, fw), std::clamp(b.cy(), 0.0, fh), w, h);
    out.visits.push_back(pos);
    out.estimates.push_back(est);

    RegionMask m = region_mask(p.boxes, p.scores, grid, cfg.th, detach_boxes);
    CptOutput c = cpt_forward(net, s, m.grid, t1, hidden, cfg.cpt);
    kernel = c.kernel;
    hidden = c.hidden;
    out.kernels.push_back(kernel);
  }

  // back on frame 1
  const Patch last = crop_at(f1, est.cx(), est.cy(), est);
  Prediction pf = rpn_forward(net, kernel, encode(net, last.image));
  BaseLoss lc = base_loss(pf, model.anchors(), last.transform.to_patch(pseudo), cfg);
  out.visits.push_back(1);
  out.estimates.push_back(last.transform.to_frame(box_at(pf.boxes, argmax(values(pf.scores)))));
  out.cycle = scale(lc.total, out.weight.weight);
  out.total = add(scale(out.legacy, 1.0 - cfg.lambda_c), scale(out.cycle, cfg.lambda_c));

  if (!finite(out.total)) {
    std::ostringstream os;
    os << "non-finite cycle loss: legacy=" << out.legacy.value().item() << " cycle=" << out.cycle.value().item()
       << " w=" << out.weight.weight << " frames=";
    for (std::size_t i : sample.frame_indices) os << i << ' ';
    os << "estimates=";
    for (const Box& e : out.estimates) os << '[' << e.x1 << ',' << e.y1 << ',' << e.x2 << ',' << e.y2 << ']';
    throw TrainingError(os.str());
  }
  return out;
}

// ---- batched steps -----------------------------------------------------------

namespace {

std::size_t worker_count(const TrainConfig& cfg, std::size_t items) {
  std::size_t n = cfg.threads;
  if (const char* env = std::getenv("ULAST_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && v > 0) n = std::min<std::size_t>(n, v);
  }
  return std::max<std::size_t>(1, std::min(n, items));
}

struct ItemResult {
  std::unique_ptr<Tape> tape;
  double loss = 0, legacy = 0, cycle = 0, w = 0;
  std::exception_ptr error;
};

// Runs `body(i, tape)` for every item, each on its own tape, then reduces the
// parameter gradients in item order.
template <class Body>
StepStats run_items(Model& model, std::size_t n, const TrainConfig& cfg, Body body) {
  std::vector<ItemResult> items(n);
  auto work = [&](std::size_t i) {
    try {
      items[i].tape = std::make_unique<Tape>(true);
      body(i, *items[i].tape, items[i]);
    } catch (...) {
      items[i].error = std::current_exception();
    }
  };
  const std::size_t workers = worker_count(cfg, n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += workers) work(i);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& it : items)
    if (it.error) std::rethrow_exception(it.error);

  model.params().zero_grad();
  StepStats st;
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& it : items) {
    it.tape->accumulate_param_grads();
    it.tape.reset();
    st.loss += it.loss * inv;
    st.legacy += it.legacy * inv;
    st.cycle += it.cycle * inv;
    st.w_mean += it.w * inv;
  }
  for (auto& p : model.params().items())
    if (p.learnable)
      for (auto& g : p.tensor.grad) g *= inv;
  return st;
}

}  // namespace

StepStats legacy_step(Model& model, const std::vector<LegacyPair>& batch, const TrainConfig& cfg) {
  if (batch.empty()) throw ContractError("legacy_step: empty batch");
  return run_items(model, batch.size(), cfg, [&](std::size_t i, Tape& tape, ItemResult& r) {
    Bound b(tape, model);
    LegacyOutput o = legacy_forward(b, batch[i], cfg);
    if (!finite(o.loss))
      throw TrainingError("non-finite legacy loss: cls=" + std::to_string(o.base.cls.value().item()) +
                          " reg=" + std::to_string(o.base.reg.value().item()));
    tape.backward(o.loss);
    r.loss = r.legacy = o.loss.value().item();
    r.w = o.weight.weight;
  });
}

StepStats cycle_step(Model& model, const std::vector<CycleSample>& batch, const std::vector<std::uint64_t>& seeds,
                     const TrainConfig& cfg) {
  if (batch.empty()) throw ContractError("cycle_step: empty batch");
  if (seeds.size() != batch.size()) throw ContractError("cycle_step: one seed per sample required");
  return run_items(model, batch.size(), cfg, [&](std::size_t i, Tape& tape, ItemResult& r) {
    Bound b(tape, model);
    CycleOutput o = cycle_forward(b, batch[i], cfg, cfg.detach_boxes, seeds[i]);
    tape.backward(o.total);
    r.loss = o.total.value().item();
    r.legacy = o.legacy.value().item();
    r.cycle = o.cycle.value().item();
    r.w = o.weight.weight;
  });
}

// ---- training loop -----------------------------------------------------------

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(a) ^ b) ^ c);
}

SceneSpec training_scene(const SceneSpec& base, const TrainConfig& cfg) {
  SceneSpec s = base;
  s.n_frames = 1 + cfg.n_search * cfg.frame_gap;
  return s;
}

std::vector<SyntheticSequence> eval_sequences(const SceneSpec& scene, const TrainConfig& cfg) {
  SceneSpec s = scene;
  s.n_frames = cfg.eval_frames;
  std::vector<SyntheticSequence> out;
  for (std::size_t i = 0; i < cfg.n_eval_sequences; ++i) out.push_back(generate_sequence(s, mix_seed(cfg.eval_seed, 0xe7a1, i)));
  return out;
}

TrainResult train(Model& model, const TrainConfig& cfg, const SceneSpec& scene, const TrackerConfig& tracker,
                  const TrainHooks& hooks) {
  validate(cfg);
  validate_scene_spec(scene);
  const SceneSpec train_scene = training_scene(scene, cfg);
  validate_scene_spec(train_scene);
  TrainResult res;
  std::vector<SyntheticSequence> held_out;
  if (hooks.evaluate_untrained || hooks.evaluate_epochs) held_out = eval_sequences(scene, cfg);
  auto evaluate_now = [&](std::size_t epoch) {
    const Metrics m = evaluate_model(model, held_out, tracker);
    EpochMetrics e{epoch, m.mean_iou, m.success_auc};
    if (hooks.metrics_log) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "{\"epoch\": %zu, \"mean_iou\": %.6f, \"success_auc\": %.6f}\n", epoch,
                    m.mean_iou, m.success_auc);
      *hooks.metrics_log << buf << std::flush;
    }
    return e;
  };
  if (hooks.evaluate_untrained) res.untrained = evaluate_now(0);

  MomentumState mom;
  std::vector<Tensor> last_good;
  auto snapshot = [&] {
    last_good.clear();
    for (const auto& p : model.params().items()) last_good.push_back(p.tensor);
  };
  auto restore = [&] {
    auto& items = model.params().items();
    for (std::size_t i = 0; i < items.size(); ++i) items[i].tensor = last_good[i];
  };
  snapshot();

  const std::size_t epochs = cfg.legacy_epochs + cfg.cycle_epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const bool cycle = epoch > cfg.legacy_epochs;
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
      std::vector<CycleSample> samples;
      std::vector<std::uint64_t> seeds;
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        const std::uint64_t item = mix_seed(cfg.seed, step, b);
        const std::size_t seq_idx = static_cast<std::size_t>(item % cfg.n_train_sequences);
        const SyntheticSequence seq = generate_sequence(train_scene, mix_seed(cfg.seed, 0x5e9, seq_idx));
        samples.push_back(sample_palindrome(seq, cfg.n_search, cfg.frame_gap, mix_seed(item, 1), cfg.pseudo_jitter));
        seeds.push_back(mix_seed(item, 2));
      }
      StepStats st;
      try {
        if (cycle) {
          st = cycle_step(model, samples, seeds, cfg);
        } else {
          std::vector<LegacyPair> pairs;
          for (std::size_t b = 0; b < samples.size(); ++b) {
            const CycleSample& cs = samples[b];
            const Image& f1 = cs.template_frame();
            const Box pseudo = cs.pseudo_label.box;
            const Box tb = cfg.template_jitter > 0
                               ? jitter_box(pseudo, cfg.template_jitter, mix_seed(seeds[b], 0x7e),
                                            static_cast<double>(f1.width), static_cast<double>(f1.height))
                               : pseudo;
            std::mt19937_64 rng(seeds[b]);
            pairs.push_back(make_legacy_pair(f1, pseudo, tb, model.config(), cfg, rng));
          }
          st = legacy_step(model, pairs, cfg);
        }
      } catch (const TrainingError&) {
        restore();
        throw;
      }
      if (cfg.grad_clip > 0) clip_grad_norm(model.params(), cfg.grad_clip);
      const double lr = learning_rate(cfg, step);
      sgd_momentum_step(model.params(), mom, lr, cfg.momentum);
      snapshot();
      res.steps_log.push_back(st);
      if (hooks.step_log) {
        char buf[200];
        std::snprintf(buf, sizeof(buf), "%zu %.6f %.6f %.6f %.8f %.4f\n", step + 1, st.loss, st.legacy, st.cycle, lr,
                      st.w_mean);
        *hooks.step_log << buf;
      }
      ++res.steps;
      if (hooks.on_step) hooks.on_step(step + 1);
    }
    if (hooks.evaluate_epochs) res.epochs.push_back(evaluate_now(epoch));
  }
  return res;
}

}  // namespace ulast
