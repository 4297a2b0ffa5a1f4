#include "ulast/tracker.hpp"

#include <algorithm>
#include <cmath>

#include "ulast/error.hpp"
#include "ulast/region_mask.hpp"
#include "ulast/training.hpp"

namespace ulast {

bool MemoryQueue::offer(MemoryEntry entry) {
  if (entries_.size() < capacity_) {
    entries_.push_back(std::move(entry));
    return true;
  }
  if (entries_.size() < 2) return false;
  // lowest score among non-pinned entries; the newest of equal minima goes first
  std::size_t victim = 1;
  for (std::size_t i = 2; i < entries_.size(); ++i)
    if (entries_[i].score <= entries_[victim].score) victim = i;
  if (!(entry.score > entries_[victim].score)) return false;
  entries_[victim] = std::move(entry);
  return true;
}

std::vector<double> fuse_maps(const std::vector<double>& legacy, const std::vector<double>& memory, double lambda_m) {
  if (legacy.size() != memory.size()) throw ShapeError("fuse_maps: size mismatch");
  std::vector<double> out(legacy.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - lambda_m) * legacy[i] + lambda_m * memory[i];
  return out;
}

std::vector<double> cosine_window(const AnchorGrid& anchors) {
  auto hann = [](std::size_t n) {
    std::vector<double> w(n, 1.0);
    if (n > 1)
      for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n - 1));
    return w;
  };
  const auto wy = hann(anchors.grid_h), wx = hann(anchors.grid_w);
  std::vector<double> out(anchors.count());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const std::size_t cell = anchors.cell_of(k);
    out[k] = wy[cell / anchors.grid_w] * wx[cell % anchors.grid_w];
  }
  return out;
}

double search_context(const Box& box, const NetConfig& net, double context_amount) {
  return template_context(box, context_amount) * static_cast<double>(net.search_size) /
         static_cast<double>(net.template_size);
}

Tracker::Tracker(Model& model, TrackerConfig cfg) : model_(&model), cfg_(std::move(cfg)) {}

TrackerState Tracker::init(const Image& frame, const Box& box) const {
  if (!box.valid()) throw ContractError("tracker init: degenerate box");
  if (box.x2 <= 0 || box.y2 <= 0 || box.x1 >= static_cast<double>(frame.width) ||
      box.y1 >= static_cast<double>(frame.height))
    throw ContractError("tracker init: box outside frame");
  const auto& net = model_->config();
  TrackerState st;
  st.frame_w = frame.width;
  st.frame_h = frame.height;
  st.queue = MemoryQueue(cfg_.memory_capacity);
  Tape tape(false);
  Bound b(tape, *model_);
  const Patch tp = crop_patch(frame, box.cx(), box.cy(), net.template_size, template_context(box, cfg_.context_amount));
  st.legacy_kernel = encode(b, tp.image).value();
  st.hidden = st.legacy_kernel;
  st.last_box = box;
  st.initialized = true;
  if (memory_active()) {
    const Patch sp = crop_patch(frame, box.cx(), box.cy(), net.search_size, search_context(box, net, cfg_.context_amount));
    Var s = encode(b, sp.image);
    RegionMask m = mask_from_single_box(tape, sp.transform.to_patch(box), search_grid(net));
    st.queue.offer({s.value(), m.grid.value(), 1.0, 0});
    recompute_memory_kernel(st);
  }
  return st;
}

void Tracker::recompute_memory_kernel(TrackerState& st) const {
  Tape tape(false);
  Bound b(tape, *model_);
  Var t1 = tape.constant(st.legacy_kernel);
  Var h = tape.constant(st.hidden);
  Tensor acc(st.legacy_kernel.shape);
  for (const auto& e : st.queue.entries()) {
    CptOutput o = cpt_forward(b, tape.constant(e.feature), tape.constant(e.mask), t1, h, cfg_.cpt);
    ++st.cpt_calls;
    const auto& v = o.kernel.value().data;
    for (std::size_t i = 0; i < v.size(); ++i) acc.data[i] += v[i];
  }
  const double n = static_cast<double>(st.queue.size());
  for (auto& v : acc.data) v /= n;
  st.memory_kernel = std::move(acc);
}

void Tracker::refresh_hidden(TrackerState& st, const Tensor& feature, const Tensor& mask) const {
  Tape tape(false);
  Bound b(tape, *model_);
  Var t1 = tape.constant(st.legacy_kernel);
  Var masked = mask_search(tape.constant(feature), tape.constant(mask));
  Retrieval r = retrieve(b, masked, t1, Query::Long, cfg_.cpt.axis);
  Var xl = cfg_.cpt.terms == CptTerms::ShortOnly ? tape.constant(Tensor(t1.shape())) : r.features;
  st.hidden = update_hidden(b, xl, t1).value();
  ++st.cpt_calls;
}

void Tracker::update_memory(TrackerState& st, MemoryEntry entry) const {
  if (!st.initialized) throw ContractError("update_memory: tracker not initialised");
  if (st.queue.offer(std::move(entry))) recompute_memory_kernel(st);
}

FrameResult Tracker::track_frame(TrackerState& st, const Image& frame) const {
  if (!st.initialized) throw ContractError("track_frame: tracker not initialised");
  const auto& net = model_->config();
  const auto& anchors = model_->anchors();
  const Box prev = st.last_box;
  const Patch sp = crop_patch(frame, prev.cx(), prev.cy(), net.search_size, search_context(prev, net, cfg_.context_amount));

  Tape tape(false);
  Bound b(tape, *model_);
  Var s = encode(b, sp.image);
  Prediction legacy = rpn_forward(b, tape.constant(st.legacy_kernel), s);
  FrameResult r;
  r.legacy_map = legacy.scores.value().data;
  if (memory_active()) {
    Prediction mem = rpn_forward(b, tape.constant(st.memory_kernel), s);
    r.memory_map = mem.scores.value().data;
    r.fused_map = fuse_maps(r.legacy_map, r.memory_map, cfg_.lambda_m);
  } else {
    r.fused_map = r.legacy_map;
  }

  const auto window = cosine_window(anchors);
  std::vector<double> ranked(r.fused_map.size());
  for (std::size_t k = 0; k < ranked.size(); ++k)
    ranked[k] = (1.0 - cfg_.window_influence) * r.fused_map[k] + cfg_.window_influence * window[k];
  const std::size_t best = argmax(ranked);
  r.score = r.fused_map[best];

  const Box pred = sp.transform.to_frame(box_at(legacy.boxes, best));
  const double lr = std::clamp(cfg_.size_lr * r.score, 0.0, 1.0);
  const double fw = static_cast<double>(st.frame_w), fh = static_cast<double>(st.frame_h);
  double w = (1.0 - lr) * prev.width() + lr * pred.width();
  double h = (1.0 - lr) * prev.height() + lr * pred.height();
  w = std::clamp(w, 4.0, fw);
  h = std::clamp(h, 4.0, fh);
  const double cx = std::clamp(pred.cx(), 0.0, fw), cy = std::clamp(pred.cy(), 0.0, fh);
  r.box = Box::from_center(cx, cy, w, h);
  st.last_box = r.box;
  st.last_score = r.score;
  ++st.frame;

  if (memory_active()) {
    if (!st.interval_best || r.score > st.interval_best->score) {
      Var fused = tape.constant(Tensor({r.fused_map.size()}, r.fused_map));
      const double s_max = *std::max_element(r.fused_map.begin(), r.fused_map.end());
      RegionMask m = region_mask(legacy.boxes, fused, search_grid(net), cfg_.online_th_factor * s_max);
      st.interval_best = IntervalBest{s.value(), m.grid.value(), r.score, st.frame};
    }
    if (cfg_.hidden_interval > 0 && st.frame % cfg_.hidden_interval == 0) {
      IntervalBest best_entry = std::move(*st.interval_best);
      st.interval_best.reset();
      refresh_hidden(st, best_entry.feature, best_entry.mask);
      st.queue.offer({best_entry.feature, best_entry.mask, best_entry.score, best_entry.frame});
      recompute_memory_kernel(st);  // the hidden template changed even if the queue did not
    }
  }
  return r;
}

Metrics evaluate(const std::vector<Box>& results, const std::vector<Box>& gt) {
  if (results.empty() || results.size() != gt.size())
    throw ContractError("evaluate: need equal, non-empty result and ground-truth lists");
  Metrics m;
  const double n = static_cast<double>(results.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const double v = iou(results[i], gt[i]);
    m.ious.push_back(v);
    m.mean_iou += v / n;
    if (center_distance(results[i], gt[i]) <= kPrecisionRadius) ++hits;
  }
  m.precision = static_cast<double>(hits) / n;
  constexpr int kSteps = 20;
  for (int t = 0; t <= kSteps; ++t) {
    const double thr = static_cast<double>(t) / kSteps;
    std::size_t above = 0;
    for (double v : m.ious)
      if (v >= thr) ++above;
    m.success_auc += static_cast<double>(above) / n / (kSteps + 1);
  }
  return m;
}

SequenceRun run_sequence(const Tracker& tracker, const SyntheticSequence& seq) {
  SequenceRun run;
  TrackerState st = tracker.init(seq.frames.front(), seq.gt_boxes.front());
  run.boxes.push_back(seq.gt_boxes.front());
  run.scores.push_back(1.0);
  for (std::size_t f = 1; f < seq.frames.size(); ++f) {
    FrameResult r = tracker.track_frame(st, seq.frames[f]);
    run.boxes.push_back(r.box);
    run.scores.push_back(r.score);
  }
  return run;
}

Metrics evaluate_model(Model& model, const std::vector<SyntheticSequence>& seqs, const TrackerConfig& cfg) {
  Tracker tracker(model, cfg);
  std::vector<Box> results, gt;
  for (const auto& seq : seqs) {
    SequenceRun run = run_sequence(tracker, seq);
    results.insert(results.end(), run.boxes.begin() + 1, run.boxes.end());
    gt.insert(gt.end(), seq.gt_boxes.begin() + 1, seq.gt_boxes.end());
  }
  return evaluate(results, gt);
}

}  // namespace ulast
