#pragma once

// Online tracking with a legacy (initial-template) kernel and a memory kernel
// retrieved from a queue of confident past search features.

#include <optional>
#include <vector>

#include "ulast/cpt.hpp"
#include "ulast/geometry.hpp"
#include "ulast/net.hpp"
#include "ulast/scenes.hpp"

namespace ulast {

struct TrackerConfig {
  double lambda_m = 0.3;
  bool use_memory = true;
  std::size_t memory_capacity = 6;  // N_L
  std::size_t hidden_interval = 10;  // N_s
  double online_th_factor = 0.5;     // mask threshold = factor * s_max
  double window_influence = 0.3;
  double size_lr = 0.3;
  double context_amount = 0.5;
  CptOptions cpt;
};

struct MemoryEntry {
  Tensor feature;  // C x H x W
  Tensor mask;     // H x W
  double score = 0;
  std::size_t frame = 0;
};

// Entry 0 is pinned. The rest are the highest-score entries offered so far;
// on equal scores the older entry is kept.
class MemoryQueue {
 public:
  explicit MemoryQueue(std::size_t capacity = 6) : capacity_(capacity) {}
  // Returns true if the entry was stored.
  bool offer(MemoryEntry entry);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::vector<MemoryEntry>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::vector<MemoryEntry> entries_;
};

struct IntervalBest {
  Tensor feature;
  Tensor mask;
  double score = -1;
  std::size_t frame = 0;
};

struct TrackerState {
  bool initialized = false;
  Tensor legacy_kernel;  // T_1
  Tensor memory_kernel;
  Tensor hidden;
  Box last_box;
  double last_score = 1.0;
  std::size_t frame = 0;
  std::size_t frame_w = 0, frame_h = 0;
  MemoryQueue queue;
  std::optional<IntervalBest> interval_best;
  std::size_t cpt_calls = 0;
};

struct FrameResult {
  Box box;
  double score = 0;
  std::vector<double> legacy_map;  // R_cls^L, per anchor
  std::vector<double> memory_map;  // R_cls^M (empty when memory is off)
  std::vector<double> fused_map;
};

class Tracker {
 public:
  Tracker(Model& model, TrackerConfig cfg = {});

  TrackerState init(const Image& frame, const Box& box) const;
  FrameResult track_frame(TrackerState& state, const Image& frame) const;
  void update_memory(TrackerState& state, MemoryEntry entry) const;
  void refresh_hidden(TrackerState& state, const Tensor& feature, const Tensor& mask) const;

  const TrackerConfig& config() const { return cfg_; }
  bool memory_active() const { return cfg_.use_memory && cfg_.lambda_m > 0.0; }

 private:
  void recompute_memory_kernel(TrackerState& state) const;

  Model* model_;
  TrackerConfig cfg_;
};

// (1 - lambda_m) * legacy + lambda_m * memory, cellwise.
std::vector<double> fuse_maps(const std::vector<double>& legacy, const std::vector<double>& memory, double lambda_m);
std::vector<double> cosine_window(const AnchorGrid& anchors);
double search_context(const Box& box, const NetConfig& net, double context_amount);

struct Metrics {
  double mean_iou = 0;
  double success_auc = 0;
  double precision = 0;
  std::vector<double> ious;
};

inline constexpr double kPrecisionRadius = 5.0;

// Success AUC averages the fraction of frames with IoU >= t over
// t = 0, 0.05, ..., 1. Throws ContractError on empty or mismatched input.
Metrics evaluate(const std::vector<Box>& results, const std::vector<Box>& gt);

struct SequenceRun {
  std::vector<Box> boxes;  // frame 0 is the initial box
  std::vector<double> scores;
};

SequenceRun run_sequence(const Tracker& tracker, const SyntheticSequence& seq);
// Pools every non-initial frame of every sequence.
Metrics evaluate_model(Model& model, const std::vector<SyntheticSequence>& seqs, const TrackerConfig& cfg);

}  // namespace ulast
