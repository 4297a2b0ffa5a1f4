#pragma once

// Losses, label assignment, mask-guided loss weights and the two-stage
// (single-frame, then palindrome-cycle) training loop.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "ulast/cpt.hpp"
#include "ulast/net.hpp"
#include "ulast/region_mask.hpp"
#include "ulast/scenes.hpp"
#include "ulast/tracker.hpp"

namespace ulast {

struct TrainConfig {
  // loss weights
  double lambda1 = 10.0;
  double lambda2 = 1.2;
  double lambda_c = 0.5;
  // mask-guided re-weighting
  double gamma = 5.0;
  double alpha = 7.0;
  double beta_factor = 0.8;
  bool reloss = true;
  // region mask
  double th = 0.0;
  bool detach_boxes = false;
  // focal loss and assignment
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  std::size_t atss_topk = 15;
  // schedule
  std::size_t batch = 4;
  std::size_t legacy_epochs = 2;
  std::size_t cycle_epochs = 2;
  std::size_t steps_per_epoch = 100;
  double lr_start = 1e-3;
  double lr_end = 5e-5;
  double momentum = 0.9;
  double grad_clip = 10.0;
  // sampling
  std::size_t n_search = 3;
  std::size_t frame_gap = 3;
  double pseudo_jitter = 0.2;
  double template_jitter = 0.0;
  double shift_max = 0.25;
  double scale_min = 0.8;
  double scale_max = 1.2;
  double context_amount = 0.5;
  CptOptions cpt;
  // data
  std::uint64_t seed = 1;
  std::uint64_t eval_seed = 7777;
  std::size_t n_train_sequences = 512;
  std::size_t n_eval_sequences = 8;
  std::size_t eval_frames = 40;
  std::size_t threads = 1;

  std::size_t total_steps() const { return (legacy_epochs + cycle_epochs) * steps_per_epoch; }
};

// Throws ConfigError when a constraint is violated.
void validate(const TrainConfig& cfg);

// Log-space interpolation from lr_start (step 0) to lr_end (last step).
double learning_rate(const TrainConfig& cfg, std::size_t step);

// ---- assignment --------------------------------------------------------------

struct AssignedTargets {
  std::vector<std::uint8_t> positive;               // per anchor
  std::vector<std::array<double, 4>> target_deltas;  // per anchor, meaningful for positives
  std::vector<std::size_t> positives;
};

AssignedTargets atss_assign(const AnchorGrid& anchors, const Box& label, std::size_t topk = 15);

// ---- losses ------------------------------------------------------------------

// Sigmoid focal loss summed over anchors and divided by max(n_pos, 1).
Var focal_loss(Var logits, const AssignedTargets& targets, double gamma, double alpha);
// Mean absolute error over the 4 deltas of each positive anchor; 0 without positives.
Var l1_reg_loss(Var pred_deltas, const AssignedTargets& targets);

struct BaseLoss {
  Var total;  // lambda1 * cls + lambda2 * reg
  Var cls;
  Var reg;
  AssignedTargets targets;
};

BaseLoss base_loss(const Prediction& pred, const AnchorGrid& anchors, const Box& label, const TrainConfig& cfg);

// ---- re-weighting ------------------------------------------------------------

// max(0, log_gamma(max(alpha - ratio, 1e-3))).
double reweight_from_ratio(double ratio, double gamma, double alpha);

struct Reweight {
  double weight = 1.0;
  double ratio = 0.0;
  std::size_t n_pred = 0;   // cells of the predicted mask >= beta
  std::size_t n_label = 0;  // cells of the label mask >= beta (before the floor of 1)
};

// beta = beta_factor * s_max, with s_max the largest score used for the predicted mask.
Reweight reweight(const std::vector<double>& predicted_mask, const std::vector<double>& label_mask, double s_max,
                  const TrainConfig& cfg);

// ---- samples -----------------------------------------------------------------

GridSpec search_grid(const NetConfig& net);
// Side of the template crop around a box (context-padded square).
double template_context(const Box& box, double context_amount);

struct LegacyPair {
  Patch template_patch;
  Patch search_patch;
  Box label;  // pseudo box in search-patch pixels
};

// Template and augmented search crop, both from the first frame.
LegacyPair make_legacy_pair(const Image& frame, const Box& pseudo_box, const Box& template_box,
                            const NetConfig& net, const TrainConfig& cfg, std::mt19937_64& rng);

struct LegacyOutput {
  Var loss;  // w_b * base
  BaseLoss base;
  Reweight weight;
  Prediction pred;
  RegionMask predicted_mask;
  RegionMask label_mask;
};

LegacyOutput legacy_forward(const Bound& net, const LegacyPair& pair, const TrainConfig& cfg);

struct CycleOutput {
  Var total;       // (1 - lambda_c) * L_l + lambda_c * L_c
  Var legacy;      // weighted L_l
  Var cycle;       // weighted L_c
  Reweight weight;
  std::vector<std::size_t> visits;  // sampled positions tracked, ending at 1
  std::vector<Var> kernels;         // T_1 followed by each propagated kernel
  std::vector<Var> boxes;           // decoded boxes of every intermediate prediction
  std::vector<Box> estimates;       // per visit, frame pixels
};

// One palindrome cycle plus the single-frame term on the same sample.
// `rng_seed` drives the legacy-pair augmentation.
CycleOutput cycle_forward(const Bound& net, const CycleSample& sample, const TrainConfig& cfg, bool detach_boxes,
                          std::uint64_t rng_seed);

// ---- batched steps -----------------------------------------------------------

struct StepStats {
  double loss = 0;
  double legacy = 0;
  double cycle = 0;
  double w_mean = 0;
};

// Each function builds one tape per item, back-propagates, and reduces the
// parameter gradients in item order (scaled by 1/B). No optimiser update.
StepStats legacy_step(Model& model, const std::vector<LegacyPair>& batch, const TrainConfig& cfg);
StepStats cycle_step(Model& model, const std::vector<CycleSample>& batch, const std::vector<std::uint64_t>& seeds,
                     const TrainConfig& cfg);

// ---- training loop -----------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double mean_iou = 0;
  double success_auc = 0;
};

struct TrainResult {
  std::size_t steps = 0;
  std::vector<StepStats> steps_log;
  std::vector<EpochMetrics> epochs;
  EpochMetrics untrained;
};

struct TrainHooks {
  std::ostream* step_log = nullptr;     // "step loss l_legacy l_cycle lr w_mean"
  std::ostream* metrics_log = nullptr;  // JSON lines {epoch, mean_iou, success_auc}
  bool evaluate_untrained = false;
  bool evaluate_epochs = true;
  // Called after every optimiser step; may persist a checkpoint.
  std::function<void(std::size_t step)> on_step;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);
// Training sequences only need enough frames for one palindrome sample.
SceneSpec training_scene(const SceneSpec& base, const TrainConfig& cfg);
std::vector<SyntheticSequence> eval_sequences(const SceneSpec& scene, const TrainConfig& cfg);

TrainResult train(Model& model, const TrainConfig& cfg, const SceneSpec& scene, const TrackerConfig& tracker,
                  const TrainHooks& hooks = {});

}  // namespace ulast
