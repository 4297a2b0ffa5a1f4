#pragma once

// Gradient-check suites and the multi-arm training studies.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ulast/config.hpp"

namespace ulast {

struct GradcheckResult {
  std::string name;
  double error = 0;  // worst relative error
  double tolerance = 0;
  bool pass = false;
};

std::vector<GradcheckResult> run_gradchecks(std::uint64_t seed = 1);

struct ArmResult {
  std::string arm;
  std::uint64_t seed = 0;
  double mean_iou = 0;
  double success_auc = 0;
  double precision = 0;
  double untrained_iou = 0;
  std::size_t steps = 0;
  double seconds = 0;
};

struct ExperimentReport {
  std::string name;
  std::string settings_json;  // config snapshot shared by all arms
  std::vector<std::string> arms;
  std::vector<std::uint64_t> seeds;
  std::vector<ArmResult> rows;

  const ArmResult& at(const std::string& arm, std::uint64_t seed) const;
  std::string to_json() const;
  std::string to_markdown() const;
};

// One arm: fresh model from `seed`, train, evaluate on the held-out set.
// `evaluate_untrained` also scores the initial weights.
ArmResult run_arm(const RunConfig& cfg, const std::string& arm, std::uint64_t seed, bool evaluate_untrained = false);

using ArmLogger = std::function<void(const ArmResult&)>;

// Clean templates vs. template boxes jittered at level 1.0.
ExperimentReport run_misalignment_study(const RunConfig& cfg, const ArmLogger& log = {});

std::vector<std::string> study_names();
// Studies: detach, residual, lt_st, threshold, reloss, misalignment.
// Throws ConfigError for an unknown study.
ExperimentReport run_study(const RunConfig& cfg, const std::string& study, const ArmLogger& log = {});

}  // namespace ulast
