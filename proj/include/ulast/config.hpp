#pragma once

// One flat JSON document configures a run: training, scene generator, network
// size, tracker and experiment settings. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ulast/net.hpp"
#include "ulast/scenes.hpp"
#include "ulast/tracker.hpp"
#include "ulast/training.hpp"

namespace ulast {

struct RunConfig {
  TrainConfig train;
  SceneSpec scene;
  NetConfig net;
  TrackerConfig tracker;  // cpt and context_amount follow `train`
  std::vector<std::uint64_t> study_seeds{1, 2, 3};
  std::size_t gen_sequences = 4;
  std::string checkpoint;  // empty: untrained model
  std::string results;     // eval input; empty: <out>/results.jsonl
};

// Throws ConfigError naming the offending key.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const RunConfig& cfg);
// Cross-field checks; parse_config already calls it.
void validate(const RunConfig& cfg);
// Tracker settings with the shared fields copied from the training section.
TrackerConfig tracker_config(const RunConfig& cfg);
std::vector<std::string> config_keys();

}  // namespace ulast
