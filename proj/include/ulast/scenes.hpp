#pragma once

// Synthetic tracking videos: a textured target rectangle drifting over a
// cluttered background with look-alike distractors.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ulast/geometry.hpp"
#include "ulast/tensor.hpp"

namespace ulast {

// Planar CHW image, values in [0, 1].
struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.f)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  std::vector<double> channel_means() const;
  Tensor to_tensor() const;
  bool operator==(const Image&) const = default;
};

struct SceneSpec {
  std::size_t image_size = 128;
  std::size_t n_frames = 24;
  double min_target = 12.0;  // target side range, pixels
  double max_target = 22.0;
  double max_aspect = 1.6;   // w/h drawn from [1/max_aspect, max_aspect]
  double max_speed = 1.5;    // pixels per frame
  double max_scale_step = 0.02;
  std::size_t n_distractors = 3;
  double pixel_noise = 0.02;
};

struct SyntheticSequence {
  std::vector<Image> frames;
  std::vector<Box> gt_boxes;
  std::string seq_id;
  std::uint64_t seed = 0;
};

// Throws ConfigError for infeasible specs.
void validate_scene_spec(const SceneSpec& spec);
SyntheticSequence generate_sequence(const SceneSpec& spec, std::uint64_t seed);
// Checks the per-sequence invariants; returns an empty string when they hold.
std::string check_sequence(const SyntheticSequence& seq);

// ---- jitter model ------------------------------------------------------------

// (cx + s1*w, cy + s2*h, (1+s3)*w, (1+s4)*h), s_k ~ U(-level/2, level/2).
std::array<double, 4> draw_jitter(double level, std::mt19937_64& rng);
Box apply_jitter(const Box& box, const std::array<double, 4>& sigma, double frame_w, double frame_h);
Box jitter_box(const Box& box, double level, std::uint64_t seed, double frame_w, double frame_h);

// ---- cycle samples -----------------------------------------------------------

struct PseudoLabel {
  Box box;                                          // first (template) frame
  std::vector<std::array<double, 2>> centers;       // per sampled frame, index 0 = template
  bool center_only = true;
  double noise_level = 0.0;
};

struct CycleSample {
  // frames[0] is the template frame, frames[1..n] the sampled search frames.
  std::vector<Image> frames;
  std::vector<std::size_t> frame_indices;  // 1-based positions in the source sequence
  PseudoLabel pseudo_label;
  std::vector<Box> gt_boxes;  // evaluation only, never read by losses

  const Image& template_frame() const { return frames.front(); }
  // Palindrome over sampled positions (1-based, template = 1): 2..n+1..2.
  std::vector<std::size_t> search_order() const;
};

std::vector<std::size_t> palindrome_order(std::size_t n_search);

// Template is always frame 1. Throws RangeError if 1 + n_search*gap exceeds
// the sequence length.
CycleSample sample_palindrome(const SyntheticSequence& seq, std::size_t n_search, std::size_t gap,
                              std::uint64_t seed, double jitter_level = 0.0);

// ---- cropping ----------------------------------------------------------------

// Frame -> patch similarity: p = (f - origin) * scale.
struct PatchTransform {
  double origin_x = 0, origin_y = 0, scale = 1;

  Box to_patch(const Box& b) const;
  Box to_frame(const Box& b) const;
  std::array<double, 2> point_to_frame(double px, double py) const;
};

struct Patch {
  Image image;
  PatchTransform transform;
};

// Square crop of side `context` (frame pixels) centred at (cx, cy), resampled
// bilinearly to size x size. Out-of-frame samples take the channel mean.
Patch crop_patch(const Image& frame, double cx, double cy, std::size_t size, double context);

// ---- export ------------------------------------------------------------------

void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);
// frame_0001.ppm ... plus boxes.txt ("frame_idx x1 y1 x2 y2", two decimals).
void export_sequence(const SyntheticSequence& seq, const std::filesystem::path& dir);

}  // namespace ulast
