#pragma once

// Siamese encoder + anchor-based region proposal head.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ulast/geometry.hpp"
#include "ulast/scenes.hpp"
#include "ulast/tensor.hpp"

namespace ulast {

struct NetConfig {
  std::size_t channels = 16;
  std::size_t template_size = 32;
  std::size_t search_size = 64;
  std::size_t stride = 4;
  double anchor_scale = 4.0;
  std::vector<double> ratios{0.33, 0.5, 1.0, 2.0, 3.0};

  std::size_t template_feat() const { return template_size / stride; }
  std::size_t search_feat() const { return search_size / stride; }
  std::size_t grid() const { return search_feat() - template_feat() + 1; }
};

struct AnchorGrid {
  std::size_t grid_h = 0, grid_w = 0;
  double scale = 0, stride = 0;
  std::vector<double> ratios;
  // Index k = r * (grid_h * grid_w) + i * grid_w + j.
  std::vector<Box> anchors;

  std::size_t count() const { return anchors.size(); }
  std::size_t cell_of(std::size_t k) const { return k % (grid_h * grid_w); }
  std::size_t ratio_of(std::size_t k) const { return k / (grid_h * grid_w); }
};

// Anchors centred on a stride lattice that is itself centred in a square
// patch of side `patch_size`. For ratio r: w = stride*scale/sqrt(r),
// h = stride*scale*sqrt(r), so h/w = r.
AnchorGrid build_anchors(std::size_t grid_h, std::size_t grid_w, double scale, const std::vector<double>& ratios,
                         double stride, double patch_size);

// Standard anchor parameterisation, no clamping.
std::array<double, 4> encode_deltas(const Box& box, const Box& anchor);
Box decode_deltas(const std::array<double, 4>& d, const Box& anchor);

inline constexpr double kDeltaClamp = 4.0;
inline constexpr double kMinBoxSide = 1e-3;

// Differentiable decode of [K x 4] deltas into [K x 4] corner boxes clamped
// to [0, patch_size]. Log-scale deltas are clamped to +-kDeltaClamp.
Var decode_boxes(Var deltas, const AnchorGrid& anchors, double patch_size);

// All learnable weights: encoder, RPN head and the template-propagation block.
class Model {
 public:
  explicit Model(NetConfig cfg = {}, std::uint64_t seed = 0);

  const NetConfig& config() const { return cfg_; }
  const AnchorGrid& anchors() const { return anchors_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

 private:
  NetConfig cfg_;
  AnchorGrid anchors_;
  ParameterSet params_;
};

// A model's parameters placed on one tape.
class Bound {
 public:
  Bound(Tape& tape, Model& model);
  Var operator[](const std::string& name) const;
  Tape& tape() const { return *tape_; }
  const Model& model() const { return *model_; }

 private:
  Tape* tape_;
  Model* model_;
  std::unordered_map<std::string, Var> vars_;
};

// Patch (CHW in [0,1]) -> feature [C x side/stride x side/stride].
Var encode(const Bound& net, const Image& patch);
Var encode(const Bound& net, Var patch);

struct Prediction {
  Var logits;  // [K]
  Var scores;  // [K], logistic
  Var deltas;  // [K x 4]
  Var boxes;   // [K x 4], search-patch pixels
};

Prediction rpn_forward(const Bound& net, Var kernel, Var search_feat);

Box box_at(Var boxes, std::size_t k);
std::size_t argmax(const std::vector<double>& v);

}  // namespace ulast
