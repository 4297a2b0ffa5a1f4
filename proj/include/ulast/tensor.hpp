#pragma once

// Minimal reverse-mode autodiff over dense row-major float64 tensors.
//
// A Tape records every op in creation order; backward() walks it in reverse.
// Nothing is reordered, so replaying the same ops on the same inputs gives
// bit-identical values and gradients.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace ulast {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something writes a gradient

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  double item() const;

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad();
};

struct Parameter {
  std::string name;
  Tensor tensor;
  bool learnable = true;
};

// Ordered collection with unique names. Order is the creation order and is
// what checkpoints and gradient reduction iterate over.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value, bool learnable = true);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  // Allocates zero gradients for every learnable parameter.
  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::vector<Parameter> items_;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
  // Gradient after backward(); zeros if the node was unreachable.
  std::vector<double> grad() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  // Vars hold a pointer to their tape, so tapes stay put.
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var constant(Tensor t);
  Var leaf(Tensor t);
  Var param(Parameter& p);

  // Appends an op result. `fn` runs during backward with the recorded output
  // and reads its gradient through grad(out); it is dropped when no input
  // needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  bool grad_enabled() const { return grad_enabled_; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  // Output gradient of v, allocated on first access.
  std::vector<double>& grad(Var v);
  bool has_grad(Var v) const { return nodes_[v.id()].value.has_grad(); }

  void backward(Var loss);
  // Adds this tape's parameter-leaf gradients into Parameter::tensor.grad,
  // in the order the parameters were first placed on the tape.
  void accumulate_param_grads();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Node node);

  // deque: references to earlier values stay valid while ops are appended
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

// ---- ops -------------------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var abs(Var a);
Var sum(Var a);
Var mean(Var a);
// Forward identity, no gradient flow.
Var detach(Var a);
Var reshape(Var a, Shape shape);

Var matmul(Var a, Var b);
Var transpose(Var a);
// Swaps the last two axes of a rank-3 tensor.
Var transpose_last2(Var a);
Var softmax_axis(Var x, std::size_t axis);

Var conv2d(Var x, Var w, std::size_t stride, std::size_t pad);
// Full (channel-summed) sliding inner product: [1 x (H-h+1) x (W-w+1)].
Var xcorr(Var kernel, Var search);
// Per-channel sliding inner product: [C x (H-h+1) x (W-w+1)].
Var dw_xcorr(Var kernel, Var search);
Var norm_affine(Var x, Var gain, Var bias, double eps = 1e-5);

// Concatenation along axis 0.
Var concat0(Var a, Var b);
// x[C x H x W] * m[H x W], broadcast over channels.
Var mul_channels(Var x, Var m);
// Rows [begin, end) of axis 0.
Var slice0(Var a, std::size_t begin, std::size_t end);

// ---- optimisation and verification ------------------------------------------

// p <- p - lr * grad(p), then clears gradients. Throws ContractError if a
// learnable parameter has no gradient.
void sgd_step(ParameterSet& params, double lr);

struct MomentumState {
  std::vector<std::vector<double>> velocity;
};
// Heavy-ball variant: v <- mu*v + grad; p <- p - lr*v. mu = 0 is sgd_step.
void sgd_momentum_step(ParameterSet& params, MomentumState& state, double lr, double momentum);

double grad_norm(const ParameterSet& params);
void clip_grad_norm(ParameterSet& params, double max_norm);

using GraphBuilder = std::function<Var(Tape&, Var)>;

// Central-difference check of d f / d x. Returns the worst relative error
// |a - n| / max(|a|, |n|, 1e-8) over all coordinates of x.
double grad_check(const GraphBuilder& f, const Tensor& x, double h = 1e-5);

}  // namespace ulast
