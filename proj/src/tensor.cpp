#include "ulast/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include <cblas.h>

#include "ulast/error.hpp"

namespace ulast {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
}

double Tensor::item() const {
  if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
  return data[0];
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

// ---- ParameterSet ------------------------------------------------------------

Parameter& ParameterSet::add(std::string name, Tensor value, bool learnable) {
  if (find(name)) throw ContractError("duplicate parameter name: " + name);
  items_.push_back(Parameter{std::move(name), std::move(value), learnable});
  return items_.back();
}

Parameter* ParameterSet::find(const std::string& name) {
  for (auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

const Parameter* ParameterSet::find(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

Parameter& ParameterSet::at(const std::string& name) {
  if (auto* p = find(name)) return *p;
  throw ContractError("unknown parameter: " + name);
}

const Parameter& ParameterSet::at(const std::string& name) const {
  if (const auto* p = find(name)) return *p;
  throw ContractError("unknown parameter: " + name);
}

void ParameterSet::zero_grad() {
  for (auto& p : items_)
    if (p.learnable) p.tensor.grad.assign(p.tensor.numel(), 0.0);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

// ---- Var / Tape --------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(*this); }

std::vector<double> Var::grad() const {
  if (tape_->has_grad(*this)) return tape_->value(*this).grad;
  return std::vector<double>(numel(), 0.0);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Tensor t) { return push(Node{std::move(t), false, {}, nullptr}); }

Var Tape::leaf(Tensor t) {
  t.grad.clear();
  return push(Node{std::move(t), grad_enabled_, {}, nullptr});
}

Var Tape::param(Parameter& p) {
  Tensor copy(p.tensor.shape, p.tensor.data);
  return push(Node{std::move(copy), grad_enabled_ && p.learnable, {}, &p});
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  if (grad_enabled_)
    for (const auto& v : inputs) needs = needs || nodes_[v.id()].requires_grad;
  return push(Node{std::move(value), needs, needs ? std::move(fn) : BackwardFn{}, nullptr});
}

std::vector<double>& Tape::grad(Var v) {
  auto& t = nodes_[v.id()].value;
  t.ensure_grad();
  return t.grad;
}

void Tape::backward(Var loss) {
  if (loss.valid() && &loss.tape() != this) throw ContractError("backward: loss is not on this tape");
  if (value(loss).numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss).shape));
  if (!nodes_[loss.id()].requires_grad) return;
  grad(loss)[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.backward && n.value.has_grad()) n.backward(*this, Var(this, static_cast<std::uint32_t>(i)));
  }
}

void Tape::accumulate_param_grads() {
  for (auto& n : nodes_) {
    if (!n.param || !n.requires_grad || !n.value.has_grad()) continue;
    auto& g = n.param->tensor.grad;
    if (g.size() != n.value.grad.size()) g.assign(n.value.grad.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.value.grad[i];
  }
}

// ---- dense kernels -----------------------------------------------------------

namespace {

// Batch items already run on separate threads; keep BLAS itself serial so
// results do not depend on its thread pool.
[[maybe_unused]] const bool kBlasSerial = [] {
  openblas_set_num_threads(1);
  return true;
}();

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(m), int(n), int(k), 1.0, a, int(k), b, int(n), 1.0, c,
              int(n));
}

// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(m), int(n), int(k), 1.0, a, int(k), b, int(k), 1.0, c,
              int(n));
}

// c[m x n] += a[k x m]^T * b[k x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(m), int(n), int(k), 1.0, a, int(m), b, int(n), 1.0, c,
              int(n));
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(Var a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

void require_finite(const Tensor& t, const char* op) {
  for (double v : t.data)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace


// ---- elementwise -------------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] + y[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, Var o) {
    const auto& g = t.grad(o);
    for (Var in : {a, b}) {
      if (!t.requires_grad(in)) continue;
      auto& gi = t.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] - y[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, Var o) {
    const auto& g = t.grad(o);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] * y[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, Var o) {
    const auto& g = t.grad(o);
    const auto& x = t.value(a).data;
    const auto& y = t.value(b).data;
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

namespace {

// Elementwise op whose derivative is a function of (input, output).
template <typename F, typename D>
Var pointwise(Var a, F f, D dfdx) {
  Tensor out(a.shape());
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x[i]);
  return a.tape().record(std::move(out), {a}, [a, dfdx](Tape& t, Var o) {
    const auto& g = t.grad(o);
    const auto& x = t.value(a).data;
    const auto& y = t.value(o).data;
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace

Var scale(Var a, double c) {
  return pointwise(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return pointwise(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var relu(Var a) {
  return pointwise(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return pointwise(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  return pointwise(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().data)
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
  return pointwise(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(Var a) {
  return pointwise(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, Var o) {
    const double g = t.grad(o)[0];
    auto& ga = t.grad(a);
    for (auto& v : ga) v += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.numel());
  return scale(sum(a), 1.0 / n);
}

Var detach(Var a) { return a.tape().constant(Tensor(a.shape(), a.value().data)); }

Var reshape(Var a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), a.value().data);
  return a.tape().record(std::move(out), {a}, [a](Tape& t, Var o) {
    const auto& g = t.grad(o);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// ---- linear algebra ----------------------------------------------------------

Var matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({m, n});
  gemm_nn(a.value().data.data(), b.value().data.data(), out.data.data(), m, k, n);
  return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, Var o) {
    const auto& g = t.grad(o);
    if (t.requires_grad(a)) gemm_nt(g.data(), t.value(b).data.data(), t.grad(a).data(), m, n, k);
    if (t.requires_grad(b)) gemm_tn(t.value(a).data.data(), g.data(), t.grad(b).data(), k, m, n);
  });
}

Var transpose(Var a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out({c, r});
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = x[i * c + j];
  return a.tape().record(std::move(out), {a}, [a, r, c](Tape& t, Var o) {
    const auto& g = t.grad(o);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var transpose_last2(Var a) {
  require_rank(a, 3, "transpose_last2");
  const std::size_t b = a.shape()[0], r = a.shape()[1], c = a.shape()[2];
  Tensor out({b, c, r});
  const auto& x = a.value().data;
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.data[s * r * c + j * r + i] = x[s * r * c + i * c + j];
  return a.tape().record(std::move(out), {a}, [a, b, r, c](Tape& t, Var o) {
    const auto& g = t.grad(o);
    auto& ga = t.grad(a);
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[s * r * c + i * c + j] += g[s * r * c + j * r + i];
  });
}

Var softmax_axis(Var x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) throw ShapeError("softmax_axis: axis out of range for " + shape_str(shape));
  require_finite(x.value(), "softmax_axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  Tensor out(shape);
  const auto& v = x.value().data;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = v[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, v[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(v[base + i * inner] - mx);
        out.data[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) out.data[base + i * inner] /= z;
    }
  return x.tape().record(std::move(out), {x}, [x, outer, inner, n](Tape& t, Var o) {
    const auto& g = t.grad(o);
    const auto& y = t.value(o).data;
    auto& gx = t.grad(x);
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = a * n * inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t idx = base + i * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

// ---- convolution-style ops ---------------------------------------------------

Var conv2d(Var x, Var w, std::size_t stride, std::size_t pad) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const std::size_t Co = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != C)
    throw ShapeError("conv2d: weight expects " + std::to_string(w.shape()[1]) + " input channels, got " +
                     std::to_string(C));
  if (w.shape()[3] != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd size");
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t rows = C * k * k, N = Ho * Wo;

  // im2col, kept for the backward pass
  auto cols = std::make_shared<std::vector<double>>(rows * N, 0.0);
  const auto& xv = x.value().data;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* dst = cols->data() + ((c * k + ky) * k + kx) * N;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            dst[oy * Wo + ox] = xv[(c * H + iy) * W + ix];
          }
        }
      }
  Tensor out({Co, Ho, Wo});
  gemm_nn(w.value().data.data(), cols->data(), out.data.data(), Co, rows, N);

  return x.tape().record(std::move(out), {x, w}, [=](Tape& t, Var o) {
    const auto& g = t.grad(o);
    if (t.requires_grad(w)) gemm_nt(g.data(), cols->data(), t.grad(w).data(), Co, N, rows);
    if (t.requires_grad(x)) {
      std::vector<double> dcols(rows * N, 0.0);
      gemm_tn(t.value(w).data.data(), g.data(), dcols.data(), rows, Co, N);
      auto& gx = t.grad(x);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double* src = dcols.data() + ((c * k + ky) * k + kx) * N;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                gx[(c * H + iy) * W + ix] += src[oy * Wo + ox];
              }
            }
          }
    }
  });
}

namespace {

struct XcorrDims {
  std::size_t C, h, w, H, W, Ho, Wo;
};

XcorrDims xcorr_dims(Var kernel, Var search, const char* op) {
  require_rank(kernel, 3, op);
  require_rank(search, 3, op);
  XcorrDims d{kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], search.shape()[1], search.shape()[2], 0, 0};
  if (search.shape()[0] != d.C)
    throw ShapeError(std::string(op) + ": channel mismatch " + shape_str(kernel.shape()) + " vs " +
                     shape_str(search.shape()));
  if (d.h > d.H || d.w > d.W)
    throw ShapeError(std::string(op) + ": kernel " + shape_str(kernel.shape()) + " larger than search " +
                     shape_str(search.shape()));
  d.Ho = d.H - d.h + 1;
  d.Wo = d.W - d.w + 1;
  return d;
}

// Per-channel correlation; `per_channel` false sums into channel 0.
Var xcorr_impl(Var kernel, Var search, bool per_channel, const char* op) {
  const XcorrDims d = xcorr_dims(kernel, search, op);
  Tensor out({per_channel ? d.C : 1, d.Ho, d.Wo});
  const auto& kv = kernel.value().data;
  const auto& sv = search.value().data;
  for (std::size_t c = 0; c < d.C; ++c) {
    double* oc = out.data.data() + (per_channel ? c : 0) * d.Ho * d.Wo;
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        const double kw = kv[(c * d.h + y) * d.w + x];
        for (std::size_t oy = 0; oy < d.Ho; ++oy) {
          const double* srow = sv.data() + (c * d.H + oy + y) * d.W + x;
          double* orow = oc + oy * d.Wo;
          for (std::size_t ox = 0; ox < d.Wo; ++ox) orow[ox] += kw * srow[ox];
        }
      }
  }
  return kernel.tape().record(std::move(out), {kernel, search}, [=](Tape& t, Var o) {
    const auto& g = t.grad(o);
    const auto& kv = t.value(kernel).data;
    const auto& sv = t.value(search).data;
    const bool gk = t.requires_grad(kernel), gs = t.requires_grad(search);
    double* dk = gk ? t.grad(kernel).data() : nullptr;
    double* ds = gs ? t.grad(search).data() : nullptr;
    for (std::size_t c = 0; c < d.C; ++c) {
      const double* gc = g.data() + (per_channel ? c : 0) * d.Ho * d.Wo;
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) {
          const std::size_t ki = (c * d.h + y) * d.w + x;
          const double kw = kv[ki];
          double acc = 0.0;
          for (std::size_t oy = 0; oy < d.Ho; ++oy) {
            const std::size_t srow = (c * d.H + oy + y) * d.W + x;
            const double* grow = gc + oy * d.Wo;
            for (std::size_t ox = 0; ox < d.Wo; ++ox) {
              acc += grow[ox] * sv[srow + ox];
              if (ds) ds[srow + ox] += grow[ox] * kw;
            }
          }
          if (dk) dk[ki] += acc;
        }
    }
  });
}

}  // namespace

Var xcorr(Var kernel, Var search) { return xcorr_impl(kernel, search, false, "xcorr"); }

Var dw_xcorr(Var kernel, Var search) { return xcorr_impl(kernel, search, true, "dw_xcorr"); }

Var norm_affine(Var x, Var gain, Var bias, double eps) {
  require_rank(x, 3, "norm_affine");
  const std::size_t C = x.shape()[0], N = x.shape()[1] * x.shape()[2];
  if (gain.numel() != C || bias.numel() != C)
    throw ShapeError("norm_affine: gain/bias must have " + std::to_string(C) + " entries");
  auto xhat = std::make_shared<std::vector<double>>(C * N);
  auto inv_std = std::make_shared<std::vector<double>>(C);
  Tensor out(x.shape());
  const auto& xv = x.value().data;
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  for (std::size_t c = 0; c < C; ++c) {
    const double* xc = xv.data() + c * N;
    double mu = 0.0;
    for (std::size_t i = 0; i < N; ++i) mu += xc[i];
    mu /= static_cast<double>(N);
    double var = 0.0;
    for (std::size_t i = 0; i < N; ++i) var += (xc[i] - mu) * (xc[i] - mu);
    var /= static_cast<double>(N);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[c] = is;
    for (std::size_t i = 0; i < N; ++i) {
      const double xh = (xc[i] - mu) * is;
      (*xhat)[c * N + i] = xh;
      out.data[c * N + i] = gv[c] * xh + bv[c];
    }
  }
  return x.tape().record(std::move(out), {x, gain, bias}, [=](Tape& t, Var o) {
    const auto& g = t.grad(o);
    const auto& gv = t.value(gain).data;
    for (std::size_t c = 0; c < C; ++c) {
      const double* gc = g.data() + c * N;
      const double* xh = xhat->data() + c * N;
      double sg = 0.0, sgx = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        sg += gc[i];
        sgx += gc[i] * xh[i];
      }
      if (t.requires_grad(gain)) t.grad(gain)[c] += sgx;
      if (t.requires_grad(bias)) t.grad(bias)[c] += sg;
      if (t.requires_grad(x)) {
        auto& gx = t.grad(x);
        const double k = gv[c] * (*inv_std)[c] / static_cast<double>(N);
        const double nd = static_cast<double>(N);
        for (std::size_t i = 0; i < N; ++i) gx[c * N + i] += k * (nd * gc[i] - sg - xh[i] * sgx);
      }
    }
  });
}

// ---- structural --------------------------------------------------------------

Var concat0(Var a, Var b) {
  if (a.value().rank() == 0 || a.value().rank() != b.value().rank())
    throw ShapeError("concat0: rank mismatch");
  for (std::size_t i = 1; i < a.value().rank(); ++i)
    if (a.shape()[i] != b.shape()[i])
      throw ShapeError("concat0: trailing dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape s = a.shape();
  s[0] += b.shape()[0];
  std::vector<double> data = a.value().data;
  data.insert(data.end(), b.value().data.begin(), b.value().data.end());
  const std::size_t na = a.numel();
  return a.tape().record(Tensor(std::move(s), std::move(data)), {a, b}, [a, b, na](Tape& t, Var o) {
    const auto& g = t.grad(o);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

Var mul_channels(Var x, Var m) {
  require_rank(x, 3, "mul_channels");
  require_rank(m, 2, "mul_channels");
  const std::size_t C = x.shape()[0], N = x.shape()[1] * x.shape()[2];
  if (m.shape()[0] != x.shape()[1] || m.shape()[1] != x.shape()[2])
    throw ShapeError("mul_channels: spatial mismatch " + shape_str(x.shape()) + " vs " + shape_str(m.shape()));
  Tensor out(x.shape());
  const auto& xv = x.value().data;
  const auto& mv = m.value().data;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < N; ++i) out.data[c * N + i] = xv[c * N + i] * mv[i];
  return x.tape().record(std::move(out), {x, m}, [x, m, C, N](Tape& t, Var o) {
    const auto& g = t.grad(o);
    const auto& xv = t.value(x).data;
    const auto& mv = t.value(m).data;
    if (t.requires_grad(x)) {
      auto& gx = t.grad(x);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i) gx[c * N + i] += g[c * N + i] * mv[i];
    }
    if (t.requires_grad(m)) {
      auto& gm = t.grad(m);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i) gm[i] += g[c * N + i] * xv[c * N + i];
    }
  });
}

Var slice0(Var a, std::size_t begin, std::size_t end) {
  if (a.value().rank() == 0 || begin > end || end > a.shape()[0])
    throw ShapeError("slice0: bad range for " + shape_str(a.shape()));
  const std::size_t row = a.numel() / a.shape()[0];
  Shape s = a.shape();
  s[0] = end - begin;
  std::vector<double> data(a.value().data.begin() + begin * row, a.value().data.begin() + end * row);
  return a.tape().record(Tensor(std::move(s), std::move(data)), {a}, [a, begin, row](Tape& t, Var o) {
    const auto& g = t.grad(o);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * row + i] += g[i];
  });
}

// ---- optimisation ------------------------------------------------------------

void sgd_step(ParameterSet& params, double lr) {
  for (auto& p : params.items()) {
    if (!p.learnable) continue;
    if (p.tensor.grad.size() != p.tensor.numel()) throw ContractError("sgd_step: missing gradient for " + p.name);
  }
  for (auto& p : params.items()) {
    if (!p.learnable) continue;
    for (std::size_t i = 0; i < p.tensor.numel(); ++i) p.tensor.data[i] -= lr * p.tensor.grad[i];
    p.tensor.grad.clear();
  }
}

void sgd_momentum_step(ParameterSet& params, MomentumState& state, double lr, double momentum) {
  if (momentum == 0.0) return sgd_step(params, lr);
  auto& items = params.items();
  for (auto& p : items)
    if (p.learnable && p.tensor.grad.size() != p.tensor.numel())
      throw ContractError("sgd_momentum_step: missing gradient for " + p.name);
  if (state.velocity.size() != items.size()) {
    state.velocity.clear();
    for (auto& p : items) state.velocity.emplace_back(p.tensor.numel(), 0.0);
  }
  for (std::size_t k = 0; k < items.size(); ++k) {
    auto& p = items[k];
    if (!p.learnable) continue;
    auto& v = state.velocity[k];
    for (std::size_t i = 0; i < p.tensor.numel(); ++i) {
      v[i] = momentum * v[i] + p.tensor.grad[i];
      p.tensor.data[i] -= lr * v[i];
    }
    p.tensor.grad.clear();
  }
}

double grad_norm(const ParameterSet& params) {
  double s = 0.0;
  for (const auto& p : params.items())
    for (double g : p.tensor.grad) s += g * g;
  return std::sqrt(s);
}

void clip_grad_norm(ParameterSet& params, double max_norm) {
  const double n = grad_norm(params);
  if (!(n > max_norm) || max_norm <= 0.0) return;
  const double f = max_norm / n;
  for (auto& p : params.items())
    for (double& g : p.tensor.grad) g *= f;
}

double grad_check(const GraphBuilder& f, const Tensor& x, double h) {
  Tape tape;
  Var xv = tape.leaf(Tensor(x.shape, x.data));
  Var y = f(tape, xv);
  tape.backward(y);
  const auto analytic = xv.grad();

  auto eval = [&](const std::vector<double>& data) {
    Tape t(false);
    Var in = t.constant(Tensor(x.shape, data));
    return f(t, in).value().item();
  };
  double worst = 0.0;
  std::vector<double> probe = x.data;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    probe[i] = x.data[i] + h;
    const double fp = eval(probe);
    probe[i] = x.data[i] - h;
    const double fm = eval(probe);
    probe[i] = x.data[i];
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
    worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace ulast
