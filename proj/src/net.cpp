#include "ulast/net.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ulast/error.hpp"

namespace ulast {

AnchorGrid build_anchors(std::size_t grid_h, std::size_t grid_w, double scale, const std::vector<double>& ratios,
                         double stride, double patch_size) {
  if (ratios.empty()) throw ContractError("build_anchors: ratios must be non-empty");
  for (double r : ratios)
    if (!(r > 0)) throw ContractError("build_anchors: ratios must be positive");
  AnchorGrid g;
  g.grid_h = grid_h;
  g.grid_w = grid_w;
  g.scale = scale;
  g.stride = stride;
  g.ratios = ratios;
  const double oy = 0.5 * (patch_size - static_cast<double>(grid_h - 1) * stride);
  const double ox = 0.5 * (patch_size - static_cast<double>(grid_w - 1) * stride);
  const double base = stride * scale;
  for (double r : ratios) {
    const double w = base / std::sqrt(r), h = base * std::sqrt(r);
    for (std::size_t i = 0; i < grid_h; ++i)
      for (std::size_t j = 0; j < grid_w; ++j)
        g.anchors.push_back(Box::from_center(ox + static_cast<double>(j) * stride, oy + static_cast<double>(i) * stride, w, h));
  }
  return g;
}

std::array<double, 4> encode_deltas(const Box& box, const Box& a) {
  return {(box.cx() - a.cx()) / a.width(), (box.cy() - a.cy()) / a.height(), std::log(box.width() / a.width()),
          std::log(box.height() / a.height())};
}

Box decode_deltas(const std::array<double, 4>& d, const Box& a) {
  return Box::from_center(a.cx() + d[0] * a.width(), a.cy() + d[1] * a.height(), a.width() * std::exp(d[2]),
                          a.height() * std::exp(d[3]));
}

Var decode_boxes(Var deltas, const AnchorGrid& anchors, double patch_size) {
  const std::size_t K = anchors.count();
  if (deltas.shape() != Shape{K, 4})
    throw ShapeError("decode_boxes: expected [" + std::to_string(K) + "x4], got " + shape_str(deltas.shape()));
  // d(corner)/d(delta) is sparse: corner x depends on (dx, dw), y on (dy, dh).
  auto jac = std::make_shared<std::vector<double>>(K * 8, 0.0);
  Tensor out({K, 4});
  const auto& d = deltas.value().data;
  for (std::size_t k = 0; k < K; ++k) {
    const Box& a = anchors.anchors[k];
    const double* dk = d.data() + 4 * k;
    double* jk = jac->data() + 8 * k;
    auto axis = [&](double a_c, double a_s, double dc, double ds, std::size_t lo, std::size_t hi, std::size_t j0) {
      const double c = a_c + dc * a_s;
      const bool clamped = ds > kDeltaClamp || ds < -kDeltaClamp;
      const double e = a_s * std::exp(std::clamp(ds, -kDeltaClamp, kDeltaClamp));
      const double dsd = clamped ? 0.0 : e;  // d(size)/d(ds)
      const double r1 = c - 0.5 * e, r2 = c + 0.5 * e;
      // low corner: min(max(r1, 0), S - eps); first argument wins ties
      double v1 = r1, g1c = a_s, g1s = -0.5 * dsd;
      if (!(v1 >= 0.0)) v1 = 0.0, g1c = 0.0, g1s = 0.0;
      if (!(v1 <= patch_size - kMinBoxSide)) v1 = patch_size - kMinBoxSide, g1c = 0.0, g1s = 0.0;
      // high corner: max(min(r2, S), v1 + eps)
      double v2 = r2, g2c = a_s, g2s = 0.5 * dsd;
      if (!(v2 <= patch_size)) v2 = patch_size, g2c = 0.0, g2s = 0.0;
      if (!(v2 >= v1 + kMinBoxSide)) v2 = v1 + kMinBoxSide, g2c = g1c, g2s = g1s;
      out.data[4 * k + lo] = v1;
      out.data[4 * k + hi] = v2;
      jk[j0 + 0] = g1c;
      jk[j0 + 1] = g1s;
      jk[j0 + 2] = g2c;
      jk[j0 + 3] = g2s;
    };
    axis(a.cx(), a.width(), dk[0], dk[2], 0, 2, 0);
    axis(a.cy(), a.height(), dk[1], dk[3], 1, 3, 4);
  }
  return deltas.tape().record(std::move(out), {deltas}, [deltas, jac, K](Tape& t, Var o) {
    const auto& g = t.grad(o);
    auto& gd = t.grad(deltas);
    for (std::size_t k = 0; k < K; ++k) {
      const double* jk = jac->data() + 8 * k;
      const double* gk = g.data() + 4 * k;
      gd[4 * k + 0] += gk[0] * jk[0] + gk[2] * jk[2];
      gd[4 * k + 2] += gk[0] * jk[1] + gk[2] * jk[3];
      gd[4 * k + 1] += gk[1] * jk[4] + gk[3] * jk[6];
      gd[4 * k + 3] += gk[1] * jk[5] + gk[3] * jk[7];
    }
  });
}

// ---- model -------------------------------------------------------------------

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& v : t.data) v = n(rng);
  return t;
}

}  // namespace

Model::Model(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.stride != 4) throw ConfigError("model: the encoder has a fixed total stride of 4");
  if (cfg_.template_size % cfg_.stride || cfg_.search_size % cfg_.stride || cfg_.search_size <= cfg_.template_size)
    throw ConfigError("model: patch sizes must be multiples of the stride with search > template");
  const std::size_t g = cfg_.grid();
  anchors_ = build_anchors(g, g, cfg_.anchor_scale, cfg_.ratios, static_cast<double>(cfg_.stride),
                           static_cast<double>(cfg_.search_size));

  std::mt19937_64 rng(seed);
  const std::size_t C = cfg_.channels, R = cfg_.ratios.size();
  auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  auto lecun = [](std::size_t fan_in) { return std::sqrt(1.0 / static_cast<double>(fan_in)); };

  params_.add("enc.conv1.w", normal_tensor({C, 3, 3, 3}, he(27), rng));
  params_.add("enc.conv2.w", normal_tensor({C, C, 3, 3}, he(9 * C), rng));
  params_.add("enc.conv3.w", normal_tensor({C, C, 3, 3}, lecun(9 * C), rng));

  params_.add("rpn.norm.gain", Tensor({C}, 1.0));
  params_.add("rpn.norm.bias", Tensor({C}, 0.0));
  params_.add("rpn.cls_hidden.w", normal_tensor({C, C, 1, 1}, he(C), rng));
  params_.add("rpn.cls.w", normal_tensor({R, C, 1, 1}, 0.1 * lecun(C), rng));
  params_.add("rpn.reg_hidden.w", normal_tensor({C, C, 1, 1}, he(C), rng));
  params_.add("rpn.reg.w", normal_tensor({4 * R, C, 1, 1}, 0.1 * lecun(C), rng));

  params_.add("cpt.q_long.w", normal_tensor({C, C, 1, 1}, lecun(C), rng));
  params_.add("cpt.q_short.w", normal_tensor({C, C, 1, 1}, lecun(C), rng));
  params_.add("cpt.key.w", normal_tensor({C, C, 1, 1}, lecun(C), rng));
  params_.add("cpt.value.w", normal_tensor({C, C, 1, 1}, lecun(C), rng));
  params_.add("cpt.f.w", normal_tensor({C, 2 * C, 3, 3}, lecun(18 * C), rng));
  params_.add("cpt.f.gain", Tensor({C}, 1.0));
  params_.add("cpt.f.bias", Tensor({C}, 0.0));
  params_.add("cpt.h.w", normal_tensor({C, 2 * C, 3, 3}, lecun(18 * C), rng));
  params_.add("cpt.h.gain", Tensor({C}, 1.0));
  params_.add("cpt.h.bias", Tensor({C}, 0.0));
}

Bound::Bound(Tape& tape, Model& model) : tape_(&tape), model_(&model) {
  for (auto& p : model.params().items()) vars_.emplace(p.name, tape.param(p));
}

Var Bound::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

Var encode(const Bound& net, Var patch) {
  const auto& cfg = net.model().config();
  const auto& s = patch.shape();
  if (s.size() != 3 || s[0] != 3 || s[1] != s[2] || s[1] % cfg.stride != 0)
    throw ShapeError("encode: patch must be 3 x S x S with S divisible by " + std::to_string(cfg.stride) +
                     ", got " + shape_str(s));
  Var x = add_scalar(patch, -0.5);
  x = relu(conv2d(x, net["enc.conv1.w"], 2, 1));
  x = relu(conv2d(x, net["enc.conv2.w"], 2, 1));
  return conv2d(x, net["enc.conv3.w"], 1, 1);
}

Var encode(const Bound& net, const Image& patch) { return encode(net, net.tape().constant(patch.to_tensor())); }

Prediction rpn_forward(const Bound& net, Var kernel, Var search_feat) {
  const auto& cfg = net.model().config();
  const auto& anchors = net.model().anchors();
  if (kernel.shape().size() != 3 || search_feat.shape().size() != 3 || kernel.shape()[0] != search_feat.shape()[0])
    throw ShapeError("rpn_forward: kernel " + shape_str(kernel.shape()) + " vs search " +
                     shape_str(search_feat.shape()));
  Var corr = dw_xcorr(kernel, search_feat);
  if (corr.shape()[1] != anchors.grid_h || corr.shape()[2] != anchors.grid_w)
    throw ShapeError("rpn_forward: response " + shape_str(corr.shape()) + " does not match anchor grid");
  Var h = relu(norm_affine(corr, net["rpn.norm.gain"], net["rpn.norm.bias"]));
  Var cls = conv2d(relu(conv2d(h, net["rpn.cls_hidden.w"], 1, 0)), net["rpn.cls.w"], 1, 0);
  Var reg = conv2d(relu(conv2d(h, net["rpn.reg_hidden.w"], 1, 0)), net["rpn.reg.w"], 1, 0);
  const std::size_t R = anchors.ratios.size(), N = anchors.grid_h * anchors.grid_w, K = R * N;
  Prediction p;
  p.logits = reshape(cls, {K});
  p.scores = sigmoid(p.logits);
  p.deltas = reshape(transpose_last2(reshape(reg, {R, 4, N})), {K, 4});
  p.boxes = decode_boxes(p.deltas, anchors, static_cast<double>(cfg.search_size));
  return p;
}

Box box_at(Var boxes, std::size_t k) {
  const auto& d = boxes.value().data;
  return {d[4 * k], d[4 * k + 1], d[4 * k + 2], d[4 * k + 3]};
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace ulast
