#include "ulast/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ulast/error.hpp"

namespace ulast {

std::vector<double> Image::channel_means() const {
  std::vector<double> m(channels, 0.0);
  const std::size_t n = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += data[c * n + i];
    m[c] = n ? s / static_cast<double>(n) : 0.0;
  }
  return m;
}

Tensor Image::to_tensor() const {
  return Tensor({channels, height, width}, std::vector<double>(data.begin(), data.end()));
}

namespace {

using Color = std::array<float, 3>;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  if (!(hi > lo)) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Color random_color(std::mt19937_64& rng, double lo = 0.05, double hi = 0.95) {
  return {static_cast<float>(uniform(rng, lo, hi)), static_cast<float>(uniform(rng, lo, hi)),
          static_cast<float>(uniform(rng, lo, hi))};
}

double color_gap(const Color& a, const Color& b) {
  return std::fabs(a[0] - b[0]) + std::fabs(a[1] - b[1]) + std::fabs(a[2] - b[2]);
}

enum class Pattern { Solid, Checker, HStripes, VStripes };

struct Sprite {
  Box box;
  Color a{}, b{};
  Pattern pattern = Pattern::Solid;
  double cell = 4.0;
  double vx = 0, vy = 0;
};

// Alpha-composites a rectangle with per-pixel coverage so sub-pixel motion
// is visible in the rendered frames.
void draw_sprite(Image& img, const Sprite& s) {
  const Box& b = s.box;
  const long x0 = std::max(0L, static_cast<long>(std::floor(b.x1)));
  const long y0 = std::max(0L, static_cast<long>(std::floor(b.y1)));
  const long x1 = std::min(static_cast<long>(img.width) - 1, static_cast<long>(std::ceil(b.x2)));
  const long y1 = std::min(static_cast<long>(img.height) - 1, static_cast<long>(std::ceil(b.y2)));
  for (long y = y0; y <= y1; ++y) {
    const double cov_y = std::min<double>(y + 1, b.y2) - std::max<double>(y, b.y1);
    if (cov_y <= 0) continue;
    for (long x = x0; x <= x1; ++x) {
      const double cov_x = std::min<double>(x + 1, b.x2) - std::max<double>(x, b.x1);
      if (cov_x <= 0) continue;
      const double alpha = cov_x * cov_y;
      // pattern in box-relative coordinates, scaled with the box
      const double u = (x + 0.5 - b.x1) / b.width() * 4.0;
      const double v = (y + 0.5 - b.y1) / b.height() * 4.0;
      bool use_b = false;
      switch (s.pattern) {
        case Pattern::Solid: break;
        case Pattern::Checker: use_b = (static_cast<long>(std::floor(u)) + static_cast<long>(std::floor(v))) % 2 != 0; break;
        case Pattern::HStripes: use_b = static_cast<long>(std::floor(v)) % 2 != 0; break;
        case Pattern::VStripes: use_b = static_cast<long>(std::floor(u)) % 2 != 0; break;
      }
      const Color& c = use_b ? s.b : s.a;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        float& p = img.at(ch, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
        p = static_cast<float>((1.0 - alpha) * p + alpha * c[ch]);
      }
    }
  }
}

void step_motion(Sprite& s, std::mt19937_64& rng, double max_speed, double frame) {
  std::normal_distribution<double> jitter(0.0, 1.0);
  const double n1 = jitter(rng), n2 = jitter(rng);
  s.vx += 0.15 * max_speed * n1;
  s.vy += 0.15 * max_speed * n2;
  const double speed = std::hypot(s.vx, s.vy);
  if (speed > max_speed && speed > 0) {
    s.vx *= max_speed / speed;
    s.vy *= max_speed / speed;
  }
  double cx = s.box.cx() + s.vx, cy = s.box.cy() + s.vy;
  const double hw = 0.5 * s.box.width(), hh = 0.5 * s.box.height();
  if (cx < hw + 1 || cx > frame - hw - 1) {
    s.vx = -s.vx;
    cx = std::clamp(cx, hw + 1, frame - hw - 1);
  }
  if (cy < hh + 1 || cy > frame - hh - 1) {
    s.vy = -s.vy;
    cy = std::clamp(cy, hh + 1, frame - hh - 1);
  }
  s.box = Box::from_center(cx, cy, 2 * hw, 2 * hh);
}

Sprite random_sprite(std::mt19937_64& rng, const SceneSpec& spec, double frame) {
  Sprite s;
  const double side = uniform(rng, spec.min_target, spec.max_target);
  const double aspect = std::exp(uniform(rng, -std::log(spec.max_aspect), std::log(spec.max_aspect)));
  const double w = side * std::sqrt(aspect), h = side / std::sqrt(aspect);
  const double cx = uniform(rng, 0.5 * w + 2, frame - 0.5 * w - 2);
  const double cy = uniform(rng, 0.5 * h + 2, frame - 0.5 * h - 2);
  s.box = Box::from_center(cx, cy, w, h);
  const double angle = uniform(rng, 0.0, 2.0 * M_PI);
  const double speed = uniform(rng, 0.3, 1.0) * spec.max_speed;
  s.vx = speed * std::cos(angle);
  s.vy = speed * std::sin(angle);
  return s;
}

}  // namespace

void validate_scene_spec(const SceneSpec& spec) {
  if (spec.image_size < 32) throw ConfigError("scene: image_size must be >= 32");
  if (spec.n_frames < 4) throw ConfigError("scene: n_frames must be >= 4");
  if (!(spec.min_target >= 2.0) || spec.max_target < spec.min_target)
    throw ConfigError("scene: need 2 <= min_target <= max_target");
  if (!(spec.max_aspect >= 1.0)) throw ConfigError("scene: max_aspect must be >= 1");
  const double widest = spec.max_target * std::sqrt(spec.max_aspect) * (1.0 + 0.3);
  if (widest + 4.0 > static_cast<double>(spec.image_size))
    throw ConfigError("scene: object larger than frame");
  if (spec.max_speed < 0 || spec.max_scale_step < 0 || spec.max_scale_step >= 0.5)
    throw ConfigError("scene: motion/scale ranges out of bounds");
}

SyntheticSequence generate_sequence(const SceneSpec& spec, std::uint64_t seed) {
  validate_scene_spec(spec);
  std::mt19937_64 rng(seed);
  const std::size_t S = spec.image_size;
  const double frame = static_cast<double>(S);

  // static background: gradient plus faint blocks
  Image bg(3, S, S);
  const Color c0 = random_color(rng, 0.2, 0.8), c1 = random_color(rng, 0.2, 0.8);
  const double angle = uniform(rng, 0.0, 2.0 * M_PI);
  const double gx = std::cos(angle), gy = std::sin(angle);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double t = 0.5 + 0.5 * ((x / frame - 0.5) * gx + (y / frame - 0.5) * gy) * 1.4;
      for (std::size_t ch = 0; ch < 3; ++ch)
        bg.at(ch, y, x) = static_cast<float>((1 - t) * c0[ch] + t * c1[ch]);
    }
  for (int i = 0; i < 10; ++i) {
    Sprite blk;
    const double w = uniform(rng, 8, frame / 3), h = uniform(rng, 8, frame / 3);
    blk.box = Box::from_center(uniform(rng, 0, frame), uniform(rng, 0, frame), w, h);
    const Color c = random_color(rng, 0.2, 0.8);
    Image over = bg;
    blk.a = c;
    draw_sprite(over, blk);
    for (std::size_t k = 0; k < bg.data.size(); ++k) bg.data[k] = 0.7f * bg.data[k] + 0.3f * over.data[k];
  }

  Sprite target = random_sprite(rng, spec, frame);
  target.pattern = static_cast<Pattern>(1 + rng() % 3);
  target.a = random_color(rng);
  do {
    target.b = random_color(rng);
  } while (color_gap(target.a, target.b) < 0.8);

  std::vector<Sprite> distractors;
  for (std::size_t i = 0; i < spec.n_distractors; ++i) {
    Sprite d = random_sprite(rng, spec, frame);
    d.pattern = static_cast<Pattern>(rng() % 4);
    d.a = random_color(rng);
    d.b = random_color(rng);
    distractors.push_back(d);
  }

  const double base_w = target.box.width();
  SyntheticSequence seq;
  seq.seed = seed;
  seq.seq_id = "syn-" + std::to_string(seed);
  for (std::size_t f = 0; f < spec.n_frames; ++f) {
    if (f > 0) {
      for (auto& d : distractors) step_motion(d, rng, spec.max_speed, frame);
      const double factor = 1.0 + uniform(rng, -spec.max_scale_step, spec.max_scale_step);
      double w = target.box.width() * factor, h = target.box.height() * factor;
      const double ratio = w / base_w;
      if (ratio < 0.7 || ratio > 1.3) {  // keep size bounded; revert this frame's change
        w = target.box.width();
        h = target.box.height();
      }
      target.box = Box::from_center(target.box.cx(), target.box.cy(), w, h);
      step_motion(target, rng, spec.max_speed, frame);
    }
    Image img = bg;
    for (const auto& d : distractors) draw_sprite(img, d);
    draw_sprite(img, target);
    if (spec.pixel_noise > 0)
      for (auto& p : img.data)
        p = std::clamp(static_cast<float>(p + uniform(rng, -spec.pixel_noise, spec.pixel_noise)), 0.f, 1.f);
    seq.frames.push_back(std::move(img));
    seq.gt_boxes.push_back(target.box);
  }
  return seq;
}

std::string check_sequence(const SyntheticSequence& seq) {
  if (seq.frames.size() < 4) return "fewer than 4 frames";
  if (seq.frames.size() != seq.gt_boxes.size()) return "frame/box count mismatch";
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const auto& img = seq.frames[i];
    const auto& b = seq.gt_boxes[i];
    for (float v : img.data)
      if (!(v >= 0.f && v <= 1.f)) return "pixel out of [0,1] in frame " + std::to_string(i);
    if (!(b.x1 > 0 && b.y1 > 0 && b.x2 < static_cast<double>(img.width) && b.y2 < static_cast<double>(img.height)))
      return "box not strictly inside frame " + std::to_string(i);
    if (!(b.area() >= 4.0)) return "box area below 4 px^2 in frame " + std::to_string(i);
  }
  return {};
}

// ---- jitter ------------------------------------------------------------------

std::array<double, 4> draw_jitter(double level, std::mt19937_64& rng) {
  if (!(level >= 0.0 && level <= 1.0)) throw ContractError("jitter level must be in [0,1]");
  std::array<double, 4> s{};
  for (auto& v : s) v = uniform(rng, -0.5 * level, 0.5 * level);
  return s;
}

Box apply_jitter(const Box& box, const std::array<double, 4>& sigma, double frame_w, double frame_h) {
  if (sigma == std::array<double, 4>{}) return box;
  const double w = box.width(), h = box.height();
  const Box j = Box::from_center(box.cx() + sigma[0] * w, box.cy() + sigma[1] * h, (1 + sigma[2]) * w,
                                 (1 + sigma[3]) * h);
  return clamp_box(j, frame_w, frame_h, 2.0);
}

Box jitter_box(const Box& box, double level, std::uint64_t seed, double frame_w, double frame_h) {
  std::mt19937_64 rng(seed);
  return apply_jitter(box, draw_jitter(level, rng), frame_w, frame_h);
}

// ---- palindrome sampling -----------------------------------------------------

std::vector<std::size_t> palindrome_order(std::size_t n_search) {
  std::vector<std::size_t> order;
  for (std::size_t i = 2; i <= n_search + 1; ++i) order.push_back(i);
  for (std::size_t i = n_search; i >= 2; --i) order.push_back(i);
  return order;
}

std::vector<std::size_t> CycleSample::search_order() const { return palindrome_order(frames.size() - 1); }

CycleSample sample_palindrome(const SyntheticSequence& seq, std::size_t n_search, std::size_t gap,
                              std::uint64_t seed, double jitter_level) {
  if (n_search < 1) throw RangeError("sample_palindrome: n_search must be >= 1");
  if (gap < 1 || 1 + n_search * gap > seq.frames.size())
    throw RangeError("sample_palindrome: " + std::to_string(seq.frames.size()) + " frames cannot hold " +
                     std::to_string(n_search) + " search frames at gap " + std::to_string(gap));
  std::mt19937_64 rng(seed);
  CycleSample s;
  const auto& f0 = seq.frames.front();
  const double fw = static_cast<double>(f0.width), fh = static_cast<double>(f0.height);
  for (std::size_t i = 0; i <= n_search; ++i) {
    const std::size_t idx = i * gap;
    s.frames.push_back(seq.frames[idx]);
    s.frame_indices.push_back(idx + 1);
    s.gt_boxes.push_back(seq.gt_boxes[idx]);
  }
  s.pseudo_label.noise_level = jitter_level;
  s.pseudo_label.box = apply_jitter(s.gt_boxes[0], draw_jitter(jitter_level, rng), fw, fh);
  for (std::size_t i = 0; i <= n_search; ++i) {
    const Box j = apply_jitter(s.gt_boxes[i], draw_jitter(jitter_level, rng), fw, fh);
    s.pseudo_label.centers.push_back(i == 0 ? std::array{s.pseudo_label.box.cx(), s.pseudo_label.box.cy()}
                                            : std::array{j.cx(), j.cy()});
  }
  return s;
}

// ---- cropping ----------------------------------------------------------------

Box PatchTransform::to_patch(const Box& b) const {
  return {(b.x1 - origin_x) * scale, (b.y1 - origin_y) * scale, (b.x2 - origin_x) * scale,
          (b.y2 - origin_y) * scale};
}

Box PatchTransform::to_frame(const Box& b) const {
  return {b.x1 / scale + origin_x, b.y1 / scale + origin_y, b.x2 / scale + origin_x, b.y2 / scale + origin_y};
}

std::array<double, 2> PatchTransform::point_to_frame(double px, double py) const {
  return {px / scale + origin_x, py / scale + origin_y};
}

Patch crop_patch(const Image& frame, double cx, double cy, std::size_t size, double context) {
  if (size == 0) throw ContractError("crop_patch: size must be > 0");
  if (!(context > 0)) throw ContractError("crop_patch: context must be > 0");
  Patch out;
  out.transform.origin_x = cx - 0.5 * context;
  out.transform.origin_y = cy - 0.5 * context;
  out.transform.scale = static_cast<double>(size) / context;
  out.image = Image(frame.channels, size, size);
  const auto mean = frame.channel_means();
  const double step = context / static_cast<double>(size);
  const long H = static_cast<long>(frame.height), W = static_cast<long>(frame.width);
  for (std::size_t py = 0; py < size; ++py) {
    const double fy = out.transform.origin_y + (py + 0.5) * step - 0.5;
    const double y0f = std::floor(fy);
    const double wy = fy - y0f;
    const long y0 = static_cast<long>(y0f);
    for (std::size_t px = 0; px < size; ++px) {
      const double fx = out.transform.origin_x + (px + 0.5) * step - 0.5;
      const double x0f = std::floor(fx);
      const double wx = fx - x0f;
      const long x0 = static_cast<long>(x0f);
      for (std::size_t c = 0; c < frame.channels; ++c) {
        auto sample = [&](long y, long x) -> double {
          if (y < 0 || y >= H || x < 0 || x >= W) return mean[c];
          return frame.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
        };
        double v = (1 - wy) * (1 - wx) * sample(y0, x0);
        if (wx > 0) v += (1 - wy) * wx * sample(y0, x0 + 1);
        if (wy > 0) v += wy * (1 - wx) * sample(y0 + 1, x0);
        if (wx > 0 && wy > 0) v += wy * wx * sample(y0 + 1, x0 + 1);
        out.image.at(c, py, px) = static_cast<float>(v);
      }
    }
  }
  return out;
}

// ---- export ------------------------------------------------------------------

void write_ppm(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 3) throw ContractError("write_ppm: need 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        buf[(y * img.width + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(std::clamp(img.at(c, y, x), 0.f, 1.f) * 255.f));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  is >> magic >> w >> h >> maxv;
  if (magic != "P6" || maxv != 255) throw FormatError("unsupported PPM header", 0);
  is.get();
  std::vector<unsigned char> buf(w * h * 3);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size())
    throw FormatError("truncated PPM", static_cast<std::size_t>(is.gcount()));
  Image img(3, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = buf[(y * w + x) * 3 + c] / 255.f;
  return img;
}

void export_sequence(const SyntheticSequence& seq, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream boxes(dir / "boxes.txt");
  if (!boxes) throw std::runtime_error("cannot write " + (dir / "boxes.txt").string());
  char name[32];
  char line[128];
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    std::snprintf(name, sizeof(name), "frame_%04zu.ppm", i + 1);
    write_ppm(seq.frames[i], dir / name);
    const auto& b = seq.gt_boxes[i];
    std::snprintf(line, sizeof(line), "%zu %.2f %.2f %.2f %.2f\n", i + 1, b.x1, b.y1, b.x2, b.y2);
    boxes << line;
  }
}

}  // namespace ulast
