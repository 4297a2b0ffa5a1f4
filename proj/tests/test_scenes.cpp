#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ulast/error.hpp"
#include "ulast/geometry.hpp"
#include "ulast/scenes.hpp"

using namespace ulast;

TEST_CASE("iou and clamp basics") {
  const Box a{0, 0, 10, 10}, b{5, 5, 15, 15};
  CHECK(intersection_area(a, b) == 25.0);
  CHECK(iou(a, b) == doctest::Approx(25.0 / 175.0));
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{20, 20, 30, 30}) == 0.0);
  CHECK(center_distance(a, b) == doctest::Approx(std::sqrt(50.0)));
  const Box c = clamp_box(Box{-5, 2, 3, 200}, 100, 100, 2.0);
  CHECK(c.x1 == 0.0);
  CHECK(c.y2 == 100.0);
  const Box d = clamp_box(Box{50, 50, 50.5, 50.5}, 100, 100, 2.0);
  CHECK(d.width() >= 2.0);
  CHECK(d.height() >= 2.0);
}

TEST_CASE("generated sequences satisfy their invariants") {
  SceneSpec spec;
  spec.n_frames = 30;
  for (std::uint64_t seed : {1u, 2u, 99u, 12345u}) {
    const auto seq = generate_sequence(spec, seed);
    CHECK(check_sequence(seq).empty());
    CHECK(seq.frames.size() == 30);
    CHECK(seq.frames[0].channels == 3);
    CHECK(seq.frames[0].width == spec.image_size);
    for (std::size_t f = 1; f < seq.gt_boxes.size(); ++f) {
      // bounded motion per frame
      CHECK(center_distance(seq.gt_boxes[f], seq.gt_boxes[f - 1]) <= spec.max_speed * std::sqrt(2.0) + 1e-9);
    }
  }
}

TEST_CASE("generation is a pure function of the seed") {
  SceneSpec spec;
  spec.n_frames = 6;
  const auto a = generate_sequence(spec, 7), b = generate_sequence(spec, 7), c = generate_sequence(spec, 8);
  CHECK(a.frames == b.frames);
  CHECK(a.gt_boxes == b.gt_boxes);
  CHECK(a.seq_id == b.seq_id);
  CHECK_FALSE(a.frames[0] == c.frames[0]);
}

TEST_CASE("infeasible scene specs are rejected") {
  SceneSpec s;
  s.n_frames = 2;
  CHECK_THROWS_AS(validate_scene_spec(s), ConfigError);
  s = {};
  s.max_target = 200;
  CHECK_THROWS_AS(validate_scene_spec(s), ConfigError);
  s = {};
  s.max_aspect = 0.5;
  CHECK_THROWS_AS(generate_sequence(s, 1), ConfigError);
}

TEST_CASE("check_sequence reports violations") {
  SceneSpec spec;
  spec.n_frames = 4;
  auto seq = generate_sequence(spec, 3);
  seq.gt_boxes[2] = Box{-1, 5, 10, 10};
  CHECK_FALSE(check_sequence(seq).empty());
  seq = generate_sequence(spec, 3);
  seq.frames[1].data[0] = 1.5f;
  CHECK_FALSE(check_sequence(seq).empty());
}

TEST_CASE("jitter draws stay within half the level") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i)
    for (double s : draw_jitter(0.4, rng)) {
      CHECK(s >= -0.2);
      CHECK(s <= 0.2);
    }
  CHECK_THROWS_AS(draw_jitter(1.5, rng), ContractError);
  const Box b{30, 40, 50, 56};
  CHECK(jitter_box(b, 0.0, 3, 128, 128) == b);
  // sigma applied in units of the box size
  const Box j = apply_jitter(b, {0.1, -0.1, 0.2, 0.0}, 128, 128);
  CHECK(j.cx() == doctest::Approx(b.cx() + 2.0));
  CHECK(j.cy() == doctest::Approx(b.cy() - 1.6));
  CHECK(j.width() == doctest::Approx(24.0));
  CHECK(j.height() == doctest::Approx(16.0));
}

TEST_CASE("palindrome order") {
  CHECK(palindrome_order(1) == std::vector<std::size_t>{2});
  CHECK(palindrome_order(3) == std::vector<std::size_t>{2, 3, 4, 3, 2});
}

TEST_CASE("palindrome samples") {
  SceneSpec spec;
  spec.n_frames = 10;
  const auto seq = generate_sequence(spec, 11);
  const auto s = sample_palindrome(seq, 3, 3, 4, 0.0);
  CHECK(s.frame_indices == std::vector<std::size_t>{1, 4, 7, 10});
  CHECK(s.frames.size() == 4);
  CHECK(s.template_frame() == seq.frames[0]);
  CHECK(s.pseudo_label.box == seq.gt_boxes[0]);
  CHECK(s.pseudo_label.centers.size() == 4);
  CHECK(s.pseudo_label.centers[2][0] == doctest::Approx(seq.gt_boxes[6].cx()));
  CHECK(s.search_order() == std::vector<std::size_t>{2, 3, 4, 3, 2});

  const auto j = sample_palindrome(seq, 3, 3, 4, 0.2);
  CHECK_FALSE(j.pseudo_label.box == seq.gt_boxes[0]);
  CHECK(iou(j.pseudo_label.box, seq.gt_boxes[0]) > 0.3);

  CHECK_THROWS_AS(sample_palindrome(seq, 4, 3, 1), RangeError);
  CHECK_THROWS_AS(sample_palindrome(seq, 0, 3, 1), RangeError);
}

TEST_CASE("crop_patch maps boxes and fills outside with the mean") {
  Image img(3, 20, 20);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 20; ++y)
      for (std::size_t x = 0; x < 20; ++x) img.at(c, y, x) = static_cast<float>((x + 2 * y + c) % 7) / 7.f;

  // identity crop reproduces the frame
  const auto id = crop_patch(img, 10, 10, 20, 20);
  for (std::size_t k = 0; k < img.data.size(); ++k) CHECK(id.image.data[k] == doctest::Approx(img.data[k]));

  const auto far = crop_patch(img, 500, 500, 4, 8);
  const auto m = img.channel_means();
  for (std::size_t c = 0; c < 3; ++c) CHECK(far.image.at(c, 2, 2) == doctest::Approx(m[c]).epsilon(1e-6));

  const auto p = crop_patch(img, 10, 10, 32, 16);
  CHECK(p.transform.scale == 2.0);
  const Box b{4, 5, 12, 9};
  const Box pb = p.transform.to_patch(b);
  CHECK(pb == Box{(4 - 2) * 2.0, (5 - 2) * 2.0, (12 - 2) * 2.0, (9 - 2) * 2.0});
  const Box back = p.transform.to_frame(pb);
  CHECK(back.x1 == doctest::Approx(b.x1));
  CHECK(back.y2 == doctest::Approx(b.y2));

  CHECK_THROWS_AS(crop_patch(img, 0, 0, 0, 1), ContractError);
  CHECK_THROWS_AS(crop_patch(img, 0, 0, 4, 0), ContractError);
}

TEST_CASE("ppm export round trip") {
  SceneSpec spec;
  spec.n_frames = 4;
  spec.image_size = 32;
  spec.min_target = 4;
  spec.max_target = 8;
  const auto seq = generate_sequence(spec, 21);
  const auto dir = std::filesystem::temp_directory_path() / "ulast_test_export";
  std::filesystem::remove_all(dir);
  export_sequence(seq, dir);
  const Image back = read_ppm(dir / "frame_0003.ppm");
  REQUIRE(back.data.size() == seq.frames[2].data.size());
  for (std::size_t k = 0; k < back.data.size(); ++k) CHECK(std::abs(back.data[k] - seq.frames[2].data[k]) <= 0.5 / 255 + 1e-6);

  std::ifstream boxes(dir / "boxes.txt");
  std::string line;
  std::size_t n = 0;
  while (std::getline(boxes, line)) {
    std::istringstream is(line);
    std::size_t idx;
    double x1, y1, x2, y2;
    REQUIRE(static_cast<bool>(is >> idx >> x1 >> y1 >> x2 >> y2));
    CHECK(idx == n + 1);
    CHECK(x1 == doctest::Approx(seq.gt_boxes[n].x1).epsilon(0.01));
    ++n;
  }
  CHECK(n == 4);

  std::ofstream(dir / "bad.ppm") << "P3\n1 1\n255\n";
  CHECK_THROWS_AS(read_ppm(dir / "bad.ppm"), FormatError);
  std::filesystem::remove_all(dir);
}
