#include <cmath>
#include <cstring>
#include <set>

#include "doctest.h"
#include "rdmm/errors.hpp"
#include "rdmm/optimizer.hpp"
#include "rdmm/synthdata.hpp"

using namespace rdmm;

namespace {

bool bitwise_equal(const NodeData& a, const NodeData& b) {
  return a.values.size() == b.values.size() &&
         std::memcmp(a.values.data(), b.values.data(), sizeof(double) * a.values.size()) == 0;
}

std::set<int> labels_of(const ScalarField& f) {
  const auto ids = label_ids(f);
  return {ids.begin(), ids.end()};
}

}  // namespace

TEST_CASE("shape point tests") {
  ShapeSpec r{ShapeKind::RECTANGLE, 0.5, 0.5, 0.2, 0.1, 0.0, 1.0, 1};
  CHECK(r.contains(0.59, 0.54));
  CHECK_FALSE(r.contains(0.61, 0.5));
  CHECK(r.contains(0.61, 0.5, 0.02));
  r.rotation = M_PI / 2;
  CHECK(r.contains(0.54, 0.59));
  CHECK_FALSE(r.contains(0.59, 0.5));

  const ShapeSpec e{ShapeKind::ELLIPSE, 0.5, 0.5, 0.4, 0.2, 0.0, 1.0, 1};
  CHECK(e.contains(0.69, 0.5));
  CHECK_FALSE(e.contains(0.69, 0.59));

  // Base along axis 0 at y = 0.4, apex at (0.5, 0.6).
  const ShapeSpec t{ShapeKind::TRIANGLE, 0.5, 0.5, 0.2, 0.2, 0.0, 1.0, 1};
  CHECK(t.contains(0.59, 0.41));
  CHECK(t.contains(0.5, 0.59));
  CHECK_FALSE(t.contains(0.55, 0.58));
  CHECK_FALSE(t.contains(0.5, 0.39));

  // Bounds enclose the inflated shape.
  for (const ShapeSpec& s : {r, e, t}) {
    double x0, x1, y0, y1;
    s.bounds(0.03, x0, x1, y0, y1);
    for (double x = 0.0; x <= 1.0; x += 0.002)
      for (double y = 0.0; y <= 1.0; y += 0.002)
        if (s.contains(x, y, 0.03)) {
          CHECK(x >= x0);
          CHECK(x <= x1);
          CHECK(y >= y0);
          CHECK(y <= y1);
        }
  }
}

TEST_CASE("generation is deterministic") {
  const GridSpec g{96, 96};
  const auto a = generate_pair(7, g), b = generate_pair(7, g);
  CHECK(bitwise_equal(a.source_image, b.source_image));
  CHECK(bitwise_equal(a.target_image, b.target_image));
  CHECK(bitwise_equal(a.source_labels, b.source_labels));
  CHECK(bitwise_equal(a.target_labels, b.target_labels));
  const auto c = generate_pair(8, g);
  CHECK_FALSE(bitwise_equal(a.source_image, c.source_image));
}

TEST_CASE("zero perturbation gives an identical target") {
  SceneParams p;
  p.max_shift = 0.0;
  p.min_scale = p.max_scale = 1.0;
  p.max_rotation = 0.0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto s = generate_pair(seed, GridSpec{80, 80}, p);
    CHECK(bitwise_equal(s.source_image, s.target_image));
    CHECK(bitwise_equal(s.source_labels, s.target_labels));
  }
}

TEST_CASE("corpus invariants") {
  const GridSpec g{200, 200};
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    CAPTURE(seed);
    const auto s = generate_pair(seed, g);
    const auto src = labels_of(s.source_labels), tgt = labels_of(s.target_labels);
    CHECK(src == tgt);
    CHECK(src.count(1));
    CHECK(src.count(2));
    CHECK(src.count(3));
    CHECK(src.size() <= 8);
    CHECK(s.source_shapes.size() == s.target_shapes.size());
    CHECK(s.source_shapes.size() == src.size());
    for (const auto* img : {&s.source_image, &s.target_image})
      for (double v : img->values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    for (const auto& shapes : {s.source_shapes, s.target_shapes})
      for (const auto& sh : shapes) {
        double x0, x1, y0, y1;
        sh.bounds(0.0, x0, x1, y0, y1);
        CHECK(x0 >= 0.02);
        CHECK(y0 >= 0.02);
        CHECK(x1 <= 0.98);
        CHECK(y1 <= 0.98);
        CHECK(sh.a > 0.0);
        CHECK(sh.b > 0.0);
      }
    for (int id : src) {
      const double d = dice(s.source_labels, s.target_labels, id);
      CHECK(d < 1.0);
    }
    double mean = 0.0;
    for (int id : src) mean += dice(s.source_labels, s.target_labels, id);
    mean /= static_cast<double>(src.size());
    CHECK(mean > 0.0);
  }
}

TEST_CASE("static outside objects") {
  SceneParams p;
  p.perturb_outside = false;
  const auto s = generate_pair(4, GridSpec{100, 100}, p);
  for (std::size_t k = 3; k < s.source_shapes.size(); ++k) {
    CHECK(s.source_shapes[k].cx == s.target_shapes[k].cx);
    CHECK(dice(s.source_labels, s.target_labels, s.source_shapes[k].label) == 1.0);
  }
}

TEST_CASE("region pre-weights") {
  const GridSpec g{100, 100};
  const MultiGaussianKernel k{{0.03, 0.06, 0.09, 0.3}, 0.02, 2.0};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = generate_pair(seed, g);
    const auto h = region_preweights(s, {0.2, 0.5, 0.3, 0.0}, {0.0, 0.0, 0.0, 1.0}, k);
    for (std::size_t y = 0; y < g.num_nodes(); ++y) {
      double sum = 0.0;
      for (const auto& hi : h) {
        CHECK(hi[y] >= 0.0);
        sum += hi[y] * hi[y];
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  const auto s = generate_pair(0, g);
  const auto same = region_preweights(s, {0.1, 0.2, 0.3, 0.4}, {0.1, 0.2, 0.3, 0.4}, k);
  for (const auto& hi : same)
    for (double v : hi.values) CHECK(v == hi[0]);

  // sigma inside the container (away from its edge) and in the far background.
  const auto h = region_preweights(s, {0.2, 0.5, 0.3, 0.0}, {0.0, 0.0, 0.0, 1.0}, k);
  const auto sigma = local_std_map(preweights_to_weights(h, k), k);
  const double fg_sigma = std::sqrt(0.2 * 0.03 * 0.03 + 0.5 * 0.06 * 0.06 + 0.3 * 0.09 * 0.09);
  const ScalarField deep_fg = s.foreground_mask_source;
  std::size_t checked_fg = 0, checked_bg = 0;
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t j = 0; j < 100; ++j) {
      bool all_fg = true, all_bg = true;
      for (long di = -8; di <= 8; ++di)
        for (long dj = -8; dj <= 8; ++dj) {
          const long a = static_cast<long>(i) + di, b = static_cast<long>(j) + dj;
          if (a < 0 || b < 0 || a >= 100 || b >= 100) continue;
          const bool f = deep_fg[static_cast<std::size_t>(a * 100 + b)] > 0.5;
          all_fg = all_fg && f;
          all_bg = all_bg && !f;
        }
      const double v = sigma[i * 100 + j];
      if (all_fg) {
        CHECK(v == doctest::Approx(fg_sigma).epsilon(1e-3));
        ++checked_fg;
      }
      if (all_bg) {
        CHECK(v == doctest::Approx(0.3).epsilon(1e-3));
        ++checked_bg;
      }
    }
  CHECK(checked_fg > 0);
  CHECK(checked_bg > 0);

  CHECK_THROWS_AS(region_preweights(s, {0.2, 0.5, 0.3, 0.1}, {0.0, 0.0, 0.0, 1.0}, k), InvalidParameter);
  CHECK_THROWS_AS(region_preweights(s, {0.5, 0.5}, {0.0, 1.0}, k), InvalidParameter);
}

TEST_CASE("generation parameter checks") {
  CHECK_THROWS_AS(generate_pair(1, GridSpec{32, 32}), InvalidParameter);
  SceneParams p;
  p.max_outside = 6;
  CHECK_THROWS_AS(generate_pair(1, GridSpec{64, 64}, p), InvalidParameter);
}
