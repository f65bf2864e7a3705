#include <cmath>

#include "doctest.h"
#include "testutil.hpp"
#include "unmask/core.hpp"
#include "unmask/rng.hpp"

using namespace unmask;

namespace {

Image random_image(Rng& rng, int64_t c, int64_t h, int64_t w) {
  TensorF t({c, h, w});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform());
  return Image{std::move(t), ValueRange::Display01};
}

Mask random_soft_mask(Rng& rng, int64_t h, int64_t w) {
  TensorD t({h, w});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return Mask{std::move(t), MaskKind::Soft};
}

}  // anonymous namespace

TEST_CASE("invert_mask complements and is an involution") {
  Rng rng(31);
  Mask m = random_soft_mask(rng, 6, 5);
  Mask inv = invert_mask(m);
  for (int64_t i = 0; i < m.hw.numel(); ++i) CHECK(inv.hw[i] == 1.0 - m.hw[i]);
  Mask back = invert_mask(inv);
  for (int64_t i = 0; i < m.hw.numel(); ++i) CHECK(back.hw[i] == m.hw[i]);
  CHECK(inv.kind == MaskKind::Soft);

  Mask zero{TensorD::zeros({3, 3}), MaskKind::Binary};
  Mask one = invert_mask(zero);
  for (int64_t i = 0; i < 9; ++i) CHECK(one.hw[i] == 1.0);
  CHECK(one.kind == MaskKind::Binary);

  CHECK(invert_mask(make_mask(TensorD::full({2, 2}, 0.3))).hw[0] == doctest::Approx(0.7));
}

TEST_CASE("compose identity cases are bit-exact") {
  Rng rng(32);
  Image x = random_image(rng, 3, 8, 8);
  Image g = random_image(rng, 3, 8, 8);

  Mask zeros{TensorD::zeros({8, 8}), MaskKind::Binary};
  Image y0 = compose(x, zeros, g);
  for (int64_t i = 0; i < x.chw.numel(); ++i) CHECK(y0.chw[i] == x.chw[i]);

  Mask ones{TensorD::full({8, 8}, 1.0), MaskKind::Binary};
  Image y1 = compose(x, ones, g);
  for (int64_t i = 0; i < g.chw.numel(); ++i) CHECK(y1.chw[i] == g.chw[i]);
}

TEST_CASE("compose blends and respects binary masks pixelwise") {
  Image x{TensorF::zeros({1, 2, 2}), ValueRange::Display01};
  Image g{TensorF::full({1, 2, 2}, 1.0f), ValueRange::Display01};
  Mask half{TensorD::full({2, 2}, 0.5), MaskKind::Soft};
  Image y = compose(x, half, g);
  for (int64_t i = 0; i < 4; ++i) CHECK(y.chw[i] == doctest::Approx(0.5f));

  Rng rng(33);
  Image xr = random_image(rng, 3, 4, 4);
  Image gr = random_image(rng, 3, 4, 4);
  Mask mb = binarize_mask(random_soft_mask(rng, 4, 4), 0.5);
  Image yb = compose(xr, mb, gr);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 16; ++i) {
      float want = mb.hw[i] == 1.0 ? gr.chw[c * 16 + i] : xr.chw[c * 16 + i];
      CHECK(yb.chw[c * 16 + i] == want);
    }
}

TEST_CASE("compose rejects mismatched shapes, naming both") {
  Image x{TensorF::zeros({3, 4, 4}), ValueRange::Display01};
  Image g{TensorF::zeros({3, 5, 5}), ValueRange::Display01};
  Mask m{TensorD::zeros({4, 4}), MaskKind::Soft};
  CHECK_THROWS_WITH_AS(compose(x, m, g), doctest::Contains("(3,4,4)"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(compose(x, m, g), doctest::Contains("(3,5,5)"), std::invalid_argument);
}

TEST_CASE("binarize_mask boundary, idempotence, threshold monotonicity") {
  Mask m = make_mask(TensorD::from({1, 3}, {0.49, 0.5, 0.51}));
  Mask b = binarize_mask(m, 0.5);
  CHECK(b.hw[0] == 0.0);
  CHECK(b.hw[1] == 1.0);
  CHECK(b.hw[2] == 1.0);
  CHECK(b.kind == MaskKind::Binary);

  Mask bb = binarize_mask(b, 0.5);
  for (int64_t i = 0; i < 3; ++i) CHECK(bb.hw[i] == b.hw[i]);

  Mask all_half = make_mask(TensorD::full({2, 2}, 0.5));
  Mask hb = binarize_mask(all_half, 0.5);
  for (int64_t i = 0; i < 4; ++i) CHECK(hb.hw[i] == 1.0);

  Rng rng(34);
  Mask r = random_soft_mask(rng, 16, 16);
  double prev = 2.0;
  for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    double area = masked_area_fraction(binarize_mask(r, t));
    CHECK(area <= prev);
    prev = area;
  }

  CHECK_THROWS_AS(binarize_mask(m, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(binarize_mask(m, 1.0), std::invalid_argument);
}

TEST_CASE("masked_area_fraction counts and complements within 1e-12") {
  Mask zeros{TensorD::zeros({4, 4}), MaskKind::Binary};
  CHECK(masked_area_fraction(zeros) == 0.0);
  Mask ones{TensorD::full({4, 4}, 1.0), MaskKind::Binary};
  CHECK(masked_area_fraction(ones) == 1.0);

  TensorD quarter({4, 4});
  for (int i = 0; i < 4; ++i) quarter[i] = 1.0;
  CHECK(masked_area_fraction(Mask{quarter, MaskKind::Binary}) == doctest::Approx(0.25));

  Rng rng(35);
  for (int trial = 0; trial < 20; ++trial) {
    Mask r = random_soft_mask(rng, 9, 7);
    double total = masked_area_fraction(r) + masked_area_fraction(invert_mask(r));
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("normalize/denormalize round trip and closed form") {
  NormStats stats;
  stats.mean = {0.4f, 0.5f, 0.6f};
  stats.stddev = {0.2f, 0.25f, 0.3f};

  Rng rng(36);
  Image x = random_image(rng, 3, 6, 6);
  Image n = normalize(x, stats);
  CHECK(n.range == ValueRange::Normalized);
  Image back = denormalize(n, stats);
  for (int64_t i = 0; i < x.chw.numel(); ++i)
    CHECK(back.chw[i] == doctest::Approx(x.chw[i]).epsilon(1e-6));

  Image c{TensorF::full({3, 2, 2}, 0.7f), ValueRange::Display01};
  Image nc = normalize(c, stats);
  CHECK(nc.chw.at(0, 0, 0) == doctest::Approx((0.7f - 0.4f) / 0.2f));
  CHECK(nc.chw.at(1, 0, 0) == doctest::Approx((0.7f - 0.5f) / 0.25f));
  CHECK(nc.chw.at(2, 0, 0) == doctest::Approx((0.7f - 0.6f) / 0.3f));

  CHECK_THROWS_AS(normalize(n, stats), std::invalid_argument);
  CHECK_THROWS_AS(denormalize(x, stats), std::invalid_argument);
}

TEST_CASE("make_mask validates range and kind") {
  CHECK_THROWS_AS(make_mask(TensorD::from({1, 2}, {0.5, 1.5})), std::invalid_argument);
  CHECK_THROWS_AS(make_mask(TensorD::from({1, 2}, {-0.1, 0.5})), std::invalid_argument);
  CHECK_THROWS_AS(make_mask(TensorD::from({1, 2}, {0.5, 1.0}), MaskKind::Binary),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_mask(TensorD::zeros({4})), std::invalid_argument);
  Mask ok = make_mask(TensorD::from({1, 2}, {0.0, 1.0}), MaskKind::Binary);
  CHECK(ok.kind == MaskKind::Binary);
}

TEST_CASE("ClassTable lookup") {
  ClassTable table{{"disc", "square", "triangle", "star"}};
  CHECK(table.k() == 4);
  CHECK(table.index_of("triangle") == 2);
  CHECK(table.index_of("nope") == -1);
  ClassLabel l = table.label(1);
  CHECK(l.index == 1);
  CHECK(l.name == "square");
  CHECK_THROWS_AS(table.label(4), std::invalid_argument);
  CHECK_THROWS_AS(table.label(-1), std::invalid_argument);
}
