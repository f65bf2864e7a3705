#include <cmath>
#include <vector>

#include "doctest.h"
#include "testutil.hpp"
#include "unmask/autodiff.hpp"
#include "unmask/rng.hpp"

using namespace unmask;
using namespace unmask::ad;
using testutil::gradcheck;
using testutil::random_tensor;

namespace {

void require_pass(const testutil::GradCheckReport& rep) {
  INFO(rep.detail);
  CHECK(rep.ok);
  CHECK(rep.max_rel < 1e-5);
}

}  // anonymous namespace

TEST_CASE("elementwise binary ops with broadcasting") {
  Rng rng(11);
  auto a = random_tensor(rng, {2, 3});
  auto b = random_tensor(rng, {2, 3});
  auto row = random_tensor(rng, {3});
  auto col = random_tensor(rng, {2, 1});
  auto sc = random_tensor(rng, {});
  // keep divisors away from zero
  auto bpos = random_tensor(rng, {2, 3}, 0.5, 1.5);
  auto rowpos = random_tensor(rng, {3}, 0.5, 1.5);

  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(add(v[0], v[1])); }, {a, b}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(sub(v[0], v[1])); }, {a, b}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(mul(v[0], v[1])); }, {a, b}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(div(v[0], v[1])); }, {a, bpos}));

  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(mul(v[0], v[1])); }, {a, row}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(add(v[0], v[1])); }, {col, a}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(div(v[0], v[1])); }, {a, rowpos}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(mul(v[0], v[1])); }, {sc, a}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(sub(mul(v[0], v[1]), div(v[1], v[2])))); },
      {a, b, bpos}));
}

TEST_CASE("broadcast shape rules") {
  CHECK(broadcast_shape({2, 3}, {3}) == Shape{2, 3});
  CHECK(broadcast_shape({2, 1}, {1, 3}) == Shape{2, 3});
  CHECK(broadcast_shape({}, {4, 5}) == Shape{4, 5});
  CHECK_THROWS(broadcast_shape({2, 3}, {2, 4}));
}

TEST_CASE("unary elementwise ops") {
  Rng rng(12);
  auto x = random_tensor(rng, {3, 4});
  auto xpos = random_tensor(rng, {3, 4}, 0.2, 2.0);
  auto xoff = random_tensor(rng, {3, 4}, 0.1, 0.9);  // away from clamp edges & zero

  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(neg(v[0])); }, {x}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(exp_op(v[0])); }, {x}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(log_op(v[0])); }, {xpos}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(sqrt_op(v[0])); }, {xpos}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(square(v[0])); }, {x}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(abs_op(v[0])); }, {xoff}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(sigmoid(v[0])); }, {x}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(tanh_op(v[0])); }, {x}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(leaky_relu(v[0], 0.1)); }, {xoff}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(clamp(v[0], 0.0, 0.5)); }, {x}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(pow_scalar(v[0], 3.0)); }, {x}));
}

TEST_CASE("reductions and means") {
  Rng rng(13);
  auto x = random_tensor(rng, {2, 3, 4});

  require_pass(gradcheck([](const std::vector<VarD>& v) { return sum_all(v[0]); }, {x}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(reduce_sum(v[0], {1}, false))); }, {x}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(reduce_sum(v[0], {0, 2}, true))); }, {x}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(reduce_mean(v[0], {2}))); }, {x}));
  require_pass(gradcheck([](const std::vector<VarD>& v) { return mean_all(square(v[0])); }, {x}));

  // value oracle
  auto t = TensorD::from({2, 2}, {1, 2, 3, 4});
  VarD v = constant(t);
  CHECK(sum_all(v).value()[0] == doctest::Approx(10.0));
  CHECK(mean_all(v).value()[0] == doctest::Approx(2.5));
  auto rs = reduce_sum(v, {0}, false);
  CHECK(rs.shape() == Shape{2});
  CHECK(rs.value()[0] == doctest::Approx(4.0));
  CHECK(rs.value()[1] == doctest::Approx(6.0));
}

TEST_CASE("shape ops: reshape, slice, pad, concat, gather/scatter") {
  Rng rng(14);
  auto x = random_tensor(rng, {2, 3, 2, 2});
  auto y = random_tensor(rng, {2, 2, 2, 2});

  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(reshape(v[0], {6, 4}))); }, {x}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(slice(v[0], 1, 1, 2))); }, {x}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(pad_slice(v[0], {2, 5, 2, 2}, 1, 2))); },
      {x}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(concat<double>({v[0], v[1]}, 1))); },
      {x, y}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(gather_channels(v[0], {2, 0, 2}))); },
      {x}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(scatter_channels(v[0], 5, {4, 0, 2}))); },
      {x}));

  // slice/concat value sanity
  auto t = TensorD::from({1, 2, 1, 2}, {1, 2, 3, 4});
  auto s = slice(constant(t), 1, 1, 1);
  CHECK(s.value()[0] == 3.0);
  CHECK(s.value()[1] == 4.0);
  auto c = concat<double>({constant(t), constant(t)}, 3);
  CHECK(c.shape() == Shape{1, 2, 1, 4});
  CHECK(c.value()[2] == 1.0);
  CHECK(c.value()[3] == 2.0);
}

TEST_CASE("matmul in all transpose arrangements") {
  Rng rng(15);
  auto a = random_tensor(rng, {3, 4});
  auto b = random_tensor(rng, {4, 2});
  auto at = random_tensor(rng, {4, 3});
  auto bt = random_tensor(rng, {2, 4});

  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(matmul2(v[0], v[1], false, false))); },
      {a, b}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(matmul2(v[0], v[1], true, false))); },
      {at, b}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(matmul2(v[0], v[1], false, true))); },
      {a, bt}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(matmul2(v[0], v[1], true, true))); },
      {at, bt}));

  // value oracle vs naive loops
  auto av = constant(a);
  auto bv = constant(b);
  auto cv = matmul(av, bv);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(cv.value().at(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("linear layer") {
  Rng rng(16);
  auto x = random_tensor(rng, {3, 5});
  auto w = random_tensor(rng, {2, 5});
  auto b = random_tensor(rng, {2});
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(linear(v[0], v[1], v[2]))); },
      {x, w, b}));
}

namespace {

// brute-force convolution oracle
TensorD conv_naive(const TensorD& x, const TensorD& w, const ConvGeom& g, int dilation) {
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int64_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t ho = g.out_h(h, dilation * (kh - 1) + 1);
  int64_t wo = g.out_w(wd, dilation * (kw - 1) + 1);
  TensorD out({n, o, ho, wo});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t oc = 0; oc < o; ++oc)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          double acc = 0;
          for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t iy = oy * g.stride + ky * dilation - g.pad_t;
                int64_t ix = ox * g.stride + kx * dilation - g.pad_l;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += x.at(b, ic, iy, ix) * w.at(oc, ic, ky, kx);
              }
          out.at(b, oc, oy, ox) = acc;
        }
  return out;
}

}  // anonymous namespace

TEST_CASE("conv2d value matches the naive oracle") {
  Rng rng(17);
  struct Case {
    Shape xs, ws;
    ConvGeom g;
    int dil;
  };
  std::vector<Case> cases = {
      {{2, 2, 5, 6}, {3, 2, 3, 3}, same_geom(3), 1},
      {{1, 3, 8, 8}, {4, 3, 4, 4}, same_geom(4, 2), 1},
      {{1, 2, 6, 6}, {2, 2, 4, 4}, same_geom(4), 1},
      {{1, 2, 9, 9}, {2, 2, 3, 3}, dilated_same_geom(3, 2), 2},
      {{2, 1, 7, 5}, {1, 1, 7, 7}, same_geom(7), 1},
      {{1, 1, 4, 4}, {1, 1, 1, 1}, ConvGeom{}, 1},
  };
  for (const auto& cs : cases) {
    auto x = random_tensor(rng, cs.xs);
    auto w = random_tensor(rng, cs.ws);
    auto got = conv2d(constant(x), constant(w), cs.g, cs.dil).value();
    auto want = conv_naive(x, w, cs.g, cs.dil);
    REQUIRE(got.shape() == want.shape());
    double worst = 0;
    for (int64_t i = 0; i < got.numel(); ++i)
      worst = std::max(worst, std::abs(got[i] - want[i]));
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("conv2d family gradients") {
  Rng rng(18);
  auto x = random_tensor(rng, {2, 2, 5, 5});
  auto w = random_tensor(rng, {3, 2, 3, 3});
  ConvGeom g3 = same_geom(3);

  require_pass(gradcheck(
      [g3](const std::vector<VarD>& v) { return sum_all(square(conv2d(v[0], v[1], g3, 1))); },
      {x, w}));

  auto xs2 = random_tensor(rng, {1, 2, 6, 6});
  auto ws2 = random_tensor(rng, {2, 2, 4, 4});
  ConvGeom g42 = same_geom(4, 2);
  require_pass(gradcheck(
      [g42](const std::vector<VarD>& v) { return sum_all(square(conv2d(v[0], v[1], g42, 1))); },
      {xs2, ws2}));

  ConvGeom g41 = same_geom(4);  // asymmetric same padding
  require_pass(gradcheck(
      [g41](const std::vector<VarD>& v) { return sum_all(square(conv2d(v[0], v[1], g41, 1))); },
      {xs2, ws2}));

  auto xd = random_tensor(rng, {1, 1, 7, 7});
  auto wdil = random_tensor(rng, {2, 1, 3, 3});
  ConvGeom gd = dilated_same_geom(3, 2);
  require_pass(gradcheck(
      [gd](const std::vector<VarD>& v) { return sum_all(square(conv2d(v[0], v[1], gd, 2))); },
      {xd, wdil}));

  // bias path
  auto b = random_tensor(rng, {3});
  require_pass(gradcheck(
      [g3](const std::vector<VarD>& v) {
        return sum_all(square(conv2d_bias(v[0], v[1], v[2], g3, 1)));
      },
      {x, w, b}));
}

TEST_CASE("conv2d_dx and conv2d_dw as first-class differentiable ops") {
  Rng rng(19);
  ConvGeom g = same_geom(3, 2);
  // forward geometry: x {1,2,6,6} -> y {1,3,3,3} with k=3 s=2
  auto gy = random_tensor(rng, {1, 3, 3, 3});
  auto w = random_tensor(rng, {3, 2, 3, 3});
  auto x = random_tensor(rng, {1, 2, 6, 6});

  require_pass(gradcheck(
      [g](const std::vector<VarD>& v) {
        return sum_all(square(conv2d_dx(v[0], v[1], g, 6, 6, 1)));
      },
      {gy, w}));
  require_pass(gradcheck(
      [g](const std::vector<VarD>& v) {
        return sum_all(square(conv2d_dw(v[0], v[1], g, 3, 3, 1)));
      },
      {x, gy}));
}

TEST_CASE("transposed conv is the exact adjoint of conv") {
  Rng rng(20);
  ConvGeom g = same_geom(4, 2);
  auto x = random_tensor(rng, {2, 3, 8, 8});
  auto w = random_tensor(rng, {4, 3, 4, 4});
  auto y = random_tensor(rng, {2, 4, 4, 4});
  // <conv(x,w), y> == <x, convT(y,w)>
  double lhs = sum_all(mul(conv2d(constant(x), constant(w), g, 1), constant(y))).value()[0];
  double rhs =
      sum_all(mul(constant(x), conv2d_dx(constant(y), constant(w), g, 8, 8, 1))).value()[0];
  CHECK(testutil::rel_err(lhs, rhs) < 1e-12);
}

TEST_CASE("bilinear upsample values and adjoint identity") {
  // 1x1 -> 2x2 replicates the single pixel
  auto single = constant(TensorD::from({1, 1, 1, 1}, {3.0}));
  auto up1 = upsample_bilinear2x(single);
  for (int64_t i = 0; i < 4; ++i) CHECK(up1.value()[i] == doctest::Approx(3.0));

  // 2x2 -> 4x4: corners keep source values under half-pixel sampling
  auto q = constant(TensorD::from({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0}));
  auto up = upsample_bilinear2x(q);
  CHECK(up.value().at(0, 0, 0, 0) == doctest::Approx(0.0));
  CHECK(up.value().at(0, 0, 0, 3) == doctest::Approx(1.0));
  CHECK(up.value().at(0, 0, 3, 0) == doctest::Approx(2.0));
  CHECK(up.value().at(0, 0, 3, 3) == doctest::Approx(3.0));
  // interior positions mix neighbours 75/25
  CHECK(up.value().at(0, 0, 0, 1) == doctest::Approx(0.25));
  CHECK(up.value().at(0, 0, 0, 2) == doctest::Approx(0.75));

  Rng rng(21);
  auto a = random_tensor(rng, {2, 3, 4, 5});
  auto b = random_tensor(rng, {2, 3, 8, 10});
  double lhs = sum_all(mul(upsample_bilinear2x(constant(a)), constant(b))).value()[0];
  double rhs = sum_all(mul(constant(a), upsample_bilinear2x_adjoint(constant(b)))).value()[0];
  CHECK(testutil::rel_err(lhs, rhs) < 1e-12);

  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(upsample_bilinear2x(v[0]))); }, {a}));
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) { return sum_all(square(upsample_bilinear2x_adjoint(v[0]))); },
      {b}));
}

TEST_CASE("second derivatives via create_graph") {
  // f(x) = sum(x^3); grad is 3x^2, grad of sum(grad) is 6x
  auto x = TensorD::from({3}, {0.5, -1.0, 2.0});
  auto v = leaf(x.clone(), true);
  auto f = sum_all(mul(mul(v, v), v));
  auto g1 = grad(f, {v}, true);
  auto g1sum = sum_all(g1[0]);
  auto g2 = grad(g1sum, {v});
  for (int64_t i = 0; i < 3; ++i) CHECK(g2[0].value()[i] == doctest::Approx(6.0 * x[i]).epsilon(1e-10));

  // mixed: f = sum((x*y)^2): d2f/dx dy per element = 4xy... probe via gradcheck of
  // a functional that itself differentiates.
  Rng rng(22);
  auto xa = random_tensor(rng, {2, 3});
  auto yb = random_tensor(rng, {2, 3});
  require_pass(gradcheck(
      [](const std::vector<VarD>& v) {
        auto f2 = sum_all(square(mul(v[0], v[1])));
        auto gx = grad(f2, {v[0]}, true)[0];
        return sum_all(square(gx));
      },
      {xa, yb}));
}

TEST_CASE("gradient-penalty shaped double backward through a conv net") {
  Rng rng(23);
  auto x = random_tensor(rng, {1, 1, 4, 4});
  auto w1 = random_tensor(rng, {2, 1, 3, 3}, -0.5, 0.5);
  auto w2 = random_tensor(rng, {1, 2, 3, 3}, -0.5, 0.5);
  ConvGeom g = same_geom(3);

  require_pass(gradcheck(
      [g](const std::vector<VarD>& v) {
        auto critic = [&](const VarD& in) {
          auto h = leaky_relu(conv2d(in, v[1], g, 1), 0.1);
          return mean_all(conv2d(h, v[2], g, 1));
        };
        auto score = critic(v[0]);
        auto gx = grad(score, {v[0]}, true)[0];
        auto norm = sqrt_op(sum_all(square(gx)));
        return square(sub(norm, constant(1.0)));
      },
      {x, w1, w2}, 1e-5, 2e-5));
}

TEST_CASE("grad engine bookkeeping") {
  // diamond dependency accumulates both paths
  auto v = leaf(TensorD::from({2}, {1.0, 2.0}), true);
  auto a = mul(v, constant(2.0));
  auto b = mul(v, constant(3.0));
  auto out = sum_all(add(a, b));
  auto g = grad(out, {v});
  CHECK(g[0].value()[0] == doctest::Approx(5.0));
  CHECK(g[0].value()[1] == doctest::Approx(5.0));

  // reuse of one var in several ops of one expression
  auto v2 = leaf(TensorD::from({}, {3.0}), true);
  auto out2 = mul(v2, mul(v2, v2));
  auto g2 = grad(out2, {v2});
  CHECK(g2[0].value()[0] == doctest::Approx(27.0));

  // disconnected wrt gets zeros
  auto v3 = leaf(TensorD::from({2}, {1.0, 1.0}), true);
  auto g3 = grad(sum_all(v2), {v3});
  CHECK(g3[0].value()[0] == 0.0);
  CHECK(g3[0].shape() == Shape{2});

  // constants don't build graph
  auto c = mul(constant(2.0), constant(3.0));
  CHECK_FALSE(c.requires_grad());

  // detach blocks flow
  auto v4 = leaf(TensorD::from({}, {2.0}), true);
  auto d = detach(mul(v4, v4));
  CHECK_FALSE(d.requires_grad());
}

TEST_CASE("float instantiation smoke") {
  auto x = leaf(TensorF::from({2, 2}, {1.f, 2.f, 3.f, 4.f}), true);
  auto w = leaf(TensorF::from({2, 2}, {0.5f, -0.5f, 1.f, 0.25f}), true);
  auto y = sum_all(square(matmul(x, w)));
  auto gs = grad(y, {x, w});
  CHECK(gs[0].value().all_finite());
  CHECK(gs[1].value().all_finite());
  auto m = leaf(TensorF::from({1, 1, 2, 2}, {0.f, 0.25f, 0.5f, 1.f}), true);
  auto up = upsample_bilinear2x(m);
  CHECK(up.shape() == Shape{1, 1, 4, 4});
}
