#pragma once

// Define-by-run reverse-mode autodiff over dense tensors.
//
// Every operation records its inputs and a backward closure built from the
// same public ops, so gradients are themselves differentiable graphs and
// grad(..., create_graph=true) supports double backward (needed for the
// gradient penalty). Backward closures capture parent Vars only; anything
// derived from the op's own output is recomputed to keep the graph acyclic.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "unmask/blas.hpp"
#include "unmask/tensor.hpp"

namespace unmask::ad {

inline std::atomic<uint64_t> g_next_node_id{1};

template <typename T>
class Var;

template <typename T>
struct Node {
  uint64_t id = 0;
  Tensor<T> value;
  bool requires_grad = false;
  std::vector<Var<T>> parents;
  // maps upstream grad (shaped like value) to per-parent grads
  std::function<std::vector<Var<T>>(const Var<T>&)> backward;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  bool defined() const { return n_ != nullptr; }
  uint64_t id() const { return n_->id; }
  const Tensor<T>& value() const { return n_->value; }
  Tensor<T>& value() { return n_->value; }
  const Shape& shape() const { return n_->value.shape(); }
  int64_t numel() const { return n_->value.numel(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  Node<T>& node() const { return *n_; }
  std::shared_ptr<Node<T>> ptr() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

using VarF = Var<float>;
using VarD = Var<double>;

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
  auto n = std::make_shared<Node<T>>();
  n->id = g_next_node_id.fetch_add(1);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return leaf(std::move(value), false);
}

template <typename T>
Var<T> constant(T v) {
  return leaf(Tensor<T>::scalar(v), false);
}

template <typename T>
Var<T> detach(const Var<T>& v) {
  return leaf(v.value(), false);
}

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<std::vector<Var<T>>(const Var<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->id = g_next_node_id.fetch_add(1);
  n->value = std::move(value);
  for (const auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// shape utilities

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (size_t i = 0; i < out.size(); ++i) {
    int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " and " +
                                  shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides with 0 on broadcast (size-1) axes, aligned to dst rank.
inline std::vector<int64_t> broadcast_strides(const Shape& src, const Shape& dst) {
  std::vector<int64_t> strides(dst.size(), 0);
  int64_t s = 1;
  for (int i = static_cast<int>(src.size()) - 1; i >= 0; --i) {
    size_t j = dst.size() - src.size() + static_cast<size_t>(i);
    if (src[static_cast<size_t>(i)] != 1 && src[static_cast<size_t>(i)] != dst[j])
      throw std::invalid_argument("broadcast: cannot expand " + shape_str(src) + " to " +
                                  shape_str(dst));
    strides[j] = src[static_cast<size_t>(i)] == 1 ? 0 : s;
    s *= src[static_cast<size_t>(i)];
  }
  return strides;
}

template <typename T>
Tensor<T> broadcast_copy(const Tensor<T>& src, const Shape& dst_shape) {
  if (src.shape() == dst_shape) return src;
  Tensor<T> out(dst_shape);
  const auto strides = broadcast_strides(src.shape(), dst_shape);
  const size_t r = dst_shape.size();
  std::vector<int64_t> idx(r, 0);
  const T* sp = src.data();
  T* dp = out.data();
  int64_t soff = 0;
  for (int64_t i = 0; i < out.numel(); ++i) {
    dp[i] = sp[soff];
    for (size_t ax = r; ax-- > 0;) {
      soff += strides[ax];
      if (++idx[ax] < dst_shape[ax]) break;
      soff -= strides[ax] * dst_shape[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// forward declarations needed by backward closures

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> neg(const Var<T>& v);
template <typename T>
Var<T> reduce_sum(const Var<T>& v, std::vector<int> axes, bool keepdim = false);
template <typename T>
Var<T> broadcast_to(const Var<T>& v, Shape shape);
template <typename T>
Var<T> reshape(const Var<T>& v, Shape shape);
template <typename T>
Var<T> sqrt_op(const Var<T>& v);
template <typename T>
Var<T> exp_op(const Var<T>& v);
template <typename T>
Var<T> sigmoid(const Var<T>& v);
template <typename T>
Var<T> tanh_op(const Var<T>& v);
template <typename T>
Var<T> slice(const Var<T>& v, int axis, int64_t start, int64_t len);
template <typename T>
Var<T> pad_slice(const Var<T>& v, const Shape& full, int axis, int64_t start);
template <typename T>
Var<T> gather_channels(const Var<T>& v, std::vector<int64_t> idx);
template <typename T>
Var<T> scatter_channels(const Var<T>& v, int64_t channels, std::vector<int64_t> idx);
template <typename T>
Var<T> matmul2(const Var<T>& a, const Var<T>& b, bool ta, bool tb);

struct ConvGeom {
  int stride = 1;
  int pad_t = 0, pad_l = 0, pad_b = 0, pad_r = 0;

  int64_t out_dim(int64_t in, int64_t k, int pad_lo, int pad_hi) const {
    int64_t span = in + pad_lo + pad_hi - k;
    if (span < 0) throw std::invalid_argument("conv: kernel larger than padded input");
    return span / stride + 1;
  }
  int64_t out_h(int64_t h, int64_t kh) const { return out_dim(h, kh, pad_t, pad_b); }
  int64_t out_w(int64_t w, int64_t kw) const { return out_dim(w, kw, pad_l, pad_r); }
};

// "same" geometry for odd or even kernels (even kernels pad one more at the
// bottom/right); stride-2 halving uses the usual k=4, pad=1 arrangement.
inline ConvGeom same_geom(int k, int stride = 1) {
  ConvGeom g;
  g.stride = stride;
  int lo = (k - 1) / 2;
  int hi = k - 1 - lo;
  if (stride == 2) lo = hi = (k - 1) / 2;
  g.pad_t = g.pad_l = lo;
  g.pad_b = g.pad_r = hi;
  return g;
}

inline ConvGeom dilated_same_geom(int k, int dilation);

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const ConvGeom& g, int dilation = 1);
template <typename T>
Var<T> conv2d_dx(const Var<T>& gy, const Var<T>& w, const ConvGeom& g, int64_t in_h, int64_t in_w,
                 int dilation = 1);
template <typename T>
Var<T> conv2d_dw(const Var<T>& x, const Var<T>& gy, const ConvGeom& g, int64_t kh, int64_t kw,
                 int dilation = 1);
template <typename T>
Var<T> upsample_bilinear2x(const Var<T>& v);
template <typename T>
Var<T> upsample_bilinear2x_adjoint(const Var<T>& v);

// ---------------------------------------------------------------------------
// elementwise helpers

template <typename T, class F>
Tensor<T> map1(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* ap = a.data();
  T* op = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) op[i] = f(ap[i]);
  return out;
}

template <typename T, class F>
Tensor<T> map2(const Tensor<T>& a, const Tensor<T>& b, F f) {
  Tensor<T> out(a.shape());
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) op[i] = f(ap[i], bp[i]);
  return out;
}

// ---------------------------------------------------------------------------
// broadcast / reshape / reductions

template <typename T>
Var<T> broadcast_to(const Var<T>& v, Shape shape) {
  if (v.shape() == shape) return v;
  Tensor<T> out = broadcast_copy(v.value(), shape);
  Shape src = v.shape();
  Shape dst = shape;
  return make_op<T>(std::move(out), {v}, [src, dst](const Var<T>& g) -> std::vector<Var<T>> {
    std::vector<int> axes;
    for (size_t i = 0; i < dst.size(); ++i) {
      bool added = i < dst.size() - src.size();
      int64_t sd = added ? 1 : src[i - (dst.size() - src.size())];
      if (sd == 1 && dst[i] != 1) axes.push_back(static_cast<int>(i));
    }
    Var<T> r = axes.empty() ? g : reduce_sum(g, axes, true);
    return {reshape(r, src)};
  });
}

template <typename T>
Var<T> reshape(const Var<T>& v, Shape shape) {
  Tensor<T> out = v.value().reshaped(std::move(shape));
  Shape orig = v.shape();
  return make_op<T>(std::move(out), {v}, [orig](const Var<T>& g) -> std::vector<Var<T>> {
    return {reshape(g, orig)};
  });
}

template <typename T>
Var<T> reduce_sum(const Var<T>& v, std::vector<int> axes, bool keepdim) {
  const Shape& in = v.shape();
  const int r = static_cast<int>(in.size());
  std::vector<char> drop(static_cast<size_t>(r), 0);
  for (int a : axes) {
    if (a < 0 || a >= r) throw std::invalid_argument("reduce_sum: axis out of range");
    drop[static_cast<size_t>(a)] = 1;
  }
  Shape keep_shape(in);
  Shape out_shape;
  for (int i = 0; i < r; ++i) {
    if (drop[static_cast<size_t>(i)])
      keep_shape[static_cast<size_t>(i)] = 1;
    else
      out_shape.push_back(in[static_cast<size_t>(i)]);
  }
  Tensor<T> acc(keep_shape);  // zero-initialized
  const auto strides = broadcast_strides(keep_shape, in);
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  const T* sp = v.value().data();
  T* dp = acc.data();
  int64_t doff = 0;
  for (int64_t i = 0; i < v.numel(); ++i) {
    dp[doff] += sp[i];
    for (size_t ax = static_cast<size_t>(r); ax-- > 0;) {
      doff += strides[ax];
      if (++idx[ax] < in[ax]) break;
      doff -= strides[ax] * in[ax];
      idx[ax] = 0;
    }
  }
  Tensor<T> out = keepdim ? acc : acc.reshaped(out_shape);
  Shape keep = keep_shape;
  Shape orig = in;
  return make_op<T>(std::move(out), {v}, [keep, orig](const Var<T>& g) -> std::vector<Var<T>> {
    return {broadcast_to(reshape(g, keep), orig)};
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& v) {
  std::vector<int> axes(v.shape().size());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce_sum(v, axes, false);
}

template <typename T>
Var<T> reduce_mean(const Var<T>& v, std::vector<int> axes, bool keepdim = false) {
  int64_t count = 1;
  for (int a : axes) count *= v.shape().at(static_cast<size_t>(a));
  return mul(reduce_sum(v, std::move(axes), keepdim), constant<T>(static_cast<T>(1.0 / static_cast<double>(count))));
}

template <typename T>
Var<T> mean_all(const Var<T>& v) {
  return mul(sum_all(v), constant<T>(static_cast<T>(1.0 / static_cast<double>(v.numel()))));
}

// ---------------------------------------------------------------------------
// binary elementwise (with broadcasting)

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Shape s = broadcast_shape(a.shape(), b.shape());
  Var<T> ab = broadcast_to(a, s), bb = broadcast_to(b, s);
  Tensor<T> out = map2(ab.value(), bb.value(), [](T x, T y) { return x + y; });
  return make_op<T>(std::move(out), {ab, bb},
                    [](const Var<T>& g) -> std::vector<Var<T>> { return {g, g}; });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Shape s = broadcast_shape(a.shape(), b.shape());
  Var<T> ab = broadcast_to(a, s), bb = broadcast_to(b, s);
  Tensor<T> out = map2(ab.value(), bb.value(), [](T x, T y) { return x - y; });
  return make_op<T>(std::move(out), {ab, bb},
                    [](const Var<T>& g) -> std::vector<Var<T>> { return {g, neg(g)}; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Shape s = broadcast_shape(a.shape(), b.shape());
  Var<T> ab = broadcast_to(a, s), bb = broadcast_to(b, s);
  Tensor<T> out = map2(ab.value(), bb.value(), [](T x, T y) { return x * y; });
  return make_op<T>(std::move(out), {ab, bb}, [ab, bb](const Var<T>& g) -> std::vector<Var<T>> {
    return {mul(g, bb), mul(g, ab)};
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  Shape s = broadcast_shape(a.shape(), b.shape());
  Var<T> ab = broadcast_to(a, s), bb = broadcast_to(b, s);
  Tensor<T> out = map2(ab.value(), bb.value(), [](T x, T y) { return x / y; });
  return make_op<T>(std::move(out), {ab, bb}, [ab, bb](const Var<T>& g) -> std::vector<Var<T>> {
    return {div(g, bb), neg(div(mul(g, ab), mul(bb, bb)))};
  });
}

// ---------------------------------------------------------------------------
// unary elementwise

template <typename T>
Var<T> neg(const Var<T>& v) {
  Tensor<T> out = map1(v.value(), [](T x) { return -x; });
  return make_op<T>(std::move(out), {v},
                    [](const Var<T>& g) -> std::vector<Var<T>> { return {neg(g)}; });
}

template <typename T>
Var<T> exp_op(const Var<T>& v) {
  Tensor<T> out = map1(v.value(), [](T x) { return std::exp(x); });
  return make_op<T>(std::move(out), {v}, [v](const Var<T>& g) -> std::vector<Var<T>> {
    return {mul(g, exp_op(v))};
  });
}

template <typename T>
Var<T> log_op(const Var<T>& v) {
  Tensor<T> out = map1(v.value(), [](T x) { return std::log(x); });
  return make_op<T>(std::move(out), {v}, [v](const Var<T>& g) -> std::vector<Var<T>> {
    return {div(g, v)};
  });
}

template <typename T>
Var<T> sqrt_op(const Var<T>& v) {
  Tensor<T> out = map1(v.value(), [](T x) { return std::sqrt(x); });
  return make_op<T>(std::move(out), {v}, [v](const Var<T>& g) -> std::vector<Var<T>> {
    return {div(mul(g, constant<T>(static_cast<T>(0.5))), sqrt_op(v))};
  });
}

template <typename T>
Var<T> square(const Var<T>& v) {
  Tensor<T> out = map1(v.value(), [](T x) { return x * x; });
  return make_op<T>(std::move(out), {v}, [v](const Var<T>& g) -> std::vector<Var<T>> {
    return {mul(mul(g, constant<T>(static_cast<T>(2))), v)};
  });
}

template <typename T>
Var<T> abs_op(const Var<T>& v) {
  Tensor<T> out = map1(v.value(), [](T x) { return std::abs(x); });
  Tensor<T> sgn = map1(v.value(), [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
  return make_op<T>(std::move(out), {v}, [sgn](const Var<T>& g) -> std::vector<Var<T>> {
    return {mul(g, constant(sgn))};
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& v) {
  Tensor<T> out = map1(v.value(), [](T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  });
  return make_op<T>(std::move(out), {v}, [v](const Var<T>& g) -> std::vector<Var<T>> {
    Var<T> s = sigmoid(v);
    return {mul(g, mul(s, sub(constant<T>(T(1)), s)))};
  });
}

template <typename T>
Var<T> tanh_op(const Var<T>& v) {
  Tensor<T> out = map1(v.value(), [](T x) { return std::tanh(x); });
  return make_op<T>(std::move(out), {v}, [v](const Var<T>& g) -> std::vector<Var<T>> {
    Var<T> t = tanh_op(v);
    return {mul(g, sub(constant<T>(T(1)), mul(t, t)))};
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& v, T slope) {
  Tensor<T> out = map1(v.value(), [slope](T x) { return x >= T(0) ? x : slope * x; });
  Tensor<T> m = map1(v.value(), [slope](T x) { return x >= T(0) ? T(1) : slope; });
  return make_op<T>(std::move(out), {v}, [m](const Var<T>& g) -> std::vector<Var<T>> {
    return {mul(g, constant(m))};
  });
}

template <typename T>
Var<T> relu(const Var<T>& v) {
  return leaky_relu(v, T(0));
}

template <typename T>
Var<T> clamp(const Var<T>& v, T lo, T hi) {
  Tensor<T> out = map1(v.value(), [lo, hi](T x) { return std::min(hi, std::max(lo, x)); });
  Tensor<T> m = map1(v.value(), [lo, hi](T x) { return (x >= lo && x <= hi) ? T(1) : T(0); });
  return make_op<T>(std::move(out), {v}, [m](const Var<T>& g) -> std::vector<Var<T>> {
    return {mul(g, constant(m))};
  });
}

template <typename T>
Var<T> pow_scalar(const Var<T>& v, T p) {
  Tensor<T> out = map1(v.value(), [p](T x) { return std::pow(x, p); });
  return make_op<T>(std::move(out), {v}, [v, p](const Var<T>& g) -> std::vector<Var<T>> {
    return {mul(mul(g, constant<T>(p)), pow_scalar(v, p - T(1)))};
  });
}

// ---------------------------------------------------------------------------
// slicing / concatenation / channel gather

template <typename T>
Var<T> slice(const Var<T>& v, int axis, int64_t start, int64_t len) {
  const Shape& in = v.shape();
  if (axis < 0 || axis >= static_cast<int>(in.size()))
    throw std::invalid_argument("slice: axis out of range");
  int64_t dim = in[static_cast<size_t>(axis)];
  if (start < 0 || len < 0 || start + len > dim)
    throw std::invalid_argument("slice: window out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= in[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < in.size(); ++i) inner *= in[i];
  Shape out_shape = in;
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor<T> out(out_shape);
  const T* sp = v.value().data();
  T* dp = out.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(dp + o * len * inner, sp + (o * dim + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(T));
  Shape full = in;
  return make_op<T>(std::move(out), {v}, [full, axis, start](const Var<T>& g) -> std::vector<Var<T>> {
    return {pad_slice(g, full, axis, start)};
  });
}

template <typename T>
Var<T> pad_slice(const Var<T>& v, const Shape& full, int axis, int64_t start) {
  const Shape& in = v.shape();
  int64_t len = in[static_cast<size_t>(axis)];
  int64_t dim = full[static_cast<size_t>(axis)];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= full[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < full.size(); ++i) inner *= full[i];
  Tensor<T> out(full);  // zeros
  const T* sp = v.value().data();
  T* dp = out.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(dp + (o * dim + start) * inner, sp + o * len * inner,
                static_cast<size_t>(len * inner) * sizeof(T));
  return make_op<T>(std::move(out), {v}, [axis, start, len](const Var<T>& g) -> std::vector<Var<T>> {
    return {slice(g, axis, start, len)};
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& vs, int axis) {
  if (vs.empty()) throw std::invalid_argument("concat: empty input list");
  Shape out_shape = vs[0].shape();
  int64_t total = 0;
  for (const auto& v : vs) {
    Shape s = v.shape();
    s[static_cast<size_t>(axis)] = 0;
    Shape ref = out_shape;
    ref[static_cast<size_t>(axis)] = 0;
    if (s != ref)
      throw std::invalid_argument("concat: shapes differ off the concat axis");
    total += v.shape()[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  Tensor<T> out(out_shape);
  T* dp = out.data();
  int64_t off = 0;
  for (const auto& v : vs) {
    int64_t len = v.shape()[static_cast<size_t>(axis)];
    const T* sp = v.value().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(dp + (o * total + off) * inner, sp + o * len * inner,
                  static_cast<size_t>(len * inner) * sizeof(T));
    off += len;
  }
  std::vector<int64_t> lens;
  for (const auto& v : vs) lens.push_back(v.shape()[static_cast<size_t>(axis)]);
  return make_op<T>(std::move(out), vs, [axis, lens](const Var<T>& g) -> std::vector<Var<T>> {
    std::vector<Var<T>> parts;
    int64_t s = 0;
    for (int64_t len : lens) {
      parts.push_back(slice(g, axis, s, len));
      s += len;
    }
    return parts;
  });
}

// NCHW channel gather: out[:, i] = v[:, idx[i]]
template <typename T>
Var<T> gather_channels(const Var<T>& v, std::vector<int64_t> idx) {
  const Shape& in = v.shape();
  if (in.size() != 4) throw std::invalid_argument("gather_channels: expects NCHW");
  int64_t n = in[0], c = in[1], hw = in[2] * in[3];
  for (int64_t i : idx)
    if (i < 0 || i >= c) throw std::invalid_argument("gather_channels: index out of range");
  Shape out_shape{n, static_cast<int64_t>(idx.size()), in[2], in[3]};
  Tensor<T> out(out_shape);
  const T* sp = v.value().data();
  T* dp = out.data();
  for (int64_t b = 0; b < n; ++b)
    for (size_t i = 0; i < idx.size(); ++i)
      std::memcpy(dp + (b * static_cast<int64_t>(idx.size()) + static_cast<int64_t>(i)) * hw,
                  sp + (b * c + idx[i]) * hw, static_cast<size_t>(hw) * sizeof(T));
  return make_op<T>(std::move(out), {v}, [c, idx](const Var<T>& g) -> std::vector<Var<T>> {
    return {scatter_channels(g, c, idx)};
  });
}

// adjoint of gather_channels: accumulates v[:, i] into out[:, idx[i]]
template <typename T>
Var<T> scatter_channels(const Var<T>& v, int64_t channels, std::vector<int64_t> idx) {
  const Shape& in = v.shape();
  if (in.size() != 4 || in[1] != static_cast<int64_t>(idx.size()))
    throw std::invalid_argument("scatter_channels: shape/index mismatch");
  int64_t n = in[0], hw = in[2] * in[3];
  Shape out_shape{n, channels, in[2], in[3]};
  Tensor<T> out(out_shape);  // zeros
  const T* sp = v.value().data();
  T* dp = out.data();
  for (int64_t b = 0; b < n; ++b)
    for (size_t i = 0; i < idx.size(); ++i) {
      const T* s = sp + (b * static_cast<int64_t>(idx.size()) + static_cast<int64_t>(i)) * hw;
      T* d = dp + (b * channels + idx[i]) * hw;
      for (int64_t k = 0; k < hw; ++k) d[k] += s[k];
    }
  return make_op<T>(std::move(out), {v}, [idx](const Var<T>& g) -> std::vector<Var<T>> {
    return {gather_channels(g, idx)};
  });
}

// ---------------------------------------------------------------------------
// matmul / linear

template <typename T>
Var<T> matmul2(const Var<T>& a, const Var<T>& b, bool ta, bool tb) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2) throw std::invalid_argument("matmul2: expects 2-D inputs");
  int64_t m = ta ? as[1] : as[0];
  int64_t k = ta ? as[0] : as[1];
  int64_t kb = tb ? bs[1] : bs[0];
  int64_t n = tb ? bs[0] : bs[1];
  if (k != kb)
    throw std::invalid_argument("matmul2: inner dims disagree, " + shape_str(as) + " x " +
                                shape_str(bs));
  Tensor<T> out(Shape{m, n});
  gemm(ta, tb, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), T(1),
       a.value().data(), static_cast<int>(as[1]), b.value().data(), static_cast<int>(bs[1]), T(0),
       out.data(), static_cast<int>(n));
  return make_op<T>(std::move(out), {a, b}, [a, b, ta, tb](const Var<T>& g) -> std::vector<Var<T>> {
    Var<T> da = ta ? matmul2(b, g, tb, true) : matmul2(g, b, false, !tb);
    Var<T> db = tb ? matmul2(g, a, true, ta) : matmul2(a, g, !ta, false);
    return {da, db};
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  return matmul2(a, b, false, false);
}

// x {N,F}, w {O,F}, b {O} -> {N,O}
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Var<T> y = matmul2(x, w, false, true);
  if (!b.defined()) return y;
  return add(y, reshape(b, Shape{1, b.shape()[0]}));
}

// ---------------------------------------------------------------------------
// convolution family (im2col + GEMM, per-sample)

inline ConvGeom dilated_same_geom(int k, int dilation) {
  ConvGeom g;
  g.stride = 1;
  int span = dilation * (k - 1) + 1;
  int lo = (span - 1) / 2;
  g.pad_t = g.pad_l = lo;
  g.pad_b = g.pad_r = span - 1 - lo;
  return g;
}

namespace detail {

// col layout: {C*kh*kw, Ho*Wo} row-major for one sample
template <typename T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, const ConvGeom& g,
            int dilation, int64_t ho, int64_t wo, T* col) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* out_row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        int64_t ih0 = ki * dilation - g.pad_t;
        int64_t iw0 = kj * dilation - g.pad_l;
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * g.stride + ih0;
          T* dst = out_row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (ci * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * g.stride + iw0;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                const ConvGeom& g, int dilation, int64_t ho, int64_t wo, T* x) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* in_row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        int64_t ih0 = ki * dilation - g.pad_t;
        int64_t iw0 = kj * dilation - g.pad_l;
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * g.stride + ih0;
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (ci * h + iy) * w;
          const T* src = in_row + oy * wo;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * g.stride + iw0;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

// x {N,C,H,W}, w {O,C,kh,kw} -> {N,O,Ho,Wo}
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const ConvGeom& g, int dilation) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4) throw std::invalid_argument("conv2d: expects 4-D tensors");
  if (xs[1] != ws[1])
    throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(xs) + " weight " +
                                shape_str(ws));
  int64_t n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  int64_t o = ws[0], kh = ws[2], kw = ws[3];
  int64_t eff_kh = static_cast<int64_t>(dilation) * (kh - 1) + 1;
  int64_t eff_kw = static_cast<int64_t>(dilation) * (kw - 1) + 1;
  int64_t ho = g.out_h(h, eff_kh), wo = g.out_w(wd, eff_kw);
  int64_t ckk = c * kh * kw;
  Tensor<T> out(Shape{n, o, ho, wo});
  std::vector<T> col(static_cast<size_t>(ckk * ho * wo));
  for (int64_t b = 0; b < n; ++b) {
    detail::im2col(x.value().data() + b * c * h * wd, c, h, wd, kh, kw, g, dilation, ho, wo,
                   col.data());
    gemm(false, false, static_cast<int>(o), static_cast<int>(ho * wo), static_cast<int>(ckk), T(1),
         w.value().data(), static_cast<int>(ckk), col.data(), static_cast<int>(ho * wo), T(0),
         out.data() + b * o * ho * wo, static_cast<int>(ho * wo));
  }
  return make_op<T>(std::move(out), {x, w},
                    [x, w, g, dilation, h, wd, kh, kw](const Var<T>& gy) -> std::vector<Var<T>> {
                      return {conv2d_dx(gy, w, g, h, wd, dilation),
                              conv2d_dw(x, gy, g, kh, kw, dilation)};
                    });
}

// gradient of conv2d w.r.t. its input: gy {N,O,Ho,Wo}, w {O,C,kh,kw} -> {N,C,in_h,in_w}
template <typename T>
Var<T> conv2d_dx(const Var<T>& gy, const Var<T>& w, const ConvGeom& g, int64_t in_h, int64_t in_w,
                 int dilation) {
  const Shape& gs = gy.shape();
  const Shape& ws = w.shape();
  if (gs.size() != 4 || ws.size() != 4)
    throw std::invalid_argument("conv2d_dx: expects 4-D tensors");
  if (gs[1] != ws[0]) throw std::invalid_argument("conv2d_dx: channel mismatch");
  int64_t n = gs[0], o = gs[1], ho = gs[2], wo = gs[3];
  int64_t c = ws[1], kh = ws[2], kw = ws[3];
  int64_t ckk = c * kh * kw;
  Tensor<T> out(Shape{n, c, in_h, in_w});  // zeros
  std::vector<T> col(static_cast<size_t>(ckk * ho * wo));
  for (int64_t b = 0; b < n; ++b) {
    gemm(true, false, static_cast<int>(ckk), static_cast<int>(ho * wo), static_cast<int>(o), T(1),
         w.value().data(), static_cast<int>(ckk), gy.value().data() + b * o * ho * wo,
         static_cast<int>(ho * wo), T(0), col.data(), static_cast<int>(ho * wo));
    detail::col2im_add(col.data(), c, in_h, in_w, kh, kw, g, dilation, ho, wo,
                       out.data() + b * c * in_h * in_w);
  }
  return make_op<T>(std::move(out), {gy, w},
                    [gy, w, g, dilation, kh, kw](const Var<T>& u) -> std::vector<Var<T>> {
                      return {conv2d(u, w, g, dilation), conv2d_dw(u, gy, g, kh, kw, dilation)};
                    });
}

// gradient of conv2d w.r.t. its weight: x {N,C,H,W}, gy {N,O,Ho,Wo} -> {O,C,kh,kw}
template <typename T>
Var<T> conv2d_dw(const Var<T>& x, const Var<T>& gy, const ConvGeom& g, int64_t kh, int64_t kw,
                 int dilation) {
  const Shape& xs = x.shape();
  const Shape& gs = gy.shape();
  if (xs.size() != 4 || gs.size() != 4)
    throw std::invalid_argument("conv2d_dw: expects 4-D tensors");
  if (xs[0] != gs[0]) throw std::invalid_argument("conv2d_dw: batch mismatch");
  int64_t n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  int64_t o = gs[1], ho = gs[2], wo = gs[3];
  int64_t ckk = c * kh * kw;
  Tensor<T> out(Shape{o, c, kh, kw});  // zeros
  std::vector<T> col(static_cast<size_t>(ckk * ho * wo));
  for (int64_t b = 0; b < n; ++b) {
    detail::im2col(x.value().data() + b * c * h * wd, c, h, wd, kh, kw, g, dilation, ho, wo,
                   col.data());
    gemm(false, true, static_cast<int>(o), static_cast<int>(ckk), static_cast<int>(ho * wo), T(1),
         gy.value().data() + b * o * ho * wo, static_cast<int>(ho * wo), col.data(),
         static_cast<int>(ho * wo), T(1), out.data(), static_cast<int>(ckk));
  }
  int64_t in_h = h, in_w = wd;
  return make_op<T>(std::move(out), {x, gy},
                    [x, gy, g, dilation, in_h, in_w](const Var<T>& u) -> std::vector<Var<T>> {
                      return {conv2d_dx(gy, u, g, in_h, in_w, dilation), conv2d(x, u, g, dilation)};
                    });
}

// conv with per-output-channel bias
template <typename T>
Var<T> conv2d_bias(const Var<T>& x, const Var<T>& w, const Var<T>& b, const ConvGeom& g,
                   int dilation = 1) {
  Var<T> y = conv2d(x, w, g, dilation);
  if (!b.defined()) return y;
  return add(y, reshape(b, Shape{1, b.shape()[0], 1, 1}));
}

// ---------------------------------------------------------------------------
// bilinear 2x upsampling with an exact adjoint

namespace detail {

struct BilinTap {
  int64_t i0, i1;
  double w0, w1;
};

// half-pixel sampling: src = (dst + 0.5) / 2 - 0.5, clamped to the edge
inline std::vector<BilinTap> bilin_taps(int64_t n_out, int64_t n_in) {
  std::vector<BilinTap> taps(static_cast<size_t>(n_out));
  for (int64_t d = 0; d < n_out; ++d) {
    double src = (static_cast<double>(d) + 0.5) / 2.0 - 0.5;
    double f = std::floor(src);
    int64_t i0 = static_cast<int64_t>(f);
    double w1 = src - f;
    int64_t i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 < 0) i1 = 0;
    if (i0 > n_in - 1) i0 = n_in - 1;
    if (i1 > n_in - 1) i1 = n_in - 1;
    taps[static_cast<size_t>(d)] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Var<T> upsample_bilinear2x(const Var<T>& v) {
  const Shape& in = v.shape();
  if (in.size() != 4) throw std::invalid_argument("upsample_bilinear2x: expects NCHW");
  int64_t n = in[0], c = in[1], h = in[2], w = in[3];
  int64_t oh = h * 2, ow = w * 2;
  auto ty = detail::bilin_taps(oh, h);
  auto tx = detail::bilin_taps(ow, w);
  Tensor<T> out(Shape{n, c, oh, ow});
  const T* sp = v.value().data();
  T* dp = out.data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* src = sp + nc * h * w;
    T* dst = dp + nc * oh * ow;
    for (int64_t oy = 0; oy < oh; ++oy) {
      const auto& yt = ty[static_cast<size_t>(oy)];
      const T* r0 = src + yt.i0 * w;
      const T* r1 = src + yt.i1 * w;
      for (int64_t ox = 0; ox < ow; ++ox) {
        const auto& xt = tx[static_cast<size_t>(ox)];
        double top = yt.w0 * (xt.w0 * r0[xt.i0] + xt.w1 * r0[xt.i1]);
        double bot = yt.w1 * (xt.w0 * r1[xt.i0] + xt.w1 * r1[xt.i1]);
        dst[oy * ow + ox] = static_cast<T>(top + bot);
      }
    }
  }
  return make_op<T>(std::move(out), {v}, [](const Var<T>& g) -> std::vector<Var<T>> {
    return {upsample_bilinear2x_adjoint(g)};
  });
}

template <typename T>
Var<T> upsample_bilinear2x_adjoint(const Var<T>& v) {
  const Shape& in = v.shape();
  if (in.size() != 4 || in[2] % 2 || in[3] % 2)
    throw std::invalid_argument("upsample_bilinear2x_adjoint: expects NCHW with even H and W");
  int64_t n = in[0], c = in[1], oh = in[2], ow = in[3];
  int64_t h = oh / 2, w = ow / 2;
  auto ty = detail::bilin_taps(oh, h);
  auto tx = detail::bilin_taps(ow, w);
  Tensor<T> out(Shape{n, c, h, w});  // zeros
  const T* sp = v.value().data();
  T* dp = out.data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* src = sp + nc * oh * ow;
    T* dst = dp + nc * h * w;
    for (int64_t oy = 0; oy < oh; ++oy) {
      const auto& yt = ty[static_cast<size_t>(oy)];
      for (int64_t ox = 0; ox < ow; ++ox) {
        const auto& xt = tx[static_cast<size_t>(ox)];
        T g = src[oy * ow + ox];
        dst[yt.i0 * w + xt.i0] += static_cast<T>(yt.w0 * xt.w0) * g;
        dst[yt.i0 * w + xt.i1] += static_cast<T>(yt.w0 * xt.w1) * g;
        dst[yt.i1 * w + xt.i0] += static_cast<T>(yt.w1 * xt.w0) * g;
        dst[yt.i1 * w + xt.i1] += static_cast<T>(yt.w1 * xt.w1) * g;
      }
    }
  }
  return make_op<T>(std::move(out), {v}, [](const Var<T>& g) -> std::vector<Var<T>> {
    return {upsample_bilinear2x(g)};
  });
}

// ---------------------------------------------------------------------------
// gradient engine

template <typename T>
std::vector<Var<T>> grad(const Var<T>& output, const std::vector<Var<T>>& wrt,
                         bool create_graph = false, Var<T> seed = {}) {
  if (!output.defined()) throw std::invalid_argument("grad: undefined output");
  if (!seed.defined()) {
    if (output.numel() != 1)
      throw std::invalid_argument("grad: non-scalar output needs an explicit seed");
    seed = constant(Tensor<T>::full(output.shape(), T(1)));
  }
  if (!output.requires_grad()) {
    std::vector<Var<T>> zeros;
    for (const auto& w : wrt) zeros.push_back(constant(Tensor<T>::zeros(w.shape())));
    return zeros;
  }

  // collect the reachable differentiable subgraph
  std::unordered_map<uint64_t, std::shared_ptr<Node<T>>> nodes;
  std::vector<std::shared_ptr<Node<T>>> stack{output.ptr()};
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || nodes.count(n->id)) continue;
    nodes.emplace(n->id, n);
    for (const auto& p : n->parents)
      if (p.requires_grad()) stack.push_back(p.ptr());
  }

  std::vector<uint64_t> order;
  order.reserve(nodes.size());
  for (const auto& kv : nodes) order.push_back(kv.first);
  std::sort(order.begin(), order.end(), std::greater<uint64_t>());

  std::unordered_set<uint64_t> want;
  for (const auto& w : wrt)
    if (w.defined()) want.insert(w.id());

  std::unordered_map<uint64_t, Var<T>> gmap;
  gmap.emplace(output.id(), seed);

  for (uint64_t id : order) {
    auto it = gmap.find(id);
    if (it == gmap.end()) continue;
    const auto& node = nodes.at(id);
    if (!node->backward) continue;
    Var<T> g = it->second;
    std::vector<Var<T>> pg = node->backward(g);
    if (pg.size() != node->parents.size())
      throw std::logic_error("grad: backward arity mismatch");
    for (size_t i = 0; i < pg.size(); ++i) {
      const Var<T>& parent = node->parents[i];
      if (!parent.requires_grad() || !pg[i].defined()) continue;
      Var<T> gi = create_graph ? pg[i] : detach(pg[i]);
      if (gi.shape() != parent.shape())
        throw std::logic_error("grad: gradient shape " + shape_str(gi.shape()) +
                               " does not match parent " + shape_str(parent.shape()));
      auto pit = gmap.find(parent.id());
      if (pit == gmap.end())
        gmap.emplace(parent.id(), gi);
      else
        pit->second = add(pit->second, gi);
    }
    if (!want.count(id)) gmap.erase(id);
  }

  std::vector<Var<T>> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = gmap.find(w.id());
    if (it != gmap.end())
      result.push_back(create_graph ? it->second : detach(it->second));
    else
      result.push_back(constant(Tensor<T>::zeros(w.shape())));
  }
  return result;
}

// ---------------------------------------------------------------------------
// operator sugar

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}
template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) {
  return div(a, b);
}
template <typename T>
Var<T> operator-(const Var<T>& v) {
  return neg(v);
}
template <typename T>
Var<T> operator+(const Var<T>& a, T s) {
  return add(a, constant<T>(s));
}
template <typename T>
Var<T> operator+(T s, const Var<T>& a) {
  return add(constant<T>(s), a);
}
template <typename T>
Var<T> operator-(const Var<T>& a, T s) {
  return sub(a, constant<T>(s));
}
template <typename T>
Var<T> operator-(T s, const Var<T>& a) {
  return sub(constant<T>(s), a);
}
template <typename T>
Var<T> operator*(const Var<T>& a, T s) {
  return mul(a, constant<T>(s));
}
template <typename T>
Var<T> operator*(T s, const Var<T>& a) {
  return mul(constant<T>(s), a);
}
template <typename T>
Var<T> operator/(const Var<T>& a, T s) {
  return div(a, constant<T>(s));
}
template <typename T>
Var<T> operator/(T s, const Var<T>& a) {
  return div(constant<T>(s), a);
}

}  // namespace unmask::ad
