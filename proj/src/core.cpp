#include "unmask/core.hpp"

#include <cmath>
#include <stdexcept>

namespace unmask {

int ClassTable::index_of(const std::string& name) const {
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  return -1;
}

ClassLabel ClassTable::label(int index) const {
  if (index < 0 || index >= k())
    throw std::invalid_argument("class index " + std::to_string(index) + " outside [0," +
                                std::to_string(k()) + ")");
  return ClassLabel{index, names[static_cast<size_t>(index)]};
}

Mask make_mask(TensorD hw, MaskKind kind) {
  if (hw.rank() != 2)
    throw std::invalid_argument("mask must be rank 2, got " + shape_str(hw.shape()));
  const double* p = hw.data();
  for (int64_t i = 0; i < hw.numel(); ++i) {
    if (!(p[i] >= 0.0 && p[i] <= 1.0))
      throw std::invalid_argument("mask value " + std::to_string(p[i]) + " outside [0,1]");
    if (kind == MaskKind::Binary && p[i] != 0.0 && p[i] != 1.0)
      throw std::invalid_argument("binary mask holds non-binary value " + std::to_string(p[i]));
  }
  return Mask{std::move(hw), kind};
}

Mask invert_mask(const Mask& m) {
  TensorD out(m.hw.shape());
  const double* s = m.hw.data();
  double* d = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) d[i] = 1.0 - s[i];
  return Mask{std::move(out), m.kind};
}

Image compose(const Image& x, const Mask& m, const Image& g) {
  if (!x.chw.same_shape(g.chw) || x.height() != m.height() || x.width() != m.width())
    throw std::invalid_argument("compose: shape mismatch, image " + shape_str(x.chw.shape()) +
                                ", mask " + shape_str(m.hw.shape()) + ", inpainted " +
                                shape_str(g.chw.shape()));
  if (x.range != g.range)
    throw std::invalid_argument("compose: image and inpainted output disagree on value range");
  TensorF out(x.chw.shape());
  const int64_t hw = x.height() * x.width();
  const double* mp = m.hw.data();
  for (int64_t c = 0; c < x.channels(); ++c) {
    const float* xp = x.chw.data() + c * hw;
    const float* gp = g.chw.data() + c * hw;
    float* op = out.data() + c * hw;
    for (int64_t i = 0; i < hw; ++i) {
      const float mv = static_cast<float>(mp[i]);
      op[i] = (1.0f - mv) * xp[i] + mv * gp[i];
    }
  }
  return Image{std::move(out), x.range};
}

Mask binarize_mask(const Mask& m, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("binarize threshold " + std::to_string(threshold) +
                                " outside (0,1)");
  TensorD out(m.hw.shape());
  const double* s = m.hw.data();
  double* d = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) d[i] = s[i] >= threshold ? 1.0 : 0.0;
  return Mask{std::move(out), MaskKind::Binary};
}

double masked_area_fraction(const Mask& m) {
  return m.hw.mean();
}

Image normalize(const Image& x, const NormStats& stats) {
  if (x.range != ValueRange::Display01)
    throw std::invalid_argument("normalize expects a display-range image");
  TensorF out(x.chw.shape());
  const int64_t hw = x.height() * x.width();
  for (int64_t c = 0; c < x.channels(); ++c) {
    const float mu = stats.mean[static_cast<size_t>(c)];
    const float sd = stats.stddev[static_cast<size_t>(c)];
    const float* s = x.chw.data() + c * hw;
    float* d = out.data() + c * hw;
    for (int64_t i = 0; i < hw; ++i) d[i] = (s[i] - mu) / sd;
  }
  return Image{std::move(out), ValueRange::Normalized};
}

Image denormalize(const Image& x, const NormStats& stats) {
  if (x.range != ValueRange::Normalized)
    throw std::invalid_argument("denormalize expects a normalized image");
  TensorF out(x.chw.shape());
  const int64_t hw = x.height() * x.width();
  for (int64_t c = 0; c < x.channels(); ++c) {
    const float mu = stats.mean[static_cast<size_t>(c)];
    const float sd = stats.stddev[static_cast<size_t>(c)];
    const float* s = x.chw.data() + c * hw;
    float* d = out.data() + c * hw;
    for (int64_t i = 0; i < hw; ++i) d[i] = s[i] * sd + mu;
  }
  return Image{std::move(out), ValueRange::Display01};
}

}  // namespace unmask
