#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "unmask/tensor.hpp"

namespace unmask {

// Raised when an objective or training step produces a non-finite value;
// callers distinguish it from precondition errors when choosing exit codes.
struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Images live in one of two value ranges; conversions are explicit.
enum class ValueRange { Display01, Normalized };

enum class MaskKind { Soft, Binary };

// Dense C×H×W image (RGB, C=3 everywhere in this project).
struct Image {
  TensorF chw;
  ValueRange range = ValueRange::Display01;

  int64_t channels() const { return chw.dim(0); }
  int64_t height() const { return chw.dim(1); }
  int64_t width() const { return chw.dim(2); }
};

// Dense H×W mask with values in [0,1]; soft while training, binary for
// inference compositing and metrics. Stored in double so complement and
// area identities hold to 1e-12; casts to float happen at network input.
struct Mask {
  TensorD hw;
  MaskKind kind = MaskKind::Soft;

  int64_t height() const { return hw.dim(0); }
  int64_t width() const { return hw.dim(1); }
};

struct ClassLabel {
  int index = -1;
  std::string name;
};

struct ClassTable {
  std::vector<std::string> names;

  int k() const { return static_cast<int>(names.size()); }
  int index_of(const std::string& name) const;
  ClassLabel label(int index) const;
};

struct EditResult {
  Image output;
  Mask mask;
  Image inpainted_full;
  ClassLabel target;
};

struct LossWeights {
  float lambda_c = 12.0f;
  float lambda_p = 3.0f;
  float lambda_sz = 18.0f;
  float lambda_rf = 2.0f;
  float lambda_r = 100.0f;
  float lambda_tv = 10.0f;
  float lambda_sty = 3000.0f;
};

// Per-channel statistics for the explicit normalize/denormalize boundary.
struct NormStats {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.25f, 0.25f, 0.25f};
};

Mask invert_mask(const Mask& m);
Image compose(const Image& x, const Mask& m, const Image& g);
Mask binarize_mask(const Mask& m, double threshold = 0.5);
double masked_area_fraction(const Mask& m);

Image normalize(const Image& x, const NormStats& stats);
Image denormalize(const Image& x, const NormStats& stats);

Mask make_mask(TensorD hw, MaskKind kind = MaskKind::Soft);

}  // namespace unmask
