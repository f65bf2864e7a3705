#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "unmask/autodiff.hpp"
#include "unmask/core.hpp"
#include "unmask/rng.hpp"

namespace unmask {

using VarF = ad::Var<float>;

// Width/shape knobs for every network. Defaults follow the reference layer
// lists scaled to a small trunk; all of them are config-overridable.
struct NetConfig {
  int image_size = 128;   // must be divisible by 16
  int num_classes = 4;
  int trunk_width = 16;   // backbone stages carry w, 2w, 4w, 8w channels
  int gm_head_width = 128;  // mask-generator head: h, h/2, h/4
  int inpaint_width = 64;   // in-painter: b, 2b, 4b, 8b down; bottleneck 4b
  int disc_rf_width = 64;
  int critic_width = 32;
  std::vector<int> perceptual_depths = {2, 3};  // trunk stages used as features
  NormStats stats;  // drives the in-painter's output range mapping
};

struct LayerSpec {
  std::string kind;
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 0;
  int stride = 1;
  int dilation = 1;
  int64_t params = 0;
};

struct NetworkSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  Shape input_shape;
  Shape output_shape;
  int64_t param_count = 0;
};

// Channel chaining and count sanity; throws on inconsistency.
void validate_network_spec(const NetworkSpec& spec);
void validate_config(const NetConfig& cfg);

// Named parameters (autodiff leaves, updated in place by the optimizer) plus
// non-gradient buffers such as batch-norm running statistics.
class ParamStore {
 public:
  VarF param(const std::string& name, TensorF init, bool trainable = true);
  TensorF& buffer(const std::string& name, TensorF init);

  int64_t param_count() const;  // total parameter scalars, frozen included
  void set_trainable(bool on);  // flips requires_grad on trainable params only

  std::vector<VarF> trainable_params() const;
  std::vector<std::string> trainable_names() const;

  // Params and buffers as (name, tensor); tensors share storage with the live
  // network, so callers snapshot via clone when persisting.
  std::vector<std::pair<std::string, TensorF>> state() const;
  // Strict: every store entry must be present with matching shape, and every
  // map key must be a store entry.
  void load_state(const std::map<std::string, TensorF>& st, const std::string& who);

 private:
  struct Entry {
    std::string name;
    VarF var;
    bool trainable;
  };
  std::vector<Entry> params_;
  std::vector<std::pair<std::string, std::shared_ptr<TensorF>>> buffers_;
};

class ObjectClassifier {
 public:
  ObjectClassifier(const NetConfig& cfg, uint64_t seed);
  ~ObjectClassifier();
  ObjectClassifier(ObjectClassifier&&) noexcept;
  ObjectClassifier& operator=(ObjectClassifier&&) noexcept;

  // {N,3,S,S} normalized images -> {N,K} per-class sigmoid scores.
  // training=true uses batch statistics and updates the running buffers.
  VarF forward(const VarF& x, bool training);
  // Frozen trunk feature maps at the requested stages (1..4), eval mode.
  std::vector<VarF> features(const VarF& x, const std::vector<int>& depths) const;

  NetworkSpec spec() const;
  ParamStore& store();
  const ParamStore& store() const;
  const NetConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class MaskGenerator {
 public:
  MaskGenerator(const NetConfig& cfg, uint64_t seed);
  ~MaskGenerator();
  MaskGenerator(MaskGenerator&&) noexcept;
  MaskGenerator& operator=(MaskGenerator&&) noexcept;

  // Copies the classifier's trunk parameters/buffers into this network's
  // frozen backbone (they share names under "trunk.").
  void adopt_trunk(const ObjectClassifier& clf);

  // {N,3,S,S} normalized images + per-sample target classes -> {N,1,S,S}
  // soft masks in (0,1).
  VarF forward(const VarF& x, const std::vector<int>& classes);
  // One-hot variant ({N,K}) so conditioning stays differentiable end to end.
  VarF forward_onehot(const VarF& x, const VarF& onehot);

  NetworkSpec spec() const;
  ParamStore& store();
  const ParamStore& store() const;
  const NetConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class Inpainter {
 public:
  Inpainter(const NetConfig& cfg, uint64_t seed);
  ~Inpainter();
  Inpainter(Inpainter&&) noexcept;
  Inpainter& operator=(Inpainter&&) noexcept;

  // x_masked {N,3,S,S} (already m̃·x, normalized range), m {N,1,S,S} ->
  // {N,3,S,S} tanh output affinely mapped to the normalized range.
  VarF forward(const VarF& x_masked, const VarF& m);

  NetworkSpec spec() const;
  ParamStore& store();
  const ParamStore& store() const;
  const NetConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class LocalDiscriminator {
 public:
  LocalDiscriminator(const NetConfig& cfg, uint64_t seed);
  ~LocalDiscriminator();
  LocalDiscriminator(LocalDiscriminator&&) noexcept;
  LocalDiscriminator& operator=(LocalDiscriminator&&) noexcept;

  // {N,3,S,S} -> {N,1,S/4,S/4} raw score map (no output nonlinearity).
  VarF forward(const VarF& y);
  int stride() const;

  NetworkSpec spec() const;
  ParamStore& store();
  const ParamStore& store() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class PriorCritic {
 public:
  PriorCritic(const NetConfig& cfg, uint64_t seed);
  ~PriorCritic();
  PriorCritic(PriorCritic&&) noexcept;
  PriorCritic& operator=(PriorCritic&&) noexcept;

  // m {N,1,S,S} soft or binary, onehot {N,K} -> {N,1} unbounded scores.
  VarF forward(const VarF& m, const VarF& onehot);
  VarF forward(const VarF& m, const std::vector<int>& classes);

  NetworkSpec spec() const;
  ParamStore& store();
  const ParamStore& store() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Batch helpers for the single-sample wrappers below.
TensorF image_to_batch(const Image& x);
TensorF mask_to_batch(const Mask& m);
VarF onehot_rows(const std::vector<int>& classes, int k);

// Single-sample eval-mode wrappers over the batched graph forwards.
Mask mask_generator_forward(MaskGenerator& net, const Image& x, const ClassLabel& c);
Image inpainter_forward(Inpainter& net, const Image& x_masked, const Mask& m);
std::vector<float> object_classifier_forward(ObjectClassifier& net, const Image& x);
TensorF local_discriminator_forward(LocalDiscriminator& net, const Image& y);
float prior_critic_forward(PriorCritic& net, const Mask& m, const ClassLabel& c);
std::vector<TensorF> feature_extract(const ObjectClassifier& net, const Image& x,
                                     const std::vector<int>& depths);

}  // namespace unmask
