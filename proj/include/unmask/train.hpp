#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "unmask/checkpoint.hpp"
#include "unmask/core.hpp"
#include "unmask/data.hpp"
#include "unmask/nets.hpp"
#include "unmask/rng.hpp"

namespace unmask {

uint64_t fnv1a(const void* data, size_t n, uint64_t h = 14695981039346656037ull);
// Order-sensitive digest of every parameter and buffer in a store; used to
// prove that frozen networks stay bit-identical across training phases.
uint64_t hash_state(const ParamStore& store);

class Adam {
 public:
  Adam(std::vector<VarF> params, float lr, float beta1, float beta2, float eps = 1e-8f);

  // Applies one update in place; grads must align with the bound params.
  void step(const std::vector<VarF>& grads);
  int64_t steps() const { return t_; }

  const std::vector<TensorF>& moments_m() const { return m_; }
  const std::vector<TensorF>& moments_v() const { return v_; }
  // Shape-checked restore of both moment vectors and the step count.
  void set_state(const std::vector<TensorF>& m, const std::vector<TensorF>& v, int64_t t);

 private:
  std::vector<VarF> params_;
  std::vector<TensorF> m_, v_;
  float lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
};

// FIFO store of previously generated masks. Holds masks only — no source
// image ids — so reconstruction supervision can never be paired with the
// image a mask came from.
class MaskBuffer {
 public:
  explicit MaskBuffer(int cap = 1024);

  void push(Mask m);
  // Uniform with replacement; throws std::runtime_error when empty (callers
  // fall back to random rectangles during warmup).
  int sample_index(Rng& rng) const;
  const Mask& at(int i) const;
  Mask sample(Rng& rng) const;
  int size() const { return static_cast<int>(masks_.size()); }
  int capacity() const { return capacity_; }

 private:
  int capacity_;
  std::deque<Mask> masks_;
};

void buffer_push(MaskBuffer& buf, const std::vector<Mask>& masks);
std::vector<Mask> buffer_sample(MaskBuffer& buf, int n, Rng& rng);

struct TrainConfig {
  LossWeights weights;
  int epochs = 10;          // alternating epochs after warmup
  int warmup_epochs = 3;    // in-painter-only epochs on random rectangles
  int batch_size = 8;
  float lr = 1e-4f;
  float beta1 = 0.5f;
  float beta2 = 0.9f;
  int alternation_period = 1;  // epochs per phase
  int critic_steps = 5;        // prior-critic iterations per generator step
  float gp_coeff = 10.0f;
  bool mask_gen_first = true;
  float occlude_prob = 0.5f;  // classifier pretraining occlusion rate
  uint64_t seed = 1;
  PriorSpec prior;
};

void validate_train_config(const TrainConfig& cfg);

struct StepRecord {
  int epoch = 0;
  std::string phase;
  int step = 0;  // global step index
  double total = 0;
  double cls = 0, prior = 0, size = 0;
  double rf = 0, recon_l1 = 0, recon_perc = 0, tv = 0, style = 0;
  double disc = 0, gp = 0;  // the active phase's discriminator-side losses
  int violations = 0;       // recon masks paired with their source image this step
};

struct EpochRecord {
  int epoch = 0;
  std::string phase;
  double mean_total = 0;
  uint64_t hash_classifier = 0;
  uint64_t hash_mask_gen = 0;
  uint64_t hash_inpainter = 0;
  uint64_t hash_disc_rf = 0;
  uint64_t hash_prior_critic = 0;
  int buffer_size = 0;
  int64_t violations = 0;
};

double macro_f1(const std::vector<std::vector<float>>& scores,
                const std::vector<std::vector<int>>& labels, int num_classes,
                float threshold = 0.5f);

struct PretrainResult {
  Checkpoint best;
  int best_epoch = -1;
  double best_f1 = 0.0;
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_f1;      // per epoch
};

// Multi-label classifier training with random rectangle occlusion; returns
// the best-validation (macro-F1) snapshot.
PretrainResult pretrain_classifier(const std::vector<TrainSample>& train,
                                   const std::vector<TrainSample>& val, const NetConfig& net,
                                   const TrainConfig& cfg,
                                   const std::vector<std::string>& class_names,
                                   const std::string& run_id,
                                   const std::string& config_echo = "");

// Owns the five networks, their optimizers, the mask buffer, and the run's
// RNG stream. The classifier is restored from its checkpoint and never
// updated; the mask generator adopts its trunk.
class EditorTrainer {
 public:
  EditorTrainer(const NetConfig& net, const TrainConfig& cfg, const Checkpoint& classifier_ck);

  StepRecord step_mask_gen(const std::vector<const TrainSample*>& batch);
  StepRecord step_inpainter(const std::vector<const TrainSample*>& batch, bool warmup);

  ObjectClassifier& classifier() { return clf_; }
  MaskGenerator& mask_gen() { return gm_; }
  Inpainter& inpainter() { return gi_; }
  LocalDiscriminator& disc_rf() { return drf_; }
  PriorCritic& prior_critic() { return dm_; }
  MaskBuffer& buffer() { return buffer_; }
  Rng& rng() { return rng_; }
  const NetConfig& net_config() const { return net_; }
  int steps_taken() const { return step_; }

  // Optimizer moments and the step counter as a checkpoint, so an
  // interrupted run can continue from its last epoch directory.
  Checkpoint snapshot_optim(const std::string& run_id, const std::string& config_echo,
                            const std::vector<std::string>& class_names) const;
  void restore_optim(const Checkpoint& ck);

 private:
  TensorF batch_images(const std::vector<const TrainSample*>& batch) const;
  std::vector<int> pick_targets(const std::vector<const TrainSample*>& batch);
  Mask sample_prior_mask(int class_index);
  VarF composite(const VarF& x, const VarF& m);
  void check_finite(const StepRecord& rec) const;

  NetConfig net_;
  TrainConfig cfg_;
  ObjectClassifier clf_;
  MaskGenerator gm_;
  Inpainter gi_;
  LocalDiscriminator drf_;
  PriorCritic dm_;
  Adam opt_gm_, opt_gi_, opt_drf_, opt_dm_;
  MaskBuffer buffer_;
  std::deque<std::pair<std::string, int>> buffer_src_;  // (image id, push step)
  std::optional<PoolPrior> pool_;
  Rng rng_;
  int step_ = 0;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::string log_path;
  std::vector<std::string> checkpoint_dirs;
  int start_epoch = 0;  // > 0 when the run resumed from existing checkpoints
};

// Warmup then per-epoch alternation; JSON-lines log plus per-epoch
// checkpoints under out_dir/ckpt-epoch-<n>/. When out_dir already holds
// complete epoch directories the run resumes after the last one: parameters,
// optimizer moments, and the step counter are restored, the log is appended
// to, the mask buffer restarts empty, and the RNG stream is re-derived from
// (seed, resume epoch). Throws on a missing classifier checkpoint, on any
// non-finite loss (with the breakdown in the message), and on any
// phase-isolation violation.
TrainResult train_editor(const std::vector<TrainSample>& data, const NetConfig& net,
                         const TrainConfig& cfg, const Checkpoint& classifier_ck,
                         const std::string& out_dir, const std::string& run_id,
                         const std::string& config_echo = "");

}  // namespace unmask
