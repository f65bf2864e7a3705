#include "unmask/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "unmask/losses.hpp"
#include "unmask/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace unmask {

namespace ops = ad;

uint64_t fnv1a(const void* data, size_t n, uint64_t h) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t hash_state(const ParamStore& store) {
  uint64_t h = 14695981039346656037ull;
  for (const auto& [name, t] : store.state()) {
    h = fnv1a(name.data(), name.size(), h);
    for (int64_t i = 0; i < t.numel(); ++i) {
      const float v = t[i];
      h = fnv1a(&v, sizeof v, h);
    }
  }
  return h;
}

Adam::Adam(std::vector<VarF> params, float lr, float beta1, float beta2, float eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.shape(), 0.0f);
    v_.emplace_back(p.shape(), 0.0f);
  }
}

void Adam::step(const std::vector<VarF>& grads) {
  if (grads.size() != params_.size())
    throw std::invalid_argument("optimizer got " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(params_.size()) + " params");
  ++t_;
  const float bc1 = 1.0f - std::pow(b1_, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(b2_, static_cast<float>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    const TensorF& g = grads[i].value();
    TensorF& p = params_[i].value();
    if (g.shape() != p.shape())
      throw std::invalid_argument("gradient shape mismatch on optimizer step");
    for (int64_t j = 0; j < p.numel(); ++j) {
      m_[i][j] = b1_ * m_[i][j] + (1.0f - b1_) * g[j];
      v_[i][j] = b2_ * v_[i][j] + (1.0f - b2_) * g[j] * g[j];
      const float mh = m_[i][j] / bc1;
      const float vh = v_[i][j] / bc2;
      p[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

void Adam::set_state(const std::vector<TensorF>& m, const std::vector<TensorF>& v, int64_t t) {
  if (m.size() != params_.size() || v.size() != params_.size())
    throw std::invalid_argument("optimizer state has " + std::to_string(m.size()) + "/" +
                                std::to_string(v.size()) + " moment tensors for " +
                                std::to_string(params_.size()) + " params");
  if (t < 0) throw std::invalid_argument("optimizer step count cannot be negative");
  for (size_t i = 0; i < params_.size(); ++i) {
    if (m[i].shape() != params_[i].shape() || v[i].shape() != params_[i].shape())
      throw std::invalid_argument("optimizer state shape mismatch at tensor " +
                                  std::to_string(i));
    m_[i] = m[i].clone();
    v_[i] = v[i].clone();
  }
  t_ = t;
}

MaskBuffer::MaskBuffer(int cap) : capacity_(cap) {
  if (cap <= 0) throw std::invalid_argument("mask buffer capacity must be positive");
}

void MaskBuffer::push(Mask m) {
  masks_.push_back(std::move(m));
  if (static_cast<int>(masks_.size()) > capacity_) masks_.pop_front();
}

int MaskBuffer::sample_index(Rng& rng) const {
  if (masks_.empty()) throw std::runtime_error("cannot sample from an empty mask buffer");
  return static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(masks_.size()) - 1));
}

const Mask& MaskBuffer::at(int i) const { return masks_.at(static_cast<size_t>(i)); }

Mask MaskBuffer::sample(Rng& rng) const { return at(sample_index(rng)); }

void buffer_push(MaskBuffer& buf, const std::vector<Mask>& masks) {
  for (const auto& m : masks) buf.push(m);
}

std::vector<Mask> buffer_sample(MaskBuffer& buf, int n, Rng& rng) {
  std::vector<Mask> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(buf.sample(rng));
  return out;
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 0 || cfg.warmup_epochs < 0)
    throw std::invalid_argument("epoch counts must be nonnegative");
  if (cfg.batch_size <= 0) throw std::invalid_argument("batch size must be positive");
  if (cfg.lr <= 0.0f) throw std::invalid_argument("learning rate must be positive");
  if (cfg.beta1 < 0.0f || cfg.beta1 >= 1.0f || cfg.beta2 < 0.0f || cfg.beta2 >= 1.0f)
    throw std::invalid_argument("optimizer betas must lie in [0, 1)");
  if (cfg.alternation_period <= 0)
    throw std::invalid_argument("alternation period must be positive");
  if (cfg.critic_steps <= 0) throw std::invalid_argument("critic steps must be positive");
  if (cfg.gp_coeff < 0.0f) throw std::invalid_argument("gp coefficient must be nonnegative");
  if (cfg.occlude_prob < 0.0f || cfg.occlude_prob > 1.0f)
    throw std::invalid_argument("occlusion probability must lie in [0, 1]");
}

namespace {

VarF scalar(float v) { return ops::constant(TensorF({}, v)); }

// Mean pooling down to a score-map resolution; the pooled mask is a constant
// weighting, so no gradient path is needed through it.
TensorF pool_mask(const TensorF& m, int factor) {
  const auto& s = m.shape();
  const int64_t n = s[0], h = s[2], w = s[3];
  if (h % factor != 0 || w % factor != 0)
    throw std::invalid_argument("mask size is not divisible by the score-map stride");
  const int64_t oh = h / factor, ow = w / factor;
  TensorF out({n, 1, oh, ow}, 0.0f);
  const float inv = 1.0f / static_cast<float>(factor * factor);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j) {
        float acc = 0.0f;
        for (int di = 0; di < factor; ++di)
          for (int dj = 0; dj < factor; ++dj)
            acc += m[((b * 1 + 0) * h + i * factor + di) * w + j * factor + dj];
        out[((b * 1 + 0) * oh + i) * ow + j] = acc * inv;
      }
  return out;
}

TensorF mask_plane(const Mask& m) {
  TensorF out({1, 1, m.height(), m.width()}, 0.0f);
  for (int64_t i = 0; i < m.hw.numel(); ++i) out[i] = static_cast<float>(m.hw[i]);
  return out;
}

void copy_into_batch(TensorF& dst, int64_t slot, const TensorF& src) {
  const int64_t n = src.numel();
  for (int64_t i = 0; i < n; ++i) dst[slot * n + i] = src[i];
}

Mask slice_mask(const TensorF& batch, int64_t slot, int64_t size) {
  Mask m{TensorD({size, size}, 0.0), MaskKind::Soft};
  const int64_t n = size * size;
  for (int64_t i = 0; i < n; ++i) m.hw[i] = static_cast<double>(batch[slot * n + i]);
  return m;
}

// Sum of mean-L1 feature distances (the perceptual half of reconstruction).
VarF perceptual_sum(const std::vector<VarF>& a, const std::vector<VarF>& b) {
  VarF acc = scalar(0.0f);
  for (size_t k = 0; k < a.size(); ++k)
    acc = ops::add(acc, ops::mean_all(ops::abs_op(ops::sub(a[k], b[k]))));
  return acc;
}

json record_json(const StepRecord& r) {
  json j;
  j["kind"] = "step";
  j["epoch"] = r.epoch;
  j["phase"] = r.phase;
  j["step"] = r.step;
  j["total"] = r.total;
  j["cls"] = r.cls;
  j["prior"] = r.prior;
  j["size"] = r.size;
  j["rf"] = r.rf;
  j["recon_l1"] = r.recon_l1;
  j["recon_perc"] = r.recon_perc;
  j["tv"] = r.tv;
  j["style"] = r.style;
  j["disc"] = r.disc;
  j["gp"] = r.gp;
  j["violations"] = r.violations;
  return j;
}

json record_json(const EpochRecord& r) {
  json j;
  j["kind"] = "epoch";
  j["epoch"] = r.epoch;
  j["phase"] = r.phase;
  j["mean_total"] = r.mean_total;
  j["hash_classifier"] = r.hash_classifier;
  j["hash_mask_gen"] = r.hash_mask_gen;
  j["hash_inpainter"] = r.hash_inpainter;
  j["hash_disc_rf"] = r.hash_disc_rf;
  j["hash_prior_critic"] = r.hash_prior_critic;
  j["buffer_size"] = r.buffer_size;
  j["violations"] = r.violations;
  return j;
}

}  // namespace

double macro_f1(const std::vector<std::vector<float>>& scores,
                const std::vector<std::vector<int>>& labels, int num_classes, float threshold) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("macro_f1: score/label count mismatch");
  std::vector<int64_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (size_t i = 0; i < scores.size(); ++i) {
    if (static_cast<int>(scores[i].size()) != num_classes)
      throw std::invalid_argument("macro_f1: score vector has wrong class count");
    std::set<int> truth(labels[i].begin(), labels[i].end());
    for (int c = 0; c < num_classes; ++c) {
      const bool pred = scores[i][static_cast<size_t>(c)] >= threshold;
      const bool real = truth.count(c) > 0;
      if (pred && real)
        ++tp[c];
      else if (pred && !real)
        ++fp[c];
      else if (!pred && real)
        ++fn[c];
    }
  }
  double acc = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    const int64_t denom = 2 * tp[c] + fp[c] + fn[c];
    acc += denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return acc / num_classes;
}

namespace {

TensorF assemble_images(const std::vector<const TrainSample*>& batch, int64_t size,
                        const NormStats& stats) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  TensorF out({static_cast<int64_t>(batch.size()), 3, size, size}, 0.0f);
  for (size_t i = 0; i < batch.size(); ++i) {
    const Image* img = &batch[i]->image;
    Image norm;
    if (img->range == ValueRange::Display01) {
      norm = normalize(*img, stats);
      img = &norm;
    }
    if (img->height() != size || img->width() != size)
      throw std::invalid_argument("image '" + batch[i]->id + "' does not match the configured size");
    copy_into_batch(out, static_cast<int64_t>(i), img->chw);
  }
  return out;
}

TensorF multi_hot(const std::vector<const TrainSample*>& batch, int k) {
  TensorF t({static_cast<int64_t>(batch.size()), k}, 0.0f);
  for (size_t i = 0; i < batch.size(); ++i)
    for (int c : batch[i]->labels) {
      if (c < 0 || c >= k)
        throw std::invalid_argument("label " + std::to_string(c) + " outside [0, " +
                                    std::to_string(k) + ")");
      t[static_cast<int64_t>(i) * k + c] = 1.0f;
    }
  return t;
}

VarF bce_loss(const VarF& scores, const TensorF& targets) {
  auto s = ops::clamp(scores, 1e-7f, 1.0f - 1e-7f);
  auto t = ops::constant(targets);
  auto one = scalar(1.0f);
  auto pos = ops::mul(t, ops::log_op(s));
  auto negt = ops::mul(ops::sub(one, t), ops::log_op(ops::sub(one, s)));
  return ops::neg(ops::mean_all(ops::add(pos, negt)));
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (size_t i = idx.size(); i > 1; --i) {
    const auto j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
}

std::vector<std::vector<const TrainSample*>> make_batches(const std::vector<TrainSample>& data,
                                                          const std::vector<int>& order,
                                                          int batch_size) {
  std::vector<std::vector<const TrainSample*>> batches;
  const int n = static_cast<int>(order.size());
  const int bs = std::min(batch_size, n);
  for (int i = 0; i + bs <= n; i += bs) {
    std::vector<const TrainSample*> b;
    b.reserve(static_cast<size_t>(bs));
    for (int j = 0; j < bs; ++j) b.push_back(&data[static_cast<size_t>(order[i + j])]);
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace

PretrainResult pretrain_classifier(const std::vector<TrainSample>& train,
                                   const std::vector<TrainSample>& val, const NetConfig& net,
                                   const TrainConfig& cfg,
                                   const std::vector<std::string>& class_names,
                                   const std::string& run_id, const std::string& config_echo) {
  validate_config(net);
  validate_train_config(cfg);
  if (train.empty() || val.empty())
    throw std::invalid_argument("pretraining needs nonempty train and val sets");
  std::set<int> distinct;
  for (const auto& s : train) distinct.insert(s.labels.begin(), s.labels.end());
  if (distinct.size() < 2)
    throw std::invalid_argument("pretraining needs at least 2 distinct classes in the data");
  if (static_cast<int>(class_names.size()) != net.num_classes)
    throw std::invalid_argument("class name count does not match num_classes");

  ObjectClassifier clf(net, cfg.seed + 17);
  Adam opt(clf.store().trainable_params(), cfg.lr, cfg.beta1, cfg.beta2);
  Rng rng(cfg.seed);
  const int64_t size = net.image_size;

  std::vector<float> fill(3);
  for (int c = 0; c < 3; ++c) fill[static_cast<size_t>(c)] =
      (0.5f - net.stats.mean[static_cast<size_t>(c)]) / net.stats.stddev[static_cast<size_t>(c)];

  PretrainResult res;
  std::vector<int> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_indices(order, rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (auto& batch : make_batches(train, order, cfg.batch_size)) {
      TensorF xs = assemble_images(batch, size, net.stats);
      for (size_t i = 0; i < batch.size(); ++i) {
        if (rng.uniform() >= cfg.occlude_prob) continue;
        Mask occ = sample_random_rects(rng, 1, 2, 0.05, 0.25, static_cast<int>(size));
        for (int64_t c = 0; c < 3; ++c)
          for (int64_t p = 0; p < size * size; ++p)
            if (occ.hw[p] > 0.5)
              xs[(static_cast<int64_t>(i) * 3 + c) * size * size + p] = fill[static_cast<size_t>(c)];
      }
      auto scores = clf.forward(ops::constant(xs), true);
      auto loss = bce_loss(scores, multi_hot(batch, net.num_classes));
      const double lv = loss.value()[0];
      if (!std::isfinite(lv))
        throw std::runtime_error("non-finite classifier loss at epoch " + std::to_string(epoch));
      opt.step(ops::grad(loss, clf.store().trainable_params()));
      loss_sum += lv;
      ++batches;
    }
    res.train_loss.push_back(loss_sum / std::max(batches, 1));

    std::vector<std::vector<float>> val_scores;
    std::vector<std::vector<int>> val_labels;
    std::vector<int> vorder(val.size());
    for (size_t i = 0; i < vorder.size(); ++i) vorder[i] = static_cast<int>(i);
    for (auto& batch : make_batches(val, vorder, cfg.batch_size)) {
      TensorF xs = assemble_images(batch, size, net.stats);
      auto scores = clf.forward(ops::constant(xs), false);
      const TensorF& sv = scores.value();
      for (size_t i = 0; i < batch.size(); ++i) {
        std::vector<float> row(static_cast<size_t>(net.num_classes));
        for (int c = 0; c < net.num_classes; ++c)
          row[static_cast<size_t>(c)] = sv[static_cast<int64_t>(i) * net.num_classes + c];
        val_scores.push_back(std::move(row));
        val_labels.push_back(batch[i]->labels);
      }
    }
    const double f1 = macro_f1(val_scores, val_labels, net.num_classes);
    res.val_f1.push_back(f1);
    if (f1 > res.best_f1 || res.best_epoch < 0) {
      res.best_f1 = f1;
      res.best_epoch = epoch;
      res.best = snapshot_store(clf.store(), epoch + 1, run_id, config_echo, class_names);
      res.best.build_id = kBuildId;
      res.best.stats = net.stats;
    }
  }
  return res;
}

EditorTrainer::EditorTrainer(const NetConfig& net, const TrainConfig& cfg,
                             const Checkpoint& classifier_ck)
    : net_(net),
      cfg_(cfg),
      clf_(net, cfg.seed + 17),
      gm_(net, cfg.seed + 29),
      gi_(net, cfg.seed + 31),
      drf_(net, cfg.seed + 37),
      dm_(net, cfg.seed + 41),
      opt_gm_(gm_.store().trainable_params(), cfg.lr, cfg.beta1, cfg.beta2),
      opt_gi_(gi_.store().trainable_params(), cfg.lr, cfg.beta1, cfg.beta2),
      opt_drf_(drf_.store().trainable_params(), cfg.lr, cfg.beta1, cfg.beta2),
      opt_dm_(dm_.store().trainable_params(), cfg.lr, cfg.beta1, cfg.beta2),
      buffer_(1024),
      rng_(cfg.seed) {
  validate_config(net);
  validate_train_config(cfg);
  if (classifier_ck.tensors.empty())
    throw std::invalid_argument("editor training needs a pretrained classifier checkpoint");
  if (static_cast<int>(classifier_ck.class_names.size()) != net.num_classes)
    throw std::invalid_argument("classifier checkpoint has " +
                                std::to_string(classifier_ck.class_names.size()) +
                                " classes, config expects " + std::to_string(net.num_classes));
  restore_store(classifier_ck, clf_.store(), "classifier");
  gm_.adopt_trunk(clf_);
  if (cfg_.prior.kind == PriorSpec::Kind::MaskPool) {
    ClassTable table{classifier_ck.class_names};
    pool_.emplace(cfg_.prior.pool_dir, table, cfg_.prior.pool_per_class_limit);
  }
}

TensorF EditorTrainer::batch_images(const std::vector<const TrainSample*>& batch) const {
  return assemble_images(batch, net_.image_size, net_.stats);
}

std::vector<int> EditorTrainer::pick_targets(const std::vector<const TrainSample*>& batch) {
  std::vector<int> cls(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& labels = batch[i]->labels;
    if (labels.empty())
      throw std::invalid_argument("image '" + batch[i]->id + "' has no labels to target");
    cls[i] = labels[static_cast<size_t>(
        rng_.uniform_int(0, static_cast<int64_t>(labels.size()) - 1))];
  }
  return cls;
}

Mask EditorTrainer::sample_prior_mask(int class_index) {
  switch (cfg_.prior.kind) {
    case PriorSpec::Kind::Boxes:
      return sample_box_prior(rng_, cfg_.prior, static_cast<int>(net_.image_size));
    case PriorSpec::Kind::MaskPool:
      return pool_->sample(rng_, class_index, static_cast<int>(net_.image_size));
    case PriorSpec::Kind::None:
      break;
  }
  throw std::logic_error("prior mask requested with no prior configured");
}

VarF EditorTrainer::composite(const VarF& x, const VarF& m) {
  auto mt = ops::sub(scalar(1.0f), m);
  auto xin = ops::mul(mt, x);
  auto g = gi_.forward(xin, m);
  return ops::add(xin, ops::mul(m, g));
}

void EditorTrainer::check_finite(const StepRecord& rec) const {
  const double vals[] = {rec.total, rec.cls,      rec.prior, rec.size,  rec.rf,  rec.recon_l1,
                         rec.recon_perc, rec.tv,  rec.style, rec.disc,  rec.gp};
  for (double v : vals)
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite loss at step " << rec.step << " (" << rec.phase
         << "): " << record_json(rec).dump();
      throw NumericalFailure(os.str());
    }
}

Checkpoint EditorTrainer::snapshot_optim(const std::string& run_id,
                                         const std::string& config_echo,
                                         const std::vector<std::string>& class_names) const {
  Checkpoint ck;
  ck.step = step_;
  ck.run_id = run_id;
  ck.config_echo = config_echo;
  ck.class_names = class_names;
  auto pack = [&ck](const char* tag, const Adam& opt) {
    const auto& m = opt.moments_m();
    const auto& v = opt.moments_v();
    for (size_t i = 0; i < m.size(); ++i) {
      ck.tensors.emplace_back(std::string(tag) + ".m." + std::to_string(i), m[i].clone());
      ck.tensors.emplace_back(std::string(tag) + ".v." + std::to_string(i), v[i].clone());
    }
    ck.tensors.emplace_back(std::string(tag) + ".t",
                            TensorF::full({1}, static_cast<float>(opt.steps())));
  };
  pack("gm", opt_gm_);
  pack("gi", opt_gi_);
  pack("drf", opt_drf_);
  pack("dm", opt_dm_);
  return ck;
}

void EditorTrainer::restore_optim(const Checkpoint& ck) {
  std::map<std::string, const TensorF*> idx;
  for (const auto& [name, t] : ck.tensors) idx.emplace(name, &t);
  auto unpack = [&idx](const char* tag, Adam& opt) {
    std::vector<TensorF> m, v;
    const size_t n = opt.moments_m().size();
    for (size_t i = 0; i < n; ++i) {
      auto im = idx.find(std::string(tag) + ".m." + std::to_string(i));
      auto iv = idx.find(std::string(tag) + ".v." + std::to_string(i));
      if (im == idx.end() || iv == idx.end())
        throw std::runtime_error(std::string("optimizer state is missing moments for ") + tag);
      m.push_back(*im->second);
      v.push_back(*iv->second);
    }
    auto it = idx.find(std::string(tag) + ".t");
    if (it == idx.end() || it->second->numel() != 1)
      throw std::runtime_error(std::string("optimizer state is missing the step count for ") +
                               tag);
    opt.set_state(m, v, static_cast<int64_t>((*it->second)[0]));
  };
  unpack("gm", opt_gm_);
  unpack("gi", opt_gi_);
  unpack("drf", opt_drf_);
  unpack("dm", opt_dm_);
  step_ = static_cast<int>(ck.step);
}

StepRecord EditorTrainer::step_mask_gen(const std::vector<const TrainSample*>& batch) {
  const int64_t n = static_cast<int64_t>(batch.size());
  const int64_t size = net_.image_size;
  StepRecord rec;
  rec.phase = "mask-gen";
  rec.step = step_;

  TensorF xs = batch_images(batch);
  std::vector<int> cls = pick_targets(batch);
  auto x = ops::constant(xs);
  auto m = gm_.forward(x, cls);
  TensorF m_detached = m.value().clone();

  // Prior critic first: several iterations against the current (detached)
  // masks, fresh prior draws each time.
  if (cfg_.prior.kind != PriorSpec::Kind::None) {
    for (int it = 0; it < cfg_.critic_steps; ++it) {
      TensorF priors({n, 1, size, size}, 0.0f);
      for (int64_t i = 0; i < n; ++i)
        copy_into_batch(priors, i, mask_plane(sample_prior_mask(cls[static_cast<size_t>(i)])));
      auto d_prior = dm_.forward(ops::constant(priors), cls);
      auto d_fake = dm_.forward(ops::constant(m_detached), cls);
      auto pair = loss_prior_pair(d_prior, d_fake);
      auto critic_fn = [&](const VarF& mm) { return dm_.forward(mm, cls); };
      auto gp = gradient_penalty<float>(critic_fn, priors, m_detached, rng_);
      auto d_total = ops::add(ops::neg(pair.first), ops::mul(scalar(cfg_.gp_coeff), gp));
      opt_dm_.step(ops::grad(d_total, dm_.store().trainable_params()));
      rec.disc = pair.first.value()[0];
      rec.gp = gp.value()[0];
    }
  }

  // Generator update: fool the frozen classifier on the composite, move mask
  // scores up under the freshly updated critic, stay small.
  auto y = composite(x, m);
  auto scores = clf_.forward(y, false);
  auto picked = ops::reduce_sum(ops::mul(scores, onehot_rows(cls, net_.num_classes)), {1});
  LossBreakdown<float> bd;
  bd.cls = loss_cls(picked);
  bd.prior = cfg_.prior.kind == PriorSpec::Kind::None
                 ? scalar(0.0f)
                 : ops::neg(ops::mean_all(dm_.forward(m, cls)));
  bd.size = size_penalty(m);
  auto total = total_mask_gen(bd, cfg_.weights);
  opt_gm_.step(ops::grad(total, gm_.store().trainable_params()));

  for (int64_t i = 0; i < n; ++i) {
    buffer_.push(slice_mask(m_detached, i, size));
    buffer_src_.emplace_back(batch[static_cast<size_t>(i)]->id, step_);
    if (static_cast<int>(buffer_src_.size()) > buffer_.capacity()) buffer_src_.pop_front();
  }

  rec.total = total.value()[0];
  rec.cls = bd.cls.value()[0];
  rec.prior = bd.prior.value()[0];
  rec.size = bd.size.value()[0];
  check_finite(rec);
  ++step_;
  return rec;
}

StepRecord EditorTrainer::step_inpainter(const std::vector<const TrainSample*>& batch,
                                         bool warmup) {
  const int64_t n = static_cast<int64_t>(batch.size());
  const int64_t size = net_.image_size;
  StepRecord rec;
  rec.phase = warmup ? "warmup" : "inpaint";
  rec.step = step_;

  TensorF xs = batch_images(batch);
  auto x = ops::constant(xs);

  // Reconstruction stream: unrelated masks from the buffer (random
  // rectangles until it has content), target is always the unmasked
  // original.
  TensorF mrec({n, 1, size, size}, 0.0f);
  for (int64_t i = 0; i < n; ++i) {
    if (warmup || buffer_.size() == 0) {
      copy_into_batch(mrec, i,
                      mask_plane(sample_random_rects(rng_, 1, 3, 0.02, 0.25,
                                                     static_cast<int>(size))));
    } else {
      const int idx = buffer_.sample_index(rng_);
      copy_into_batch(mrec, i, mask_plane(buffer_.at(idx)));
      const auto& src = buffer_src_.at(static_cast<size_t>(idx));
      if (src.first == batch[static_cast<size_t>(i)]->id && src.second == step_)
        ++rec.violations;
    }
  }
  auto mr = ops::constant(mrec);
  auto xin = ops::mul(ops::sub(scalar(1.0f), mr), x);
  auto g = gi_.forward(xin, mr);
  auto y_rec = ops::add(xin, ops::mul(mr, g));
  auto feats_out = clf_.features(y_rec, net_.perceptual_depths);
  auto feats_ref = clf_.features(x, net_.perceptual_depths);

  LossBreakdown<float> bd;
  bd.recon_l1 = ops::mean_all(ops::abs_op(ops::sub(y_rec, x)));
  bd.recon_perc = perceptual_sum(feats_out, feats_ref);
  bd.tv = loss_tv(y_rec);
  bd.style = loss_style<float>(feats_out, feats_ref);

  // Adversarial stream: live masks from the frozen mask generator, local
  // scores on the composite.
  TensorF y_live_val;
  TensorF m_pooled;
  if (!warmup) {
    std::vector<int> cls = pick_targets(batch);
    TensorF m_live = gm_.forward(x, cls).value().clone();
    auto ml = ops::constant(m_live);
    auto xin2 = ops::mul(ops::sub(scalar(1.0f), ml), x);
    auto g2 = gi_.forward(xin2, ml);
    auto y_live = ops::add(xin2, ops::mul(ml, g2));
    m_pooled = pool_mask(m_live, drf_.stride());
    bd.rf = loss_rf_generator(drf_.forward(y_live), ops::constant(m_pooled));
    y_live_val = y_live.value().clone();
  } else {
    bd.rf = scalar(0.0f);
  }

  auto total = total_inpainter(bd, cfg_.weights);
  opt_gi_.step(ops::grad(total, gi_.store().trainable_params()));

  if (!warmup) {
    // Discriminator sees the pre-update composite; per-location targets come
    // from the pooled mask.
    auto d_map = drf_.forward(ops::constant(y_live_val));
    auto d_loss = loss_local_lsgan_disc(d_map, ops::constant(m_pooled));
    opt_drf_.step(ops::grad(d_loss, drf_.store().trainable_params()));
    rec.disc = d_loss.value()[0];
  }

  rec.total = total.value()[0];
  rec.rf = bd.rf.value()[0];
  rec.recon_l1 = bd.recon_l1.value()[0];
  rec.recon_perc = bd.recon_perc.value()[0];
  rec.tv = bd.tv.value()[0];
  rec.style = bd.style.value()[0];
  check_finite(rec);
  ++step_;
  return rec;
}

TrainResult train_editor(const std::vector<TrainSample>& data, const NetConfig& net,
                         const TrainConfig& cfg, const Checkpoint& classifier_ck,
                         const std::string& out_dir, const std::string& run_id,
                         const std::string& config_echo) {
  if (data.empty()) throw std::invalid_argument("editor training needs a nonempty dataset");
  EditorTrainer trainer(net, cfg, classifier_ck);
  fs::create_directories(out_dir);

  const auto epoch_dir = [&](int e) {
    return fs::path(out_dir) / ("ckpt-epoch-" + std::to_string(e));
  };
  const auto epoch_complete = [&](int e) {
    for (const char* f :
         {"mask_gen.ckpt", "inpainter.ckpt", "disc_rf.ckpt", "prior_critic.ckpt", "optim.ckpt"})
      if (!fs::exists(epoch_dir(e) / f)) return false;
    return true;
  };
  int start_epoch = 0;
  while (epoch_complete(start_epoch)) ++start_epoch;
  if (start_epoch > 0) {
    const fs::path d = epoch_dir(start_epoch - 1);
    restore_store(load_checkpoint(d / "mask_gen.ckpt"), trainer.mask_gen().store(),
                  "mask generator");
    restore_store(load_checkpoint(d / "inpainter.ckpt"), trainer.inpainter().store(),
                  "in-painter");
    restore_store(load_checkpoint(d / "disc_rf.ckpt"), trainer.disc_rf().store(),
                  "local discriminator");
    restore_store(load_checkpoint(d / "prior_critic.ckpt"), trainer.prior_critic().store(),
                  "prior critic");
    trainer.restore_optim(load_checkpoint(d / "optim.ckpt"));
    trainer.rng() = Rng(cfg.seed + 0x9e3779b97f4a7c15ull * static_cast<uint64_t>(start_epoch));
  }

  TrainResult res;
  res.start_epoch = start_epoch;
  res.log_path = (fs::path(out_dir) / "train-log.jsonl").string();
  std::ofstream log(res.log_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open training log '" + res.log_path + "'");

  {
    json meta;
    meta["run_id"] = run_id;
    meta["classifier_run_id"] = classifier_ck.run_id;
    meta["build"] = kBuildId;
    meta["seed"] = cfg.seed;
    meta["config"] = config_echo;
    std::ofstream mf(fs::path(out_dir) / "training-meta.json", std::ios::trunc);
    if (!mf) throw std::runtime_error("cannot write training metadata in '" + out_dir + "'");
    mf << meta.dump(2) << "\n";
  }

  const uint64_t clf_hash0 = hash_state(trainer.classifier().store());
  std::vector<int> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  const int total_epochs = cfg.warmup_epochs + cfg.epochs;
  for (int epoch = start_epoch; epoch < total_epochs; ++epoch) {
    const bool warmup = epoch < cfg.warmup_epochs;
    bool mask_phase = false;
    if (!warmup) {
      const int slot = (epoch - cfg.warmup_epochs) / cfg.alternation_period;
      mask_phase = (slot % 2 == 0) == cfg.mask_gen_first;
    }
    const uint64_t gm_before = hash_state(trainer.mask_gen().store());
    const uint64_t gi_before = hash_state(trainer.inpainter().store());
    const uint64_t dm_before = hash_state(trainer.prior_critic().store());
    const uint64_t drf_before = hash_state(trainer.disc_rf().store());

    shuffle_indices(order, trainer.rng());
    double total_sum = 0.0;
    int64_t violations = 0;
    int steps = 0;
    for (auto& batch : make_batches(data, order, cfg.batch_size)) {
      StepRecord rec = warmup ? trainer.step_inpainter(batch, true)
                              : (mask_phase ? trainer.step_mask_gen(batch)
                                            : trainer.step_inpainter(batch, false));
      rec.epoch = epoch;
      total_sum += rec.total;
      violations += rec.violations;
      ++steps;
      log << record_json(rec).dump() << "\n";
      res.steps.push_back(std::move(rec));
    }

    EpochRecord er;
    er.epoch = epoch;
    er.phase = warmup ? "warmup" : (mask_phase ? "mask-gen" : "inpaint");
    er.mean_total = total_sum / std::max(steps, 1);
    er.hash_classifier = hash_state(trainer.classifier().store());
    er.hash_mask_gen = hash_state(trainer.mask_gen().store());
    er.hash_inpainter = hash_state(trainer.inpainter().store());
    er.hash_disc_rf = hash_state(trainer.disc_rf().store());
    er.hash_prior_critic = hash_state(trainer.prior_critic().store());
    er.buffer_size = trainer.buffer().size();
    er.violations = violations;

    if (er.hash_classifier != clf_hash0)
      throw std::logic_error("phase isolation violated: classifier changed during epoch " +
                             std::to_string(epoch));
    if (!warmup && mask_phase && er.hash_inpainter != gi_before)
      throw std::logic_error("phase isolation violated: in-painter changed in a mask-gen epoch");
    if ((warmup || !mask_phase) &&
        (er.hash_mask_gen != gm_before || er.hash_prior_critic != dm_before))
      throw std::logic_error("phase isolation violated: mask generator side changed in an "
                             "in-painter epoch");
    if (warmup && er.hash_disc_rf != drf_before)
      throw std::logic_error("phase isolation violated: local discriminator changed in warmup");

    log << record_json(er).dump() << "\n";
    res.epochs.push_back(er);

    const fs::path ck_dir = epoch_dir(epoch);
    fs::create_directories(ck_dir);
    const auto names = classifier_ck.class_names;
    const int64_t step = trainer.steps_taken();
    const auto stamped = [&](Checkpoint ck) {
      ck.build_id = kBuildId;
      ck.stats = net.stats;
      return ck;
    };
    save_checkpoint(
        stamped(snapshot_store(trainer.mask_gen().store(), step, run_id, config_echo, names)),
        ck_dir / "mask_gen.ckpt");
    save_checkpoint(
        stamped(snapshot_store(trainer.inpainter().store(), step, run_id, config_echo, names)),
        ck_dir / "inpainter.ckpt");
    save_checkpoint(
        stamped(snapshot_store(trainer.disc_rf().store(), step, run_id, config_echo, names)),
        ck_dir / "disc_rf.ckpt");
    save_checkpoint(
        stamped(snapshot_store(trainer.prior_critic().store(), step, run_id, config_echo, names)),
        ck_dir / "prior_critic.ckpt");
    save_checkpoint(stamped(trainer.snapshot_optim(run_id, config_echo, names)),
                    ck_dir / "optim.ckpt");
    res.checkpoint_dirs.push_back(ck_dir.string());
  }
  return res;
}

}  // namespace unmask
