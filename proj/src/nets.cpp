#include "unmask/nets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace unmask {

namespace a = ad;

// ---------------------------------------------------------------------------
// parameter store

VarF ParamStore::param(const std::string& name, TensorF init, bool trainable) {
  for (const auto& e : params_)
    if (e.name == name) throw std::logic_error("duplicate parameter name " + name);
  Entry e{name, a::leaf(std::move(init), trainable), trainable};
  params_.push_back(e);
  return params_.back().var;
}

TensorF& ParamStore::buffer(const std::string& name, TensorF init) {
  for (const auto& b : buffers_)
    if (b.first == name) throw std::logic_error("duplicate buffer name " + name);
  buffers_.emplace_back(name, std::make_shared<TensorF>(std::move(init)));
  return *buffers_.back().second;
}

int64_t ParamStore::param_count() const {
  int64_t n = 0;
  for (const auto& e : params_) n += e.var.numel();
  return n;
}

void ParamStore::set_trainable(bool on) {
  for (auto& e : params_)
    if (e.trainable) e.var.node().requires_grad = on;
}

std::vector<VarF> ParamStore::trainable_params() const {
  std::vector<VarF> out;
  for (const auto& e : params_)
    if (e.trainable) out.push_back(e.var);
  return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& e : params_)
    if (e.trainable) out.push_back(e.name);
  return out;
}

std::vector<std::pair<std::string, TensorF>> ParamStore::state() const {
  std::vector<std::pair<std::string, TensorF>> out;
  for (const auto& e : params_) out.emplace_back(e.name, e.var.value());
  for (const auto& b : buffers_) out.emplace_back(b.first, *b.second);
  return out;
}

void ParamStore::load_state(const std::map<std::string, TensorF>& st, const std::string& who) {
  size_t used = 0;
  auto copy_into = [&](const std::string& name, TensorF& dst) {
    auto it = st.find(name);
    if (it == st.end())
      throw std::runtime_error(who + ": state is missing tensor " + name);
    if (it->second.shape() != dst.shape())
      throw std::runtime_error(who + ": tensor " + name + " has shape " +
                               shape_str(it->second.shape()) + ", expected " +
                               shape_str(dst.shape()));
    std::copy(it->second.data(), it->second.data() + it->second.numel(), dst.data());
    ++used;
  };
  for (auto& e : params_) copy_into(e.name, e.var.value());
  for (auto& b : buffers_) copy_into(b.first, *b.second);
  if (used != st.size())
    for (const auto& [name, t] : st) {
      bool known = false;
      for (const auto& e : params_) known = known || e.name == name;
      for (const auto& b : buffers_) known = known || b.first == name;
      if (!known) throw std::runtime_error(who + ": state has unknown tensor " + name);
    }
}

void validate_network_spec(const NetworkSpec& s) {
  if (s.layers.empty()) throw std::invalid_argument(s.name + ": empty layer list");
  int64_t total = 0;
  int prev = s.layers.front().in_ch;
  for (const auto& l : s.layers) {
    if (l.in_ch != prev)
      throw std::runtime_error(s.name + ": layer '" + l.kind + "' consumes " +
                               std::to_string(l.in_ch) + " channels but gets " +
                               std::to_string(prev));
    if (l.params < 0) throw std::runtime_error(s.name + ": negative parameter count");
    total += l.params;
    prev = l.out_ch;
  }
  if (total != s.param_count)
    throw std::runtime_error(s.name + ": layer parameter sum " + std::to_string(total) +
                             " != declared count " + std::to_string(s.param_count));
}

// ---------------------------------------------------------------------------
// layer building blocks

namespace {

TensorF conv_weight_init(Rng& rng, int out, int in, int k) {
  TensorF w({out, in, k, k});
  const double sd = std::sqrt(2.0 / (static_cast<double>(in) * k * k));
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.normal(0.0, sd));
  return w;
}

struct Conv {
  VarF w, b;
  int k = 3, stride = 1, dil = 1, in_ch = 0, out_ch = 0;

  VarF operator()(const VarF& x) const {
    const a::ConvGeom g = dil > 1 ? a::dilated_same_geom(k, dil) : a::same_geom(k, stride);
    return a::conv2d_bias(x, w, b, g, dil);
  }
  VarF with_stride(const VarF& x, int s, bool frozen = false) const {
    if (frozen) return a::conv2d_bias(x, a::detach(w), a::detach(b), a::same_geom(k, s), 1);
    return a::conv2d_bias(x, w, b, a::same_geom(k, s), 1);
  }
  LayerSpec entry() const {
    return {"conv" + std::to_string(k) + "x" + std::to_string(k) + "/s" + std::to_string(stride) +
                (dil > 1 ? "/d" + std::to_string(dil) : ""),
            in_ch, out_ch, k, stride, dil,
            static_cast<int64_t>(in_ch) * k * k * out_ch + out_ch};
  }
};

Conv make_conv(ParamStore& st, Rng& rng, const std::string& name, int in, int out, int k,
               int stride, int dil, bool trainable) {
  Conv c;
  c.k = k;
  c.stride = stride;
  c.dil = dil;
  c.in_ch = in;
  c.out_ch = out;
  c.w = st.param(name + ".w", conv_weight_init(rng, out, in, k), trainable);
  c.b = st.param(name + ".b", TensorF::zeros({out}), trainable);
  return c;
}

struct InstanceNorm {
  VarF gamma, beta;
  int ch = 0;

  VarF operator()(const VarF& x) const {
    VarF mu = a::reduce_mean(x, {2, 3}, true);
    VarF xc = a::sub(x, mu);
    VarF var = a::reduce_mean(a::square(xc), {2, 3}, true);
    VarF xn = a::div(xc, a::sqrt_op(a::add(var, a::constant<float>(1e-5f))));
    return a::add(a::mul(xn, gamma), beta);
  }
  LayerSpec entry() const { return {"instance-norm", ch, ch, 0, 1, 1, 2ll * ch}; }
};

InstanceNorm make_in(ParamStore& st, const std::string& name, int ch, bool trainable) {
  InstanceNorm n;
  n.ch = ch;
  n.gamma = st.param(name + ".gamma", TensorF::full({1, ch, 1, 1}, 1.0f), trainable);
  n.beta = st.param(name + ".beta", TensorF::zeros({1, ch, 1, 1}), trainable);
  return n;
}

struct BatchNorm {
  VarF gamma, beta;
  TensorF* run_mean = nullptr;
  TensorF* run_var = nullptr;
  int ch = 0;
  float momentum = 0.1f;
  float eps = 1e-5f;

  VarF operator()(const VarF& x, bool training, bool frozen = false) const {
    const VarF g = frozen ? a::detach(gamma) : gamma;
    const VarF be = frozen ? a::detach(beta) : beta;
    if (training) {
      VarF mu = a::reduce_mean(x, {0, 2, 3}, true);
      VarF xc = a::sub(x, mu);
      VarF var = a::reduce_mean(a::square(xc), {0, 2, 3}, true);
      const int64_t n = x.numel() / ch;
      const double unbias = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
      for (int64_t c = 0; c < ch; ++c) {
        (*run_mean)[c] = (1.0f - momentum) * (*run_mean)[c] + momentum * mu.value()[c];
        (*run_var)[c] = (1.0f - momentum) * (*run_var)[c] +
                        momentum * static_cast<float>(var.value()[c] * unbias);
      }
      VarF xn = a::div(xc, a::sqrt_op(a::add(var, a::constant<float>(eps))));
      return a::add(a::mul(xn, g), be);
    }
    TensorF m({1, ch, 1, 1}), s({1, ch, 1, 1});
    for (int64_t c = 0; c < ch; ++c) {
      m[c] = (*run_mean)[c];
      s[c] = std::sqrt((*run_var)[c] + eps);
    }
    VarF xn = a::div(a::sub(x, a::constant(std::move(m))), a::constant(std::move(s)));
    return a::add(a::mul(xn, g), be);
  }
  LayerSpec entry() const { return {"batch-norm", ch, ch, 0, 1, 1, 2ll * ch}; }
};

BatchNorm make_bn(ParamStore& st, const std::string& name, int ch, bool trainable) {
  BatchNorm n;
  n.ch = ch;
  n.gamma = st.param(name + ".gamma", TensorF::full({1, ch, 1, 1}, 1.0f), trainable);
  n.beta = st.param(name + ".beta", TensorF::zeros({1, ch, 1, 1}), trainable);
  n.run_mean = &st.buffer(name + ".running_mean", TensorF::zeros({ch}));
  n.run_var = &st.buffer(name + ".running_var", TensorF::full({ch}, 1.0f));
  return n;
}

struct ResBlock {
  Conv c1, c2;
  InstanceNorm n1, n2;

  VarF operator()(const VarF& x) const {
    VarF h = a::leaky_relu(n1(c1(x)), 0.1f);
    h = a::leaky_relu(n2(c2(h)), 0.1f);
    return a::add(x, h);
  }
  LayerSpec entry() const {
    LayerSpec e = c1.entry();
    return {"residual" + (c1.dil > 1 ? "/d" + std::to_string(c1.dil) : ""),
            c1.in_ch, c1.out_ch, 3, 1, c1.dil,
            2 * e.params + 2 * n1.entry().params};
  }
};

ResBlock make_res(ParamStore& st, Rng& rng, const std::string& name, int ch, int dil,
                  bool trainable) {
  ResBlock r;
  r.c1 = make_conv(st, rng, name + ".c1", ch, ch, 3, 1, dil, trainable);
  r.n1 = make_in(st, name + ".in1", ch, trainable);
  r.c2 = make_conv(st, rng, name + ".c2", ch, ch, 3, 1, dil, trainable);
  r.n2 = make_in(st, name + ".in2", ch, trainable);
  return r;
}

struct LinearLayer {
  VarF w, b;
  int in_ch = 0, out_ch = 0;
  VarF operator()(const VarF& x) const { return a::linear(x, w, b); }
  LayerSpec entry() const {
    return {"linear", in_ch, out_ch, 0, 1, 1, static_cast<int64_t>(in_ch + 1) * out_ch};
  }
};

LinearLayer make_linear(ParamStore& st, Rng& rng, const std::string& name, int in, int out,
                        bool trainable) {
  LinearLayer l;
  l.in_ch = in;
  l.out_ch = out;
  TensorF w({out, in});
  const double sd = std::sqrt(1.0 / in);
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.normal(0.0, sd));
  l.w = st.param(name + ".w", std::move(w), trainable);
  l.b = st.param(name + ".b", TensorF::zeros({out}), trainable);
  return l;
}

// Backbone: four conv stages (k4, nominally stride 2) with batch-norm and
// leaky-relu. The mask generator reruns the last two stages at stride 1 so
// its feature map keeps stride 4, the analog of dropping late pooling from a
// deeper pretrained backbone.
struct Trunk {
  int width = 0;
  std::array<Conv, 4> convs;
  std::array<BatchNorm, 4> bns;

  int stage_ch(int i) const { return width << i; }

  std::vector<VarF> stages(const VarF& x, const std::array<int, 4>& strides, bool training,
                           bool frozen = false) const {
    std::vector<VarF> outs;
    VarF h = x;
    for (int i = 0; i < 4; ++i) {
      h = convs[static_cast<size_t>(i)].with_stride(h, strides[static_cast<size_t>(i)], frozen);
      h = bns[static_cast<size_t>(i)](h, training, frozen);
      h = a::leaky_relu(h, 0.1f);
      outs.push_back(h);
    }
    return outs;
  }

  void entries(std::vector<LayerSpec>& ls) const {
    for (int i = 0; i < 4; ++i) {
      ls.push_back(convs[static_cast<size_t>(i)].entry());
      ls.push_back(bns[static_cast<size_t>(i)].entry());
      const int c = stage_ch(i);
      ls.push_back({"leaky-relu", c, c, 0, 1, 1, 0});
    }
  }
};

Trunk make_trunk(ParamStore& st, Rng& rng, int width, bool trainable) {
  Trunk t;
  t.width = width;
  int in = 3;
  for (int i = 0; i < 4; ++i) {
    const int out = width << i;
    const std::string name = "trunk.s" + std::to_string(i);
    t.convs[static_cast<size_t>(i)] = make_conv(st, rng, name + ".conv", in, out, 4, 2, 1, trainable);
    t.bns[static_cast<size_t>(i)] = make_bn(st, name + ".bn", out, trainable);
    in = out;
  }
  return t;
}

void check_image_batch(const VarF& x, const char* who) {
  if (x.shape().size() != 4 || x.shape()[1] != 3)
    throw std::invalid_argument(std::string(who) + ": expected {N,3,H,W} input, got " +
                                shape_str(x.shape()));
}

VarF onehot_planes(const VarF& onehot, int64_t n, int64_t k, int64_t h, int64_t w) {
  return a::broadcast_to(a::reshape(onehot, {n, k, 1, 1}), {n, k, h, w});
}

}  // anonymous namespace

void validate_config(const NetConfig& cfg) {
  if (cfg.image_size < 16 || cfg.image_size % 16 != 0)
    throw std::invalid_argument("NetConfig: image_size must be a positive multiple of 16");
  if (cfg.num_classes < 2) throw std::invalid_argument("NetConfig: num_classes must be >= 2");
  if (cfg.trunk_width < 4 || cfg.gm_head_width < 8 || cfg.inpaint_width < 4 ||
      cfg.disc_rf_width < 4 || cfg.critic_width < 4)
    throw std::invalid_argument("NetConfig: widths too small");
}

VarF onehot_rows(const std::vector<int>& classes, int k) {
  TensorF oh = TensorF::zeros({static_cast<int64_t>(classes.size()), k});
  for (size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] < 0 || classes[i] >= k)
      throw std::invalid_argument("class index " + std::to_string(classes[i]) +
                                  " outside [0," + std::to_string(k) + ")");
    oh[static_cast<int64_t>(i) * k + classes[i]] = 1.0f;
  }
  return a::constant(std::move(oh));
}

// ---------------------------------------------------------------------------
// object classifier

struct ObjectClassifier::Impl {
  NetConfig cfg;
  ParamStore store;
  Trunk trunk;
  Conv h1, h2;
  BatchNorm b1, b2;
  LinearLayer fc;
};

ObjectClassifier::ObjectClassifier(const NetConfig& cfg, uint64_t seed) : impl_(new Impl) {
  validate_config(cfg);
  impl_->cfg = cfg;
  Rng rng(seed);
  impl_->trunk = make_trunk(impl_->store, rng, cfg.trunk_width, true);
  const int tc = cfg.trunk_width * 8;
  impl_->h1 = make_conv(impl_->store, rng, "head.c0", tc, tc, 3, 1, 1, true);
  impl_->b1 = make_bn(impl_->store, "head.bn0", tc, true);
  impl_->h2 = make_conv(impl_->store, rng, "head.c1", tc, tc, 3, 1, 1, true);
  impl_->b2 = make_bn(impl_->store, "head.bn1", tc, true);
  impl_->fc = make_linear(impl_->store, rng, "head.fc", tc, cfg.num_classes, true);
}

ObjectClassifier::~ObjectClassifier() = default;
ObjectClassifier::ObjectClassifier(ObjectClassifier&&) noexcept = default;
ObjectClassifier& ObjectClassifier::operator=(ObjectClassifier&&) noexcept = default;

VarF ObjectClassifier::forward(const VarF& x, bool training) {
  check_image_batch(x, "classifier");
  VarF h = impl_->trunk.stages(x, {2, 2, 2, 2}, training).back();
  h = a::leaky_relu(impl_->b1(impl_->h1(h), training), 0.1f);
  h = a::leaky_relu(impl_->b2(impl_->h2(h), training), 0.1f);
  h = a::reduce_mean(h, {2, 3}, false);
  return a::sigmoid(impl_->fc(h));
}

std::vector<VarF> ObjectClassifier::features(const VarF& x, const std::vector<int>& depths) const {
  check_image_batch(x, "feature extractor");
  for (int d : depths)
    if (d < 1 || d > 4)
      throw std::invalid_argument("feature depth " + std::to_string(d) + " outside [1,4]");
  auto st = impl_->trunk.stages(x, {2, 2, 2, 2}, false, /*frozen=*/true);
  std::vector<VarF> out;
  for (int d : depths) out.push_back(st[static_cast<size_t>(d - 1)]);
  return out;
}

NetworkSpec ObjectClassifier::spec() const {
  const auto& cfg = impl_->cfg;
  const int tc = cfg.trunk_width * 8;
  NetworkSpec s;
  s.name = "object_classifier";
  s.input_shape = {3, cfg.image_size, cfg.image_size};
  s.output_shape = {cfg.num_classes};
  impl_->trunk.entries(s.layers);
  s.layers.push_back(impl_->h1.entry());
  s.layers.push_back(impl_->b1.entry());
  s.layers.push_back({"leaky-relu", tc, tc, 0, 1, 1, 0});
  s.layers.push_back(impl_->h2.entry());
  s.layers.push_back(impl_->b2.entry());
  s.layers.push_back({"leaky-relu", tc, tc, 0, 1, 1, 0});
  s.layers.push_back({"global-average-pool", tc, tc, 0, 1, 1, 0});
  s.layers.push_back(impl_->fc.entry());
  s.layers.push_back({"sigmoid", cfg.num_classes, cfg.num_classes, 0, 1, 1, 0});
  for (const auto& l : s.layers) s.param_count += l.params;
  return s;
}

ParamStore& ObjectClassifier::store() { return impl_->store; }
const ParamStore& ObjectClassifier::store() const { return impl_->store; }
const NetConfig& ObjectClassifier::config() const { return impl_->cfg; }

// ---------------------------------------------------------------------------
// mask generator

struct MaskGenerator::Impl {
  NetConfig cfg;
  ParamStore store;
  Trunk trunk;  // frozen backbone
  Conv c0, c1, c2, c_out;
  ResBlock r0, r1, r2;
  int h1 = 0, h2 = 0, h3 = 0;
};

MaskGenerator::MaskGenerator(const NetConfig& cfg, uint64_t seed) : impl_(new Impl) {
  validate_config(cfg);
  impl_->cfg = cfg;
  Rng rng(seed);
  impl_->trunk = make_trunk(impl_->store, rng, cfg.trunk_width, false);
  const int k = cfg.num_classes;
  const int f = cfg.trunk_width * 8;
  impl_->h1 = cfg.gm_head_width;
  impl_->h2 = std::max(8, cfg.gm_head_width / 2);
  impl_->h3 = std::max(8, cfg.gm_head_width / 4);
  auto& st = impl_->store;
  impl_->c0 = make_conv(st, rng, "head.c0", f + k, impl_->h1, 3, 1, 1, true);
  impl_->r0 = make_res(st, rng, "head.r0", impl_->h1, 1, true);
  impl_->c1 = make_conv(st, rng, "head.c1", impl_->h1 + k, impl_->h2, 3, 1, 1, true);
  impl_->r1 = make_res(st, rng, "head.r1", impl_->h2, 1, true);
  impl_->c2 = make_conv(st, rng, "head.c2", impl_->h2 + k, impl_->h3, 3, 1, 1, true);
  impl_->r2 = make_res(st, rng, "head.r2", impl_->h3, 1, true);
  impl_->c_out = make_conv(st, rng, "head.c3", impl_->h3 + k, k + 1, 7, 1, 1, true);
}

MaskGenerator::~MaskGenerator() = default;
MaskGenerator::MaskGenerator(MaskGenerator&&) noexcept = default;
MaskGenerator& MaskGenerator::operator=(MaskGenerator&&) noexcept = default;

void MaskGenerator::adopt_trunk(const ObjectClassifier& clf) {
  std::map<std::string, TensorF> src;
  for (const auto& [name, t] : clf.store().state()) src.emplace(name, t);
  for (auto& [name, t] : impl_->store.state()) {
    if (name.rfind("trunk.", 0) != 0) continue;
    auto it = src.find(name);
    if (it == src.end())
      throw std::runtime_error("adopt_trunk: classifier state lacks " + name);
    if (it->second.shape() != t.shape())
      throw std::runtime_error("adopt_trunk: " + name + " is " + shape_str(it->second.shape()) +
                               " in the classifier but " + shape_str(t.shape()) +
                               " here; trunk widths must match");
    std::copy(it->second.data(), it->second.data() + it->second.numel(), t.data());
  }
}

VarF MaskGenerator::forward_onehot(const VarF& x, const VarF& onehot) {
  check_image_batch(x, "mask generator");
  const int64_t n = x.shape()[0];
  const int64_t k = impl_->cfg.num_classes;
  if (onehot.shape() != Shape{n, k})
    throw std::invalid_argument("mask generator: one-hot shape " + shape_str(onehot.shape()) +
                                ", expected " + shape_str({n, k}));
  VarF f = impl_->trunk.stages(x, {2, 2, 1, 1}, false).back();
  auto with_onehot = [&](const VarF& h) {
    VarF planes = onehot_planes(onehot, n, k, h.shape()[2], h.shape()[3]);
    return a::concat(std::vector<VarF>{h, planes}, 1);
  };
  VarF h = a::leaky_relu(impl_->c0(with_onehot(f)), 0.1f);
  h = impl_->r0(h);
  h = a::leaky_relu(impl_->c1(with_onehot(h)), 0.1f);
  h = impl_->r1(h);
  h = a::leaky_relu(impl_->c2(with_onehot(h)), 0.1f);
  h = impl_->r2(h);
  VarF maps = a::sigmoid(impl_->c_out(with_onehot(h)));  // {N,K+1,S/4,S/4}
  // per-sample channel selection = inner product with the extended one-hot
  VarF ext = a::concat(std::vector<VarF>{onehot, a::constant(TensorF::zeros({n, 1}))}, 1);
  VarF sel = a::mul(maps, a::broadcast_to(a::reshape(ext, {n, k + 1, 1, 1}), maps.shape()));
  VarF m = a::reduce_sum(sel, {1}, true);
  return a::upsample_bilinear2x(a::upsample_bilinear2x(m));
}

VarF MaskGenerator::forward(const VarF& x, const std::vector<int>& classes) {
  if (static_cast<int64_t>(classes.size()) != x.shape()[0])
    throw std::invalid_argument("mask generator: class count != batch size");
  return forward_onehot(x, onehot_rows(classes, impl_->cfg.num_classes));
}

NetworkSpec MaskGenerator::spec() const {
  const auto& cfg = impl_->cfg;
  const int k = cfg.num_classes, f = cfg.trunk_width * 8;
  NetworkSpec s;
  s.name = "mask_generator";
  s.input_shape = {3, cfg.image_size, cfg.image_size};
  s.output_shape = {1, cfg.image_size, cfg.image_size};
  impl_->trunk.entries(s.layers);
  auto cat = [&](int c) { s.layers.push_back({"concat-onehot", c, c + k, 0, 1, 1, 0}); };
  auto lrelu = [&](int c) { s.layers.push_back({"leaky-relu", c, c, 0, 1, 1, 0}); };
  cat(f);
  s.layers.push_back(impl_->c0.entry());
  lrelu(impl_->h1);
  s.layers.push_back(impl_->r0.entry());
  cat(impl_->h1);
  s.layers.push_back(impl_->c1.entry());
  lrelu(impl_->h2);
  s.layers.push_back(impl_->r1.entry());
  cat(impl_->h2);
  s.layers.push_back(impl_->c2.entry());
  lrelu(impl_->h3);
  s.layers.push_back(impl_->r2.entry());
  cat(impl_->h3);
  s.layers.push_back(impl_->c_out.entry());
  s.layers.push_back({"sigmoid", k + 1, k + 1, 0, 1, 1, 0});
  s.layers.push_back({"select-class", k + 1, 1, 0, 1, 1, 0});
  s.layers.push_back({"bilinear-upsample", 1, 1, 0, 1, 1, 0});
  s.layers.push_back({"bilinear-upsample", 1, 1, 0, 1, 1, 0});
  for (const auto& l : s.layers) s.param_count += l.params;
  return s;
}

ParamStore& MaskGenerator::store() { return impl_->store; }
const ParamStore& MaskGenerator::store() const { return impl_->store; }
const NetConfig& MaskGenerator::config() const { return impl_->cfg; }

// ---------------------------------------------------------------------------
// in-painter

struct Inpainter::Impl {
  NetConfig cfg;
  ParamStore store;
  Conv d0, d1, d2, d3;
  InstanceNorm di0, di1, di2, di3;
  Conv adapter;
  std::array<ResBlock, 6> res;
  Conv u0, u1, u2, c_out;
  InstanceNorm ui0, ui1, ui2;
  TensorF center, half;  // per-channel affine map from (-1,1) to normalized range
};

Inpainter::Inpainter(const NetConfig& cfg, uint64_t seed) : impl_(new Impl) {
  validate_config(cfg);
  impl_->cfg = cfg;
  Rng rng(seed);
  auto& st = impl_->store;
  const int b = cfg.inpaint_width;
  impl_->d0 = make_conv(st, rng, "down.c0", 4, b, 4, 1, 1, true);
  impl_->di0 = make_in(st, "down.in0", b, true);
  impl_->d1 = make_conv(st, rng, "down.c1", b, 2 * b, 4, 2, 1, true);
  impl_->di1 = make_in(st, "down.in1", 2 * b, true);
  impl_->d2 = make_conv(st, rng, "down.c2", 2 * b, 4 * b, 4, 2, 1, true);
  impl_->di2 = make_in(st, "down.in2", 4 * b, true);
  impl_->d3 = make_conv(st, rng, "down.c3", 4 * b, 8 * b, 4, 2, 1, true);
  impl_->di3 = make_in(st, "down.in3", 8 * b, true);
  impl_->adapter = make_conv(st, rng, "bottleneck.adapter", 8 * b, 4 * b, 1, 1, 1, true);
  const std::array<int, 6> dils{1, 2, 4, 8, 1, 1};
  for (int i = 0; i < 6; ++i)
    impl_->res[static_cast<size_t>(i)] =
        make_res(st, rng, "bottleneck.r" + std::to_string(i), 4 * b, dils[static_cast<size_t>(i)], true);
  impl_->u0 = make_conv(st, rng, "up.c0", 4 * b, 4 * b, 3, 1, 1, true);
  impl_->ui0 = make_in(st, "up.in0", 4 * b, true);
  impl_->u1 = make_conv(st, rng, "up.c1", 4 * b, 2 * b, 3, 1, 1, true);
  impl_->ui1 = make_in(st, "up.in1", 2 * b, true);
  impl_->u2 = make_conv(st, rng, "up.c2", 2 * b, b, 3, 1, 1, true);
  impl_->ui2 = make_in(st, "up.in2", b, true);
  impl_->c_out = make_conv(st, rng, "up.c3", b, 3, 7, 1, 1, true);

  impl_->center = TensorF({1, 3, 1, 1});
  impl_->half = TensorF({1, 3, 1, 1});
  for (int c = 0; c < 3; ++c) {
    const float lo = (0.0f - cfg.stats.mean[static_cast<size_t>(c)]) / cfg.stats.stddev[static_cast<size_t>(c)];
    const float hi = (1.0f - cfg.stats.mean[static_cast<size_t>(c)]) / cfg.stats.stddev[static_cast<size_t>(c)];
    impl_->center[c] = (hi + lo) / 2;
    impl_->half[c] = (hi - lo) / 2;
  }
}

Inpainter::~Inpainter() = default;
Inpainter::Inpainter(Inpainter&&) noexcept = default;
Inpainter& Inpainter::operator=(Inpainter&&) noexcept = default;

VarF Inpainter::forward(const VarF& x_masked, const VarF& m) {
  check_image_batch(x_masked, "in-painter");
  if (m.shape().size() != 4 || m.shape()[1] != 1 || m.shape()[0] != x_masked.shape()[0] ||
      m.shape()[2] != x_masked.shape()[2] || m.shape()[3] != x_masked.shape()[3])
    throw std::invalid_argument("in-painter: mask " + shape_str(m.shape()) +
                                " does not pair with image " + shape_str(x_masked.shape()));
  if (x_masked.shape()[2] % 8 != 0 || x_masked.shape()[3] % 8 != 0)
    throw std::invalid_argument("in-painter: spatial dims must be divisible by 8, got " +
                                shape_str(x_masked.shape()));
  auto& i = *impl_;
  VarF h = a::concat(std::vector<VarF>{x_masked, m}, 1);
  h = a::leaky_relu(i.di0(i.d0(h)), 0.1f);
  h = a::leaky_relu(i.di1(i.d1(h)), 0.1f);
  h = a::leaky_relu(i.di2(i.d2(h)), 0.1f);
  h = a::leaky_relu(i.di3(i.d3(h)), 0.1f);
  h = i.adapter(h);
  for (const auto& r : i.res) h = r(h);
  h = a::upsample_bilinear2x(h);
  h = a::leaky_relu(i.ui0(i.u0(h)), 0.1f);
  h = a::upsample_bilinear2x(h);
  h = a::leaky_relu(i.ui1(i.u1(h)), 0.1f);
  h = a::upsample_bilinear2x(h);
  h = a::leaky_relu(i.ui2(i.u2(h)), 0.1f);
  VarF t = a::tanh_op(i.c_out(h));
  return a::add(a::mul(t, a::constant(i.half)), a::constant(i.center));
}

NetworkSpec Inpainter::spec() const {
  const auto& cfg = impl_->cfg;
  const int b = cfg.inpaint_width;
  NetworkSpec s;
  s.name = "inpainter";
  s.input_shape = {4, cfg.image_size, cfg.image_size};
  s.output_shape = {3, cfg.image_size, cfg.image_size};
  auto lrelu = [&](int c) { s.layers.push_back({"leaky-relu", c, c, 0, 1, 1, 0}); };
  auto up = [&](int c) { s.layers.push_back({"bilinear-upsample", c, c, 0, 1, 1, 0}); };
  s.layers.push_back(impl_->d0.entry());
  s.layers.push_back(impl_->di0.entry());
  lrelu(b);
  s.layers.push_back(impl_->d1.entry());
  s.layers.push_back(impl_->di1.entry());
  lrelu(2 * b);
  s.layers.push_back(impl_->d2.entry());
  s.layers.push_back(impl_->di2.entry());
  lrelu(4 * b);
  s.layers.push_back(impl_->d3.entry());
  s.layers.push_back(impl_->di3.entry());
  lrelu(8 * b);
  s.layers.push_back(impl_->adapter.entry());
  for (const auto& r : impl_->res) s.layers.push_back(r.entry());
  up(4 * b);
  s.layers.push_back(impl_->u0.entry());
  s.layers.push_back(impl_->ui0.entry());
  lrelu(4 * b);
  up(4 * b);
  s.layers.push_back(impl_->u1.entry());
  s.layers.push_back(impl_->ui1.entry());
  lrelu(2 * b);
  up(2 * b);
  s.layers.push_back(impl_->u2.entry());
  s.layers.push_back(impl_->ui2.entry());
  lrelu(b);
  s.layers.push_back(impl_->c_out.entry());
  s.layers.push_back({"tanh", 3, 3, 0, 1, 1, 0});
  for (const auto& l : s.layers) s.param_count += l.params;
  return s;
}

ParamStore& Inpainter::store() { return impl_->store; }
const ParamStore& Inpainter::store() const { return impl_->store; }
const NetConfig& Inpainter::config() const { return impl_->cfg; }

// ---------------------------------------------------------------------------
// local real/fake discriminator (stride-4 score map)

struct LocalDiscriminator::Impl {
  NetConfig cfg;
  ParamStore store;
  Conv c0, c1, c2, head;
  InstanceNorm n1, n2;
};

LocalDiscriminator::LocalDiscriminator(const NetConfig& cfg, uint64_t seed) : impl_(new Impl) {
  validate_config(cfg);
  impl_->cfg = cfg;
  Rng rng(seed);
  auto& st = impl_->store;
  const int w = cfg.disc_rf_width;
  impl_->c0 = make_conv(st, rng, "c0", 3, w, 4, 2, 1, true);
  impl_->c1 = make_conv(st, rng, "c1", w, 2 * w, 4, 2, 1, true);
  impl_->n1 = make_in(st, "in1", 2 * w, true);
  impl_->c2 = make_conv(st, rng, "c2", 2 * w, 4 * w, 3, 1, 1, true);
  impl_->n2 = make_in(st, "in2", 4 * w, true);
  impl_->head = make_conv(st, rng, "c3", 4 * w, 1, 1, 1, 1, true);
}

LocalDiscriminator::~LocalDiscriminator() = default;
LocalDiscriminator::LocalDiscriminator(LocalDiscriminator&&) noexcept = default;
LocalDiscriminator& LocalDiscriminator::operator=(LocalDiscriminator&&) noexcept = default;

VarF LocalDiscriminator::forward(const VarF& y) {
  check_image_batch(y, "local discriminator");
  VarF h = a::leaky_relu(impl_->c0(y), 0.1f);
  h = a::leaky_relu(impl_->n1(impl_->c1(h)), 0.1f);
  h = a::leaky_relu(impl_->n2(impl_->c2(h)), 0.1f);
  return impl_->head(h);
}

int LocalDiscriminator::stride() const { return 4; }

NetworkSpec LocalDiscriminator::spec() const {
  const auto& cfg = impl_->cfg;
  const int w = cfg.disc_rf_width;
  NetworkSpec s;
  s.name = "local_discriminator";
  s.input_shape = {3, cfg.image_size, cfg.image_size};
  s.output_shape = {1, cfg.image_size / 4, cfg.image_size / 4};
  auto lrelu = [&](int c) { s.layers.push_back({"leaky-relu", c, c, 0, 1, 1, 0}); };
  s.layers.push_back(impl_->c0.entry());
  lrelu(w);
  s.layers.push_back(impl_->c1.entry());
  s.layers.push_back(impl_->n1.entry());
  lrelu(2 * w);
  s.layers.push_back(impl_->c2.entry());
  s.layers.push_back(impl_->n2.entry());
  lrelu(4 * w);
  s.layers.push_back(impl_->head.entry());
  for (const auto& l : s.layers) s.param_count += l.params;
  return s;
}

ParamStore& LocalDiscriminator::store() { return impl_->store; }
const ParamStore& LocalDiscriminator::store() const { return impl_->store; }

// ---------------------------------------------------------------------------
// mask prior critic

struct PriorCritic::Impl {
  NetConfig cfg;
  ParamStore store;
  Conv c0, c1, c2, c3;
  LinearLayer fc;
};

PriorCritic::PriorCritic(const NetConfig& cfg, uint64_t seed) : impl_(new Impl) {
  validate_config(cfg);
  impl_->cfg = cfg;
  Rng rng(seed);
  auto& st = impl_->store;
  const int w = cfg.critic_width, k = cfg.num_classes;
  impl_->c0 = make_conv(st, rng, "c0", 1 + k, w, 4, 2, 1, true);
  impl_->c1 = make_conv(st, rng, "c1", w, 2 * w, 4, 2, 1, true);
  impl_->c2 = make_conv(st, rng, "c2", 2 * w, 4 * w, 4, 2, 1, true);
  impl_->c3 = make_conv(st, rng, "c3", 4 * w, 8 * w, 4, 2, 1, true);
  impl_->fc = make_linear(st, rng, "fc", 8 * w, 1, true);
}

PriorCritic::~PriorCritic() = default;
PriorCritic::PriorCritic(PriorCritic&&) noexcept = default;
PriorCritic& PriorCritic::operator=(PriorCritic&&) noexcept = default;

VarF PriorCritic::forward(const VarF& m, const VarF& onehot) {
  if (m.shape().size() != 4 || m.shape()[1] != 1)
    throw std::invalid_argument("prior critic: expected {N,1,H,W} mask, got " +
                                shape_str(m.shape()));
  const int64_t n = m.shape()[0], k = impl_->cfg.num_classes;
  if (onehot.shape() != Shape{n, k})
    throw std::invalid_argument("prior critic: one-hot shape " + shape_str(onehot.shape()) +
                                ", expected " + shape_str({n, k}));
  VarF planes = onehot_planes(onehot, n, k, m.shape()[2], m.shape()[3]);
  VarF h = a::concat(std::vector<VarF>{m, planes}, 1);
  h = a::leaky_relu(impl_->c0(h), 0.1f);
  h = a::leaky_relu(impl_->c1(h), 0.1f);
  h = a::leaky_relu(impl_->c2(h), 0.1f);
  h = a::leaky_relu(impl_->c3(h), 0.1f);
  h = a::reduce_mean(h, {2, 3}, false);
  return impl_->fc(h);
}

VarF PriorCritic::forward(const VarF& m, const std::vector<int>& classes) {
  if (static_cast<int64_t>(classes.size()) != m.shape()[0])
    throw std::invalid_argument("prior critic: class count != batch size");
  return forward(m, onehot_rows(classes, impl_->cfg.num_classes));
}

NetworkSpec PriorCritic::spec() const {
  const auto& cfg = impl_->cfg;
  const int w = cfg.critic_width, k = cfg.num_classes;
  NetworkSpec s;
  s.name = "prior_critic";
  s.input_shape = {1 + k, cfg.image_size, cfg.image_size};
  s.output_shape = {1};
  auto lrelu = [&](int c) { s.layers.push_back({"leaky-relu", c, c, 0, 1, 1, 0}); };
  s.layers.push_back(impl_->c0.entry());
  lrelu(w);
  s.layers.push_back(impl_->c1.entry());
  lrelu(2 * w);
  s.layers.push_back(impl_->c2.entry());
  lrelu(4 * w);
  s.layers.push_back(impl_->c3.entry());
  lrelu(8 * w);
  s.layers.push_back({"global-average-pool", 8 * w, 8 * w, 0, 1, 1, 0});
  s.layers.push_back(impl_->fc.entry());
  for (const auto& l : s.layers) s.param_count += l.params;
  return s;
}

ParamStore& PriorCritic::store() { return impl_->store; }
const ParamStore& PriorCritic::store() const { return impl_->store; }

// ---------------------------------------------------------------------------
// single-sample wrappers

TensorF image_to_batch(const Image& x) {
  TensorF out({1, x.channels(), x.height(), x.width()});
  std::copy(x.chw.data(), x.chw.data() + x.chw.numel(), out.data());
  return out;
}

TensorF mask_to_batch(const Mask& m) {
  TensorF out({1, 1, m.height(), m.width()});
  for (int64_t i = 0; i < m.hw.numel(); ++i) out[i] = static_cast<float>(m.hw[i]);
  return out;
}

Mask mask_generator_forward(MaskGenerator& net, const Image& x, const ClassLabel& c) {
  if (x.range != ValueRange::Normalized)
    throw std::invalid_argument("mask generator expects a normalized image");
  VarF m = net.forward(a::constant(image_to_batch(x)), {c.index});
  TensorD hw({x.height(), x.width()});
  for (int64_t i = 0; i < hw.numel(); ++i) hw[i] = static_cast<double>(m.value()[i]);
  return Mask{std::move(hw), MaskKind::Soft};
}

Image inpainter_forward(Inpainter& net, const Image& x_masked, const Mask& m) {
  if (x_masked.range != ValueRange::Normalized)
    throw std::invalid_argument("in-painter expects a normalized image");
  VarF y = net.forward(a::constant(image_to_batch(x_masked)), a::constant(mask_to_batch(m)));
  TensorF chw({3, x_masked.height(), x_masked.width()});
  std::copy(y.value().data(), y.value().data() + chw.numel(), chw.data());
  return Image{std::move(chw), ValueRange::Normalized};
}

std::vector<float> object_classifier_forward(ObjectClassifier& net, const Image& x) {
  if (x.range != ValueRange::Normalized)
    throw std::invalid_argument("classifier expects a normalized image");
  VarF s = net.forward(a::constant(image_to_batch(x)), false);
  std::vector<float> out(static_cast<size_t>(s.numel()));
  std::copy(s.value().data(), s.value().data() + s.numel(), out.begin());
  return out;
}

TensorF local_discriminator_forward(LocalDiscriminator& net, const Image& y) {
  VarF s = net.forward(a::constant(image_to_batch(y)));
  TensorF map({s.shape()[2], s.shape()[3]});
  std::copy(s.value().data(), s.value().data() + map.numel(), map.data());
  return map;
}

float prior_critic_forward(PriorCritic& net, const Mask& m, const ClassLabel& c) {
  VarF s = net.forward(a::constant(mask_to_batch(m)), std::vector<int>{c.index});
  return s.value()[0];
}

std::vector<TensorF> feature_extract(const ObjectClassifier& net, const Image& x,
                                     const std::vector<int>& depths) {
  if (x.range != ValueRange::Normalized)
    throw std::invalid_argument("feature extractor expects a normalized image");
  auto feats = net.features(a::constant(image_to_batch(x)), depths);
  std::vector<TensorF> out;
  for (const auto& f : feats) out.push_back(f.value());
  return out;
}

}  // namespace unmask
