#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unmask/autodiff.hpp"
#include "unmask/core.hpp"
#include "unmask/rng.hpp"

// Objective terms for both training phases, templated so the gradient checks
// can run the exact same code in 64-bit. Every function returns a scalar
// graph node; batch reductions are means so the weights stay
// resolution-independent.

namespace unmask {

namespace detail {

template <typename T>
void require_same_shape(const ad::Var<T>& a, const ad::Var<T>& b, const char* who) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(who) + ": shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()) + " differ");
}

template <typename T>
ad::Var<T> zero_scalar() {
  return ad::constant(Tensor<T>::scalar(T(0)));
}

template <typename T>
ad::Var<T> mean_abs_diff(const ad::Var<T>& a, const ad::Var<T>& b) {
  return ad::mean_all(ad::abs_op(ad::sub(a, b)));
}

}  // namespace detail

// -log(1 - s) averaged over the batch, s clamped to [eps, 1-eps].
template <typename T>
ad::Var<T> loss_cls(const ad::Var<T>& score_target) {
  const T eps = static_cast<T>(1e-7);
  ad::Var<T> s = ad::clamp(score_target, eps, T(1) - eps);
  return ad::neg(ad::mean_all(ad::log_op(ad::sub(ad::constant<T>(T(1)), s))));
}

// Generator side of the local real/fake game: negative mean critic score over
// the fake (mask-weighted) region; an empty mask contributes nothing.
template <typename T>
ad::Var<T> loss_rf_generator(const ad::Var<T>& score_map, const ad::Var<T>& m_pooled) {
  detail::require_same_shape(score_map, m_pooled, "loss_rf_generator");
  ad::Var<T> denom = ad::sum_all(m_pooled);
  if (denom.value()[0] == T(0)) return detail::zero_scalar<T>();
  return ad::neg(ad::div(ad::sum_all(ad::mul(m_pooled, score_map)), denom));
}

// Least-squares discriminator objective with per-region normalization:
// (1/sum m~) sum m~ (D-1)^2 + (1/sum m) sum m (D+1)^2.
template <typename T>
ad::Var<T> loss_local_lsgan_disc(const ad::Var<T>& score_map, const ad::Var<T>& m_pooled) {
  detail::require_same_shape(score_map, m_pooled, "loss_local_lsgan_disc");
  ad::Var<T> m = m_pooled;
  ad::Var<T> mc = ad::sub(ad::constant<T>(T(1)), m);
  ad::Var<T> total = detail::zero_scalar<T>();
  ad::Var<T> real_denom = ad::sum_all(mc);
  if (real_denom.value()[0] != T(0)) {
    ad::Var<T> err = ad::square(ad::sub(score_map, ad::constant<T>(T(1))));
    total = ad::add(total, ad::div(ad::sum_all(ad::mul(mc, err)), real_denom));
  }
  ad::Var<T> fake_denom = ad::sum_all(m);
  if (fake_denom.value()[0] != T(0)) {
    ad::Var<T> err = ad::square(ad::add(score_map, ad::constant<T>(T(1))));
    total = ad::add(total, ad::div(ad::sum_all(ad::mul(m, err)), fake_denom));
  }
  return total;
}

// Wasserstein pair, kept exactly as stated: critic term E[D(prior)] -
// E[D(gen)], generator term -E[D(gen)]. The trainer negates the critic term
// before descending so that prior masks end up scored above generated ones.
template <typename T>
std::pair<ad::Var<T>, ad::Var<T>> loss_prior_pair(const ad::Var<T>& scores_prior,
                                                  const ad::Var<T>& scores_gen) {
  if (scores_prior.numel() == 0 || scores_gen.numel() == 0)
    throw std::invalid_argument("loss_prior_pair: empty score batch");
  ad::Var<T> mean_gen = ad::mean_all(scores_gen);
  ad::Var<T> critic = ad::sub(ad::mean_all(scores_prior), mean_gen);
  return {critic, ad::neg(mean_gen)};
}

// E[(||grad_xhat D(xhat)||_2 - 1)^2] with xhat = u*real + (1-u)*fake, u
// uniform per sample. Differentiable w.r.t. the critic parameters (the inner
// gradient is built with create_graph), so it can regularize critic updates.
template <typename T>
ad::Var<T> gradient_penalty(const std::function<ad::Var<T>(const ad::Var<T>&)>& critic,
                            const Tensor<T>& real, const Tensor<T>& fake, Rng& rng) {
  if (real.shape() != fake.shape())
    throw std::invalid_argument("gradient_penalty: real " + shape_str(real.shape()) +
                                " vs fake " + shape_str(fake.shape()));
  if (real.shape().empty() || real.shape()[0] < 1)
    throw std::invalid_argument("gradient_penalty: need a batched input");
  const int64_t n = real.shape()[0];
  const int64_t per = real.numel() / n;
  Tensor<T> mix(real.shape());
  for (int64_t i = 0; i < n; ++i) {
    const T u = static_cast<T>(rng.uniform());
    for (int64_t j = 0; j < per; ++j)
      mix[i * per + j] = u * real[i * per + j] + (T(1) - u) * fake[i * per + j];
  }
  ad::Var<T> x_hat = ad::leaf(std::move(mix), true);
  ad::Var<T> scores = critic(x_hat);
  if (scores.numel() != n)
    throw std::invalid_argument("gradient_penalty: critic returned " +
                                shape_str(scores.shape()) + " for batch size " +
                                std::to_string(n));
  ad::Var<T> seed = ad::constant(Tensor<T>::full(scores.shape(), T(1)));
  ad::Var<T> g = ad::grad(scores, {x_hat}, /*create_graph=*/true, seed)[0];
  std::vector<int> inner_axes;
  for (size_t a = 1; a < real.shape().size(); ++a) inner_axes.push_back(static_cast<int>(a));
  ad::Var<T> sq = ad::reduce_sum(ad::square(g), inner_axes, false);  // {N}
  ad::Var<T> norm = ad::sqrt_op(sq);
  return ad::mean_all(ad::square(ad::sub(norm, ad::constant<T>(T(1)))));
}

// Mean-L1 image term plus mean-L1 over each paired feature map.
template <typename T>
ad::Var<T> loss_recon(const ad::Var<T>& g_out, const ad::Var<T>& x,
                      const std::vector<ad::Var<T>>& feat_out = {},
                      const std::vector<ad::Var<T>>& feat_ref = {}) {
  detail::require_same_shape(g_out, x, "loss_recon");
  if (feat_out.size() != feat_ref.size())
    throw std::invalid_argument("loss_recon: feature list lengths differ");
  ad::Var<T> total = detail::mean_abs_diff(g_out, x);
  for (size_t k = 0; k < feat_out.size(); ++k) {
    detail::require_same_shape(feat_out[k], feat_ref[k], "loss_recon (features)");
    total = ad::add(total, detail::mean_abs_diff(feat_out[k], feat_ref[k]));
  }
  return total;
}

// Mean absolute difference between horizontally and vertically adjacent
// pixels, pooled over both directions.
template <typename T>
ad::Var<T> loss_tv(const ad::Var<T>& y) {
  const Shape& s = y.shape();
  if (s.size() < 2) throw std::invalid_argument("loss_tv: input must have spatial dims");
  const int ah = static_cast<int>(s.size()) - 2;
  const int aw = static_cast<int>(s.size()) - 1;
  const int64_t h = s[static_cast<size_t>(ah)];
  const int64_t w = s[static_cast<size_t>(aw)];
  const int64_t nv = y.numel() / h * (h - 1);
  const int64_t nh = y.numel() / w * (w - 1);
  if (nv + nh == 0) return detail::zero_scalar<T>();
  ad::Var<T> acc = detail::zero_scalar<T>();
  if (nv > 0) {
    ad::Var<T> d = ad::sub(ad::slice(y, ah, 1, h - 1), ad::slice(y, ah, 0, h - 1));
    acc = ad::add(acc, ad::sum_all(ad::abs_op(d)));
  }
  if (nh > 0) {
    ad::Var<T> d = ad::sub(ad::slice(y, aw, 1, w - 1), ad::slice(y, aw, 0, w - 1));
    acc = ad::add(acc, ad::sum_all(ad::abs_op(d)));
  }
  return ad::div(acc, ad::constant<T>(static_cast<T>(nv + nh)));
}

// Per-sample Gram matrices of a {N,C,H,W} feature map, normalized by C*H*W.
// Invariant under any permutation of the spatial positions.
template <typename T>
ad::Var<T> gram_matrix(const ad::Var<T>& f) {
  const Shape& s = f.shape();
  if (s.size() != 4) throw std::invalid_argument("gram_matrix: expected {N,C,H,W}");
  const int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  const T norm = T(1) / static_cast<T>(c * s[2] * s[3]);
  std::vector<ad::Var<T>> rows;
  rows.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    ad::Var<T> fi = ad::reshape(ad::slice(f, 0, i, 1), {c, hw});
    ad::Var<T> gi = ad::mul(ad::matmul2(fi, fi, false, true), ad::constant<T>(norm));
    rows.push_back(ad::reshape(gi, {1, c, c}));
  }
  return rows.size() == 1 ? rows[0] : ad::concat(rows, 0);
}

// Sum over depths of mean-L1 distances between Gram matrices.
template <typename T>
ad::Var<T> loss_style(const std::vector<ad::Var<T>>& feat_out,
                      const std::vector<ad::Var<T>>& feat_ref) {
  if (feat_out.size() != feat_ref.size())
    throw std::invalid_argument("loss_style: feature list lengths differ");
  if (feat_out.empty()) return detail::zero_scalar<T>();
  ad::Var<T> total = detail::zero_scalar<T>();
  for (size_t k = 0; k < feat_out.size(); ++k) {
    detail::require_same_shape(feat_out[k], feat_ref[k], "loss_style");
    total = ad::add(total, detail::mean_abs_diff(gram_matrix(feat_out[k]),
                                                 gram_matrix(feat_ref[k])));
  }
  return total;
}

// exp(mean(m)): 1 for an empty mask, e for a full one, monotone in between.
template <typename T>
ad::Var<T> size_penalty(const ad::Var<T>& m) {
  return ad::exp_op(ad::mean_all(m));
}

// Named scalar terms of both objectives; undefined fields are simply unused
// by the total that does not reference them.
template <typename T>
struct LossBreakdown {
  ad::Var<T> cls, rf, prior, size, recon_l1, recon_perc, tv, style, critic, gp;
};

using LossBreakdownF = LossBreakdown<float>;

namespace detail {

template <typename T>
ad::Var<T> checked_term(const ad::Var<T>& term, const char* name) {
  if (!term.defined())
    throw std::runtime_error(std::string("loss term '") + name + "' is missing");
  if (term.numel() != 1)
    throw std::runtime_error(std::string("loss term '") + name + "' is not a scalar");
  if (!std::isfinite(static_cast<double>(term.value()[0])))
    throw NumericalFailure(std::string("loss term '") + name + "' is not finite");
  return term;
}

template <typename T>
ad::Var<T> weighted(const ad::Var<T>& term, float lambda) {
  return ad::mul(ad::constant<T>(static_cast<T>(lambda)), term);
}

}  // namespace detail

// lambda_c * cls + lambda_p * prior + lambda_sz * size
template <typename T>
ad::Var<T> total_mask_gen(const LossBreakdown<T>& b, const LossWeights& w) {
  ad::Var<T> total = detail::weighted(detail::checked_term(b.cls, "cls"), w.lambda_c);
  total = ad::add(total, detail::weighted(detail::checked_term(b.prior, "prior"), w.lambda_p));
  total = ad::add(total, detail::weighted(detail::checked_term(b.size, "size"), w.lambda_sz));
  return total;
}

// lambda_rf * rf + lambda_r * (recon_l1 + recon_perc) + lambda_tv * tv +
// lambda_sty * style
template <typename T>
ad::Var<T> total_inpainter(const LossBreakdown<T>& b, const LossWeights& w) {
  ad::Var<T> recon = ad::add(detail::checked_term(b.recon_l1, "recon_l1"),
                             detail::checked_term(b.recon_perc, "recon_perc"));
  ad::Var<T> total = detail::weighted(detail::checked_term(b.rf, "rf"), w.lambda_rf);
  total = ad::add(total, detail::weighted(recon, w.lambda_r));
  total = ad::add(total, detail::weighted(detail::checked_term(b.tv, "tv"), w.lambda_tv));
  total = ad::add(total, detail::weighted(detail::checked_term(b.style, "style"), w.lambda_sty));
  return total;
}

}  // namespace unmask
