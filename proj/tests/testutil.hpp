#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "unmask/autodiff.hpp"
#include "unmask/rng.hpp"

namespace testutil {

using unmask::Shape;
using unmask::TensorD;
using unmask::TensorF;

inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

inline TensorD random_tensor(unmask::Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  TensorD t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

struct GradCheckReport {
  bool ok = true;
  double max_rel = 0.0;
  std::string detail;
};

// Central finite differences against reverse-mode gradients, 64-bit. The
// functional is re-evaluated from scratch for every probe, so it must be a
// pure function of the given inputs.
inline GradCheckReport gradcheck(
    const std::function<unmask::ad::VarD(const std::vector<unmask::ad::VarD>&)>& f,
    std::vector<TensorD> inputs, double eps = 1e-5, double tol = 1e-5) {
  using namespace unmask::ad;
  auto eval = [&]() -> double {
    std::vector<VarD> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(leaf(t.clone(), true));
    VarD out = f(vars);
    if (out.numel() != 1) throw std::logic_error("gradcheck: functional must return a scalar");
    return out.value()[0];
  };

  std::vector<VarD> vars;
  vars.reserve(inputs.size());
  for (auto& t : inputs) vars.push_back(leaf(t, true));
  VarD out = f(vars);
  std::vector<VarD> gs = grad(out, vars);

  GradCheckReport rep;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      const double orig = inputs[i][j];
      inputs[i][j] = orig + eps;
      const double fp = eval();
      inputs[i][j] = orig - eps;
      const double fm = eval();
      inputs[i][j] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = gs[i].value()[j];
      const double re = std::abs(fd) < 1e-10 && std::abs(an) < 1e-10 ? 0.0 : rel_err(fd, an);
      rep.max_rel = std::max(rep.max_rel, re);
      if (re > tol && rep.ok) {
        rep.ok = false;
        std::ostringstream os;
        os << "input " << i << " elem " << j << ": finite-diff " << fd << " vs autodiff " << an
           << " (rel " << re << ")";
        rep.detail = os.str();
      }
    }
  }
  return rep;
}

}  // namespace testutil
