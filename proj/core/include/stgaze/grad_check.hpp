#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stgaze/errors.hpp"
#include "stgaze/params.hpp"
#include "stgaze/tape.hpp"

namespace stgaze {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  std::int64_t entries_checked = 0;
};

// Compares reverse-mode gradients of a scalar-valued program against central
// finite differences, entry by entry. Meant to run in 64-bit precision; in
// 32-bit the differences themselves are unreliable.
//
// rel_err = |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)
inline GradCheckResult grad_check(const std::function<Var(Tape<double>&)>& f,
                                  std::span<Parameter<double>* const> params,
                                  double h = 1e-5) {
  if (h == 0.0) throw std::invalid_argument("grad_check: step size h must be nonzero");

  auto eval = [&f]() {
    Tape<double> tape;
    Var root = f(tape);
    const auto& v = tape.value(root);
    if (v.numel() != 1) throw std::invalid_argument("grad_check: program must produce a scalar");
    if (!std::isfinite(v[0])) throw NumericError("grad_check: non-finite program value");
    return v[0];
  };

  // Analytic gradients at the unperturbed point.
  std::vector<Tensor<double>> ad;
  {
    Tape<double> tape;
    Var root = f(tape);
    if (tape.value(root).numel() != 1) {
      throw std::invalid_argument("grad_check: program must produce a scalar");
    }
    ParamGrads<double> sink;
    tape.backward(root, sink);
    for (auto* p : params) {
      const Tensor<double>* g = sink.find(p->id);
      ad.push_back(g ? *g : Tensor<double>(p->value.shape()));
    }
  }

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>& p = *params[pi];
    for (std::int64_t i = 0; i < p.value.numel(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = eval();
      p.value[i] = saved - h;
      const double down = eval();
      p.value[i] = saved;

      const double fd = (up - down) / (2.0 * h);
      const double g_ad = ad[pi][i];
      if (!std::isfinite(fd) || !std::isfinite(g_ad)) {
        throw NumericError("grad_check: non-finite gradient for " + p.name);
      }
      const double denom = std::max({1.0, std::fabs(g_ad), std::fabs(fd)});
      const double rel = std::fabs(g_ad - fd) / denom;
      ++result.entries_checked;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = p.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

inline GradCheckResult grad_check(const std::function<Var(Tape<double>&)>& f,
                                  ParameterStore<double>& store, double h = 1e-5) {
  std::vector<Parameter<double>*> params;
  for (auto& p : store) params.push_back(p.get());
  return grad_check(f, params, h);
}

}  // namespace stgaze
