#pragma once

#include "ega/autodiff.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ega {

/// A NaN or infinity surfaced during a gradient check.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Central-difference check of every entry of `params`. `loss` builds the scalar objective
/// on the given tape (or untracked when the tape is null) and must be deterministic.
template <typename Scalar>
GradCheckResult grad_check(const std::function<Var<Scalar>(Tape<Scalar>*)>& loss,
                           const std::vector<Parameter<Scalar>*>& params, double h = 1e-6) {
  for (Parameter<Scalar>* p : params) p->zero_grad();
  Tape<Scalar> tape;
  const Var<Scalar> out = loss(&tape);
  tape.backward(out);

  GradCheckResult result;
  for (Parameter<Scalar>* p : params) {
    NdArray<Scalar>& value = *p->value;
    for (std::size_t i = 0; i < value.numel(); ++i) {
      const Scalar saved = value[i];
      value[i] = static_cast<Scalar>(saved + h);
      const double up = static_cast<double>(loss(nullptr).value().item());
      value[i] = static_cast<Scalar>(saved - h);
      const double down = static_cast<double>(loss(nullptr).value().item());
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = static_cast<double>(p->grad[i]);
      if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
        throw NonFiniteError("non-finite gradient for parameter '" + p->name + "' entry " +
                             std::to_string(i));
      }
      const double err = relative_error(analytic, numeric);
      ++result.entries_checked;
      if (err > result.max_rel_err || result.entries_checked == 1) {
        result.max_rel_err = err;
        result.worst_param = p->name;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

/// Same check over free-standing inputs; `f` maps leaf values to a scalar.
template <typename Scalar>
GradCheckResult grad_check_inputs(const std::function<Var<Scalar>(const std::vector<Var<Scalar>>&)>& f,
                                  std::vector<NdArray<Scalar>> inputs, double h = 1e-6) {
  std::vector<Parameter<Scalar>> params;
  params.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    params.emplace_back("input" + std::to_string(i), std::move(inputs[i]), ParamRole::kWeight);
  }
  std::vector<Parameter<Scalar>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  auto loss = [&](Tape<Scalar>* tape) {
    std::vector<Var<Scalar>> vars;
    for (auto& p : params) {
      vars.push_back(tape ? tape->parameter(p) : Var<Scalar>(p.value, nullptr, -1));
    }
    return f(vars);
  };
  return grad_check<Scalar>(loss, ptrs, h);
}

}  // namespace ega
