#pragma once

// Central finite-difference gradient checking against the tape's analytic
// gradients. Test harness and `gradcheck` CLI both run through here.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cerd/errors.hpp"
#include "cerd/tensor.hpp"

namespace cerd {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

struct GradCheckEntry {
  std::string param;
  double max_rel_error = 0.0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> per_param;

  bool pass(double tol) const { return max_rel_error < tol; }
};

namespace detail {

inline double rel_error(double analytic, double numeric) {
  const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / scale;
}

}  // namespace detail

// Checks d(f)/d(param) for every coordinate of every listed parameter.
// `f` must rebuild the forward computation from the parameters' current
// values on each call and return a scalar.
inline GradCheckReport check_gradients(const std::function<Tensor()>& f,
                                       std::span<const NamedParam> params, double step = 1e-5,
                                       double tol = 1e-4) {
  if (step < 1e-7 || step > 1e-3)
    throw ParameterError("check_gradients: step must lie in [1e-7, 1e-3], got " + std::to_string(step));
  (void)tol;

  // Analytic pass.
  std::vector<std::vector<double>> analytic(params.size());
  {
    GradTape tape;
    for (const NamedParam& p : params) const_cast<Tensor&>(p.tensor).zero_grad();
    Tensor loss = f();
    if (!std::isfinite(loss.value()))
      throw ContractError("check_gradients: function value is not finite");
    tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      analytic[i].assign(params[i].tensor.size(), 0.0);
      if (params[i].tensor.has_grad()) {
        auto g = params[i].tensor.grad();
        analytic[i].assign(g.begin(), g.end());
      }
      const_cast<Tensor&>(params[i].tensor).zero_grad();
    }
  }

  auto eval = [&]() -> double {
    NoGradGuard guard;
    const Tensor v = f();
    const double x = v.value();
    if (!std::isfinite(x)) throw ContractError("check_gradients: function value is not finite");
    return x;
  };

  GradCheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    GradCheckEntry entry;
    entry.param = params[i].name;
    auto vals = const_cast<Tensor&>(params[i].tensor).values_mut();
    for (std::size_t c = 0; c < vals.size(); ++c) {
      const double original = vals[c];
      vals[c] = original + step;
      const double f_plus = eval();
      vals[c] = original - step;
      const double f_minus = eval();
      vals[c] = original;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double err = detail::rel_error(analytic[i][c], numeric);
      if (err >= entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_coord = c;
        entry.analytic = analytic[i][c];
        entry.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.per_param.push_back(std::move(entry));
  }
  return report;
}

// Single-tensor convenience form: checks d(f(x))/dx.
inline GradCheckReport check_gradients(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                       double step = 1e-5, double tol = 1e-4) {
  x.set_requires_grad(true);
  ParamList params{{"x", x}};
  return check_gradients([&]() { return f(x); }, params, step, tol);
}

}  // namespace cerd
