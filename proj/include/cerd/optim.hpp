#pragma once

// Adam with bias correction. Gradients accumulate on the parameter tensors
// between backward calls; step() consumes and zeroes them explicitly.

#include <cmath>
#include <string>
#include <vector>

#include "cerd/errors.hpp"
#include "cerd/gradcheck.hpp"
#include "cerd/tensor.hpp"

namespace cerd {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig config = {}) : params_(std::move(params)), config_(config) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].tensor.size(), 0.0);
      v_[i].assign(params_[i].tensor.size(), 0.0);
    }
  }

  std::uint64_t steps() const { return t_; }
  const ParamList& params() const { return params_; }

  double learning_rate() const { return config_.learning_rate; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

  void zero_grad() {
    for (NamedParam& p : params_) p.tensor.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i].tensor;
      auto values = p.values_mut();
      const bool has_grad = p.has_grad();
      for (std::size_t c = 0; c < values.size(); ++c) {
        const double g = has_grad ? p.grad()[c] : 0.0;
        if (!std::isfinite(g))
          throw TrainingError("adam: non-finite gradient in parameter " + params_[i].name);
        m_[i][c] = config_.beta1 * m_[i][c] + (1.0 - config_.beta1) * g;
        v_[i][c] = config_.beta2 * v_[i][c] + (1.0 - config_.beta2) * g * g;
        const double mhat = m_[i][c] / bc1;
        const double vhat = v_[i][c] / bc2;
        values[c] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
      p.zero_grad();
    }
  }

 private:
  ParamList params_;
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace cerd
