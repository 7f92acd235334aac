#pragma once

#include <cmath>
#include <vector>

#include "neurotok/autodiff.hpp"
#include "neurotok/error.hpp"

namespace neurotok {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
};

// Adam with bias correction. Reads Parameter::grad and leaves it untouched.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<ad::Parameter<T>*> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
    if (!(opt_.learning_rate > 0.0)) throw ValidationError("Adam learning rate must be positive");
    if (opt_.beta1 < 0.0 || opt_.beta1 >= 1.0 || opt_.beta2 < 0.0 || opt_.beta2 >= 1.0)
      throw ValidationError("Adam betas must be in [0, 1)");
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = static_cast<double>(p.grad[k]);
        m_[i][k] = opt_.beta1 * m_[i][k] + (1.0 - opt_.beta1) * g;
        v_[i][k] = opt_.beta2 * v_[i][k] + (1.0 - opt_.beta2) * g * g;
        const double update = opt_.learning_rate * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + opt_.epsilon);
        p.value[k] = static_cast<T>(static_cast<double>(p.value[k]) - update);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  std::size_t steps() const noexcept { return t_; }
  const AdamOptions& options() const noexcept { return opt_; }

 private:
  std::vector<ad::Parameter<T>*> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace neurotok
