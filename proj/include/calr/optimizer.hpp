#pragma once

// AdamW with linear warmup into a cosine decay. The gradient step uses the
// scheduled rate; the decoupled weight-decay shrink uses the base rate, so a
// step at the schedule endpoint (scheduled lr = 0) still decays weights.

#include <cmath>
#include <cstdint>
#include <vector>

#include "calr/error.hpp"
#include "calr/matrix.hpp"
#include "calr/params.hpp"

namespace calr {

struct AdamWConfig {
  double lr = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 0;
  int total_steps = 0;  // steps over which the cosine decays to zero
};

class AdamW {
 public:
  AdamW(const ParamSet& params, const AdamWConfig& config) : cfg_(config) {
    for (const Param& p : params) {
      if (!p.trainable) continue;
      names_.push_back(p.name);
      m_.emplace_back(p.value->rows(), p.value->cols());
      v_.emplace_back(p.value->rows(), p.value->cols());
    }
  }

  /// Learning rate applied at 0-based step t.
  double scheduled_lr(int64_t t) const {
    if (cfg_.warmup_steps > 0 && t < cfg_.warmup_steps) {
      return cfg_.lr * static_cast<double>(t + 1) / cfg_.warmup_steps;
    }
    if (cfg_.total_steps <= cfg_.warmup_steps) return cfg_.lr;
    double progress = static_cast<double>(t - cfg_.warmup_steps) /
                      (cfg_.total_steps - cfg_.warmup_steps);
    if (progress > 1.0) progress = 1.0;
    return cfg_.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
  }

  int64_t steps_taken() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

  void step(ParamSet& params) {
    const double lr_t = scheduled_lr(step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_ + 1));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_ + 1));
    size_t slot = 0;
    for (Param& p : params) {
      if (!p.trainable) continue;
      if (!p.has_grad) {
        throw Error(ErrorCode::kMissingGradient,
                    "AdamW: no gradient for trainable param " + p.name);
      }
      Matrix& m = m_[slot];
      Matrix& v = v_[slot];
      ++slot;
      double* w = p.value->data();
      const double* g = p.grad.data();
      const double decay = cfg_.lr * cfg_.weight_decay;
      for (size_t i = 0; i < p.value->size(); ++i) {
        m.data()[i] = cfg_.beta1 * m.data()[i] + (1.0 - cfg_.beta1) * g[i];
        v.data()[i] = cfg_.beta2 * v.data()[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        double m_hat = m.data()[i] / bc1;
        double v_hat = v.data()[i] / bc2;
        w[i] -= decay * w[i];
        w[i] -= lr_t * m_hat / (std::sqrt(v_hat) + cfg_.eps);
      }
    }
    ++step_;
  }

 private:
  AdamWConfig cfg_;
  int64_t step_ = 0;
  std::vector<std::string> names_;
  std::vector<Matrix> m_, v_;
};

}  // namespace calr
