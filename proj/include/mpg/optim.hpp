#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mpg/tensor.hpp"

namespace mpg {

// Numerical blow-up during training (non-finite loss or gradients).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<float>> m, v;
  int t = 0;

  void init(const std::vector<Parameter<float>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.value.size(), 0.0f);
      v.emplace_back(p.value.size(), 0.0f);
    }
    t = 0;
  }
};

// Adam with bias correction plus a decoupled L2 term lr*wd*w on non-exempt
// parameters. Missing gradient buffers are treated as zero.
inline void adam_step(std::vector<Parameter<float>>& params, AdamState& st, double lr,
                      double weight_decay, const AdamConfig& cfg = {}) {
  if (!(lr > 0)) throw ConfigError("adam_step requires lr > 0");
  if (st.m.size() != params.size()) throw UsageError("adam_step: state not initialized");
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, st.t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, st.t);
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter<float>& p = params[i];
    const long n = p.value.size();
    float* w = p.value.data();
    const bool has_grad = p.value.has_grad();
    const std::vector<float>& gv = p.value.grad_vector();
    if (has_grad)
      for (long j = 0; j < n; ++j)
        if (!std::isfinite(gv[j]))
          throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
    float* mj = st.m[i].data();
    float* vj = st.v[i].data();
    for (long j = 0; j < n; ++j) {
      const double g = has_grad ? gv[j] : 0.0;
      mj[j] = static_cast<float>(cfg.beta1 * mj[j] + (1.0 - cfg.beta1) * g);
      vj[j] = static_cast<float>(cfg.beta2 * vj[j] + (1.0 - cfg.beta2) * g * g);
      const double mhat = mj[j] / bc1;
      const double vhat = vj[j] / bc2;
      double upd = lr * mhat / (std::sqrt(vhat) + cfg.eps);
      if (!p.weight_decay_exempt) upd += lr * weight_decay * w[j];
      w[j] = static_cast<float>(w[j] - upd);
    }
  }
}

// Step decay: multiply by each milestone factor once its epoch is reached.
struct LrSchedule {
  double start = 0.01;
  std::vector<std::pair<int, double>> milestones = {{50, 0.1}, {80, 0.1}};

  void validate() const {
    if (!(start > 0)) throw ConfigError("lr start must be > 0");
    for (const auto& [e, f] : milestones)
      if (e < 0 || !(f > 0) || f > 1.0)
        throw ConfigError("lr milestones need epoch >= 0 and factor in (0,1]");
  }
};

inline double lr_at(const LrSchedule& s, int epoch) {
  if (epoch < 0) throw UsageError("lr_at requires epoch >= 0");
  double lr = s.start;
  for (const auto& [e, f] : s.milestones)
    if (epoch >= e) lr *= f;
  return lr;
}

}  // namespace mpg
