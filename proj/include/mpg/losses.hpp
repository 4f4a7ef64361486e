#pragma once

#include <fstream>
#include <iomanip>
#include <numeric>

#include "mpg/model.hpp"
#include "mpg/ops.hpp"
#include "mpg/tensor.hpp"

namespace mpg {

// Per-pixel class indices in [0, K).
struct LabelMap {
  int n = 0, h = 0, w = 0;
  std::vector<int32_t> v;

  static LabelMap zeros(int n, int h, int w) {
    LabelMap m;
    m.n = n;
    m.h = h;
    m.w = w;
    m.v.assign(static_cast<size_t>(n) * h * w, 0);
    return m;
  }

  int32_t& at(int ni, int y, int x) { return v[(static_cast<long>(ni) * h + y) * w + x]; }
  int32_t at(int ni, int y, int x) const { return v[(static_cast<long>(ni) * h + y) * w + x]; }
  long total() const { return static_cast<long>(n) * h * w; }
};

namespace detail {

inline void check_labels(const LabelMap& labels, int K) {
  for (int n = 0; n < labels.n; ++n)
    for (int y = 0; y < labels.h; ++y)
      for (int x = 0; x < labels.w; ++x) {
        const int32_t v = labels.at(n, y, x);
        if (v < 0 || v >= K)
          throw DataError("label " + std::to_string(v) + " out of range [0," + std::to_string(K) +
                          ") at pixel (n=" + std::to_string(n) + ",y=" + std::to_string(y) +
                          ",x=" + std::to_string(x) + ")");
      }
}

template <typename T>
inline void check_probs_vs_labels(const Tensor<T>& probs, const LabelMap& labels,
                                  const char* op) {
  const Shape4 s = probs.shape();
  if (s.n != labels.n || s.h != labels.h || s.w != labels.w)
    throw ConfigError(std::string(op) + ": probs " + s.str() + " incompatible with labels (" +
                      std::to_string(labels.n) + "," + std::to_string(labels.h) + "," +
                      std::to_string(labels.w) + ")");
  check_labels(labels, s.c);
}

}  // namespace detail

// Multi-class cross entropy: mean over pixels of -log p_true, with the
// probability clamped at 1e-12 inside the log.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& probs, const LabelMap& labels) {
  detail::check_probs_vs_labels(probs, labels, "cross_entropy");
  const Shape4 s = probs.shape();
  const long plane = static_cast<long>(s.h) * s.w;
  const long pixels = static_cast<long>(s.n) * plane;
  constexpr double kEps = 1e-12;

  double acc = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const int32_t k = labels.at(n, y, x);
        const double p = probs.at(n, k, y, x);
        acc -= std::log(std::max(p, kEps));
      }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(pixels)));

  if (detail::tracing<T>({&probs})) {
    out.set_requires_grad(true);
    auto pi = probs.impl();
    auto oi = out.impl();
    auto lv = labels.v;
    Tape<T>::active()->record([pi, oi, lv = std::move(lv), plane, pixels] {
      if (oi->grad.empty() || !pi->requires_grad) return;
      if (pi->grad.empty()) pi->grad.assign(pi->value.size(), T(0));
      const Shape4 s = pi->shape;
      const T g = oi->grad[0];
      const T inv_pixels = T(1) / static_cast<T>(pixels);
      for (int n = 0; n < s.n; ++n)
        for (long p = 0; p < plane; ++p) {
          const int32_t k = lv[n * plane + p];
          const long idx = (static_cast<long>(n) * s.c + k) * plane + p;
          const T pv = pi->value[idx];
          if (pv >= static_cast<T>(kEps)) pi->grad[idx] -= g * inv_pixels / pv;
        }
    });
  }
  return out;
}

// Soft Dice loss, averaged over the K classes. The 1e-6 stabilizer sits in
// the denominator only, guarding classes absent from both maps.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const LabelMap& labels) {
  detail::check_probs_vs_labels(probs, labels, "dice_loss");
  const Shape4 s = probs.shape();
  const int K = s.c;
  const long plane = static_cast<long>(s.h) * s.w;
  constexpr double kEpsD = 1e-6;

  std::vector<double> inter(K, 0.0), psq(K, 0.0), ysum(K, 0.0);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < K; ++c) {
      const T* pp = probs.data() + (static_cast<long>(n) * K + c) * plane;
      const int32_t* lp = labels.v.data() + static_cast<long>(n) * plane;
      double di = 0.0, dp = 0.0, dy = 0.0;
      for (long i = 0; i < plane; ++i) {
        const double p = pp[i];
        dp += p * p;
        if (lp[i] == c) {
          di += p;
          dy += 1.0;
        }
      }
      inter[c] += di;
      psq[c] += dp;
      ysum[c] += dy;
    }

  double loss = 0.0;
  std::vector<double> denom(K);
  for (int c = 0; c < K; ++c) {
    denom[c] = psq[c] + ysum[c] + kEpsD;
    loss += 1.0 - 2.0 * inter[c] / denom[c];
  }
  loss /= K;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));

  if (detail::tracing<T>({&probs})) {
    out.set_requires_grad(true);
    auto pi = probs.impl();
    auto oi = out.impl();
    auto lv = labels.v;
    Tape<T>::active()->record(
        [pi, oi, lv = std::move(lv), inter = std::move(inter), denom = std::move(denom), plane] {
          if (oi->grad.empty() || !pi->requires_grad) return;
          if (pi->grad.empty()) pi->grad.assign(pi->value.size(), T(0));
          const Shape4 s = pi->shape;
          const int K = s.c;
          const double g = static_cast<double>(oi->grad[0]) / K;
          for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < K; ++c) {
              const T* pp = pi->value.data() + (static_cast<long>(n) * K + c) * plane;
              T* gp = pi->grad.data() + (static_cast<long>(n) * K + c) * plane;
              const int32_t* lp = lv.data() + static_cast<long>(n) * plane;
              const double d = denom[c], ic = inter[c];
              for (long i = 0; i < plane; ++i) {
                const double y = (lp[i] == c) ? 1.0 : 0.0;
                const double dcoeff = (2.0 * y * d - 4.0 * ic * pp[i]) / (d * d);
                gp[i] += static_cast<T>(-g * dcoeff);
              }
            }
        });
  }
  return out;
}

struct LossWeights {
  double alpha = 1.0;
  double beta = 0.5;

  void validate() const {
    if (alpha < 0 || beta < 0) throw ConfigError("loss weights must be non-negative");
    if (alpha == 0 && beta == 0) throw ConfigError("loss weights must not both be zero");
  }
};

// alpha * CE + beta * Dice.
template <typename T>
Tensor<T> seg_loss(const Tensor<T>& probs, const LabelMap& labels, const LossWeights& w) {
  w.validate();
  return elementwise_add(scale(cross_entropy(probs, labels), static_cast<T>(w.alpha)),
                         scale(dice_loss(probs, labels), static_cast<T>(w.beta)));
}

// Nearest-neighbor label subsampling by an integer factor, sampling at the
// center of each block.
inline LabelMap downscale_labels(const LabelMap& labels, int factor) {
  if (factor < 1 || labels.h % factor != 0 || labels.w % factor != 0)
    throw InternalError("downscale_labels: factor " + std::to_string(factor) +
                        " does not divide (" + std::to_string(labels.h) + "," +
                        std::to_string(labels.w) + ")");
  if (factor == 1) return labels;
  LabelMap out = LabelMap::zeros(labels.n, labels.h / factor, labels.w / factor);
  for (int n = 0; n < out.n; ++n)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x)
        out.at(n, y, x) = labels.at(n, y * factor + factor / 2, x * factor + factor / 2);
  return out;
}

// Deep-supervision objective: the final head plus one seg loss per auxiliary
// logits head, each against the ground truth at its own scale.
template <typename T>
Tensor<T> joint_loss(const ForwardOutput<T>& outputs, const LabelMap& labels,
                     const LossWeights& w) {
  Tensor<T> total = seg_loss(outputs.final_probs, labels, w);
  for (const Tensor<T>& aux : outputs.aux_logits) {
    const Shape4 s = aux.shape();
    if (labels.h % s.h != 0 || labels.w % s.w != 0 || labels.h / s.h != labels.w / s.w)
      throw InternalError("joint_loss: aux head " + s.str() + " is not an integer subscale of (" +
                          std::to_string(labels.h) + "," + std::to_string(labels.w) + ")");
    const LabelMap scaled = downscale_labels(labels, labels.h / s.h);
    total = elementwise_add(total, seg_loss(softmax_channels(aux), scaled, w));
  }
  return total;
}

// Per-pixel argmax over channels, lowest index winning ties.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& probs) {
  const Shape4 s = probs.shape();
  LabelMap out = LabelMap::zeros(s.n, s.h, s.w);
  const long plane = static_cast<long>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n)
    for (long p = 0; p < plane; ++p) {
      const T* base = probs.data() + static_cast<long>(n) * s.c * plane + p;
      int best = 0;
      T bv = base[0];
      for (int c = 1; c < s.c; ++c)
        if (base[c * plane] > bv) {
          bv = base[c * plane];
          best = c;
        }
      out.v[n * plane + p] = best;
    }
  return out;
}

// F1 = 2TP / (2TP + FP + FN) per class. A class absent from both maps scores
// 1 by convention.
inline std::vector<double> f1_per_class(const LabelMap& pred, const LabelMap& truth, int K) {
  if (pred.n != truth.n || pred.h != truth.h || pred.w != truth.w)
    throw ConfigError("f1_per_class: prediction and truth shapes differ");
  detail::check_labels(pred, K);
  detail::check_labels(truth, K);
  std::vector<long> tp(K, 0), fp(K, 0), fn(K, 0);
  const long total = pred.total();
  for (long i = 0; i < total; ++i) {
    const int32_t p = pred.v[i], t = truth.v[i];
    if (p == t)
      ++tp[p];
    else {
      ++fp[p];
      ++fn[t];
    }
  }
  std::vector<double> f1(K);
  for (int k = 0; k < K; ++k) {
    if (tp[k] == 0 && fp[k] == 0 && fn[k] == 0)
      f1[k] = 1.0;
    else
      f1[k] = 2.0 * tp[k] / static_cast<double>(2 * tp[k] + fp[k] + fn[k]);
  }
  return f1;
}

inline std::string layer_class_name(int k, int class_count) {
  static const char* kRetina[8] = {"background", "ILM",     "NFL-IPL", "INL",
                                   "OPL",        "ONL-ISM", "ISE",     "OS-RPE"};
  if (class_count == 8 && k >= 0 && k < 8) return kRetina[k];
  if (k == 0) return "background";
  return "layer" + std::to_string(k);
}

struct EvalReport {
  int class_count = 0;
  std::vector<double> per_class_f1;
  double mean_foreground_f1 = 0.0;
  double mean_loss = 0.0;
};

inline double mean_foreground(const std::vector<double>& f1) {
  if (f1.size() < 2) throw ConfigError("mean_foreground needs at least 2 classes");
  return std::accumulate(f1.begin() + 1, f1.end(), 0.0) / static_cast<double>(f1.size() - 1);
}

// K data rows (class_index, class_name, f1) plus one summary row.
inline void write_eval_csv(const EvalReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << std::setprecision(6) << std::fixed;
  for (int k = 0; k < r.class_count; ++k)
    os << k << "," << layer_class_name(k, r.class_count) << "," << r.per_class_f1[k] << "\n";
  os << -1 << ",mean_foreground," << r.mean_foreground_f1 << "\n";
}

}  // namespace mpg
