#pragma once

#include <random>

#include "mpg/ops.hpp"
#include "mpg/tensor.hpp"

namespace mpg {

namespace detail {

// He-normal fill for conv weights: N(0, sqrt(2 / fan_in)).
template <typename T>
Tensor<T> he_normal(Shape4 s, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(s.c) * s.h * s.w;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Tensor<T> t = Tensor<T>::zeros(s);
  for (long i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(dist(rng));
  return t;
}

}  // namespace detail

// Feature Refinement Module: squeeze the spatial extent into a per-channel
// context vector, pass it through a 1x1 bottleneck (ReLU) and a 1x1 expansion
// (Sigmoid), and rescale the input channels with the resulting gate.
template <typename T>
struct FrmBlock {
  int channels = 0;
  int reduction = 0;
  Tensor<T> conv_a_w, conv_a_b;  // C -> C/r
  Tensor<T> conv_b_w, conv_b_b;  // C/r -> C

  static FrmBlock init(int channels, int reduction, std::mt19937_64& rng) {
    if (channels <= 0 || reduction <= 0 || channels % reduction != 0)
      throw ConfigError("FRM requires channels divisible by reduction, got C=" +
                        std::to_string(channels) + " r=" + std::to_string(reduction));
    const int mid = channels / reduction;
    FrmBlock b;
    b.channels = channels;
    b.reduction = reduction;
    b.conv_a_w = detail::he_normal<T>({mid, channels, 1, 1}, rng);
    b.conv_a_b = Tensor<T>::zeros({1, mid, 1, 1});
    b.conv_b_w = detail::he_normal<T>({channels, mid, 1, 1}, rng);
    b.conv_b_b = Tensor<T>::zeros({1, channels, 1, 1});
    return b;
  }
};

template <typename T>
Tensor<T> frm_forward(const FrmBlock<T>& block, const Tensor<T>& f) {
  if (f.shape().c != block.channels)
    throw ConfigError("frm_forward channel mismatch: input " + f.shape().str() + " vs block C=" +
                      std::to_string(block.channels));
  Tensor<T> g = global_avg_pool(f);
  Tensor<T> h = relu(conv2d(g, block.conv_a_w, block.conv_a_b));
  Tensor<T> gate = sigmoid(conv2d(h, block.conv_b_w, block.conv_b_b));
  return elementwise_mul(f, gate);
}

// Prediction Guidance Module: derive per-class logits from the decoder
// feature, turn them into a pixel-wise sigmoid attention map, reweight a
// transformed copy of the feature, add it back to the input, and fuse with a
// final 1x1 convolution. The logits come back out for deep supervision.
template <typename T>
struct PgmBlock {
  int channels = 0;
  int class_count = 0;
  Tensor<T> logits_w, logits_b;        // C -> K
  Tensor<T> attn_w, attn_b;            // K -> C
  Tensor<T> transform_w, transform_b;  // C -> C
  Tensor<T> fuse_w, fuse_b;            // C -> C

  static PgmBlock init(int channels, int class_count, std::mt19937_64& rng) {
    if (channels <= 0 || class_count < 2)
      throw ConfigError("PGM requires C > 0 and K >= 2, got C=" + std::to_string(channels) +
                        " K=" + std::to_string(class_count));
    PgmBlock b;
    b.channels = channels;
    b.class_count = class_count;
    b.logits_w = detail::he_normal<T>({class_count, channels, 1, 1}, rng);
    b.logits_b = Tensor<T>::zeros({1, class_count, 1, 1});
    b.attn_w = detail::he_normal<T>({channels, class_count, 1, 1}, rng);
    b.attn_b = Tensor<T>::zeros({1, channels, 1, 1});
    b.transform_w = detail::he_normal<T>({channels, channels, 1, 1}, rng);
    b.transform_b = Tensor<T>::zeros({1, channels, 1, 1});
    b.fuse_w = detail::he_normal<T>({channels, channels, 1, 1}, rng);
    b.fuse_b = Tensor<T>::zeros({1, channels, 1, 1});
    return b;
  }
};

template <typename T>
struct PgmOutput {
  Tensor<T> fused;       // same shape as the decoder feature
  Tensor<T> aux_logits;  // K channels, for deep supervision
};

template <typename T>
PgmOutput<T> pgm_forward(const PgmBlock<T>& block, const Tensor<T>& fd) {
  if (fd.shape().c != block.channels)
    throw ConfigError("pgm_forward channel mismatch: input " + fd.shape().str() + " vs block C=" +
                      std::to_string(block.channels));
  Tensor<T> logits = conv2d(fd, block.logits_w, block.logits_b);
  Tensor<T> attn = sigmoid(conv2d(logits, block.attn_w, block.attn_b));
  Tensor<T> reweighted = elementwise_mul(conv2d(fd, block.transform_w, block.transform_b), attn);
  Tensor<T> fused = conv2d(elementwise_add(fd, reweighted), block.fuse_w, block.fuse_b);
  return {fused, logits};
}

}  // namespace mpg
