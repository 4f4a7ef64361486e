// Test-side reference implementations and helpers, kept independent of the
// engine's forward paths on purpose.
#pragma once

#include <random>

#include "mpg/blocks.hpp"

namespace testing_oracles {

inline mpg::Tensor<double> random_tensor(mpg::Shape4 s, uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  auto t = mpg::Tensor<double>::zeros(s);
  for (long i = 0; i < t.size(); ++i) t.data()[i] = d(rng);
  return t;
}

// Straight-line FRM on raw arrays: spatial mean, 1x1 bottleneck with relu,
// 1x1 expansion with sigmoid, channel-wise product.
inline mpg::Tensor<double> frm_reference(const mpg::FrmBlock<double>& blk,
                                         const mpg::Tensor<double>& f) {
  const mpg::Shape4 s = f.shape();
  const int C = s.c, mid = C / blk.reduction;
  auto out = mpg::Tensor<double>::zeros(s);
  for (int n = 0; n < s.n; ++n) {
    std::vector<double> g(C, 0.0);
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) g[c] += f.at(n, c, y, x);
      g[c] /= static_cast<double>(s.h) * s.w;
    }
    std::vector<double> h(mid);
    for (int m = 0; m < mid; ++m) {
      double acc = blk.conv_a_b.data()[m];
      for (int c = 0; c < C; ++c) acc += blk.conv_a_w.at(m, c, 0, 0) * g[c];
      h[m] = std::max(acc, 0.0);
    }
    std::vector<double> gate(C);
    for (int c = 0; c < C; ++c) {
      double acc = blk.conv_b_b.data()[c];
      for (int m = 0; m < mid; ++m) acc += blk.conv_b_w.at(c, m, 0, 0) * h[m];
      gate[c] = 1.0 / (1.0 + std::exp(-acc));
    }
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) out.at(n, c, y, x) = f.at(n, c, y, x) * gate[c];
  }
  return out;
}

// Straight-line PGM: per-pixel 1x1 convolutions as matrix products.
inline void pgm_reference(const mpg::PgmBlock<double>& blk, const mpg::Tensor<double>& fd,
                          mpg::Tensor<double>& fused, mpg::Tensor<double>& logits) {
  const mpg::Shape4 s = fd.shape();
  const int C = s.c, K = blk.class_count;
  fused = mpg::Tensor<double>::zeros(s);
  logits = mpg::Tensor<double>::zeros({s.n, K, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        std::vector<double> fk(K);
        for (int k = 0; k < K; ++k) {
          double acc = blk.logits_b.data()[k];
          for (int c = 0; c < C; ++c) acc += blk.logits_w.at(k, c, 0, 0) * fd.at(n, c, y, x);
          fk[k] = acc;
          logits.at(n, k, y, x) = acc;
        }
        std::vector<double> sd(C);
        for (int c = 0; c < C; ++c) {
          double acc = blk.attn_b.data()[c];
          for (int k = 0; k < K; ++k) acc += blk.attn_w.at(c, k, 0, 0) * fk[k];
          sd[c] = 1.0 / (1.0 + std::exp(-acc));
        }
        std::vector<double> pre(C);
        for (int c = 0; c < C; ++c) {
          double acc = blk.transform_b.data()[c];
          for (int i = 0; i < C; ++i) acc += blk.transform_w.at(c, i, 0, 0) * fd.at(n, i, y, x);
          pre[c] = fd.at(n, c, y, x) + acc * sd[c];
        }
        for (int c = 0; c < C; ++c) {
          double acc = blk.fuse_b.data()[c];
          for (int i = 0; i < C; ++i) acc += blk.fuse_w.at(c, i, 0, 0) * pre[i];
          fused.at(n, c, y, x) = acc;
        }
      }
}

}  // namespace testing_oracles
