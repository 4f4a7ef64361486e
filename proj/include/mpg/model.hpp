#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "mpg/blocks.hpp"
#include "mpg/ops.hpp"
#include "mpg/tensor.hpp"

namespace mpg {

struct ModelConfig {
  int in_channels = 1;
  int class_count = 8;
  std::array<int, 4> stage_channels = {32, 64, 128, 256};
  bool frm_enabled = true;
  bool mpga_enabled = true;
  int frm_reduction = 8;

  void validate() const {
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (class_count < 2) throw ConfigError("class_count must be >= 2");
    for (int i = 0; i < 4; ++i)
      if (stage_channels[i] <= 0)
        throw ConfigError("stage_channels must be positive, got " +
                          std::to_string(stage_channels[i]) + " at stage " + std::to_string(i + 1));
    for (int i = 1; i < 4; ++i)
      if (stage_channels[i] != 2 * stage_channels[i - 1])
        throw ConfigError("stage_channels must double per stage, got " +
                          std::to_string(stage_channels[i - 1]) + " -> " +
                          std::to_string(stage_channels[i]));
    if (frm_reduction < 1) throw ConfigError("frm_reduction must be >= 1");
    for (int i = 0; i < 3; ++i)
      if (stage_channels[i] % frm_reduction != 0)
        throw ConfigError("frm_reduction " + std::to_string(frm_reduction) +
                          " must divide skip width " + std::to_string(stage_channels[i]));
  }
};

template <typename T>
struct ForwardOutput {
  Tensor<T> final_probs;               // (N, K, H, W), channel softmax
  std::vector<Tensor<T>> aux_logits;   // decoder order: 1/4, 1/2, 1/1 scale; empty unless MPGA
  Shape4 bottleneck_shape;
};

// The U-shape network: four encoders (three max-pools between them), three
// decoders with bilinear upsampling and skip concatenation, FRM on the skip
// connections, PGM on the decoder outputs, and a 1x1 softmax classifier.
template <typename T>
class Model {
 public:
  struct Stage {
    Tensor<T> conv_w, conv_b;
    Tensor<T> bn_gamma, bn_beta;
    BnStats<T> bn_stats;
  };

  static Model build(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    std::mt19937_64 rng(seed);
    const auto& sc = cfg.stage_channels;

    int in_c = cfg.in_channels;
    for (int i = 0; i < 4; ++i) {
      m.enc_[i] = make_stage(in_c, sc[i], rng);
      in_c = sc[i];
    }
    // decoder d consumes upsampled previous output and the skip from encoder 4-d
    int prev_c = sc[3];
    for (int d = 0; d < 3; ++d) {
      const int skip_c = sc[2 - d];
      m.dec_[d] = make_stage(prev_c + skip_c, skip_c, rng);
      prev_c = skip_c;
    }
    // blocks are constructed (and consume RNG draws) regardless of the
    // ablation flags so the backbone init is identical across variants
    for (int i = 0; i < 3; ++i) m.frm_[i] = FrmBlock<T>::init(sc[i], cfg.frm_reduction, rng);
    for (int d = 0; d < 3; ++d) m.pgm_[d] = PgmBlock<T>::init(sc[2 - d], cfg.class_count, rng);
    m.final_w_ = detail::he_normal<T>({cfg.class_count, sc[0], 1, 1}, rng);
    m.final_b_ = Tensor<T>::zeros({1, cfg.class_count, 1, 1});

    m.register_parameters();
    return m;
  }

  ForwardOutput<T> forward(const Tensor<T>& input, Mode mode) {
    const Shape4 s = input.shape();
    if (s.c != cfg_.in_channels)
      throw ConfigError("forward expects " + std::to_string(cfg_.in_channels) +
                        " input channel(s), got " + s.str());
    if (s.h % 8 != 0 || s.w % 8 != 0)
      throw ConfigError("forward requires H and W divisible by 8 (three pooling stages), got " +
                        s.str());

    std::array<Tensor<T>, 4> enc_out;
    Tensor<T> x = input;
    for (int i = 0; i < 4; ++i) {
      if (i > 0) x = max_pool2(x);
      x = relu(batch_norm(conv2d(x, enc_[i].conv_w, enc_[i].conv_b), enc_[i].bn_gamma,
                          enc_[i].bn_beta, enc_[i].bn_stats, mode));
      enc_out[i] = x;
    }

    ForwardOutput<T> out;
    out.bottleneck_shape = enc_out[3].shape();

    Tensor<T> d = enc_out[3];
    for (int j = 0; j < 3; ++j) {
      Tensor<T> skip = cfg_.frm_enabled ? frm_forward(frm_[2 - j], enc_out[2 - j]) : enc_out[2 - j];
      d = upsample_bilinear2(d);
      d = concat_channels(d, skip);
      d = relu(batch_norm(conv2d(d, dec_[j].conv_w, dec_[j].conv_b), dec_[j].bn_gamma,
                          dec_[j].bn_beta, dec_[j].bn_stats, mode));
      if (cfg_.mpga_enabled) {
        PgmOutput<T> p = pgm_forward(pgm_[j], d);
        out.aux_logits.push_back(p.aux_logits);
        d = p.fused;
      }
    }

    out.final_probs = softmax_channels(conv2d(d, final_w_, final_b_));
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

  Stage& encoder(int i) { return enc_[i]; }
  Stage& decoder(int i) { return dec_[i]; }
  FrmBlock<T>& frm(int i) { return frm_[i]; }
  PgmBlock<T>& pgm(int i) { return pgm_[i]; }
  Tensor<T>& final_weight() { return final_w_; }
  Tensor<T>& final_bias() { return final_b_; }

  void zero_grads() {
    for (auto& p : params_) p.value.clear_grad();
  }

 private:
  static Stage make_stage(int in_c, int out_c, std::mt19937_64& rng) {
    Stage s;
    s.conv_w = detail::he_normal<T>({out_c, in_c, 3, 3}, rng);
    s.conv_b = Tensor<T>::zeros({1, out_c, 1, 1});
    s.bn_gamma = Tensor<T>::full({1, out_c, 1, 1}, T(1));
    s.bn_beta = Tensor<T>::zeros({1, out_c, 1, 1});
    return s;
  }

  void add_param(const std::string& name, Tensor<T>& t, bool exempt) {
    for (const auto& p : params_)
      if (p.name == name) throw InternalError("duplicate parameter name " + name);
    t.set_requires_grad(true);
    params_.push_back({name, t, exempt});
  }

  void register_parameters() {
    params_.clear();
    auto add_stage = [&](const std::string& prefix, Stage& s) {
      add_param(prefix + ".conv.weight", s.conv_w, false);
      add_param(prefix + ".conv.bias", s.conv_b, true);
      add_param(prefix + ".bn.gamma", s.bn_gamma, true);
      add_param(prefix + ".bn.beta", s.bn_beta, true);
    };
    for (int i = 0; i < 4; ++i) add_stage("enc" + std::to_string(i + 1), enc_[i]);
    for (int d = 0; d < 3; ++d) add_stage("dec" + std::to_string(d + 1), dec_[d]);
    if (cfg_.frm_enabled) {
      for (int i = 0; i < 3; ++i) {
        const std::string p = "frm" + std::to_string(i + 1);
        add_param(p + ".conv_a.weight", frm_[i].conv_a_w, false);
        add_param(p + ".conv_a.bias", frm_[i].conv_a_b, true);
        add_param(p + ".conv_b.weight", frm_[i].conv_b_w, false);
        add_param(p + ".conv_b.bias", frm_[i].conv_b_b, true);
      }
    }
    if (cfg_.mpga_enabled) {
      for (int d = 0; d < 3; ++d) {
        const std::string p = "pgm" + std::to_string(d + 1);
        add_param(p + ".logits.weight", pgm_[d].logits_w, false);
        add_param(p + ".logits.bias", pgm_[d].logits_b, true);
        add_param(p + ".attn.weight", pgm_[d].attn_w, false);
        add_param(p + ".attn.bias", pgm_[d].attn_b, true);
        add_param(p + ".transform.weight", pgm_[d].transform_w, false);
        add_param(p + ".transform.bias", pgm_[d].transform_b, true);
        add_param(p + ".fuse.weight", pgm_[d].fuse_w, false);
        add_param(p + ".fuse.bias", pgm_[d].fuse_b, true);
      }
    }
    add_param("final.conv.weight", final_w_, false);
    add_param("final.conv.bias", final_b_, true);
  }

  ModelConfig cfg_;
  std::array<Stage, 4> enc_;
  std::array<Stage, 3> dec_;
  std::array<FrmBlock<T>, 3> frm_;
  std::array<PgmBlock<T>, 3> pgm_;
  Tensor<T> final_w_, final_b_;
  std::vector<Parameter<T>> params_;
};

}  // namespace mpg
