#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "mpg/losses.hpp"
#include "mpg/model.hpp"

using namespace mpg;

namespace {

// Closed-form parameter count, written independently of the builder.
long expected_param_count(const ModelConfig& cfg) {
  const auto& s = cfg.stage_channels;
  const int K = cfg.class_count;
  long total = 0;
  auto stage = [](long in, long out) { return out * in * 9 + out + 2 * out; };
  total += stage(cfg.in_channels, s[0]) + stage(s[0], s[1]) + stage(s[1], s[2]) +
           stage(s[2], s[3]);
  total += stage(s[3] + s[2], s[2]) + stage(s[2] + s[1], s[1]) + stage(s[1] + s[0], s[0]);
  if (cfg.frm_enabled)
    for (int i = 0; i < 3; ++i) {
      const long c = s[i], mid = c / cfg.frm_reduction;
      total += mid * c + mid + c * mid + c;
    }
  if (cfg.mpga_enabled)
    for (int d = 0; d < 3; ++d) {
      const long c = s[2 - d];
      total += K * c + K;      // logits
      total += c * K + c;      // attn
      total += 2 * (c * c + c);  // transform + fuse
    }
  total += K * s[0] + K;  // final classifier
  return total;
}

long actual_param_count(Model<float>& m) {
  long total = 0;
  for (const auto& p : m.parameters()) total += p.value.size();
  return total;
}

Tensor<float> random_input(Shape4 s, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  auto t = Tensor<float>::zeros(s);
  for (long i = 0; i < t.size(); ++i) t.data()[i] = d(rng);
  return t;
}

LabelMap random_labels(int n, int h, int w, int K, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, K - 1);
  LabelMap m = LabelMap::zeros(n, h, w);
  for (auto& v : m.v) v = d(rng);
  return m;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.stage_channels = {4, 8, 16, 32};
  cfg.frm_reduction = 4;
  return cfg;
}

}  // namespace

TEST_CASE("parameter count matches the closed-form sum") {
  for (const char* variant : {"full", "baseline", "frm", "mpga"}) {
    ModelConfig cfg;  // default 32/64/128/256
    cfg.frm_enabled = std::string(variant) == "full" || std::string(variant) == "frm";
    cfg.mpga_enabled = std::string(variant) == "full" || std::string(variant) == "mpga";
    auto m = Model<float>::build(cfg, 1);
    CHECK(actual_param_count(m) == expected_param_count(cfg));
  }
  ModelConfig a3;
  a3.stage_channels = {16, 32, 64, 128};
  auto m = Model<float>::build(a3, 1);
  CHECK(actual_param_count(m) == expected_param_count(a3));
}

TEST_CASE("baseline strips the attention parameters") {
  ModelConfig full = small_config();
  ModelConfig base = small_config();
  base.frm_enabled = false;
  base.mpga_enabled = false;
  auto mf = Model<float>::build(full, 1);
  auto mb = Model<float>::build(base, 1);
  CHECK(actual_param_count(mb) < actual_param_count(mf));
  for (const auto& p : mb.parameters()) {
    CHECK(p.name.find("frm") == std::string::npos);
    CHECK(p.name.find("pgm") == std::string::npos);
  }
}

TEST_CASE("parameter names are unique and biases/bn are weight-decay exempt") {
  auto m = Model<float>::build(small_config(), 3);
  std::set<std::string> names;
  for (const auto& p : m.parameters()) {
    CHECK(names.insert(p.name).second);
    const bool is_exempt_kind = p.name.ends_with(".bias") || p.name.ends_with(".gamma") ||
                                p.name.ends_with(".beta");
    CHECK(p.weight_decay_exempt == is_exempt_kind);
  }
}

TEST_CASE("same seed builds identical parameters") {
  auto a = Model<float>::build(small_config(), 42);
  auto b = Model<float>::build(small_config(), 42);
  auto c = Model<float>::build(small_config(), 43);
  REQUIRE(a.parameters().size() == b.parameters().size());
  bool any_diff_c = false;
  for (size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& pa = a.parameters()[i].value;
    const auto& pb = b.parameters()[i].value;
    const auto& pc = c.parameters()[i].value;
    for (long j = 0; j < pa.size(); ++j) {
      CHECK(pa.data()[j] == pb.data()[j]);
      if (pa.data()[j] != pc.data()[j]) any_diff_c = true;
    }
  }
  CHECK(any_diff_c);
}

TEST_CASE("forward shapes: final probs plus aux heads at 1/4, 1/2, 1/1") {
  auto m = Model<float>::build(small_config(), 5);
  auto out = m.forward(random_input({2, 1, 64, 128}, 6), Mode::kTrain);
  CHECK(out.final_probs.shape() == Shape4{2, 8, 64, 128});
  REQUIRE(out.aux_logits.size() == 3);
  CHECK(out.aux_logits[0].shape() == Shape4{2, 8, 16, 32});
  CHECK(out.aux_logits[1].shape() == Shape4{2, 8, 32, 64});
  CHECK(out.aux_logits[2].shape() == Shape4{2, 8, 64, 128});
  CHECK(out.bottleneck_shape.h == 8);
  CHECK(out.bottleneck_shape.w == 16);
}

TEST_CASE("final probabilities sum to one per pixel in both modes") {
  auto m = Model<float>::build(small_config(), 7);
  auto x = random_input({1, 1, 16, 24}, 8);
  auto check_sums = [](const Tensor<float>& probs) {
    const Shape4 s = probs.shape();
    for (int y = 0; y < s.h; ++y)
      for (int xx = 0; xx < s.w; ++xx) {
        double sum = 0.0;
        for (int c = 0; c < s.c; ++c) sum += probs.at(0, c, y, xx);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
      }
  };
  check_sums(m.forward(x, Mode::kTrain).final_probs);
  check_sums(m.forward(x, Mode::kEval).final_probs);
}

TEST_CASE("eval-mode forward is deterministic") {
  auto m = Model<float>::build(small_config(), 9);
  auto x = random_input({1, 1, 16, 16}, 10);
  m.forward(x, Mode::kTrain);  // populate running stats
  auto a = m.forward(x, Mode::kEval).final_probs;
  auto b = m.forward(x, Mode::kEval).final_probs;
  for (long i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("disabled blocks are bypassed, not zeroed") {
  ModelConfig cfg = small_config();
  cfg.frm_enabled = false;
  cfg.mpga_enabled = false;
  auto m = Model<float>::build(cfg, 11);
  auto x = random_input({1, 1, 16, 16}, 12);
  auto before = m.forward(x, Mode::kTrain).final_probs;

  std::mt19937_64 rng(13);
  std::normal_distribution<float> d(0.0f, 10.0f);
  for (int i = 0; i < 3; ++i) {
    for (long j = 0; j < m.frm(i).conv_a_w.size(); ++j) m.frm(i).conv_a_w.data()[j] = d(rng);
    for (long j = 0; j < m.frm(i).conv_b_w.size(); ++j) m.frm(i).conv_b_w.data()[j] = d(rng);
    for (long j = 0; j < m.pgm(i).transform_w.size(); ++j) m.pgm(i).transform_w.data()[j] = d(rng);
    for (long j = 0; j < m.pgm(i).fuse_w.size(); ++j) m.pgm(i).fuse_w.data()[j] = d(rng);
  }
  auto after = m.forward(x, Mode::kTrain).final_probs;
  for (long i = 0; i < before.size(); ++i) CHECK(before.data()[i] == after.data()[i]);
  CHECK(m.forward(x, Mode::kTrain).aux_logits.empty());
}

TEST_CASE("every parameter receives a finite nonzero gradient") {
  auto m = Model<float>::build(small_config(), 15);
  auto x = random_input({2, 1, 16, 16}, 16);
  auto labels = random_labels(2, 16, 16, 8, 17);
  Tape<float> tape;
  {
    TapeScope<float> scope(tape);
    auto out = m.forward(x, Mode::kTrain);
    auto loss = joint_loss(out, labels, {1.0, 0.5});
    tape.backward(loss);
  }
  for (auto& p : m.parameters()) {
    INFO("parameter ", p.name);
    REQUIRE(p.value.has_grad());
    double norm = 0.0;
    for (float g : p.value.grad_vector()) {
      CHECK(std::isfinite(g));
      norm += static_cast<double>(g) * g;
    }
    CHECK(norm > 0.0);
  }
}

TEST_CASE("decoder convs consume upsampled-previous plus frm-refined skip channels") {
  auto m = Model<float>::build(small_config(), 18);
  const auto& s = small_config().stage_channels;
  CHECK(m.decoder(0).conv_w.shape() == Shape4{s[2], s[3] + s[2], 3, 3});
  CHECK(m.decoder(1).conv_w.shape() == Shape4{s[1], s[2] + s[1], 3, 3});
  CHECK(m.decoder(2).conv_w.shape() == Shape4{s[0], s[1] + s[0], 3, 3});
  CHECK(m.frm(0).channels == s[0]);
  CHECK(m.frm(1).channels == s[1]);
  CHECK(m.frm(2).channels == s[2]);
}

TEST_CASE("config and input validation") {
  ModelConfig bad = small_config();
  bad.stage_channels = {4, 8, 15, 32};
  CHECK_THROWS_AS(Model<float>::build(bad, 1), ConfigError);

  ModelConfig badk = small_config();
  badk.class_count = 1;
  CHECK_THROWS_AS(Model<float>::build(badk, 1), ConfigError);

  ModelConfig badr = small_config();
  badr.frm_reduction = 3;
  CHECK_THROWS_AS(Model<float>::build(badr, 1), ConfigError);

  auto m = Model<float>::build(small_config(), 1);
  try {
    m.forward(Tensor<float>::zeros({1, 1, 20, 16}), Mode::kTrain);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("divisible by 8") != std::string::npos);
  }
  CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({1, 2, 16, 16}), Mode::kTrain), ConfigError);
}
