#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mpg/blocks.hpp"
#include "oracles.hpp"

using namespace mpg;
using testing_oracles::frm_reference;
using testing_oracles::pgm_reference;
using testing_oracles::random_tensor;

TEST_CASE("frm gate collapses to 0.5 when the expansion conv is zero") {
  std::mt19937_64 rng(1);
  auto blk = FrmBlock<double>::init(8, 4, rng);
  for (long i = 0; i < blk.conv_b_w.size(); ++i) blk.conv_b_w.data()[i] = 0.0;
  for (long i = 0; i < blk.conv_b_b.size(); ++i) blk.conv_b_b.data()[i] = 0.0;
  auto f = random_tensor({2, 8, 4, 4}, 2);
  auto out = frm_forward(blk, f);
  for (long i = 0; i < f.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(0.5 * f.data()[i]).epsilon(1e-12));
}

TEST_CASE("global average of a constant channel is that constant exactly") {
  auto f = Tensor<double>::zeros({1, 4, 4, 8});
  const double vals[4] = {0.375, -1.25, 2.0, 0.5};
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 8; ++x) f.at(0, c, y, x) = vals[c];
  auto g = global_avg_pool(f);
  for (int c = 0; c < 4; ++c) CHECK(g.at(0, c, 0, 0) == vals[c]);
}

TEST_CASE("frm matches the straight-line reference on 20 random instances") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    auto blk = FrmBlock<double>::init(8, 4, rng);
    auto f = random_tensor({2, 8, 5, 7}, 200 + seed);
    auto got = frm_forward(blk, f);
    auto want = frm_reference(blk, f);
    double worst = 0.0;
    for (long i = 0; i < got.size(); ++i)
      worst = std::max(worst, std::abs(got.data()[i] - want.data()[i]));
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("frm gate is bounded and never amplifies a channel") {
  std::mt19937_64 rng(3);
  auto blk = FrmBlock<double>::init(16, 8, rng);
  auto f = random_tensor({2, 16, 6, 6}, 4, 3.0);
  auto out = frm_forward(blk, f);
  for (long i = 0; i < f.size(); ++i) CHECK(std::abs(out.data()[i]) <= std::abs(f.data()[i]));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 16; ++c) {
      double mf = 0.0, mo = 0.0;
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) {
          mf = std::max(mf, std::abs(f.at(n, c, y, x)));
          mo = std::max(mo, std::abs(out.at(n, c, y, x)));
        }
      CHECK(mo <= mf);
    }
}

TEST_CASE("frm gate is invariant to row duplication (mean, not sum)") {
  std::mt19937_64 rng(5);
  auto blk = FrmBlock<double>::init(8, 4, rng);
  auto f = random_tensor({1, 8, 3, 5}, 6);
  for (long i = 0; i < f.size(); ++i)
    if (std::abs(f.data()[i]) < 1e-3) f.data()[i] = 0.01;

  auto fdup = Tensor<double>::zeros({1, 8, 6, 5});
  for (int c = 0; c < 8; ++c)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 5; ++x) {
        fdup.at(0, c, 2 * y, x) = f.at(0, c, y, x);
        fdup.at(0, c, 2 * y + 1, x) = f.at(0, c, y, x);
      }
  auto a = frm_forward(blk, f);
  auto b = frm_forward(blk, fdup);
  for (int c = 0; c < 8; ++c) {
    const double gate_a = a.at(0, c, 0, 0) / f.at(0, c, 0, 0);
    const double gate_b = b.at(0, c, 0, 0) / fdup.at(0, c, 0, 0);
    CHECK(gate_a == doctest::Approx(gate_b).epsilon(1e-9));
  }
}

TEST_CASE("pgm residual identity: zero transform plus identity fuse is a no-op") {
  std::mt19937_64 rng(7);
  auto blk = PgmBlock<double>::init(6, 8, rng);
  for (long i = 0; i < blk.transform_w.size(); ++i) blk.transform_w.data()[i] = 0.0;
  for (long i = 0; i < blk.transform_b.size(); ++i) blk.transform_b.data()[i] = 0.0;
  for (long i = 0; i < blk.fuse_w.size(); ++i) blk.fuse_w.data()[i] = 0.0;
  for (int c = 0; c < 6; ++c) blk.fuse_w.at(c, c, 0, 0) = 1.0;
  for (long i = 0; i < blk.fuse_b.size(); ++i) blk.fuse_b.data()[i] = 0.0;

  auto fd = random_tensor({2, 6, 4, 4}, 8);
  auto out = pgm_forward(blk, fd);
  for (long i = 0; i < fd.size(); ++i) CHECK(out.fused.data()[i] == fd.data()[i]);
}

TEST_CASE("pgm aux logits carry K channels") {
  std::mt19937_64 rng(9);
  auto blk = PgmBlock<double>::init(16, 8, rng);
  auto fd = random_tensor({2, 16, 4, 6}, 10);
  auto out = pgm_forward(blk, fd);
  CHECK(out.aux_logits.shape() == Shape4{2, 8, 4, 6});
  CHECK(out.fused.shape() == fd.shape());
}

TEST_CASE("pgm matches the straight-line reference on 20 random instances") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(300 + seed);
    auto blk = PgmBlock<double>::init(8, 8, rng);
    auto fd = random_tensor({2, 8, 4, 5}, 400 + seed);
    auto got = pgm_forward(blk, fd);
    Tensor<double> fused, logits;
    pgm_reference(blk, fd, fused, logits);
    double worst = 0.0;
    for (long i = 0; i < fused.size(); ++i)
      worst = std::max(worst, std::abs(got.fused.data()[i] - fused.data()[i]));
    for (long i = 0; i < logits.size(); ++i)
      worst = std::max(worst, std::abs(got.aux_logits.data()[i] - logits.data()[i]));
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("gradients reach every frm and pgm parameter") {
  std::mt19937_64 rng(11);
  auto frm = FrmBlock<double>::init(8, 4, rng);
  auto pgm = PgmBlock<double>::init(8, 4, rng);
  std::vector<Tensor<double>*> params = {&frm.conv_a_w,      &frm.conv_a_b, &frm.conv_b_w,
                                         &frm.conv_b_b,      &pgm.logits_w, &pgm.logits_b,
                                         &pgm.attn_w,        &pgm.attn_b,   &pgm.transform_w,
                                         &pgm.transform_b,   &pgm.fuse_w,   &pgm.fuse_b};
  for (auto* p : params) p->set_requires_grad(true);

  auto f = random_tensor({2, 8, 4, 4}, 12);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto refined = frm_forward(frm, f);
    auto out = pgm_forward(pgm, refined);
    auto loss = elementwise_add(sum_all(elementwise_mul(out.fused, out.fused)),
                                sum_all(elementwise_mul(out.aux_logits, out.aux_logits)));
    tape.backward(loss);
  }
  for (auto* p : params) {
    REQUIRE(p->has_grad());
    double norm = 0.0;
    for (double g : p->grad_vector()) {
      CHECK(std::isfinite(g));
      norm += g * g;
    }
    CHECK(norm > 0.0);
  }
}

TEST_CASE("blocks reject channel mismatches and bad configs") {
  std::mt19937_64 rng(13);
  auto frm = FrmBlock<double>::init(8, 4, rng);
  CHECK_THROWS_AS(frm_forward(frm, Tensor<double>::zeros({1, 4, 4, 4})), ConfigError);
  auto pgm = PgmBlock<double>::init(8, 4, rng);
  CHECK_THROWS_AS(pgm_forward(pgm, Tensor<double>::zeros({1, 4, 4, 4})), ConfigError);
  CHECK_THROWS_AS(FrmBlock<double>::init(8, 3, rng), ConfigError);  // 8 % 3 != 0
  CHECK_THROWS_AS(PgmBlock<double>::init(8, 1, rng), ConfigError);  // K < 2
}
