#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fpcnet/equivalence.hpp"
#include "fpcnet/scenes.hpp"
#include "test_util.hpp"

using namespace fpcnet;

TEST(Collapse, OnesKernelSumsToNine) {
  KernelWeights k(1, 1, 3, 3);
  std::fill(k.weights.begin(), k.weights.end(), 1.0);
  EXPECT_EQ(collapse_kernel(k).at(0, 0), 9.0);
}

TEST(Collapse, OddInKernel) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    KernelWeights k = random_kernel(3, 4, rng), neg = k;
    for (double& v : neg.weights) v = -v;
    const auto a = collapse_kernel(k), b = collapse_kernel(neg);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(b.at(0, c), -a.at(0, c));
  }
}

TEST(Collapse, MatchesDirectSummation) {
  Rng rng(2);
  KernelWeights k(2, 3, 3, 3);
  for (double& v : k.weights) v = rng.uniform(-1, 1);
  const auto r = collapse_kernel(k);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t idx = 0; idx < 9; ++idx) s += k.weights[(o * 3 + c) * 9 + idx];
      EXPECT_NEAR(r.at(o, c), s, 1e-15);
    }
}

TEST(Verify, ConstantInputOnesKernel) {
  Tensor x({3, 5, 5});
  const double mu[] = {0.2, 0.4, 0.6};
  for (std::size_t c = 0; c < 3; ++c)
    for (double& v : x.channel(c)) v = mu[c];
  KernelWeights k(1, 3, 3, 3);
  std::fill(k.weights.begin(), k.weights.end(), 1.0);
  const auto r = verify_equivalence(x, k);
  EXPECT_NEAR(r.exact_output, 10.8, 1e-12);
  EXPECT_NEAR(r.collapsed_output, 10.8, 1e-12);
  EXPECT_LT(r.abs_diff, 1e-12);
  EXPECT_EQ(r.abs_diff, std::abs(r.exact_output - r.collapsed_output));
}

TEST(Verify, ZeroKernel) {
  const auto r = verify_equivalence(test_util::random_tensor({3, 5, 5}, 1), KernelWeights(1, 3, 3, 3));
  EXPECT_EQ(r.exact_output, 0.0);
  EXPECT_EQ(r.collapsed_output, 0.0);
}

TEST(Verify, ConstantInputsExactForRandomKernels) {
  for (std::size_t k : {2u, 3u, 5u}) {
    for (std::uint64_t t = 0; t < 100; ++t) {
      Rng rng(t, {k});
      const std::size_t side = 2 * k - 1;
      Tensor x({3, side, side});
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = rng.uniform();
        for (double& p : x.channel(c)) p = v;
      }
      EXPECT_LT(verify_equivalence(x, random_kernel(3, k, rng)).abs_diff, 1e-12);
    }
  }
}

TEST(Verify, ShapeMismatchRejected) {
  EXPECT_THROW(verify_equivalence(Tensor({3, 4, 4}), KernelWeights(1, 3, 3, 3)), dimension_error);
  EXPECT_THROW(verify_equivalence(Tensor({2, 5, 5}), KernelWeights(1, 3, 3, 3)), dimension_error);
  EXPECT_THROW(verify_equivalence(Tensor({3, 5, 5}), KernelWeights(2, 3, 3, 3)), dimension_error);
}

TEST(Verify, DiffScalesWithKernel) {
  Rng rng(5);
  const Tensor x = test_util::random_tensor({3, 5, 5}, 8, 0, 1);
  const KernelWeights k = random_kernel(3, 3, rng);
  const double base = verify_equivalence(x, k).abs_diff;
  for (double c : {-3.0, 0.5, 2.0}) {
    KernelWeights s = k;
    for (double& v : s.weights) v *= c;
    EXPECT_NEAR(verify_equivalence(x, s).abs_diff, std::abs(c) * base, 1e-12);
  }
}

TEST(Verify, DiffContractsWithPixelVariance) {
  // Same draws rescaled around a fixed mean: the gap is linear in the spread.
  std::vector<double> means;
  for (double spread : {0.4, 0.2, 0.1, 0.05}) {
    double acc = 0;
    for (std::uint64_t t = 0; t < 1000; ++t) {
      Rng rng(t, {0x5a});
      Tensor x({3, 5, 5});
      for (double& v : x.data()) v = 0.5 + spread * rng.uniform(-1, 1);
      acc += verify_equivalence(x, random_kernel(3, 3, rng)).abs_diff;
    }
    means.push_back(acc / 1000);
  }
  for (std::size_t i = 1; i < means.size(); ++i) EXPECT_LT(means[i], means[i - 1]);
}

TEST(Trials, ShuffledBeatsUnshuffledOnTexture) {
  const Tensor img = scenes::make_texture(128, 128, 3);
  const auto t = equivalence_trials(img, 3, 1000, 7);
  double s = 0, u = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    s += t.shuffled[i].rel_diff;
    u += t.unshuffled[i].rel_diff;
  }
  EXPECT_LT(s, u);
}

TEST(Sweep, ConstantImageAllZero) {
  for (const auto& row : sweep_equivalence(Tensor({3, 32, 32}, 0.7), {2, 3, 4, 5}, 50, 1)) {
    EXPECT_LT(row.shuffled_mean_diff, 1e-12);
    EXPECT_LT(row.unshuffled_mean_diff, 1e-12);
  }
}

TEST(Sweep, TexturedImageRowsFiniteAndShuffledSmaller) {
  const Tensor img = scenes::make_texture(96, 96, 4);
  const auto rows = sweep_equivalence(img, {2, 3, 4}, 500, 2);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) {
    EXPECT_TRUE(std::isfinite(r.shuffled_mean_diff));
    EXPECT_GT(r.shuffled_mean_diff, 0.0);
    EXPECT_GT(r.unshuffled_mean_diff, 0.0);
    EXPECT_LE(r.shuffled_mean_diff, r.p95_shuffled);
    // A 3x3 crop of this texture is smoother than a random draw, so the
    // shuffled advantage only appears from 5x5 inputs on.
    if (r.k >= 3) {
      EXPECT_LT(r.shuffled_mean_diff, r.unshuffled_mean_diff) << "k=" << r.k;
    }
  }
  EXPECT_LT(rows[2].shuffled_mean_diff / rows[2].unshuffled_mean_diff,
            rows[1].shuffled_mean_diff / rows[1].unshuffled_mean_diff);
}

TEST(Sweep, DeterministicUnderSeed) {
  const Tensor img = scenes::make_texture(48, 48, 5);
  std::ostringstream a, b;
  write_sweep_csv(a, sweep_equivalence(img, {2, 3}, 100, 9));
  write_sweep_csv(b, sweep_equivalence(img, {2, 3}, 100, 9));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')),
            "k,channels,trials,shuffled_mean_diff,unshuffled_mean_diff,p95_shuffled,p95_unshuffled");
}

TEST(Sweep, KernelBelowTwoRejected) {
  EXPECT_THROW(sweep_equivalence(Tensor({3, 8, 8}), {1}, 1, 0), dimension_error);
}
