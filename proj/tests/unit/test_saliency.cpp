#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rrlab/network.hpp"
#include "rrlab/saliency.hpp"

using namespace rrlab;

namespace {

// Independent oracle: lexicographic (value, index) sort, then the shortest
// prefix whose sum reaches lambda.
std::vector<std::size_t> brute_force_mask(const std::vector<double>& r2d, double lambda) {
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t q = 0; q < r2d.size(); ++q) keyed.emplace_back(r2d[q], q);
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::size_t> out;
  double prefix = 0.0;
  for (const auto& [v, q] : keyed) {
    if (prefix >= lambda) break;
    out.push_back(q);
    prefix += v;
  }
  return out;
}

std::vector<double> random_map(Rng& rng, std::size_t q, bool quantized) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> m(q);
  for (auto& v : m) v = quantized ? std::floor(u(rng) * 4.0) + 1.0 : u(rng);
  const double s = std::accumulate(m.begin(), m.end(), 0.0);
  for (auto& v : m) v /= s;
  return m;
}

}  // namespace

TEST(BlockPartition, GridTilesExactlyWithRemainder) {
  const auto p = BlockPartition::grid(10, 7, 4, 3);
  EXPECT_EQ(p.size(), 2u * 2u);
  std::vector<int> covered(70, 0);
  for (const Block& b : p.blocks()) {
    for (int r = b.row0; r < b.row0 + b.rows; ++r) {
      for (int c = b.col0; c < b.col0 + b.cols; ++c) ++covered[static_cast<std::size_t>(r * 7 + c)];
    }
  }
  EXPECT_TRUE(std::all_of(covered.begin(), covered.end(), [](int v) { return v == 1; }));
  EXPECT_EQ(p[3].rows, 6);
  EXPECT_EQ(p[3].cols, 4);
  EXPECT_EQ(p.block_of(9, 6), 3u);
}

TEST(BlockPartition, EighthsOfSixteen) {
  const auto p = BlockPartition::eighths(16, 16);
  EXPECT_EQ(p.size(), 64u);
  EXPECT_EQ(p.block_rows(), 2);
}

TEST(SelectMask, MatchesBruteForceIncludingTies) {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const auto m = random_map(rng, 64, trial % 2 == 0);
    for (double lambda : {0.05, 0.3, 0.5, 0.9}) {
      EXPECT_EQ(select_mask(m, lambda).blocks, brute_force_mask(m, lambda)) << "trial " << trial;
    }
  }
}

TEST(SelectMask, RejectsLambdaOutsideOpenInterval) {
  const std::vector<double> m{0.5, 0.5};
  EXPECT_THROW(select_mask(m, 0.0), std::invalid_argument);
  EXPECT_THROW(select_mask(m, 1.0), std::invalid_argument);
}

TEST(SelectMask, HandWorkedExample) {
  const std::vector<double> m{0.4, 0.1, 0.2, 0.1, 0.2};
  const auto r = select_mask(m, 0.35);
  EXPECT_EQ(r.blocks, (std::vector<std::size_t>{1, 3, 2}));
  EXPECT_NEAR(r.mass, 0.4, 1e-15);
}

TEST(PixelStats, MatchesTwoPassPopulationStatistics) {
  Rng rng(5);
  std::normal_distribution<float> g(3.0f, 2.0f);
  Tensor<float> images({50, 3, 2, 2});
  for (auto& v : images.data) v = g(rng);
  const PixelStats s = compute_pixel_stats(images);
  const std::size_t per = 12;
  for (std::size_t j = 0; j < per; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 50; ++i) mean += images[i * per + j];
    mean /= 50.0;
    double var = 0.0;
    for (std::size_t i = 0; i < 50; ++i) var += (images[i * per + j] - mean) * (images[i * per + j] - mean);
    var /= 50.0;
    EXPECT_NEAR(s.mean[j], mean, 1e-5);
    EXPECT_NEAR(s.stddev[j], std::sqrt(var), 1e-5);
  }
}

TEST(ApplyMask, OutsideRegionIsBitExactAndInsideIsBounded) {
  Rng rng(2);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Tensor<float> images({20, 8, 8, 3});
  for (auto& v : images.data) v = u(rng);
  const PixelStats stats = compute_pixel_stats(images);
  const auto partition = BlockPartition::grid(8, 8, 2, 2);
  const Tensor<float> x = slice_sample(images, 0);
  const auto region = select_mask(random_map(rng, partition.size(), false), 0.5);
  const Tensor<float> y = apply_mask(x, region, partition, stats, rng);
  const auto bits = mask_bitmap(region, partition);
  for (std::size_t p = 0; p < 64; ++p) {
    for (std::size_t d = 0; d < 3; ++d) {
      const std::size_t i = p * 3 + d;
      if (bits[p] == 0) {
        EXPECT_EQ(y[i], x[i]);
      } else {
        EXPECT_LE(std::abs(y[i] - stats.mean[i]), stats.stddev[i] * (1.0f + 1e-6f));
      }
    }
  }
}

TEST(Sensitivity, MapsAreNormalized) {
  const auto spec = ArchitectureSpec::conv_tiny(16, 16, 1, 4);
  const auto model = build_model<double>(spec, 3);
  Rng rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> batch({5, 16, 16, 1});
  for (auto& v : batch.data) v = u(rng);
  ForwardOptions opts;
  auto maps = pixel_sensitivity(model_probability_fn(model, opts), batch);
  const auto partition = BlockPartition::eighths(16, 16);
  for (auto& m : maps) {
    double l1 = 0.0;
    for (double v : m.r3d) l1 += std::abs(v);
    EXPECT_NEAR(l1, 1.0, 1e-9);
    block_sensitivity(m, partition);
    EXPECT_NEAR(std::accumulate(m.r2d.begin(), m.r2d.end(), 0.0), 1.0, 1e-9);
  }
}

TEST(Sensitivity, ZeroGradientGivesUniformBlocks) {
  SensitivityMap m;
  m.shape = {4, 4, 1};
  m.r3d.assign(16, 0.0);
  m.zero_gradient = true;
  block_sensitivity(m, BlockPartition::grid(4, 4, 2, 2));
  for (double v : m.r2d) EXPECT_DOUBLE_EQ(v, 0.25);
}
