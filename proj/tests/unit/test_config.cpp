#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "rrlab/config.hpp"
#include "rrlab/experiment.hpp"

using namespace rrlab;
namespace fs = std::filesystem;

TEST(Profiles, PublishedSettings) {
  const auto svhn_aug = profile_config("svhn+");
  EXPECT_EQ(svhn_aug.train.rho_roi, 0.9);
  EXPECT_EQ(svhn_aug.train.lambda, 0.5);
  EXPECT_EQ(svhn_aug.train.block_rows, 4);
  EXPECT_EQ(svhn_aug.train.block_cols, 4);
  EXPECT_EQ(svhn_aug.train.vat.epsilon, 3.5);
  EXPECT_EQ(svhn_aug.train.schedule.n_update, 48000u);
  EXPECT_EQ(svhn_aug.train.schedule.n_decay, 16000u);

  const auto cifar = profile_config("cifar10");
  EXPECT_EQ(cifar.train.rho_roi, 1.5);
  EXPECT_EQ(cifar.train.lambda, 0.5);
  EXPECT_EQ(cifar.train.block_rows, 4);
  EXPECT_EQ(cifar.train.vat.epsilon, 10.0);
  EXPECT_TRUE(cifar.zca);
  EXPECT_EQ(cifar.train.schedule.n_update, 200000u);

  EXPECT_EQ(profile_config("svhn").train.vat.epsilon, 2.5);
  EXPECT_EQ(profile_config("cifar10+").train.vat.epsilon, 8.0);
  EXPECT_EQ(profile_config("cifar10+").resolved_protocol(), Protocol::Error4);
  EXPECT_EQ(profile_config("svhn+").resolved_protocol(), Protocol::Error3);
  for (const auto& name : profile_names()) EXPECT_NO_THROW(profile_config(name).validate()) << name;
  EXPECT_THROW(profile_config("mnist"), std::invalid_argument);
  EXPECT_THROW(parse_config("profile = mnist\n"), ConfigError);
}

TEST(Parse, OverridesAndRoundTrip) {
  const auto c = parse_config(
      "# comment\nprofile = svhn\n[train]\nloss = VAT+ENT\nepsilon = 1.25\nblock = 2x4\n[run]\nseeds = 3, 4\n");
  EXPECT_EQ(c.train.terms, LossTerms::parse("VAT+ENT"));
  EXPECT_EQ(c.train.vat.epsilon, 1.25);
  EXPECT_EQ(c.train.block_rows, 2);
  EXPECT_EQ(c.train.block_cols, 4);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_EQ(c.train.rho_roi, 0.9);
  const auto again = parse_config(c.to_text());
  EXPECT_EQ(again.to_text(), c.to_text());
}

TEST(Parse, ErrorsNameTheLine) {
  auto line_of = [](const std::string& text) {
    try {
      parse_config(text, "t.ini");
    } catch (const ConfigError& e) {
      return e.line();
    }
    return std::size_t{9999};
  };
  EXPECT_EQ(line_of("profile = glyph\n[train]\n\nbogus = 1\n"), 4u);
  EXPECT_EQ(line_of("[nosuch]\n"), 1u);
  EXPECT_EQ(line_of("[train]\nepsilon = abc\n"), 2u);
  EXPECT_EQ(line_of("[train]\nepsilon 3\n"), 2u);
  try {
    parse_config("[train]\n\nbogus = 1\n", "t.ini");
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("t.ini:3"), std::string::npos);
  }
}

TEST(Parse, ValidationFailures) {
  EXPECT_THROW(parse_config("[train]\nlambda = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nseeds =\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nroi_weight = label-probability\n[split]\nunlabeled = 10\n"), ConfigError);
}

TEST(Environment, SeedOverride) {
  ExperimentConfig c = profile_config("glyph");
  ::setenv("RRLAB_SEED", "42", 1);
  apply_environment(c);
  ::unsetenv("RRLAB_SEED");
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{42}));
}

TEST(Experiment, MissingDatasetIsConfigError) {
  ExperimentConfig c = profile_config("glyph");
  c.train_path = "/nonexistent/train.rrds";
  c.test_path = "/nonexistent/test.rrds";
  try {
    prepare_data(c, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/train.rrds"), std::string::npos);
  }
}

TEST(Experiment, SingleRunWritesArtifactsAndReproduces) {
  ExperimentConfig c = profile_config("glyph");
  c.labels_per_class = 4;
  c.validation = 8;
  c.unlabeled = 80;
  c.train.m_l = 8;
  c.train.m_ul = 16;
  c.train.schedule.n_update = 5;
  c.train.schedule.n_decay = 2;
  c.train.log_every = 2;
  c.refresh_batch = 16;
  GlyphSpec g;
  g.per_class = 40;
  const Dataset train = generate_synthetic(g);
  g.seed = 2;
  g.per_class = 10;
  const Dataset test = generate_synthetic(g);
  const PreparedData data = prepare_data(c, train, test, 1);
  const fs::path dir = fs::temp_directory_path() / "rrlab-unit-run";
  fs::remove_all(dir);
  const RunResult a = run_single(c, data, 1, dir);
  for (const char* f : {"manifest.txt", "metrics.csv", "summary.csv", "checkpoints/final.ckpt", "checkpoints/refreshed.ckpt"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const RunResult b = run_single(c, prepare_data(c, train, test, 1), 1);
  EXPECT_EQ(a.weights_digest, b.weights_digest);
  EXPECT_EQ(a.eval.stats_digest, b.eval.stats_digest);
  EXPECT_EQ(a.refresh.forward_passes, 60u);
}

TEST(Experiment, SweepValidatesInputs) {
  ExperimentConfig c = profile_config("glyph");
  GlyphSpec g;
  const Dataset d = generate_synthetic(g);
  c.in_classes = {0, 1};
  c.unlabeled = 50;
  c.seeds.clear();
  EXPECT_THROW(mismatch_sweep(c, d, d), std::invalid_argument);
}

TEST(Summary, MeanAndSampleStd) {
  const auto [m, s] = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-15);
}
