#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "rrlab/bn_eval.hpp"
#include "rrlab/trainer.hpp"

using namespace rrlab;

namespace {

struct Fixture {
  Splits splits;
  PixelStats stats;

  explicit Fixture(std::uint64_t seed = 1) {
    GlyphSpec g;
    g.per_class = 60;
    Dataset src = generate_synthetic(g);
    scale_to_unit_range(src);
    SplitPlan plan;
    plan.labels_per_class = 4;
    plan.validation = 0;
    plan.unlabeled = 100;
    plan.seed = seed;
    splits = build_splits(src, plan);
    stats = compute_pixel_stats(splits.unlabeled.images);
  }
  TrainData data() const { return TrainData{&splits.labeled, &splits.unlabeled, nullptr, stats}; }
};

TrainConfig tiny_config(const std::string& loss) {
  TrainConfig c;
  c.terms = LossTerms::parse(loss);
  c.m_l = 8;
  c.m_ul = 16;
  c.block_rows = c.block_cols = 4;
  c.schedule.n_update = 6;
  c.schedule.n_decay = 2;
  return c;
}

}  // namespace

TEST(Schedule, BoundaryPoints) {
  AdamSchedule s;
  EXPECT_EQ(s.learning_rate(1), 0.001);
  EXPECT_EQ(s.learning_rate(32000), 0.001);
  EXPECT_EQ(s.learning_rate(40000), 0.0005);
  EXPECT_EQ(s.learning_rate(48000), 0.0);
  EXPECT_EQ(s.beta1(32000), 0.9);
  EXPECT_EQ(s.beta1(32001), 0.5);
  EXPECT_EQ(s.beta1(48000), 0.5);
  AdamSchedule bad;
  bad.n_decay = 50000;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  ModelState<float> m;
  m.params.push_back(Tensor<float>({3}, std::vector<float>{1.0f, 2.0f, 3.0f}));
  Adam adam(m);
  AdamSchedule s;
  adam.update(m, {Tensor<float>({3}, std::vector<float>{0.5f, -2.0f, 0.0f})}, s, 1);
  EXPECT_NEAR(m.params[0][0], 1.0f - 0.001f, 1e-6);
  EXPECT_NEAR(m.params[0][1], 2.0f + 0.001f, 1e-6);
  EXPECT_EQ(m.params[0][2], 3.0f);
}

TEST(Trainer, SameSeedSameTrajectory) {
  const Fixture f;
  auto run = [&] {
    ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 2);
    run_schedule(m, f.data(), tiny_config("VAT+ROIreg+ENT"));
    return std::make_pair(m.weights_digest(), m.stats_digest());
  };
  EXPECT_EQ(run(), run());
}

TEST(Trainer, ZeroRoiWeightReducesToVatEnt) {
  const Fixture f;
  auto run = [&](const std::string& loss, double rho) {
    ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 2);
    TrainConfig c = tiny_config(loss);
    c.rho_roi = rho;
    run_schedule(m, f.data(), c);
    return std::make_pair(m.weights_digest(), m.stats_digest());
  };
  EXPECT_EQ(run("VAT+ROIreg+ENT", 0.0), run("VAT+ENT", 1.0));
  EXPECT_NE(run("VAT+ROIreg+ENT", 1.0), run("VAT+ENT", 1.0));
}

TEST(Trainer, StepReportsEnabledTerms) {
  const Fixture f;
  ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 3);
  TrainConfig c = tiny_config("VAT+ROIreg+ENT+ROIaug");
  Trainer t(m, f.data(), c);
  const StepReport r = t.step();
  EXPECT_EQ(r.step, 1u);
  EXPECT_GT(r.losses.ce, 0.0);
  EXPECT_GT(r.losses.vat, 0.0);
  EXPECT_GT(r.losses.roireg, 0.0);
  EXPECT_GT(r.losses.ent, 0.0);
  EXPECT_GT(r.losses.roiaug, 0.0);
  EXPECT_NEAR(r.losses.total, r.losses.ce + r.losses.vat + r.losses.roireg + r.losses.ent + r.losses.roiaug, 1e-5);
  EXPECT_EQ(m.step, 1u);
}

TEST(Trainer, NonFiniteLossIsReported) {
  Fixture f;
  f.splits.labeled.images[0] = std::numeric_limits<float>::infinity();
  ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 3);
  TrainConfig c = tiny_config("CE");
  c.m_l = static_cast<std::size_t>(f.splits.labeled.size());
  Trainer t(m, f.data(), c);
  EXPECT_THROW(t.step(), TrainingDiverged);
}

TEST(Refresh, EmaResidualWeightAfterSixtyPasses) {
  GlyphSpec g;
  g.per_class = 1;
  Dataset one = generate_synthetic(g);
  scale_to_unit_range(one);
  // Every batch holds copies of one image, so every batch has the same statistics.
  Dataset same = one.subset(std::vector<std::size_t>(64, 0));
  ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 1);
  const float start = 1000.0f;
  for (auto& rm : m.running_mean) std::fill(rm.begin(), rm.end(), start);

  ModelState<float> probe = m;
  ad::Tape<float> tape;
  std::vector<ad::BatchStats<float>> batch;
  forward_logits(probe, bind_model(probe, tape, false), tape.constant(same.gather({0, 1})), ForwardOptions{true, false, false, 0},
                 &batch);
  const double target = batch[0].mean[0];

  RefreshPlan plan;
  plan.protocol = Protocol::Error2;
  plan.batch_size = 32;
  const RefreshReport r = refresh_bn(m, plan, same, RefreshInputs{});
  EXPECT_EQ(r.forward_passes, 60u);
  const double residual = (m.running_mean[0][0] - target) / (start - target);
  EXPECT_NEAR(residual, std::pow(0.9, 60), 1e-6);
  EXPECT_NEAR(std::pow(0.9, 60), 0.00180, 5e-6);
}

TEST(Refresh, EveryProtocolRunsSixtyPasses) {
  const Fixture f;
  for (Protocol p : {Protocol::Error2, Protocol::Error3, Protocol::Error4}) {
    ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 1);
    RefreshPlan plan;
    plan.protocol = p;
    plan.batch_size = 8;
    AugmentationPolicy aug;
    aug.max_translation = 2;
    const auto r = refresh_bn(m, plan, f.splits.labeled, RefreshInputs{BlockPartition::grid(16, 16, 4, 4), f.stats, 0.5, aug});
    EXPECT_EQ(r.forward_passes, 60u) << protocol_name(p);
    EXPECT_EQ(r.masked_batches, p == Protocol::Error3 ? 30u : 0u);
  }
}

TEST(Refresh, Error4WithoutAugmentationIsRejected) {
  const Fixture f;
  ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 1);
  RefreshPlan plan;
  plan.protocol = Protocol::Error4;
  EXPECT_THROW(refresh_bn(m, plan, f.splits.labeled, RefreshInputs{}), std::invalid_argument);
}

TEST(Evaluate, IsPure) {
  const Fixture f;
  const ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 1);
  const auto before = m.stats_digest();
  const auto a = evaluate(m, f.splits.labeled, Protocol::Error3);
  const auto b = evaluate(m, f.splits.labeled, Protocol::Error3);
  EXPECT_EQ(m.stats_digest(), before);
  EXPECT_EQ(a.error_rate, b.error_rate);
  EXPECT_EQ(a.samples, f.splits.labeled.size());
}

TEST(Protocols, DefaultTable) {
  EXPECT_EQ(default_protocol(false, false), Protocol::Error3);
  EXPECT_EQ(default_protocol(false, true), Protocol::Error3);
  EXPECT_EQ(default_protocol(true, false), Protocol::Error3);
  EXPECT_EQ(default_protocol(true, true), Protocol::Error4);
  EXPECT_EQ(parse_protocol("error2"), Protocol::Error2);
  EXPECT_THROW(parse_protocol("error5"), std::invalid_argument);
}

TEST(Network, ParameterCounts) {
  EXPECT_EQ(build_model<float>(ArchitectureSpec::conv_large(), 1).parameter_count(),
            build_model<float>(ArchitectureSpec::conv_large(), 2).parameter_count());
  const auto large = build_model<float>(ArchitectureSpec::conv_large(), 1).parameter_count();
  EXPECT_GT(large, 3000000u);
  EXPECT_LT(large, 3200000u);
  EXPECT_LT(build_model<float>(ArchitectureSpec::conv_tiny(), 1).parameter_count(), 6000u);
}

TEST(Network, CheckpointRoundTripAndSpecMismatch) {
  ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 5);
  m.step = 17;
  const auto p = std::filesystem::temp_directory_path() / "rrlab-unit-model.ckpt";
  save_checkpoint(p, m);
  const ModelState<float> back = load_checkpoint(p, ArchitectureSpec::conv_tiny());
  EXPECT_EQ(back.weights_digest(), m.weights_digest());
  EXPECT_EQ(back.stats_digest(), m.stats_digest());
  EXPECT_EQ(back.step, 17u);
  EXPECT_ANY_THROW(load_checkpoint(p, ArchitectureSpec::conv_tiny(16, 16, 1, 5)));
}

TEST(Network, EvalModeIsDeterministicAndBatchIndependent) {
  const auto m = build_model<float>(ArchitectureSpec::conv_tiny(), 5);
  Fixture f;
  ForwardOptions eval;
  eval.training = false;
  const Tensor<float> all = predict(m, f.splits.labeled.images, eval);
  const Tensor<float> first = predict(m, f.splits.labeled.gather({0}), eval);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(all[k], first[k], 1e-6);
}
