// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failing criteria (capped at 1). `--only 3,5` runs a subset.
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "rrlab/experiment.hpp"
#include "rrlab/gradcheck.hpp"
#include "rrlab/ops.hpp"

using namespace rrlab;

namespace {

// Tolerances.
constexpr double kPrimitiveTol = 1e-4;
constexpr double kLossTol = 1e-3;
constexpr double kGradcheckSeconds = 60.0;
constexpr double kNormTol = 1e-6;
constexpr double kVatNormRelTol = 1e-5;
constexpr double kVatAngleDeg = 5.0;
// The toy's Hessian eigenvalue ratio is about 5, so one iteration from a
// start near the minor axis stays far from the major one.
constexpr int kVatPowerIterations = 8;
constexpr double kEmaTol = 1e-6;
constexpr double kSemiSupervisedGap = 2.0;  // percentage points
constexpr double kDeskSuiteMinutes = 30.0;
constexpr std::size_t kDeskCores = 4;
constexpr double kZcaRoundTrip = 1e-4;
constexpr double kZcaDiagonal = 0.05;

// Means of the first pinned desk-scale run (error4, percent, seeds 1-5) and
// the drift allowed around them before the run counts as a regression.
constexpr double kPinnedSupervised = 14.4;
constexpr double kPinnedVatEnt = 10.1;
constexpr double kPinnedFull = 0.06;
constexpr double kPinnedDrift = 3.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
  const std::size_t jobs = std::max<std::size_t>(1, std::min<std::size_t>(std::thread::hardware_concurrency(), count));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) body(i);
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

// ---- 1 -------------------------------------------------------------------

Outcome gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto prim = run_gradcheck(primitive_cases(1));
  const auto loss = run_gradcheck(loss_cases(1, 24));
  const double elapsed = seconds_since(t0);
  double worst_prim = 0.0, worst_loss = 0.0;
  std::string failed;
  for (const auto& r : prim) {
    worst_prim = std::max(worst_prim, r.max_rel_error);
    if (!(r.max_rel_error < kPrimitiveTol)) failed += " " + r.name;
  }
  for (const auto& r : loss) {
    worst_loss = std::max(worst_loss, r.max_rel_error);
    if (!(r.max_rel_error < kLossTol)) failed += " " + r.name;
  }
  const bool fixture_caught = !check_gradient(corrupted_case()).passed;
  Outcome o;
  o.pass = failed.empty() && fixture_caught && elapsed < kGradcheckSeconds;
  o.detail = std::to_string(prim.size()) + " primitives max " + fmt(worst_prim) + " < " + fmt(kPrimitiveTol) + ", " +
             std::to_string(loss.size()) + " loss terms max " + fmt(worst_loss) + " < " + fmt(kLossTol) + ", " +
             fmt(elapsed) + " s < " + fmt(kGradcheckSeconds) + " s" + (fixture_caught ? ", fault fixture caught" : ", fault fixture MISSED") +
             (failed.empty() ? "" : ", failing:" + failed);
  return o;
}

// ---- 2 -------------------------------------------------------------------

std::vector<std::size_t> brute_force_mask(const std::vector<double>& r2d, double lambda) {
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t q = 0; q < r2d.size(); ++q) keyed.emplace_back(r2d[q], q);
  std::sort(keyed.begin(), keyed.end());
  std::vector<double> prefix(keyed.size() + 1, 0.0);
  for (std::size_t i = 0; i < keyed.size(); ++i) prefix[i + 1] = prefix[i] + keyed[i].first;
  std::size_t count = 0;
  while (count < keyed.size() && prefix[count] < lambda) ++count;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(keyed[i].second);
  return out;
}

Outcome mask_oracle() {
  Rng rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> levels(1, 5);
  const BlockPartition partition = BlockPartition::grid(16, 16, 2, 2);
  Tensor<float> pool({64, 16, 16, 1});
  std::uniform_real_distribution<float> pix(-1.0f, 1.0f);
  for (auto& v : pool.data) v = pix(rng);
  const PixelStats stats = compute_pixel_stats(pool);

  std::size_t mismatches = 0, identity_breaks = 0, ties = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> m(partition.size());
    const bool tied = trial % 2 == 0;
    for (auto& v : m) v = tied ? levels(rng) : u(rng);
    const double s = std::accumulate(m.begin(), m.end(), 0.0);
    for (auto& v : m) v /= s;
    ties += tied;
    const double lambda = 0.05 + 0.9 * u(rng);
    const MaskRegion region = select_mask(m, lambda);
    mismatches += region.blocks != brute_force_mask(m, lambda);

    const Tensor<float> x = slice_sample(pool, static_cast<std::size_t>(trial) % 64);
    const Tensor<float> y = apply_mask(x, region, partition, stats, rng);
    const auto bits = mask_bitmap(region, partition);
    for (std::size_t p = 0; p < bits.size(); ++p) {
      if (bits[p] == 0 && std::memcmp(&x[p], &y[p], sizeof(float)) != 0) ++identity_breaks;
    }
  }
  return {mismatches == 0 && identity_breaks == 0,
          "500 maps (" + std::to_string(ties) + " with ties): " + std::to_string(mismatches) +
              " selection mismatches, " + std::to_string(identity_breaks) + " changed pixels outside the mask"};
}

// ---- 3 -------------------------------------------------------------------

Outcome normalization_invariants() {
  double worst_r3 = 0.0, worst_r2 = 0.0, worst_vat = 0.0;
  const BlockPartition partition = BlockPartition::eighths(16, 16);
  std::uniform_real_distribution<float> pix(-1.0f, 1.0f);
  for (int pair = 0; pair < 200; ++pair) {
    const auto model = build_model<float>(ArchitectureSpec::conv_tiny(), 1000 + static_cast<std::uint64_t>(pair));
    Rng rng(derive_seed(7, "norm-input", static_cast<std::uint64_t>(pair)));
    Tensor<float> x({1, 16, 16, 1});
    for (auto& v : x.data) v = pix(rng);
    auto maps = pixel_sensitivity(model_probability_fn(model, ForwardOptions{}), x);
    double l1 = 0.0;
    for (double v : maps[0].r3d) l1 += std::abs(v);
    block_sensitivity(maps[0], partition);
    worst_r3 = std::max(worst_r3, std::abs(l1 - 1.0));
    worst_r2 = std::max(worst_r2, std::abs(std::accumulate(maps[0].r2d.begin(), maps[0].r2d.end(), 0.0) - 1.0));

    if (pair < 100) {
      // The training path: float64 probe, perturbation stored as float32.
      VatConfig cfg;
      cfg.epsilon = 0.5 + 0.05 * pair;
      const ModelState<double> md = model.cast<double>();
      const Tensor<float> r =
          vat_direction(model_probability_fn(md, ForwardOptions{}), x.cast<double>(), cfg, 31 + static_cast<std::uint64_t>(pair))
              .perturbation.cast<float>();
      double norm = 0.0;
      for (float v : r.data) norm += static_cast<double>(v) * v;
      worst_vat = std::max(worst_vat, std::abs(std::sqrt(norm) - cfg.epsilon) / cfg.epsilon);
    }
  }
  return {worst_r3 <= kNormTol && worst_r2 <= kNormTol && worst_vat <= kVatNormRelTol,
          "200 pairs: max |sum|r3d|-1| " + fmt(worst_r3) + ", max |sum r2d-1| " + fmt(worst_r2) + " (tol " + fmt(kNormTol) +
              "); 100 pairs: max rel |  |r_vadv| - eps | " + fmt(worst_vat) + " (tol " + fmt(kVatNormRelTol) + ")"};
}

// ---- 4 -------------------------------------------------------------------

struct TinyProblem {
  Splits splits;
  PixelStats stats;
  TinyProblem() {
    GlyphSpec g;
    g.per_class = 80;
    Dataset src = generate_synthetic(g);
    scale_to_unit_range(src);
    SplitPlan plan;
    plan.labels_per_class = 4;
    plan.unlabeled = 200;
    plan.seed = 3;
    splits = build_splits(src, plan);
    stats = compute_pixel_stats(splits.unlabeled.images);
  }
};

std::vector<std::string> trajectory(const TinyProblem& p, const std::string& loss, double rho) {
  ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 5);
  TrainConfig c;
  c.terms = LossTerms::parse(loss);
  c.rho_roi = rho;
  c.m_l = 16;
  c.m_ul = 32;
  c.block_rows = c.block_cols = 2;
  c.schedule = AdamSchedule{0.001, 30, 10};
  c.augmentation.max_translation = 2;
  c.seed = 9;
  Trainer t(m, TrainData{&p.splits.labeled, &p.splits.unlabeled, nullptr, p.stats}, c);
  std::vector<std::string> out;
  for (int k = 0; k < 30; ++k) {
    const StepReport r = t.step();
    std::ostringstream os;
    os << std::hexfloat << r.losses.ce << ' ' << r.losses.vat << ' ' << r.losses.ent << ' ' << std::hex << m.weights_digest()
       << ' ' << m.stats_digest();
    out.push_back(os.str());
  }
  return out;
}

Outcome loss_identities() {
  Rng rng(4);
  std::gamma_distribution<double> gamma(0.7, 1.0);
  std::size_t violations = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + static_cast<std::size_t>(trial) % 9;
    std::vector<double> p(k);
    for (auto& v : p) v = gamma(rng) + 1e-9;
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& v : p) v /= s;
    std::vector<double> uniform(k, 1.0 / static_cast<double>(k)), onehot(k, 0.0);
    onehot[static_cast<std::size_t>(trial) % k] = 1.0;
    const double errs[] = {std::abs(kl_divergence(p, p)), std::abs(entropy(onehot)),
                           std::abs(entropy(uniform) - std::log(static_cast<double>(k))), std::abs(reliability(uniform)),
                           std::abs(reliability(onehot) - 1.0)};
    for (double e : errs) {
      worst = std::max(worst, e);
      violations += e > 1e-12;
    }
  }
  LossBundle v;
  v.ce = 0.7;
  v.vat = 0.11;
  v.roireg = 0.05;
  v.ent = 0.3;
  v.roiaug = 0.02;
  const LossBundle b = assemble(LossTerms::parse("VAT+ROIreg+ENT+ROIaug"), v);
  const bool additive = b.total == ((((0.7 + 0.11) + 0.05) + 0.3) + 0.02);

  const TinyProblem problem;
  const auto reduced = trajectory(problem, "VAT+ROIreg+ENT", 0.0);
  const auto reference = trajectory(problem, "VAT+ENT", 1.0);
  const bool identical = reduced == reference;
  return {violations == 0 && additive && identical,
          "1000 identities max error " + fmt(worst) + ", bundle additive " + (additive ? "yes" : "NO") +
              ", rho_roi=0 vs VAT+ENT over 30 steps " + (identical ? "bit-identical" : "DIVERGED")};
}

// ---- 5 -------------------------------------------------------------------

Outcome vat_direction_oracle() {
  // Two pixels -> 3 classes through a hidden leaky-ReLU layer.
  const Tensor<double> w1({2, 4}, std::vector<double>{2.0, -1.5, 0.5, 1.0, 0.4, 0.9, -1.2, 0.3});
  const Tensor<double> b1({4}, std::vector<double>{0.1, 0.2, -0.1, 0.05});
  const Tensor<double> w2({4, 3}, std::vector<double>{1.5, -1.0, 0.2, -0.7, 1.1, 0.4, 0.9, 0.3, -1.3, 0.2, -0.6, 1.0});
  ProbabilityFn<double> fn = [&](ad::Tape<double>& tape, const ad::Var<double>& x) {
    const ad::Var<double> flat = ad::reshape(x, Shape{x.shape()[0], 2});
    const ad::Var<double> bias = tape.constant(b1);
    const ad::Var<double> h = ad::leaky_relu(ad::dense(flat, tape.constant(w1), &bias), 0.1);
    return ad::softmax(ad::dense(h, tape.constant(w2), static_cast<const ad::Var<double>*>(nullptr)));
  };
  auto probs = [&](double a, double b) {
    ad::Tape<double> tape;
    return fn(tape, tape.constant(Tensor<double>({1, 1, 1, 2}, std::vector<double>{a, b}))).value().data;
  };

  double worst = 0.0;
  std::vector<double> single_iteration;
  const double points[][2] = {{0.3, -0.2}, {-0.5, 0.8}, {1.0, 0.1}, {0.05, 0.4}};
  for (const auto& pt : points) {
    const std::vector<double> p0 = probs(pt[0], pt[1]);
    // Dense sweep of KL(p(x) || p(x + rho u(theta))) at a small radius.
    const double radius = 1e-3;
    double best_theta = 0.0, best_kl = -1.0;
    for (int i = 0; i < 36000; ++i) {
      const double theta = std::numbers::pi * i / 36000.0;
      const double kl = kl_divergence(p0, probs(pt[0] + radius * std::cos(theta), pt[1] + radius * std::sin(theta)));
      if (kl > best_kl) {
        best_kl = kl;
        best_theta = theta;
      }
    }
    auto angle = [&](const Tensor<double>& r) {
      // The KL is even in the perturbation to second order, so compare axes.
      const double cosine = std::abs(r[0] * std::cos(best_theta) + r[1] * std::sin(best_theta)) / std::hypot(r[0], r[1]);
      return std::acos(std::min(1.0, cosine)) * 180.0 / std::numbers::pi;
    };
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const Tensor<double> x({1, 1, 1, 2}, std::vector<double>{pt[0], pt[1]});
      VatConfig cfg;
      cfg.power_iterations = kVatPowerIterations;
      worst = std::max(worst, angle(vat_direction(fn, x, cfg, seed).perturbation));
      cfg.power_iterations = 1;
      const double single = angle(vat_direction(fn, x, cfg, seed).perturbation);
      single_iteration.push_back(single);
    }
  }
  std::sort(single_iteration.begin(), single_iteration.end());
  return {worst <= kVatAngleDeg,
          "4 points x 10 seeds, " + std::to_string(kVatPowerIterations) + " power iterations: max angle to sweep maximizer " +
              fmt(worst) + " deg (tol " + fmt(kVatAngleDeg) + "); one iteration: median " + fmt(single_iteration[20]) +
              " deg, max " + fmt(single_iteration.back()) + " deg"};
}

// ---- 6 -------------------------------------------------------------------

Outcome schedule_fidelity() {
  const AdamSchedule s{0.001, 48000, 16000};
  const bool lr = s.learning_rate(32000) == 0.001 && s.learning_rate(40000) == 0.0005 && s.learning_rate(48000) == 0.0;
  const bool beta = s.beta1(32000) == 0.9 && s.beta1(32001) == 0.5 && s.beta1(40000) == 0.5 && s.beta1(48000) == 0.5;
  return {lr && beta, "lr(32000, 40000, 48000) = " + fmt(s.learning_rate(32000)) + ", " + fmt(s.learning_rate(40000)) + ", " +
                          fmt(s.learning_rate(48000)) + "; beta1(32000, 32001) = " + fmt(s.beta1(32000)) + ", " +
                          fmt(s.beta1(32001))};
}

// ---- 7 -------------------------------------------------------------------

Outcome bn_refresh() {
  GlyphSpec g;
  g.per_class = 1;
  Dataset one = generate_synthetic(g);
  scale_to_unit_range(one);
  const Dataset same = one.subset(std::vector<std::size_t>(64, 0));
  ModelState<float> m = build_model<float>(ArchitectureSpec::conv_tiny(), 1);
  const float start = 1000.0f;
  for (auto& rm : m.running_mean) std::fill(rm.begin(), rm.end(), start);
  ad::Tape<float> tape;
  std::vector<ad::BatchStats<float>> batch;
  ForwardOptions plain{true, false, false, 0};
  forward_logits(m, bind_model(m, tape, false), tape.constant(same.gather({0, 1})), plain, &batch);
  RefreshPlan plan;
  plan.protocol = Protocol::Error2;
  plan.batch_size = 32;
  refresh_bn(m, plan, same, RefreshInputs{});
  double worst = 0.0;
  for (std::size_t c = 0; c < batch[0].mean.size(); ++c) {
    const double residual = (m.running_mean[0][c] - batch[0].mean[c]) / (start - batch[0].mean[c]);
    worst = std::max(worst, std::abs(residual - std::pow(0.9, 60)));
  }

  GlyphSpec g2;
  g2.per_class = 20;
  Dataset d = generate_synthetic(g2);
  scale_to_unit_range(d);
  const PixelStats stats = compute_pixel_stats(d.images);
  AugmentationPolicy aug;
  aug.max_translation = 2;
  std::string passes;
  bool sixty = true;
  for (Protocol p : {Protocol::Error2, Protocol::Error3, Protocol::Error4}) {
    ModelState<float> model = build_model<float>(ArchitectureSpec::conv_tiny(), 2);
    RefreshPlan rp;
    rp.protocol = p;
    rp.batch_size = 32;
    const auto r = refresh_bn(model, rp, d, RefreshInputs{BlockPartition::grid(16, 16, 2, 2), stats, 0.5, aug});
    sixty &= r.forward_passes == 60;
    passes += std::string(passes.empty() ? "" : ", ") + std::string(protocol_name(p)) + "=" + std::to_string(r.forward_passes);
  }
  return {worst <= kEmaTol && sixty, "residual weight 0.9^60 = " + fmt(std::pow(0.9, 60), 6) + ", max deviation " + fmt(worst) +
                                         " (tol " + fmt(kEmaTol) + "); forward passes " + passes};
}

// ---- 8 -------------------------------------------------------------------

struct DeskData {
  Dataset train, test;
  DeskData(std::uint32_t classes, std::size_t train_per_class, std::size_t test_per_class) {
    GlyphSpec g;
    g.classes = classes;
    g.per_class = train_per_class;
    g.seed = 1;
    train = generate_synthetic(g);
    g.per_class = test_per_class;
    g.seed = 2;
    test = generate_synthetic(g);
  }
};

Outcome desk_scale_effect() {
  const auto t0 = std::chrono::steady_clock::now();
  const DeskData data(4, 600, 250);
  const std::vector<std::string> losses{"supervised", "VAT+ENT", "VAT+ROIreg+ENT"};
  const ExperimentConfig base = profile_config("glyph");
  struct Task {
    std::size_t loss;
    std::uint64_t seed;
    double error = 0.0;
    double seconds = 0.0;
  };
  std::vector<Task> tasks;
  // Longest runs first so the pool drains evenly.
  for (std::size_t l = losses.size(); l-- > 0;) {
    for (std::uint64_t s : base.seeds) tasks.push_back({l, s});
  }
  parallel_for(tasks.size(), [&](std::size_t i) {
    ExperimentConfig c = base;
    c.train.terms = LossTerms::parse(losses[tasks[i].loss]);
    const PreparedData prepared = prepare_data(c, data.train, data.test, tasks[i].seed);
    const auto start = std::chrono::steady_clock::now();
    tasks[i].error = run_single(c, prepared, tasks[i].seed).eval.error_rate;
    tasks[i].seconds = seconds_since(start);
  });
  std::vector<std::vector<double>> errors(losses.size());
  for (const auto& t : tasks) errors[t.loss].push_back(t.error);
  std::vector<double> mean(losses.size()), sd(losses.size());
  for (std::size_t l = 0; l < losses.size(); ++l) std::tie(mean[l], sd[l]) = mean_std(errors[l]);
  const double minutes = seconds_since(t0) / 60.0;
  // The budget is for a 4-core machine: replay the queue on 4 workers.
  std::vector<double> workers(kDeskCores, 0.0);
  for (const auto& t : tasks) *std::min_element(workers.begin(), workers.end()) += t.seconds;
  const double projected = *std::max_element(workers.begin(), workers.end()) / 60.0;

  const bool gap = mean[0] - mean[2] >= kSemiSupervisedGap;
  const bool order = mean[2] <= mean[1];
  const bool pinned = std::abs(mean[0] - kPinnedSupervised) <= kPinnedDrift && std::abs(mean[1] - kPinnedVatEnt) <= kPinnedDrift &&
                      std::abs(mean[2] - kPinnedFull) <= kPinnedDrift;
  const bool fast = projected < kDeskSuiteMinutes;
  std::string detail;
  for (std::size_t l = 0; l < losses.size(); ++l) detail += losses[l] + " " + fmt(mean[l]) + "+-" + fmt(sd[l], 2) + "%, ";
  detail += "gap " + fmt(mean[0] - mean[2]) + " pp (>= " + fmt(kSemiSupervisedGap) + "), pinned within " + fmt(kPinnedDrift) +
            " pp: " + (pinned ? "yes" : "NO") + ", " + fmt(projected) + " min on " + std::to_string(kDeskCores) +
            " cores (" + fmt(minutes) + " min wall on " + std::to_string(std::max(1u, std::thread::hardware_concurrency())) +
            ")";
  return {gap && order && pinned && fast, detail};
}

// ---- 9 -------------------------------------------------------------------

Outcome mismatch_harness() {
  const DeskData data(8, 450, 150);
  std::string counts;
  bool exact = true;
  for (double lam : {0.0, 50.0, 75.0, 100.0}) {
    SplitPlan plan;
    plan.labels_per_class = 8;
    plan.validation = 100;
    plan.unlabeled = 1000;
    plan.lambda_mis = lam;
    plan.in_classes = {0, 1, 2, 3};
    plan.seed = 5;
    const Splits s = build_splits(data.train, plan);
    const auto out = static_cast<std::size_t>(std::llround(10.0 * lam));
    std::size_t origin_out = 0;
    for (auto o : s.unlabeled_origin) origin_out += o >= 4;
    exact &= s.out_class_unlabeled == out && s.in_class_unlabeled == 1000 - out && origin_out == out &&
             s.labeled.size() == 32 && s.unlabeled.size() == 1000;
    counts += (counts.empty() ? "" : " ") + fmt(lam) + ":" + std::to_string(s.in_class_unlabeled) + "/" +
              std::to_string(s.out_class_unlabeled);
  }

  ExperimentConfig c = profile_config("glyph");
  c.in_classes = {0, 1, 2, 3};
  c.unlabeled = 1000;
  c.seeds = {1, 2, 3};
  c.lambda_mis_grid = {0.0, 100.0};
  c.train.schedule = AdamSchedule{0.001, 1500, 500};
  c.jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  const auto cells = mismatch_sweep(c, data.train, data.test);
  const bool monotone = cells[1].mean_error >= cells[0].mean_error;
  return {exact && monotone, "in/out counts " + counts + (exact ? " exact" : " WRONG") + "; sweep mean error lambda_mis=0: " +
                                 fmt(cells[0].mean_error) + "+-" + fmt(cells[0].std_error, 2) + "%, lambda_mis=100: " +
                                 fmt(cells[1].mean_error) + "+-" + fmt(cells[1].std_error, 2) + "%"};
}

// ---- 10 ------------------------------------------------------------------

Outcome zca() {
  Rng rng(10);
  std::normal_distribution<double> g(0.0, 1.0);
  const std::size_t n = 5000, dim = 27;
  // Correlated Gaussian: x = mu + A z with a fixed random A.
  Eigen::MatrixXd a(dim, dim);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng) * 0.4;
  a.diagonal().array() += 1.0;
  Tensor<float> x({n, 3, 3, 3});
  Eigen::VectorXd z(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = g(rng);
    const Eigen::VectorXd v = a * z;
    for (std::size_t j = 0; j < dim; ++j) x[i * dim + j] = static_cast<float>(0.3 + v(static_cast<Eigen::Index>(j)));
  }
  const auto t = ZcaTransform::fit(x, 1e-5);
  const Tensor<float> w = t.apply(x);
  const Tensor<float> back = t.invert(w);
  double round_trip = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) round_trip = std::max(round_trip, std::abs(static_cast<double>(back[i]) - x[i]));
  Eigen::MatrixXd m(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = w[i * dim + j];
  }
  const Eigen::MatrixXd c = m.rowwise() - m.colwise().mean();
  const Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(n);
  const double diag = (cov.diagonal().array() - 1.0).abs().maxCoeff();
  return {round_trip <= kZcaRoundTrip && diag <= kZcaDiagonal, "round trip max error " + fmt(round_trip) + " (tol " +
                                                                   fmt(kZcaRoundTrip) + "), whitened covariance max |diag-1| " +
                                                                   fmt(diag) + " (tol " + fmt(kZcaDiagonal) + ")"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient oracle", gradient_oracle},
      {"mask oracle", mask_oracle},
      {"normalization invariants", normalization_invariants},
      {"loss identities", loss_identities},
      {"VAT direction oracle", vat_direction_oracle},
      {"schedule fidelity", schedule_fidelity},
      {"BN refresh", bn_refresh},
      {"desk-scale semi-supervised effect", desk_scale_effect},
      {"mismatch harness", mismatch_harness},
      {"ZCA", zca},
  };
  std::set<std::size_t> only;
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--only") {
      std::stringstream ss(argv[i + 1]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoul(item));
    }
  }
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail << " ("
              << fmt(seconds_since(t0)) << " s)" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
