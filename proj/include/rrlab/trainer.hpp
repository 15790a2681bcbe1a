#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rrlab/datasets.hpp"
#include "rrlab/network.hpp"
#include "rrlab/objectives.hpp"
#include "rrlab/saliency.hpp"

namespace rrlab {

/// Adam(l_r, n_update, n_decay): constant rate with beta1 = 0.9 for the first
/// n_update - n_decay updates, then a linear decay to 0 with beta1 = 0.5.
/// Update indices t are 1-based.
struct AdamSchedule {
  double lr = 0.001;
  std::uint64_t n_update = 48000;
  std::uint64_t n_decay = 16000;
  double beta1_phase1 = 0.9;
  double beta1_phase2 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
  std::uint64_t boundary() const noexcept { return n_update - n_decay; }
  double learning_rate(std::uint64_t t) const;
  double beta1(std::uint64_t t) const;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(const ModelState<float>& model);
  /// One update at index t; bias correction uses the beta1 in force at t.
  void update(ModelState<float>& model, const std::vector<Tensor<float>>& grads, const AdamSchedule& schedule,
              std::uint64_t t);

 private:
  std::vector<std::vector<float>> m_, v_;
};

/// Weight of each ROIreg sample: d_rel of the snapshot prediction, or the
/// snapshot probability of the true label (only when every unlabeled sample
/// comes from D_L).
enum class RoiWeight { Reliability, LabelProbability };

struct TrainConfig {
  LossTerms terms = LossTerms::parse("VAT+ROIreg+ENT");
  VatConfig vat;
  bool vat_double_precision = true;
  bool deterministic_targets = false;  ///< no dropout in the snapshot passes at theta_k
  double rho_roi = 1.0;
  double lambda = 0.5;
  double lambda_aug = 0.05;
  int block_rows = 4;
  int block_cols = 4;
  RoiWeight roi_weight = RoiWeight::Reliability;
  std::size_t m_l = 32;
  std::size_t m_ul = 128;
  AdamSchedule schedule;
  AugmentationPolicy augmentation;
  std::uint64_t seed = 1;
  std::uint64_t log_every = 100;
  std::uint64_t checkpoint_every = 0;  ///< 0 keeps only the final checkpoint

  void validate() const;
};

struct TrainData {
  const Dataset* labeled = nullptr;
  const Dataset* unlabeled = nullptr;   ///< may be empty; D_USL = D_L ++ D_UL
  const Dataset* validation = nullptr;  ///< reporting only
  PixelStats pixel_stats;               ///< over D_USL in the training representation
};

struct StepReport {
  std::uint64_t step = 0;
  double lr = 0.0;
  double beta1 = 0.0;
  LossBundle losses;
  double train_accuracy = 0.0;
  std::size_t vat_fallbacks = 0;
  std::size_t zero_gradient_maps = 0;
};

/// A loss became non-finite; what() lists every term of the failing step.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, StepReport report) : std::runtime_error(what), report_(std::move(report)) {}
  const StepReport& report() const noexcept { return report_; }

 private:
  StepReport report_;
};

/// Owns the optimizer and sampler of one run over a model it mutates.
class Trainer {
 public:
  Trainer(ModelState<float>& model, const TrainData& data, TrainConfig config);

  /// Snapshot at theta_k, targets / sensitivities / d_rel / r_vadv / masks,
  /// live losses at theta, one Adam update, BN running statistics from the
  /// clean training passes only.
  StepReport step();

  const TrainConfig& config() const noexcept { return config_; }
  const BlockPartition& partition() const noexcept { return partition_; }

 private:
  std::uint64_t stream(std::string_view name, std::uint64_t sub = 0) const;
  Tensor<float> labeled_batch(const std::vector<std::size_t>& idx, std::vector<std::uint32_t>& labels);
  Tensor<float> unlabeled_batch(const std::vector<std::size_t>& idx);

  ModelState<float>& model_;
  TrainData data_;
  TrainConfig config_;
  BlockPartition partition_;
  MinibatchSampler sampler_;
  Adam adam_;
};

struct MetricsRow {
  StepReport report;
  std::optional<double> validation_error;  ///< percent
};

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const MetricsRow& row);

struct RunHooks {
  std::function<void(const MetricsRow&)> on_log;
  std::function<void(const ModelState<float>&)> on_checkpoint;
};

/// Exactly n_update steps with no early stopping; logs every `log_every`
/// steps (validation error uses running statistics when a validation set is
/// given).
void run_schedule(ModelState<float>& model, const TrainData& data, const TrainConfig& config, const RunHooks& hooks = {});

/// Percent misclassified in evaluation mode with running statistics.
double error_rate(const ModelState<float>& model, const Dataset& data, std::size_t batch = 256);

}  // namespace rrlab
