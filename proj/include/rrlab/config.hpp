#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rrlab/bn_eval.hpp"
#include "rrlab/trainer.hpp"

namespace rrlab {

/// Invalid configuration; `line()` is 0 when the fault is not tied to a line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, std::size_t line, const std::string& message);
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct ExperimentConfig {
  std::string profile;

  // [data]
  std::string train_path;
  std::string test_path;

  // [split]
  std::size_t labels_per_class = 100;
  std::size_t validation = 1000;
  std::size_t unlabeled = 0;
  std::optional<std::uint64_t> split_seed;  ///< default: the run seed
  std::optional<double> lambda_mis;
  std::vector<std::uint32_t> in_classes;

  // [preprocess]
  bool scale = true;
  bool zca = false;
  double zca_epsilon = 1e-5;

  // [augment]
  AugmentationPolicy augmentation;

  // [model]
  std::string architecture = "conv-large";
  bool final_bn = true;

  // [train]; block_rows = 0 means (rows / 8) x (cols / 8).
  TrainConfig train;

  // [eval]
  std::optional<Protocol> protocol;  ///< default from the preprocessing table
  std::size_t refresh_batch = 128;
  std::size_t refresh_passes = 60;
  std::optional<double> eval_lambda;  ///< error3 masking; default: train lambda

  // [run]
  std::vector<std::uint64_t> seeds{1};
  std::string output = "runs/experiment";
  int jobs = 1;
  std::vector<double> lambda_mis_grid{0.0, 50.0, 75.0, 100.0};
  std::vector<double> dump_lambdas{0.1, 0.3, 0.5, 0.7};

  Protocol resolved_protocol() const;
  double resolved_eval_lambda() const { return eval_lambda.value_or(train.lambda); }
  void validate() const;
  /// Canonical `key = value` text that parses back to an equal config.
  std::string to_text() const;
};

std::vector<std::string> profile_names();
/// svhn+, svhn, cifar10+, cifar10 (the published settings) and glyph (desk scale).
ExperimentConfig profile_config(std::string_view name);

/// `key = value` lines under `[section]` headers; '#' starts a comment. A
/// `profile` key (any section) seeds every default before the other keys.
ExperimentConfig parse_config(std::string_view text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// RRLAB_SEED, when set, replaces the seed list with that one seed.
void apply_environment(ExperimentConfig& config);

}  // namespace rrlab
