#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rrlab/config.hpp"

namespace rrlab {

std::string_view version_string();

/// Training source and test set after scaling / whitening, plus the
/// per-seed splits derived from them.
struct PreparedData {
  Dataset source;  ///< preprocessed training file
  Dataset test;    ///< preprocessed; restricted to in-classes and renumbered
  std::optional<ZcaTransform> zca;
  Splits splits;
  PixelStats pixel_stats;  ///< over D_USL
};

/// Preprocesses raw datasets per `config` (the source is needed with labels).
PreparedData prepare_data(const ExperimentConfig& config, Dataset source, Dataset test, std::uint64_t seed);
PreparedData prepare_data(const ExperimentConfig& config, std::uint64_t seed);

ArchitectureSpec architecture_for(const ExperimentConfig& config, const Dataset& labeled);
BlockPartition partition_for(const ExperimentConfig& config, const ArchitectureSpec& spec);

struct RunResult {
  std::uint64_t seed = 0;
  std::optional<double> lambda_mis;
  EvalReport eval;
  RefreshReport refresh;
  std::uint64_t weights_digest = 0;
  std::size_t labeled = 0;
  std::size_t in_class_unlabeled = 0;
  std::size_t out_class_unlabeled = 0;
  double seconds = 0.0;
};

/// Train + refresh + evaluate one seed. With a non-empty `run_dir` it writes
/// manifest.txt, metrics.csv, summary.csv and checkpoints/ there.
RunResult run_single(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed,
                     const std::filesystem::path& run_dir = {});

struct SweepCell {
  double lambda_mis = 0.0;
  std::vector<RunResult> runs;
  double mean_error = 0.0;
  double std_error = 0.0;  ///< sample standard deviation over seeds
};

/// mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_std(const std::vector<double>& values);

/// One train + eval per (lambda_mis, seed), up to `config.jobs` at a time.
std::vector<SweepCell> mismatch_sweep(const ExperimentConfig& config, const Dataset& source, const Dataset& test,
                                      const std::filesystem::path& out_dir = {});

void write_manifest(const std::filesystem::path& path, const ExperimentConfig& config, const std::string& extra = {});
void write_summary_header(std::ostream& os);
void write_summary_row(std::ostream& os, const std::string& loss, const RunResult& r);

}  // namespace rrlab
