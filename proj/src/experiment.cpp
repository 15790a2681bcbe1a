#include "rrlab/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#ifndef RRLAB_VERSION
#define RRLAB_VERSION "dev"
#endif

namespace rrlab {

std::string_view version_string() { return RRLAB_VERSION; }

namespace {

Dataset restrict_classes(const Dataset& test, const std::vector<std::uint32_t>& in_classes) {
  if (in_classes.empty() || !test.has_labels()) return test;
  std::vector<int> remap(test.classes, -1);
  for (std::size_t i = 0; i < in_classes.size(); ++i) {
    if (in_classes[i] < test.classes) remap[in_classes[i]] = static_cast<int>(i);
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (remap[test.labels[i]] >= 0) keep.push_back(i);
  }
  Dataset out = test.subset(keep);
  for (auto& l : out.labels) l = static_cast<std::uint32_t>(remap[l]);
  out.classes = static_cast<std::uint32_t>(in_classes.size());
  return out;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& config, Dataset source, Dataset test, std::uint64_t seed) {
  source.validate();
  test.validate();
  if (source.image_shape() != test.image_shape()) {
    throw std::invalid_argument("train and test images differ in shape: " + shape_string(source.image_shape()) + " vs " +
                                shape_string(test.image_shape()));
  }
  PreparedData d;
  if (config.scale) {
    if (source.space == PixelSpace::Raw) scale_to_unit_range(source);
    if (test.space == PixelSpace::Raw) scale_to_unit_range(test);
  }
  if (config.zca) {
    d.zca = ZcaTransform::fit(source.images, config.zca_epsilon);
    d.zca->apply(source);
    d.zca->apply(test);
  }
  SplitPlan plan;
  plan.labels_per_class = config.labels_per_class;
  plan.validation = config.validation;
  plan.unlabeled = config.unlabeled;
  plan.seed = derive_seed(config.split_seed.value_or(seed), "split");
  plan.lambda_mis = config.lambda_mis;
  plan.in_classes = config.in_classes;
  d.splits = build_splits(source, plan);
  if (config.train.roi_weight == RoiWeight::LabelProbability) {
    // Supervised ROI weighting: D_USL is D_L itself.
    d.splits.unlabeled = d.splits.unlabeled.subset({});
    d.splits.unlabeled_origin.clear();
    d.splits.in_class_unlabeled = 0;
  }
  d.test = restrict_classes(test, d.splits.in_classes);

  Tensor<float> usl = d.splits.labeled.images;
  usl.data.insert(usl.data.end(), d.splits.unlabeled.images.data.begin(), d.splits.unlabeled.images.data.end());
  usl.shape[0] += d.splits.unlabeled.size();
  d.pixel_stats = compute_pixel_stats(usl);
  d.source = std::move(source);
  return d;
}

PreparedData prepare_data(const ExperimentConfig& config, std::uint64_t seed) {
  if (config.train_path.empty() || config.test_path.empty()) {
    throw ConfigError("config", 0, "[data] train and test paths are required");
  }
  for (const auto& p : {config.train_path, config.test_path}) {
    if (!std::filesystem::exists(p)) throw ConfigError("config", 0, "dataset file not found: " + p);
  }
  return prepare_data(config, load_dataset(config.train_path), load_dataset(config.test_path), seed);
}

ArchitectureSpec architecture_for(const ExperimentConfig& config, const Dataset& labeled) {
  const Shape s = labeled.image_shape();
  const int rows = static_cast<int>(s[0]), cols = static_cast<int>(s[1]), depth = static_cast<int>(s[2]);
  const int k = static_cast<int>(labeled.classes);
  if (config.architecture == "conv-tiny") return ArchitectureSpec::conv_tiny(rows, cols, depth, k);
  return ArchitectureSpec::conv_large(k, config.final_bn, rows, cols, depth);
}

BlockPartition partition_for(const ExperimentConfig& config, const ArchitectureSpec& spec) {
  if (config.train.block_rows == 0) return BlockPartition::eighths(spec.rows, spec.cols);
  return BlockPartition::grid(spec.rows, spec.cols, config.train.block_rows, config.train.block_cols);
}

void write_manifest(const std::filesystem::path& path, const ExperimentConfig& config, const std::string& extra) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  os << "# rrlab " << version_string() << "\n";
  if (!extra.empty()) os << extra;
  os << config.to_text();
}

void write_summary_header(std::ostream& os) {
  os << "seed,loss,lambda_mis,protocol,error,labeled,unlabeled_in,unlabeled_out,refresh_passes,weights_digest,"
        "stats_digest,seconds\n";
}

void write_summary_row(std::ostream& os, const std::string& loss, const RunResult& r) {
  std::ostringstream line;
  line << std::setprecision(9) << r.seed << ',' << loss << ',';
  if (r.lambda_mis) line << *r.lambda_mis;
  line << ',' << protocol_name(r.eval.protocol) << ',' << r.eval.error_rate << ',' << r.labeled << ','
       << r.in_class_unlabeled << ',' << r.out_class_unlabeled << ',' << r.refresh.forward_passes << ','
       << hex(r.weights_digest) << ',' << hex(r.eval.stats_digest) << ',' << r.seconds;
  os << line.str() << '\n';
}

RunResult run_single(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed,
                     const std::filesystem::path& run_dir) {
  const auto start = std::chrono::steady_clock::now();
  const ArchitectureSpec spec = architecture_for(config, data.splits.labeled);
  ModelState<float> model = build_model<float>(spec, derive_seed(seed, "model"));
  const BlockPartition partition = partition_for(config, spec);

  TrainConfig tc = config.train;
  tc.seed = seed;
  tc.block_rows = partition.block_rows();
  tc.block_cols = partition.block_cols();
  tc.augmentation = config.augmentation;
  TrainData td{&data.splits.labeled, &data.splits.unlabeled, &data.splits.validation, data.pixel_stats};

  std::ofstream metrics;
  RunHooks hooks;
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir / "checkpoints");
    std::ostringstream extra;
    extra << "# seed " << seed << "\n# architecture " << spec.describe() << "\n";
    write_manifest(run_dir / "manifest.txt", config, extra.str());
    metrics.open(run_dir / "metrics.csv");
    write_metrics_header(metrics);
    hooks.on_log = [&](const MetricsRow& row) { write_metrics_row(metrics, row); };
    hooks.on_checkpoint = [&](const ModelState<float>& m) {
      save_checkpoint(run_dir / "checkpoints" / ("step-" + std::to_string(m.step) + ".ckpt"), m);
    };
  }
  run_schedule(model, td, tc, hooks);
  if (!run_dir.empty()) save_checkpoint(run_dir / "checkpoints" / "final.ckpt", model);

  RunResult r;
  r.seed = seed;
  r.lambda_mis = config.lambda_mis;
  r.weights_digest = model.weights_digest();
  r.labeled = data.splits.labeled.size();
  r.in_class_unlabeled = data.splits.in_class_unlabeled;
  r.out_class_unlabeled = data.splits.out_class_unlabeled;

  RefreshPlan plan;
  plan.protocol = config.resolved_protocol();
  plan.batch_size = config.refresh_batch;
  plan.passes = config.refresh_passes;
  plan.seed = derive_seed(seed, "refresh");
  RefreshInputs inputs{partition, data.pixel_stats, config.resolved_eval_lambda(), config.augmentation};
  r.refresh = refresh_bn(model, plan, data.splits.labeled, inputs);
  r.eval = evaluate(model, data.test, plan.protocol);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (!run_dir.empty()) {
    save_checkpoint(run_dir / "checkpoints" / "refreshed.ckpt", model);
    std::ofstream summary(run_dir / "summary.csv");
    write_summary_header(summary);
    write_summary_row(summary, config.train.terms.name(), r);
  }
  return r;
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

std::vector<SweepCell> mismatch_sweep(const ExperimentConfig& config, const Dataset& source, const Dataset& test,
                                      const std::filesystem::path& out_dir) {
  if (config.seeds.empty()) throw std::invalid_argument("mismatch sweep: seed list is empty");
  if (config.lambda_mis_grid.empty()) throw std::invalid_argument("mismatch sweep: lambda_mis grid is empty");
  if (config.in_classes.empty()) throw std::invalid_argument("mismatch sweep: [split] in_classes must name the in-class set");
  if (config.unlabeled == 0) throw std::invalid_argument("mismatch sweep: [split] unlabeled must be set");

  struct Task {
    std::size_t cell;
    std::size_t slot;
  };
  std::vector<SweepCell> cells(config.lambda_mis_grid.size());
  std::vector<Task> tasks;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    cells[c].lambda_mis = config.lambda_mis_grid[c];
    cells[c].runs.resize(config.seeds.size());
    for (std::size_t s = 0; s < config.seeds.size(); ++s) tasks.push_back({c, s});
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        const Task& t = tasks[i];
        ExperimentConfig cfg = config;
        cfg.lambda_mis = cells[t.cell].lambda_mis;
        const std::uint64_t seed = config.seeds[t.slot];
        const PreparedData data = prepare_data(cfg, source, test, seed);
        std::filesystem::path dir;
        if (!out_dir.empty()) {
          std::ostringstream name;
          name << "lambda-" << cells[t.cell].lambda_mis << "/seed-" << seed;
          dir = out_dir / name.str();
        }
        cells[t.cell].runs[t.slot] = run_single(cfg, data, seed, dir);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = tasks.size();
      }
    }
  };
  const std::size_t jobs = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, config.jobs)), tasks.size());
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);

  for (auto& cell : cells) {
    std::vector<double> errors;
    for (const auto& r : cell.runs) errors.push_back(r.eval.error_rate);
    std::tie(cell.mean_error, cell.std_error) = mean_std(errors);
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_manifest(out_dir / "manifest.txt", config, "# mismatch sweep\n");
    std::ofstream os(out_dir / "summary.csv");
    os << "lambda_mis,seeds,mean_error,std_error,unlabeled_in,unlabeled_out\n";
    for (const auto& cell : cells) {
      os << cell.lambda_mis << ',' << cell.runs.size() << ',' << cell.mean_error << ',' << cell.std_error << ','
         << cell.runs.front().in_class_unlabeled << ',' << cell.runs.front().out_class_unlabeled << '\n';
    }
  }
  return cells;
}

}  // namespace rrlab
