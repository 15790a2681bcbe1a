#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "rrlab/experiment.hpp"
#include "rrlab/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace rrlab;

namespace {

int config_failure(const std::string& what) {
  std::cerr << "rrlab: " << what << "\n";
  return 2;
}

ExperimentConfig read_config(const std::string& path) {
  ExperimentConfig c = load_config(path);
  apply_environment(c);
  return c;
}

// ---- datagen -------------------------------------------------------------

struct DatagenArgs {
  GlyphSpec spec;
  std::string out;
};

int cmd_datagen(const DatagenArgs& a) {
  const Dataset d = generate_synthetic(a.spec);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_dataset(a.out, d);
  std::cout << "wrote " << d.size() << " images " << shape_string(d.image_shape()) << ", " << d.classes << " classes to "
            << a.out << "\n";
  return 0;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out;
  bool deterministic_targets = false;
};

int cmd_train(const TrainArgs& a) {
  ExperimentConfig cfg = read_config(a.config);
  if (!a.out.empty()) cfg.output = a.out;
  if (a.deterministic_targets) cfg.train.deterministic_targets = true;
  const fs::path root = cfg.output;
  fs::create_directories(root);
  std::ostringstream seeds;
  seeds << "# seeds";
  for (auto s : cfg.seeds) seeds << ' ' << s;
  seeds << '\n';
  write_manifest(root / "manifest.txt", cfg, seeds.str());

  std::ofstream summary(root / "summary.csv");
  write_summary_header(summary);
  std::vector<double> errors;
  for (std::uint64_t seed : cfg.seeds) {
    const PreparedData data = prepare_data(cfg, seed);
    const RunResult r = run_single(cfg, data, seed, root / ("seed-" + std::to_string(seed)));
    write_summary_row(summary, cfg.train.terms.name(), r);
    summary.flush();
    errors.push_back(r.eval.error_rate);
    std::cout << "seed " << seed << ": " << protocol_name(r.eval.protocol) << " " << std::fixed << std::setprecision(2)
              << r.eval.error_rate << "% (" << std::setprecision(1) << r.seconds << " s)" << std::endl;
  }
  const auto [mean, sd] = mean_std(errors);
  summary << "# mean," << mean << "\n# std," << sd << "\n";
  std::cout << cfg.train.terms.name() << ": " << std::fixed << std::setprecision(2) << mean << " +- " << sd << "% over "
            << errors.size() << " seed(s)\n";
  return 0;
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string config;
  std::string checkpoint;
  std::string protocol;
  std::uint64_t seed = 1;
  bool no_refresh = false;
};

int cmd_eval(const EvalArgs& a) {
  ExperimentConfig cfg = read_config(a.config);
  if (!a.protocol.empty()) cfg.protocol = parse_protocol(a.protocol);
  if (!fs::exists(a.checkpoint)) throw ConfigError("eval", 0, "checkpoint not found: " + a.checkpoint);
  const PreparedData data = prepare_data(cfg, a.seed);
  const ArchitectureSpec spec = architecture_for(cfg, data.splits.labeled);
  ModelState<float> model = load_checkpoint(a.checkpoint, spec);
  const Protocol protocol = cfg.resolved_protocol();
  RefreshReport refresh;
  if (!a.no_refresh) {
    RefreshPlan plan;
    plan.protocol = protocol;
    plan.batch_size = cfg.refresh_batch;
    plan.passes = cfg.refresh_passes;
    plan.seed = derive_seed(a.seed, "refresh");
    refresh = refresh_bn(model, plan, data.splits.labeled,
                         RefreshInputs{partition_for(cfg, spec), data.pixel_stats, cfg.resolved_eval_lambda(), cfg.augmentation});
  }
  const EvalReport r = evaluate(model, data.test, protocol);
  std::cout << "checkpoint,protocol,error,samples,refresh_passes,stats_digest\n"
            << a.checkpoint << ',' << protocol_name(r.protocol) << ',' << std::setprecision(9) << r.error_rate << ','
            << r.samples << ',' << refresh.forward_passes << ',' << std::hex << r.stats_digest << std::dec << "\n\n";
  std::cout << protocol_name(r.protocol) << " test error " << std::fixed << std::setprecision(2) << r.error_rate << "% on "
            << r.samples << " images (step " << model.step << ")\n";
  for (std::size_t k = 0; k < r.per_class_error.size(); ++k) {
    std::cout << "  class " << k << ": ";
    if (std::isnan(r.per_class_error[k])) {
      std::cout << "absent\n";
    } else {
      std::cout << r.per_class_error[k] << "%\n";
    }
  }
  return 0;
}

// ---- mask-dump -----------------------------------------------------------

void write_pgm(const fs::path& path, const std::vector<float>& pixels, int rows, int cols, int depth, float lo, float hi) {
  std::ofstream os(path, std::ios::binary);
  os << (depth == 3 ? "P6\n" : "P5\n") << cols << ' ' << rows << "\n255\n";
  const float span = hi > lo ? hi - lo : 1.0f;
  for (int i = 0; i < rows * cols; ++i) {
    for (int c = 0; c < (depth == 3 ? 3 : 1); ++c) {
      const float v = (pixels[static_cast<std::size_t>(i * depth + c)] - lo) / span * 255.0f;
      os.put(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L))));
    }
  }
}

void write_image(const fs::path& path, const Tensor<float>& image, bool zca_space) {
  const int rows = static_cast<int>(image.dim(0)), cols = static_cast<int>(image.dim(1)), depth = static_cast<int>(image.dim(2));
  float lo = -1.0f, hi = 1.0f;
  if (zca_space) {
    const auto [mn, mx] = std::minmax_element(image.data.begin(), image.data.end());
    lo = *mn;
    hi = *mx;
  }
  write_pgm(path, image.data, rows, cols, depth, lo, hi);
}

void write_values(const fs::path& path, const Tensor<float>& image) {
  std::ofstream os(path);
  os << std::setprecision(9);
  const std::size_t row = image.dim(1) * image.dim(2);
  for (std::size_t i = 0; i < image.size(); ++i) os << image[i] << ((i + 1) % row == 0 ? '\n' : ',');
}

struct MaskDumpArgs {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::size_t images = 8;
  std::vector<double> lambdas;
  std::uint64_t seed = 1;
};

int cmd_mask_dump(const MaskDumpArgs& a) {
  ExperimentConfig cfg = read_config(a.config);
  if (!a.lambdas.empty()) cfg.dump_lambdas = a.lambdas;
  if (!fs::exists(a.checkpoint)) throw ConfigError("mask-dump", 0, "checkpoint not found: " + a.checkpoint);
  const PreparedData data = prepare_data(cfg, a.seed);
  const ArchitectureSpec spec = architecture_for(cfg, data.splits.labeled);
  const ModelState<float> model = load_checkpoint(a.checkpoint, spec);
  const BlockPartition partition = partition_for(cfg, spec);
  const fs::path dir = a.out.empty() ? fs::path(cfg.output) / "masks" : fs::path(a.out);
  fs::create_directories(dir);

  const std::size_t n = std::min(a.images, data.test.size());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const Tensor<float> batch = data.test.gather(idx);
  ForwardOptions eval;
  eval.training = false;
  std::vector<SensitivityMap> maps = pixel_sensitivity(model_probability_fn(model, eval), batch);
  std::size_t grid_cols = 0;
  for (const Block& b : partition.blocks()) grid_cols += b.row0 == 0;

  Rng rng(derive_seed(a.seed, "mask-dump"));
  const bool zca = data.zca.has_value();
  auto original_view = [&](const Tensor<float>& image) {
    Tensor<float> one = image;
    one.shape.insert(one.shape.begin(), 1);
    Tensor<float> back = data.zca->invert(one);
    back.shape.erase(back.shape.begin());
    return back;
  };
  for (std::size_t i = 0; i < n; ++i) {
    const std::string stem = "img" + std::to_string(i);
    const Tensor<float> x = slice_sample(batch, i);
    block_sensitivity(maps[i], partition);
    write_image(dir / (stem + "_x.pgm"), x, zca);
    write_values(dir / (stem + "_x.csv"), x);
    if (zca) write_image(dir / (stem + "_x_orig.pgm"), original_view(x), false);
    {
      std::ofstream os(dir / (stem + "_r2d.csv"));
      os << std::setprecision(9);
      for (std::size_t q = 0; q < maps[i].r2d.size(); ++q) os << maps[i].r2d[q] << ((q + 1) % grid_cols == 0 ? '\n' : ',');
    }
    for (double lambda : cfg.dump_lambdas) {
      std::ostringstream tag;
      tag << stem << "_lambda" << lambda;
      const MaskRegion region = select_mask(maps[i].r2d, lambda);
      const std::vector<std::uint8_t> bits = mask_bitmap(region, partition);
      std::vector<float> bitmap(bits.begin(), bits.end());
      write_pgm(dir / (tag.str() + "_omega.pgm"), bitmap, partition.rows(), partition.cols(), 1, 0.0f, 1.0f);
      const Tensor<float> x_roi = apply_mask(x, region, partition, data.pixel_stats, rng);
      write_image(dir / (tag.str() + "_xroi.pgm"), x_roi, zca);
      write_values(dir / (tag.str() + "_xroi.csv"), x_roi);
      if (zca) write_image(dir / (tag.str() + "_xroi_orig.pgm"), original_view(x_roi), false);
    }
  }
  std::cout << "wrote masks for " << n << " image(s) x " << cfg.dump_lambdas.size() << " lambda value(s) to " << dir.string()
            << "\n";
  return 0;
}

// ---- mismatch-sweep ------------------------------------------------------

struct SweepArgs {
  std::string config;
  std::string out;
  int jobs = 0;
  std::vector<double> grid;
};

int cmd_sweep(const SweepArgs& a) {
  ExperimentConfig cfg = read_config(a.config);
  if (a.jobs > 0) cfg.jobs = a.jobs;
  if (!a.grid.empty()) cfg.lambda_mis_grid = a.grid;
  if (!a.out.empty()) cfg.output = a.out;
  if (cfg.train_path.empty() || !fs::exists(cfg.train_path)) throw ConfigError(a.config, 0, "dataset file not found: " + cfg.train_path);
  if (cfg.test_path.empty() || !fs::exists(cfg.test_path)) throw ConfigError(a.config, 0, "dataset file not found: " + cfg.test_path);
  const std::vector<SweepCell> cells = mismatch_sweep(cfg, load_dataset(cfg.train_path), load_dataset(cfg.test_path), cfg.output);
  std::cout << "lambda_mis  mean_error  std_error  (" << cells.front().runs.size() << " seeds)\n";
  for (const auto& c : cells) {
    std::cout << std::setw(10) << c.lambda_mis << std::fixed << std::setprecision(2) << std::setw(12) << c.mean_error
              << std::setw(11) << c.std_error << std::defaultfloat << "\n";
  }
  return 0;
}

// ---- gradcheck -----------------------------------------------------------

struct GradcheckArgs {
  bool fault_fixture = false;
  std::size_t per_tensor = 24;
  std::uint64_t seed = 1;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  std::vector<GradcheckCase> cases = primitive_cases(a.seed);
  for (auto& c : loss_cases(a.seed, a.per_tensor)) cases.push_back(std::move(c));
  if (a.fault_fixture) cases.push_back(corrupted_case());
  const auto results = run_gradcheck(cases, a.seed);
  print_gradcheck_report(std::cout, results);
  const bool ok = std::all_of(results.begin(), results.end(), [](const GradcheckResult& r) { return r.passed; });
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ROI regularization for semi-supervised image classification"};
  app.set_version_flag("--version", std::string(version_string()));
  app.require_subcommand(1);

  DatagenArgs dg;
  auto* datagen = app.add_subcommand("datagen", "Generate a synthetic glyph dataset");
  datagen->add_option("-o,--out", dg.out, "Output dataset file")->required();
  datagen->add_option("--classes", dg.spec.classes);
  datagen->add_option("--per-class", dg.spec.per_class);
  datagen->add_option("--rows", dg.spec.rows);
  datagen->add_option("--cols", dg.spec.cols);
  datagen->add_option("--noise", dg.spec.noise);
  datagen->add_option("--clutter", dg.spec.clutter);
  datagen->add_option("--seed", dg.spec.seed, "Sample seed; glyph templates are fixed");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train every seed of a config, then refresh and evaluate");
  train->add_option("config", tr.config)->required();
  train->add_option("-o,--out", tr.out, "Override [run] output");
  train->add_flag("--deterministic-targets", tr.deterministic_targets, "Disable dropout in target passes");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Refresh BN statistics and evaluate a checkpoint");
  eval->add_option("config", ev.config)->required();
  eval->add_option("checkpoint", ev.checkpoint)->required();
  eval->add_option("--protocol", ev.protocol)->check(CLI::IsMember({"error2", "error3", "error4"}));
  eval->add_option("--seed", ev.seed, "Seed for the split and refresh streams");
  eval->add_flag("--no-refresh", ev.no_refresh, "Evaluate with the stored running statistics");

  MaskDumpArgs md;
  auto* dump = app.add_subcommand("mask-dump", "Write sensitivity grids, masks and masked images");
  dump->add_option("config", md.config)->required();
  dump->add_option("checkpoint", md.checkpoint)->required();
  dump->add_option("-o,--out", md.out, "Output directory (default <output>/masks)");
  dump->add_option("-n,--images", md.images, "Number of test images");
  dump->add_option("--lambdas", md.lambdas, "Mask mass values")->delimiter(',');
  dump->add_option("--seed", md.seed);

  SweepArgs sw;
  auto* sweep = app.add_subcommand("mismatch-sweep", "Train and evaluate across class-mismatch rates");
  sweep->add_option("config", sw.config)->required();
  sweep->add_option("-o,--out", sw.out);
  sweep->add_option("-j,--jobs", sw.jobs, "Concurrent runs");
  sweep->add_option("--grid", sw.grid, "lambda_mis values")->delimiter(',');

  GradcheckArgs gc;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and loss term");
  grad->add_flag("--with-fault-fixture", gc.fault_fixture, "Include a deliberately wrong primitive");
  grad->add_option("--per-tensor", gc.per_tensor, "Coordinates probed per parameter tensor");
  grad->add_option("--seed", gc.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*datagen) return cmd_datagen(dg);
    if (*train) return cmd_train(tr);
    if (*eval) return cmd_eval(ev);
    if (*dump) return cmd_mask_dump(md);
    if (*sweep) return cmd_sweep(sw);
    if (*grad) return cmd_gradcheck(gc);
  } catch (const ConfigError& e) {
    return config_failure(e.what());
  } catch (const std::exception& e) {
    std::cerr << "rrlab: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
