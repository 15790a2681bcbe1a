#include "rrlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "rrlab/ops.hpp"

namespace rrlab {

void AdamSchedule::validate() const {
  if (!(lr >= 0.0)) throw std::invalid_argument("schedule: learning rate must be >= 0");
  if (n_update == 0) throw std::invalid_argument("schedule: n_update must be positive");
  if (n_decay > n_update) {
    throw std::invalid_argument("schedule: n_decay (" + std::to_string(n_decay) + ") exceeds n_update (" +
                                std::to_string(n_update) + ")");
  }
  if (!(beta2 > 0.0 && beta2 < 1.0) || !(beta1_phase1 >= 0.0 && beta1_phase1 < 1.0) ||
      !(beta1_phase2 >= 0.0 && beta1_phase2 < 1.0) || !(eps > 0.0)) {
    throw std::invalid_argument("schedule: Adam moments must lie in [0, 1) and eps > 0");
  }
}

double AdamSchedule::learning_rate(std::uint64_t t) const {
  if (t <= boundary()) return lr;
  if (t >= n_update) return 0.0;
  return lr * static_cast<double>(n_update - t) / static_cast<double>(n_decay);
}

double AdamSchedule::beta1(std::uint64_t t) const { return t <= boundary() ? beta1_phase1 : beta1_phase2; }

Adam::Adam(const ModelState<float>& model) {
  for (const auto& p : model.params) {
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
  }
}

void Adam::update(ModelState<float>& model, const std::vector<Tensor<float>>& grads, const AdamSchedule& schedule,
                  std::uint64_t t) {
  if (grads.size() != model.params.size() || m_.size() != model.params.size()) {
    throw ShapeError("adam", std::to_string(grads.size()) + " gradients for " + std::to_string(model.params.size()) + " parameters");
  }
  const double lr = schedule.learning_rate(t);
  const double b1 = schedule.beta1(t);
  const double b2 = schedule.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    auto& p = model.params[i].data;
    const auto& g = grads[i].data;
    if (g.size() != p.size()) throw ShapeError("adam", "gradient shape mismatch for " + model.param_names[i]);
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] = static_cast<float>(p[j] - lr * mhat / (std::sqrt(vhat) + schedule.eps));
    }
  }
}

void TrainConfig::validate() const {
  if (!terms.any()) throw std::invalid_argument("train: no loss terms enabled");
  if (m_l == 0) throw std::invalid_argument("train: m_L must be positive");
  if ((terms.vat || terms.roireg || terms.ent) && m_ul == 0) throw std::invalid_argument("train: m_UL must be positive");
  if (!(rho_roi >= 0.0)) throw std::invalid_argument("train: rho_roi must be >= 0");
  if (terms.roireg && !(lambda > 0.0 && lambda < 1.0)) throw std::invalid_argument("train: lambda must lie in (0, 1)");
  if (terms.roiaug && !(lambda_aug > 0.0 && lambda_aug < 1.0)) {
    throw std::invalid_argument("train: lambda_aug must lie in (0, 1)");
  }
  if (terms.vat && (!(vat.epsilon > 0.0) || !(vat.xi > 0.0) || vat.power_iterations < 1)) {
    throw std::invalid_argument("train: VAT needs epsilon > 0, xi > 0 and at least one power iteration");
  }
  if (block_rows <= 0 || block_cols <= 0) throw std::invalid_argument("train: block size must be positive");
  if (log_every == 0) throw std::invalid_argument("train: log interval must be positive");
  schedule.validate();
  augmentation.validate();
}

namespace {

bool unlabeled_terms(const LossTerms& t) { return t.vat || t.roireg || t.ent; }

// Dropout stream index of each forward pass within a step.
enum Pass : std::uint64_t { SnapshotU = 0, SnapshotL, LiveCE, LiveVAT, LiveROI, LiveENT, LiveAug };

std::size_t count_correct(const Tensor<float>& probs, const std::vector<std::uint32_t>& labels) {
  const std::size_t k = probs.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* p = probs.data.data() + i * k;
    correct += static_cast<std::size_t>(std::max_element(p, p + k) - p) == labels[i];
  }
  return correct;
}

std::string dump_terms(const StepReport& r) {
  std::ostringstream os;
  os << std::setprecision(9) << "non-finite loss at step " << r.step << " (" << r.losses.enabled.name() << "): ce="
     << r.losses.ce << " vat=" << r.losses.vat << " roireg=" << r.losses.roireg << " ent=" << r.losses.ent
     << " roiaug=" << r.losses.roiaug << " total=" << r.losses.total << " lr=" << r.lr;
  return os.str();
}

}  // namespace

Trainer::Trainer(ModelState<float>& model, const TrainData& data, TrainConfig config)
    : model_(model),
      data_(data),
      config_(std::move(config)),
      sampler_((config_.validate(), data.labeled ? data.labeled->size() : 0),
               data.unlabeled ? data.unlabeled->size() : 0, config_.m_l,
               unlabeled_terms(config_.terms) ? config_.m_ul : 0, derive_seed(config_.seed, "sampler")),
      adam_(model) {
  if (!data_.labeled || !data_.labeled->has_labels()) throw std::invalid_argument("train: labeled set required");
  check_input_shape(model_.spec, data_.labeled->images.shape);
  if (data_.labeled->classes != static_cast<std::uint32_t>(model_.spec.classes)) {
    throw std::invalid_argument("train: dataset has " + std::to_string(data_.labeled->classes) + " classes, model " +
                                std::to_string(model_.spec.classes));
  }
  partition_ = BlockPartition::grid(model_.spec.rows, model_.spec.cols, config_.block_rows, config_.block_cols);
  if ((config_.terms.roireg || config_.terms.roiaug) && data_.pixel_stats.shape != data_.labeled->image_shape()) {
    throw std::invalid_argument("train: masking needs pixel statistics of shape " +
                                shape_string(data_.labeled->image_shape()));
  }
  if (config_.roi_weight == RoiWeight::LabelProbability && data_.unlabeled && data_.unlabeled->size() > 0) {
    throw std::invalid_argument("train: label-probability ROIreg weights need an empty D_UL");
  }
}

std::uint64_t Trainer::stream(std::string_view name, std::uint64_t sub) const {
  return derive_seed(config_.seed, name, model_.step + 1, sub);
}

Tensor<float> Trainer::labeled_batch(const std::vector<std::size_t>& idx, std::vector<std::uint32_t>& labels) {
  labels = data_.labeled->gather_labels(idx);
  Rng rng(stream("augment-labeled"));
  return augment_batch(data_.labeled->gather(idx), config_.augmentation, rng);
}

Tensor<float> Trainer::unlabeled_batch(const std::vector<std::size_t>& idx) {
  static const Dataset empty;
  const Dataset& ul = data_.unlabeled ? *data_.unlabeled : empty;
  Rng rng(stream("augment-unlabeled"));
  return augment_batch(gather_usl(*data_.labeled, ul, idx), config_.augmentation, rng);
}

StepReport Trainer::step() {
  const std::uint64_t t = model_.step + 1;
  const LossTerms& terms = config_.terms;
  StepReport rep;
  rep.step = t;
  rep.lr = config_.schedule.learning_rate(t);
  rep.beta1 = config_.schedule.beta1(t);

  const Minibatch mb = sampler_.next();
  std::vector<std::uint32_t> y_l;
  const Tensor<float> x_l = labeled_batch(mb.labeled, y_l);
  Tensor<float> x_u;
  if (unlabeled_terms(terms)) x_u = unlabeled_batch(mb.unlabeled);

  auto options = [&](Pass pass) {
    ForwardOptions o;
    o.training = true;
    o.dropout_seed = stream("dropout", pass);
    if (config_.deterministic_targets && (pass == SnapshotU || pass == SnapshotL)) o.dropout = false;
    return o;
  };
  auto snapshot_fn = [&](Pass pass, std::vector<ad::BatchStats<float>>* stats) -> ProbabilityFn<float> {
    const ForwardOptions o = options(pass);
    return [this, o, stats](ad::Tape<float>& tape, const ad::Var<float>& x) {
      const BoundModel<float> b = bind_model(model_, tape, false);
      return ad::softmax(forward_logits(model_, b, x, o, stats));
    };
  };

  // Snapshot at theta_k: one pass feeds the VAT/ROIreg targets, g_max and d_rel.
  std::vector<ad::BatchStats<float>> snapshot_stats;
  Tensor<float> targets;
  std::vector<float> roi_weights;
  Tensor<float> x_roi;
  if (terms.vat || terms.roireg) {
    const ProbabilityFn<float> fn = snapshot_fn(SnapshotU, &snapshot_stats);
    if (terms.roireg) {
      std::vector<SensitivityMap> maps = pixel_sensitivity(fn, x_u, &targets);
      const std::size_t k = targets.dim(1);
      Rng mask_rng(stream("mask-noise"));
      x_roi = Tensor<float>(x_u.shape);
      const std::size_t per = x_u.size() / x_u.dim(0);
      for (std::size_t i = 0; i < maps.size(); ++i) {
        const std::vector<double> p(targets.data.begin() + static_cast<std::ptrdiff_t>(i * k),
                                    targets.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
        roi_weights.push_back(config_.roi_weight == RoiWeight::Reliability
                                  ? static_cast<float>(reliability(p))
                                  : static_cast<float>(p[data_.labeled->labels.at(mb.unlabeled[i])]));
        block_sensitivity(maps[i], partition_);
        rep.zero_gradient_maps += maps[i].zero_gradient;
        const MaskRegion region = select_mask(maps[i].r2d, config_.lambda);
        const Tensor<float> masked = apply_mask(slice_sample(x_u, i), region, partition_, data_.pixel_stats, mask_rng);
        std::copy(masked.data.begin(), masked.data.end(), x_roi.data.begin() + static_cast<std::ptrdiff_t>(i * per));
      }
    } else {
      ad::Tape<float> tape;
      targets = fn(tape, tape.constant(x_u)).value();
    }
  }

  Tensor<float> x_adv;
  if (terms.vat) {
    const std::uint64_t seed = stream("vat-direction");
    Tensor<float> r;
    if (config_.vat_double_precision) {
      const ModelState<double> model_d = model_.cast<double>();
      const VatDirection<double> dir =
          vat_direction(model_probability_fn(model_d, options(SnapshotU)), x_u.cast<double>(), config_.vat, seed);
      r = dir.perturbation.cast<float>();
      rep.vat_fallbacks = static_cast<std::size_t>(std::count(dir.fallback.begin(), dir.fallback.end(), true));
    } else {
      const VatDirection<float> dir = vat_direction(model_probability_fn(model_, options(SnapshotU)), x_u, config_.vat, seed);
      r = dir.perturbation;
      rep.vat_fallbacks = static_cast<std::size_t>(std::count(dir.fallback.begin(), dir.fallback.end(), true));
    }
    x_adv = x_u;
    for (std::size_t i = 0; i < x_adv.size(); ++i) x_adv[i] += r[i];
  }

  std::vector<float> aug_weights;
  Tensor<float> x_l_roi;
  if (terms.roiaug) {
    Tensor<float> probs_l;
    std::vector<SensitivityMap> maps = pixel_sensitivity(snapshot_fn(SnapshotL, nullptr), x_l, &probs_l);
    const std::size_t k = probs_l.dim(1);
    Rng mask_rng(stream("mask-noise-aug"));
    x_l_roi = Tensor<float>(x_l.shape);
    const std::size_t per = x_l.size() / x_l.dim(0);
    for (std::size_t i = 0; i < maps.size(); ++i) {
      aug_weights.push_back(probs_l[i * k + y_l[i]]);
      block_sensitivity(maps[i], partition_);
      rep.zero_gradient_maps += maps[i].zero_gradient;
      const MaskRegion region = select_mask(maps[i].r2d, config_.lambda_aug);
      const Tensor<float> masked = apply_mask(slice_sample(x_l, i), region, partition_, data_.pixel_stats, mask_rng);
      std::copy(masked.data.begin(), masked.data.end(), x_l_roi.data.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
  }

  // Live losses at theta.
  ad::Tape<float> tape;
  const BoundModel<float> bound = bind_model(model_, tape, true);
  auto live = [&](const Tensor<float>& x, Pass pass, std::vector<ad::BatchStats<float>>* stats) {
    return ad::softmax(forward_logits(model_, bound, tape.constant(x), options(pass), stats));
  };
  const float rho = static_cast<float>(config_.rho_roi);
  std::vector<ad::BatchStats<float>> labeled_stats, ent_stats;
  LossBundle values;
  values.rho_roi = config_.rho_roi;
  std::optional<ad::Var<float>> total;
  auto add_term = [&](const ad::Var<float>& term, double& slot) {
    slot = term.value()[0];
    total = total ? ad::add(*total, term) : term;
  };

  {
    const ad::Var<float> probs_l = live(x_l, LiveCE, &labeled_stats);
    rep.train_accuracy = static_cast<double>(count_correct(probs_l.value(), y_l)) / static_cast<double>(y_l.size());
    if (terms.ce) add_term(loss_ce(probs_l, y_l), values.ce);
  }
  if (terms.vat) add_term(loss_vat(tape.constant(targets), live(x_adv, LiveVAT, nullptr)), values.vat);
  if (terms.roireg) {
    add_term(loss_roireg(tape.constant(targets), roi_weights, live(x_roi, LiveROI, nullptr), rho), values.roireg);
  }
  if (terms.ent) {
    add_term(loss_ent(live(x_u, LiveENT, snapshot_stats.empty() ? &ent_stats : nullptr)), values.ent);
  }
  if (terms.roiaug) add_term(loss_roiaug(aug_weights, live(x_l_roi, LiveAug, nullptr), y_l, rho), values.roiaug);

  values.enabled = terms;
  rep.losses = assemble(terms, values);
  if (!std::isfinite(rep.losses.total)) throw TrainingDiverged(dump_terms(rep), rep);

  tape.backward(*total);
  std::vector<Tensor<float>> grads;
  grads.reserve(bound.params.size());
  for (const auto& p : bound.params) grads.push_back(p.grad());
  adam_.update(model_, grads, config_.schedule, t);

  update_running_stats(model_, labeled_stats, 0.1);
  if (!snapshot_stats.empty()) {
    update_running_stats(model_, snapshot_stats, 0.1);
  } else if (!ent_stats.empty()) {
    update_running_stats(model_, ent_stats, 0.1);
  }
  model_.step = t;
  return rep;
}

void write_metrics_header(std::ostream& os) {
  os << "step,lr,beta1,ce,vat,roireg,ent,roiaug,total,train_acc,val_err\n";
}

void write_metrics_row(std::ostream& os, const MetricsRow& row) {
  const StepReport& r = row.report;
  const LossBundle& l = r.losses;
  std::ostringstream line;
  line << std::setprecision(9) << r.step << ',' << r.lr << ',' << r.beta1 << ',' << l.ce << ',' << l.vat << ','
       << l.roireg << ',' << l.ent << ',' << l.roiaug << ',' << l.total << ',' << r.train_accuracy << ',';
  if (row.validation_error) line << *row.validation_error;
  os << line.str() << '\n';
}

void run_schedule(ModelState<float>& model, const TrainData& data, const TrainConfig& config, const RunHooks& hooks) {
  Trainer trainer(model, data, config);
  while (model.step < config.schedule.n_update) {
    const StepReport rep = trainer.step();
    const bool checkpoint_due = config.checkpoint_every > 0 && rep.step % config.checkpoint_every == 0;
    if (rep.step % config.log_every == 0 && hooks.on_log) {
      MetricsRow row{rep, std::nullopt};
      if (data.validation && data.validation->size() > 0) row.validation_error = error_rate(model, *data.validation);
      hooks.on_log(row);
    }
    if (hooks.on_checkpoint && (checkpoint_due || rep.step == config.schedule.n_update)) hooks.on_checkpoint(model);
  }
}

double error_rate(const ModelState<float>& model, const Dataset& data, std::size_t batch) {
  if (!data.has_labels() || data.size() == 0) throw std::invalid_argument("error_rate: labeled, nonempty data required");
  ForwardOptions eval;
  eval.training = false;
  std::size_t wrong = 0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> idx(std::min(batch, data.size() - start));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const Tensor<float> probs = predict(model, data.gather(idx), eval);
    wrong += idx.size() - count_correct(probs, data.gather_labels(idx));
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(data.size());
}

}  // namespace rrlab
