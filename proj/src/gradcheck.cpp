#include "rrlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <memory>
#include <numeric>

#include "rrlab/network.hpp"
#include "rrlab/objectives.hpp"
#include "rrlab/ops.hpp"
#include "rrlab/rng.hpp"
#include "rrlab/saliency.hpp"

namespace rrlab {

namespace {

double evaluate(const GradcheckCase& c, const std::vector<Tensor<double>>& inputs) {
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, false));
  const ad::Var<double> out = c.graph(tape, leaves);
  if (out.size() != 1) throw ShapeError("gradcheck", c.name + " does not produce a scalar");
  return out.value()[0];
}

}  // namespace

GradcheckResult check_gradient(const GradcheckCase& c, double h, std::uint64_t seed) {
  std::vector<Tensor<double>> analytic;
  {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> leaves;
    for (const auto& t : c.inputs) leaves.push_back(tape.leaf(t, true));
    tape.backward(c.graph(tape, leaves));
    for (const auto& l : leaves) analytic.push_back(l.grad());
  }

  Rng rng(derive_seed(seed, "gradcheck", std::hash<std::string>{}(c.name)));
  double max_diff = 0.0, max_numeric = 0.0, max_analytic = 0.0;
  std::size_t coords = 0;
  std::vector<Tensor<double>> probe = c.inputs;
  for (std::size_t t = 0; t < c.inputs.size(); ++t) {
    std::vector<std::size_t> idx(c.inputs[t].size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (c.per_tensor > 0 && idx.size() > c.per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(c.per_tensor);
    }
    for (std::size_t i : idx) {
      const double orig = probe[t][i];
      probe[t][i] = orig + h;
      const double fp = evaluate(c, probe);
      probe[t][i] = orig - h;
      const double fm = evaluate(c, probe);
      probe[t][i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[t][i];
      max_diff = std::max(max_diff, std::abs(a - numeric));
      max_numeric = std::max(max_numeric, std::abs(numeric));
      max_analytic = std::max(max_analytic, std::abs(a));
      ++coords;
    }
  }
  GradcheckResult r;
  r.name = c.name;
  r.group = c.group;
  r.tolerance = c.tolerance;
  r.coordinates = coords;
  r.max_rel_error = max_diff / std::max({max_numeric, max_analytic, 1e-8});
  r.passed = std::isfinite(r.max_rel_error) && r.max_rel_error < c.tolerance;
  return r;
}

namespace {

/// Uniform in [-1, 1] with |v| >= margin, so kinks at 0 are never crossed.
Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, double margin = 0.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data) {
    do {
      v = u(rng);
    } while (std::abs(v) < margin);
  }
  return t;
}

/// sum(w * f) with w fixed, so every output element carries gradient.
GraphFn weighted(std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)> f,
                 std::uint64_t seed) {
  return [f = std::move(f), seed](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& in) {
    const ad::Var<double> y = f(tape, in);
    Rng rng(seed);
    const ad::Var<double> w = tape.constant(random_tensor(rng, y.shape(), 0.5, 1.5));
    return ad::reduce_sum(ad::mul(y, w));
  };
}

}  // namespace

std::vector<GradcheckCase> primitive_cases(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradcheck-primitives"));
  std::vector<GradcheckCase> cases;
  using In = std::vector<ad::Var<double>>;
  using Tp = ad::Tape<double>;
  auto add = [&](std::string name, std::vector<Tensor<double>> inputs,
                 std::function<ad::Var<double>(Tp&, const In&)> f) {
    GradcheckCase c;
    c.name = std::move(name);
    c.group = "primitive";
    c.tolerance = 1e-4;
    c.graph = weighted(std::move(f), derive_seed(seed, c.name));
    c.inputs = std::move(inputs);
    cases.push_back(std::move(c));
  };

  add("add", {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}, [](Tp&, const In& v) { return ad::add(v[0], v[1]); });
  add("add_broadcast", {random_tensor(rng, {3, 4}), random_tensor(rng, {})},
      [](Tp&, const In& v) { return ad::add(v[0], v[1]); });
  add("sub", {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}, [](Tp&, const In& v) { return ad::sub(v[0], v[1]); });
  add("mul", {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}, [](Tp&, const In& v) { return ad::mul(v[0], v[1]); });
  add("mul_broadcast", {random_tensor(rng, {}), random_tensor(rng, {2, 3})},
      [](Tp&, const In& v) { return ad::mul(v[0], v[1]); });
  add("div", {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}, -2.0, 2.0, 0.5)},
      [](Tp&, const In& v) { return ad::div(v[0], v[1]); });
  add("scale", {random_tensor(rng, {5})}, [](Tp&, const In& v) { return ad::scale(v[0], -1.7); });
  add("leaky_relu", {random_tensor(rng, {4, 5}, -1.0, 1.0, 0.05)},
      [](Tp&, const In& v) { return ad::leaky_relu(v[0], 0.1); });
  add("abs", {random_tensor(rng, {4, 5}, -1.0, 1.0, 0.05)}, [](Tp&, const In& v) { return ad::abs(v[0]); });
  add("log", {random_tensor(rng, {4, 5}, 0.2, 2.0)}, [](Tp&, const In& v) { return ad::log(v[0]); });
  add("softmax", {random_tensor(rng, {3, 5}, -2.0, 2.0)}, [](Tp&, const In& v) { return ad::softmax(v[0]); });
  add("reduce_sum", {random_tensor(rng, {2, 3, 4})}, [](Tp&, const In& v) { return ad::reduce_sum(v[0]); });
  add("sum_last", {random_tensor(rng, {2, 3, 4})}, [](Tp&, const In& v) { return ad::sum_last(v[0]); });
  add("reduce_max", {random_tensor(rng, {3, 4})}, [](Tp&, const In& v) { return ad::reduce_max(v[0]); });
  add("max_last", {random_tensor(rng, {3, 6})}, [](Tp&, const In& v) { return ad::max_last(v[0]); });
  add("l1_norm", {random_tensor(rng, {3, 4}, -1.0, 1.0, 0.05)}, [](Tp&, const In& v) { return ad::l1_norm(v[0]); });
  add("l2_norm", {random_tensor(rng, {3, 4})}, [](Tp&, const In& v) { return ad::l2_norm(v[0]); });
  add("pick", {random_tensor(rng, {3, 4})}, [](Tp&, const In& v) { return ad::pick(v[0], {1, 0, 3}); });
  add("reshape", {random_tensor(rng, {2, 6})}, [](Tp&, const In& v) { return ad::reshape(v[0], Shape{3, 4}); });
  add("bias_add", {random_tensor(rng, {2, 3, 3, 4}), random_tensor(rng, {4})},
      [](Tp&, const In& v) { return ad::bias_add(v[0], v[1]); });
  add("dense", {random_tensor(rng, {3, 5}), random_tensor(rng, {5, 4}), random_tensor(rng, {4})},
      [](Tp&, const In& v) { return ad::dense(v[0], v[1], &v[2]); });
  add("dense_nobias", {random_tensor(rng, {3, 5}), random_tensor(rng, {5, 4})},
      [](Tp&, const In& v) { return ad::dense(v[0], v[1], static_cast<const ad::Var<double>*>(nullptr)); });
  add("conv2d_same", {random_tensor(rng, {2, 5, 5, 3}), random_tensor(rng, {3, 3, 3, 4})},
      [](Tp&, const In& v) { return ad::conv2d(v[0], v[1], ad::ConvGeometry{1, 1}); });
  add("conv2d_stride2", {random_tensor(rng, {2, 6, 6, 2}), random_tensor(rng, {3, 3, 2, 3})},
      [](Tp&, const In& v) { return ad::conv2d(v[0], v[1], ad::ConvGeometry{2, 0}); });
  add("conv2d_1x1", {random_tensor(rng, {2, 3, 3, 4}), random_tensor(rng, {1, 1, 4, 2})},
      [](Tp&, const In& v) { return ad::conv2d(v[0], v[1], ad::ConvGeometry{1, 0}); });
  add("batch_norm_train", {random_tensor(rng, {4, 3, 3, 5}), random_tensor(rng, {5}, 0.5, 1.5), random_tensor(rng, {5})},
      [](Tp&, const In& v) { return ad::batch_norm_train(v[0], v[1], v[2], 1e-5, static_cast<ad::BatchStats<double>*>(nullptr)); });
  add("batch_norm_eval", {random_tensor(rng, {4, 2, 2, 3}), random_tensor(rng, {3}, 0.5, 1.5), random_tensor(rng, {3})},
      [](Tp&, const In& v) {
        return ad::batch_norm_eval(v[0], v[1], v[2], std::vector<double>{0.1, -0.2, 0.3}, std::vector<double>{0.5, 1.2, 2.0},
                                   1e-5);
      });
  add("max_pool2d", {random_tensor(rng, {2, 4, 4, 3})}, [](Tp&, const In& v) { return ad::max_pool2d(v[0], 2, 2); });
  add("max_pool2d_overlap", {random_tensor(rng, {1, 5, 5, 2})},
      [](Tp&, const In& v) { return ad::max_pool2d(v[0], 3, 2); });
  add("global_avg_pool", {random_tensor(rng, {2, 3, 3, 4})}, [](Tp&, const In& v) { return ad::global_avg_pool(v[0]); });
  add("dropout", {random_tensor(rng, {4, 6})}, [](Tp&, const In& v) { return ad::dropout(v[0], 0.5, 1234); });
  add("cross_entropy_chain", {random_tensor(rng, {3, 4}, -2.0, 2.0)},
      [](Tp&, const In& v) { return ad::log(ad::pick(ad::softmax(v[0]), {2, 0, 1})); });
  return cases;
}

std::vector<GradcheckCase> loss_cases(std::uint64_t seed, std::size_t per_tensor) {
  const ArchitectureSpec spec = ArchitectureSpec::conv_tiny(16, 16, 1, 4);
  auto model = std::make_shared<const ModelState<double>>(build_model<double>(spec, derive_seed(seed, "gradcheck-model")));
  Rng rng(derive_seed(seed, "gradcheck-data"));
  const std::size_t n = 6;
  const Tensor<double> x = random_tensor(rng, {n, 16, 16, 1});
  const std::vector<std::uint32_t> labels{0, 1, 2, 3, 1, 2};

  ForwardOptions opts;
  opts.training = true;
  opts.dropout_seed = derive_seed(seed, "gradcheck-dropout");
  const ProbabilityFn<double> fn = model_probability_fn(*model, opts);

  // Step constants at theta_k: targets, sensitivities, weights, masks, r_vadv.
  Tensor<double> targets;
  std::vector<SensitivityMap> maps = pixel_sensitivity(fn, x, &targets);
  const BlockPartition partition = BlockPartition::eighths(16, 16);
  const Tensor<float> xf = x.cast<float>();
  const PixelStats stats = compute_pixel_stats(xf);
  Rng noise(derive_seed(seed, "gradcheck-mask-noise"));
  Tensor<double> x_roi(x.shape), x_aug(x.shape);
  std::vector<double> d_rel, w_label;
  const std::size_t k = 4, per = x.size() / n;
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> p(targets.data.begin() + static_cast<std::ptrdiff_t>(i * k),
                                targets.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    d_rel.push_back(reliability(p));
    w_label.push_back(p[labels[i]]);
    block_sensitivity(maps[i], partition);
    const Tensor<float> xi = slice_sample(xf, i);
    const Tensor<float> roi = apply_mask(xi, select_mask(maps[i].r2d, 0.5), partition, stats, noise);
    const Tensor<float> aug = apply_mask(xi, select_mask(maps[i].r2d, 0.05), partition, stats, noise);
    std::copy(roi.data.begin(), roi.data.end(), x_roi.data.begin() + static_cast<std::ptrdiff_t>(i * per));
    std::copy(aug.data.begin(), aug.data.end(), x_aug.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  VatConfig vat;
  vat.epsilon = 1.0;
  Tensor<double> x_adv = vat_direction(fn, x, vat, derive_seed(seed, "gradcheck-vat")).perturbation;
  for (std::size_t i = 0; i < x_adv.size(); ++i) x_adv[i] += x[i];

  using In = std::vector<ad::Var<double>>;
  auto probs = [model, opts](ad::Tape<double>& tape, const In& params, const Tensor<double>& input) {
    const BoundModel<double> bound{params};
    return ad::softmax(forward_logits(*model, bound, tape.constant(input), opts));
  };
  const double rho = 1.3;
  std::vector<GradcheckCase> cases;
  auto add = [&](std::string name, GraphFn g) {
    GradcheckCase c;
    c.name = std::move(name);
    c.group = "loss";
    c.tolerance = 1e-3;
    c.graph = std::move(g);
    c.inputs = model->params;
    c.per_tensor = per_tensor;
    cases.push_back(std::move(c));
  };
  add("loss_ce", [=](ad::Tape<double>& t, const In& p) { return loss_ce(probs(t, p, x), labels); });
  add("loss_vat", [=](ad::Tape<double>& t, const In& p) { return loss_vat(t.constant(targets), probs(t, p, x_adv)); });
  add("loss_roireg", [=](ad::Tape<double>& t, const In& p) {
    return loss_roireg(t.constant(targets), d_rel, probs(t, p, x_roi), rho);
  });
  add("loss_ent", [=](ad::Tape<double>& t, const In& p) { return loss_ent(probs(t, p, x)); });
  add("loss_roiaug", [=](ad::Tape<double>& t, const In& p) { return loss_roiaug(w_label, probs(t, p, x_aug), labels, rho); });
  add("loss_total", [=](ad::Tape<double>& t, const In& p) {
    ad::Var<double> total = loss_ce(probs(t, p, x), labels);
    total = ad::add(total, loss_vat(t.constant(targets), probs(t, p, x_adv)));
    total = ad::add(total, loss_roireg(t.constant(targets), d_rel, probs(t, p, x_roi), rho));
    total = ad::add(total, loss_ent(probs(t, p, x)));
    return ad::add(total, loss_roiaug(w_label, probs(t, p, x_aug), labels, rho));
  });
  return cases;
}

GradcheckCase corrupted_case() {
  GradcheckCase c;
  c.name = "corrupted_scale";
  c.group = "fixture";
  c.tolerance = 1e-4;
  c.graph = [](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& in) {
    const ad::Var<double>& x = in[0];
    Tensor<double> y = x.value();
    for (double& v : y.data) v *= 2.0;
    const ad::NodeId ix = x.id();
    const ad::Var<double> out = tape.record("corrupted_scale", std::move(y), {x}, [ix](ad::Tape<double>& t, const Tensor<double>& g) {
      Tensor<double>& gx = t.accumulate(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.2 * g[i];
    });
    return ad::reduce_sum(out);
  };
  c.inputs = {Tensor<double>({4}, std::vector<double>{0.3, -0.1, 0.7, 1.2})};
  return c;
}

std::vector<GradcheckResult> run_gradcheck(const std::vector<GradcheckCase>& cases, std::uint64_t seed) {
  std::vector<GradcheckResult> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(check_gradient(c, 1e-6, seed));
  return out;
}

void print_gradcheck_report(std::ostream& os, const std::vector<GradcheckResult>& results) {
  std::size_t failed = 0;
  for (const auto& r : results) {
    os << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(22) << r.name << " " << std::setw(9) << r.group
       << " max_rel_err=" << std::scientific << std::setprecision(3) << r.max_rel_error << " tol=" << r.tolerance
       << " coords=" << std::defaultfloat << r.coordinates << "\n";
    failed += !r.passed;
  }
  os << results.size() - failed << "/" << results.size() << " gradient checks passed\n";
}

}  // namespace rrlab
