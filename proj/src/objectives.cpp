#include "rrlab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "rrlab/ops.hpp"
#include "rrlab/rng.hpp"

namespace rrlab {

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double cross = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) cross -= p[i] * std::log(std::max(q[i], ad::kLogFloor));
  }
  return cross - entropy(p);
}

double reliability(std::span<const double> p) {
  if (p.size() < 2) throw std::invalid_argument("reliability: need K >= 2");
  const double d = 1.0 - entropy(p) / std::log(static_cast<double>(p.size()));
  return std::clamp(d, 0.0, 1.0);
}

template <typename T>
ad::Var<T> entropy_rows(const ad::Var<T>& probs) {
  return ad::scale(ad::sum_last(ad::mul(probs, ad::log(probs))), T{-1});
}

template <typename T>
ad::Var<T> kl_rows(const ad::Var<T>& target, const ad::Var<T>& probs) {
  if (target.shape() != probs.shape()) {
    throw ShapeError("kl", "target " + shape_string(target.shape()) + " vs " + shape_string(probs.shape()));
  }
  const ad::Var<T> p = ad::stop_gradient(target);
  return ad::sum_last(ad::mul(p, ad::sub(ad::log(p), ad::log(probs))));
}

namespace {

template <typename T>
T batch_factor(const ad::Var<T>& per_sample) {
  if (per_sample.size() == 0) throw ShapeError("loss", "empty minibatch");
  return T{1} / static_cast<T>(per_sample.size());
}

}  // namespace

template <typename T>
ad::Var<T> loss_ce(const ad::Var<T>& probs, const std::vector<std::uint32_t>& labels) {
  const ad::Var<T> logp = ad::log(ad::pick(probs, labels));
  return ad::scale(ad::reduce_sum(logp), -batch_factor(logp));
}

template <typename T>
ad::Var<T> loss_vat(const ad::Var<T>& targets, const ad::Var<T>& perturbed_probs) {
  const ad::Var<T> kl = kl_rows(targets, perturbed_probs);
  return ad::scale(ad::reduce_sum(kl), batch_factor(kl));
}

template <typename T>
ad::Var<T> loss_roireg(const ad::Var<T>& targets, const std::vector<T>& reliability_weights,
                       const ad::Var<T>& masked_probs, T rho) {
  const ad::Var<T> kl = kl_rows(targets, masked_probs);
  if (reliability_weights.size() != kl.size()) {
    throw ShapeError("loss_roireg", std::to_string(reliability_weights.size()) + " weights for " +
                                        std::to_string(kl.size()) + " samples");
  }
  const ad::Var<T> w = kl.tape()->constant(Tensor<T>(kl.shape(), reliability_weights));
  return ad::scale(ad::reduce_sum(ad::mul(w, kl)), rho * batch_factor(kl));
}

template <typename T>
ad::Var<T> loss_ent(const ad::Var<T>& probs) {
  const ad::Var<T> h = entropy_rows(probs);
  return ad::scale(ad::reduce_sum(h), batch_factor(h));
}

template <typename T>
ad::Var<T> loss_roiaug(const std::vector<T>& label_weights, const ad::Var<T>& masked_probs,
                       const std::vector<std::uint32_t>& labels, T rho) {
  const ad::Var<T> logp = ad::log(ad::pick(masked_probs, labels));
  if (label_weights.size() != logp.size()) {
    throw ShapeError("loss_roiaug", std::to_string(label_weights.size()) + " weights for " +
                                        std::to_string(logp.size()) + " samples");
  }
  const ad::Var<T> w = logp.tape()->constant(Tensor<T>(logp.shape(), label_weights));
  return ad::scale(ad::reduce_sum(ad::mul(w, logp)), -rho * batch_factor(logp));
}

namespace {

template <typename T>
void normalize_rows(Tensor<T>& t, std::size_t n, std::vector<double>* norms) {
  const std::size_t per = t.size() / n;
  if (norms) norms->assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < per; ++j) sq += static_cast<double>(t[i * per + j]) * static_cast<double>(t[i * per + j]);
    const double norm = std::sqrt(sq);
    if (norms) (*norms)[i] = norm;
    if (norm > 0.0) {
      for (std::size_t j = 0; j < per; ++j) t[i * per + j] = static_cast<T>(static_cast<double>(t[i * per + j]) / norm);
    }
  }
}

template <typename T>
Tensor<T> random_unit_rows(const Shape& shape, Rng& rng) {
  Tensor<T> d(shape);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (T& v : d.data) v = static_cast<T>(normal(rng));
  normalize_rows(d, shape[0], nullptr);
  return d;
}

/// Input gradient of sum_i KL(g(x_i) || g(x_i + xi * d_i)) at the probe point.
template <typename T>
Tensor<T> probe_gradient(const ProbabilityFn<T>& fn, const Tensor<T>& batch, const Tensor<T>& unit, double xi) {
  ad::Tape<T> tape;
  const ad::Var<T> x = tape.constant(batch);
  const ad::Var<T> target = ad::stop_gradient(fn(tape, x));
  Tensor<T> scaled = unit;
  for (T& v : scaled.data) v = static_cast<T>(static_cast<double>(v) * xi);
  const ad::Var<T> r = tape.leaf(std::move(scaled), true);
  const ad::Var<T> q = fn(tape, ad::add(x, r));
  tape.backward(ad::reduce_sum(kl_rows(target, q)));
  return r.grad();
}

}  // namespace

template <typename T>
VatDirection<T> vat_direction(const ProbabilityFn<T>& fn, const Tensor<T>& batch, const VatConfig& config,
                              std::uint64_t seed) {
  if (!(config.epsilon > 0.0) || !(config.xi > 0.0) || config.power_iterations < 1) {
    throw std::invalid_argument("vat_direction: epsilon and xi must be positive, iterations >= 1");
  }
  if (batch.rank() < 2) throw ShapeError("vat_direction", "expected a batch, got " + shape_string(batch.shape));
  const std::size_t n = batch.dim(0);
  const std::size_t per = batch.size() / n;
  Rng rng(seed);
  Tensor<T> d = random_unit_rows<T>(batch.shape, rng);
  std::vector<double> norms;
  for (int it = 0; it < config.power_iterations; ++it) {
    Tensor<T> g = probe_gradient(fn, batch, d, config.xi);
    normalize_rows(g, n, &norms);
    for (std::size_t i = 0; i < n; ++i) {
      // Rows with a vanishing gradient keep d and are retried below.
      if (norms[i] >= kZeroGradientThreshold) std::copy_n(g.data.begin() + i * per, per, d.data.begin() + i * per);
    }
  }

  VatDirection<T> out;
  out.fallback.assign(n, false);
  std::vector<std::size_t> stalled;
  for (std::size_t i = 0; i < n; ++i) {
    if (norms[i] < kZeroGradientThreshold) stalled.push_back(i);
  }
  if (!stalled.empty()) {
    // One re-draw for the whole batch keeps BN statistics of the probe
    // comparable; only the stalled rows adopt the new result.
    Tensor<T> fresh = random_unit_rows<T>(batch.shape, rng);
    Tensor<T> g = probe_gradient(fn, batch, fresh, config.xi);
    std::vector<double> retry_norms;
    normalize_rows(g, n, &retry_norms);
    for (std::size_t i : stalled) {
      const bool ok = retry_norms[i] >= kZeroGradientThreshold;
      const Tensor<T>& src = ok ? g : fresh;
      std::copy_n(src.data.begin() + i * per, per, d.data.begin() + i * per);
      out.fallback[i] = !ok;
    }
  }
  for (T& v : d.data) v = static_cast<T>(static_cast<double>(v) * config.epsilon);
  out.perturbation = std::move(d);
  return out;
}

LossTerms LossTerms::parse(std::string_view name) {
  LossTerms t;
  t.ce = true;
  if (name == "supervised" || name == "CE") return t;
  std::size_t start = 0;
  while (start <= name.size()) {
    const std::size_t end = std::min(name.find('+', start), name.size());
    const std::string_view token = name.substr(start, end - start);
    if (token == "CE") {
      t.ce = true;
    } else if (token == "VAT") {
      t.vat = true;
    } else if (token == "ROIreg") {
      t.roireg = true;
    } else if (token == "ENT") {
      t.ent = true;
    } else if (token == "ROIaug") {
      t.roiaug = true;
    } else {
      throw std::invalid_argument("unknown loss term '" + std::string(token) + "' in '" + std::string(name) + "'");
    }
    start = end + 1;
  }
  return t;
}

std::string LossTerms::name() const {
  std::vector<std::string> parts;
  if (vat) parts.emplace_back("VAT");
  if (roireg) parts.emplace_back("ROIreg");
  if (ent) parts.emplace_back("ENT");
  if (roiaug) parts.emplace_back("ROIaug");
  if (parts.empty()) return ce ? "supervised" : "none";
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : "+") + p;
  if (!ce) out = "noCE:" + out;
  return out;
}

LossBundle assemble(const LossTerms& terms, const LossBundle& values) {
  if (!terms.any()) throw std::invalid_argument("assemble: no loss terms enabled");
  LossBundle b = values;
  b.enabled = terms;
  b.total = 0.0;
  if (terms.ce) b.total += b.ce;
  if (terms.vat) b.total += b.vat;
  if (terms.roireg) b.total += b.roireg;
  if (terms.ent) b.total += b.ent;
  if (terms.roiaug) b.total += b.roiaug;
  return b;
}

#define RRLAB_INSTANTIATE_OBJECTIVES(T)                                                                \
  template ad::Var<T> entropy_rows<T>(const ad::Var<T>&);                                              \
  template ad::Var<T> kl_rows<T>(const ad::Var<T>&, const ad::Var<T>&);                                \
  template ad::Var<T> loss_ce<T>(const ad::Var<T>&, const std::vector<std::uint32_t>&);                \
  template ad::Var<T> loss_vat<T>(const ad::Var<T>&, const ad::Var<T>&);                               \
  template ad::Var<T> loss_roireg<T>(const ad::Var<T>&, const std::vector<T>&, const ad::Var<T>&, T);  \
  template ad::Var<T> loss_ent<T>(const ad::Var<T>&);                                                  \
  template ad::Var<T> loss_roiaug<T>(const std::vector<T>&, const ad::Var<T>&,                         \
                                     const std::vector<std::uint32_t>&, T);                            \
  template VatDirection<T> vat_direction<T>(const ProbabilityFn<T>&, const Tensor<T>&, const VatConfig&, \
                                            std::uint64_t);

RRLAB_INSTANTIATE_OBJECTIVES(float)
RRLAB_INSTANTIATE_OBJECTIVES(double)

#undef RRLAB_INSTANTIATE_OBJECTIVES

}  // namespace rrlab
