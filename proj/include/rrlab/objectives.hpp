#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rrlab/saliency.hpp"
#include "rrlab/tape.hpp"

namespace rrlab {

// Scalar references on plain probability vectors (natural logarithm).

/// H(p) = -sum p_i log p_i with 0 log 0 = 0.
double entropy(std::span<const double> p);
/// D_KL(p || q) = -sum p_i log q_i - H(p); q is clamped at 1e-12.
double kl_divergence(std::span<const double> p, std::span<const double> q);
/// d_rel = 1 - H(p) / log K, in [0, 1].
double reliability(std::span<const double> p);

// Graph-level terms. Probabilities are (N, K); targets and per-sample
// weights are constants of the step and never receive gradient.

/// Per-row entropy, shape (N).
template <typename T> ad::Var<T> entropy_rows(const ad::Var<T>& probs);
/// Per-row KL(target || probs), shape (N). The target is stop-gradiented.
template <typename T> ad::Var<T> kl_rows(const ad::Var<T>& target, const ad::Var<T>& probs);

/// -(1/m) sum log g_label(x).
template <typename T>
ad::Var<T> loss_ce(const ad::Var<T>& probs, const std::vector<std::uint32_t>& labels);
/// (1/m) sum KL(target || g(x + r_vadv)).
template <typename T>
ad::Var<T> loss_vat(const ad::Var<T>& targets, const ad::Var<T>& perturbed_probs);
/// (rho/m) sum d_rel * KL(target || g(x_roi)).
template <typename T>
ad::Var<T> loss_roireg(const ad::Var<T>& targets, const std::vector<T>& reliability_weights,
                       const ad::Var<T>& masked_probs, T rho);
/// (1/m) sum H(g(x)).
template <typename T> ad::Var<T> loss_ent(const ad::Var<T>& probs);
/// -(rho/m) sum w * log g_label(x_roi), with w = g_label(x; theta_k).
template <typename T>
ad::Var<T> loss_roiaug(const std::vector<T>& label_weights, const ad::Var<T>& masked_probs,
                       const std::vector<std::uint32_t>& labels, T rho);

struct VatConfig {
  double epsilon = 1.0;
  double xi = 1e-6;
  int power_iterations = 1;
};

template <typename T>
struct VatDirection {
  Tensor<T> perturbation;      ///< r_vadv, same shape as the batch
  std::vector<bool> fallback;  ///< sample fell back to epsilon * d
};

/// r_vadv = epsilon * r / |r|_2 per sample, where r is the input gradient of
/// KL(g(x) || g(x + r)) at r = xi * d for a random unit d. The target g(x)
/// is evaluated inside the probe by the same function, so both sides share
/// precision and stochastic state. A vanishing gradient re-draws d once,
/// then falls back to epsilon * d.
template <typename T>
VatDirection<T> vat_direction(const ProbabilityFn<T>& fn, const Tensor<T>& batch, const VatConfig& config,
                              std::uint64_t seed);

struct LossTerms {
  bool ce = false;
  bool vat = false;
  bool roireg = false;
  bool ent = false;
  bool roiaug = false;

  /// "supervised"/"CE" or '+'-joined names from {CE, VAT, ROIreg, ENT,
  /// ROIaug}; CE is always included ("VAT" means CE+VAT).
  static LossTerms parse(std::string_view name);
  std::string name() const;
  bool any() const noexcept { return ce || vat || roireg || ent || roiaug; }
  bool needs_unlabeled_targets() const noexcept { return vat || roireg; }
  bool operator==(const LossTerms&) const = default;
};

struct LossBundle {
  double ce = 0.0;
  double vat = 0.0;
  double roireg = 0.0;  ///< already includes rho_roi
  double ent = 0.0;
  double roiaug = 0.0;  ///< already includes rho_roi
  double rho_roi = 0.0;
  LossTerms enabled;
  double total = 0.0;
};

/// Sums the enabled terms in a fixed order. Throws when none is enabled.
LossBundle assemble(const LossTerms& terms, const LossBundle& values);

}  // namespace rrlab
