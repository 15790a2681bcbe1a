#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rrlab/datasets.hpp"
#include "rrlab/network.hpp"
#include "rrlab/saliency.hpp"

namespace rrlab {

enum class Protocol { Error2, Error3, Error4 };

std::string_view protocol_name(Protocol p);
Protocol parse_protocol(std::string_view name);

/// Default error type for a preprocessing / augmentation combination:
/// error3, except error4 when whitening is combined with augmentation.
Protocol default_protocol(bool zca, bool augmentation);

struct RefreshPlan {
  Protocol protocol = Protocol::Error3;
  std::size_t batch_size = 128;
  std::size_t passes = 60;
  double momentum = 0.1;  ///< weight of the new batch statistic
  std::uint64_t seed = 0;

  void validate() const;
};

/// What error3 masking and error4 augmentation need.
struct RefreshInputs {
  BlockPartition partition;
  PixelStats pixel_stats;
  double lambda = 0.5;
  AugmentationPolicy augmentation;
};

struct RefreshReport {
  Protocol protocol = Protocol::Error3;
  std::size_t forward_passes = 0;
  std::size_t masked_batches = 0;
  std::size_t augmented_batches = 0;
  bool sampled_with_replacement = false;  ///< |D_L| smaller than the batch
  std::uint64_t stats_digest = 0;
};

/// Replaces the running statistics of `model` by an EMA over the protocol's
/// forward passes on D_L. Weights are untouched; dropout is off.
RefreshReport refresh_bn(ModelState<float>& model, const RefreshPlan& plan, const Dataset& labeled,
                         const RefreshInputs& inputs);

struct EvalReport {
  Protocol protocol = Protocol::Error3;
  double error_rate = 0.0;               ///< percent
  std::vector<double> per_class_error;   ///< percent, NaN for absent classes
  std::uint64_t stats_digest = 0;
  std::size_t samples = 0;
};

/// Pure evaluation with running statistics.
EvalReport evaluate(const ModelState<float>& model, const Dataset& test, Protocol protocol, std::size_t batch = 256);

}  // namespace rrlab
