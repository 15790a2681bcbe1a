#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rrlab/ops.hpp"
#include "rrlab/tape.hpp"
#include "rrlab/tensor.hpp"

namespace rrlab {

enum class LayerKind { Conv, MaxPool, Dropout, GlobalAvgPool, Dense };

struct LayerDesc {
  LayerKind kind = LayerKind::Conv;
  int filters = 0;  ///< conv filters or dense outputs
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int pool = 2;
  double dropout = 0.0;
  double slope = 0.1;
  bool batch_norm = true;
  bool activation = true;

  static LayerDesc conv(int filters, int kernel, int padding);
  static LayerDesc max_pool(int size, int stride);
  static LayerDesc drop(double rate);
  static LayerDesc global_avg_pool();
  static LayerDesc dense(int outputs, bool batch_norm);
};

/// Ordered layer list for a classifier over N_r x N_c x N_d inputs.
struct ArchitectureSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  int channels = 0;
  int classes = 0;
  double bn_eps = 1e-5;
  std::vector<LayerDesc> layers;

  /// 13-layer network: three 128-filter 3x3 convs, pool+dropout, three 256
  /// convs, pool+dropout, 512 valid 3x3, 256 1x1, 128 1x1, global average
  /// pool, dense to K with optional batch norm.
  static ArchitectureSpec conv_large(int classes = 10, bool final_batch_norm = true, int rows = 32,
                                     int cols = 32, int channels = 3);
  /// conv16 -> pool -> conv32 -> pool -> global average -> dense K.
  static ArchitectureSpec conv_tiny(int rows = 16, int cols = 16, int channels = 1, int classes = 4);

  /// Per-sample output shape of every layer; throws naming the first layer
  /// whose input does not fit.
  std::vector<Shape> output_shapes() const;
  std::string describe() const;
  std::uint64_t digest() const;
};

/// Where each layer's trainable tensors and BN statistics live.
struct LayerSlots {
  int weight = -1;
  int bias = -1;
  int gamma = -1;
  int beta = -1;
  int bn = -1;
};

template <typename T>
struct ModelState {
  ArchitectureSpec spec;
  std::vector<std::string> param_names;
  std::vector<Tensor<T>> params;
  std::vector<std::string> bn_names;
  std::vector<std::vector<T>> running_mean;
  std::vector<std::vector<T>> running_var;
  std::vector<LayerSlots> slots;
  std::uint64_t step = 0;  ///< number of completed updates

  std::size_t parameter_count() const;
  std::uint64_t weights_digest() const;
  std::uint64_t stats_digest() const;

  template <typename U>
  ModelState<U> cast() const {
    ModelState<U> out;
    out.spec = spec;
    out.param_names = param_names;
    for (const auto& p : params) out.params.push_back(p.template cast<U>());
    out.bn_names = bn_names;
    for (const auto& m : running_mean) out.running_mean.emplace_back(m.begin(), m.end());
    for (const auto& v : running_var) out.running_var.emplace_back(v.begin(), v.end());
    out.slots = slots;
    out.step = step;
    return out;
  }
};

struct ForwardOptions {
  bool training = true;            ///< batch statistics and active dropout
  bool use_running_stats = false;  ///< force running statistics in training mode
  bool dropout = true;             ///< allow dropout when training
  std::uint64_t dropout_seed = 0;
};

/// Model parameters recorded as leaves of one tape.
template <typename T>
struct BoundModel {
  std::vector<ad::Var<T>> params;
};

/// He-initialized weights (normal, std sqrt(2 / fan_in)); BN scale 1, shift 0,
/// running mean 0, running variance 1.
template <typename T>
ModelState<T> build_model(const ArchitectureSpec& spec, std::uint64_t seed);

template <typename T>
BoundModel<T> bind_model(const ModelState<T>& model, ad::Tape<T>& tape, bool trainable);

/// Logits (N, K) for an NHWC batch. When `batch_stats` is non-null it
/// receives one entry per BN layer that normalized with batch statistics.
template <typename T>
ad::Var<T> forward_logits(const ModelState<T>& model, const BoundModel<T>& bound, const ad::Var<T>& input,
                          const ForwardOptions& options,
                          std::vector<ad::BatchStats<T>>* batch_stats = nullptr);

/// Softmax probabilities (N, K) without recording gradients.
template <typename T>
Tensor<T> predict(const ModelState<T>& model, const Tensor<T>& batch, const ForwardOptions& options);

/// running <- (1 - momentum) * running + momentum * batch, per BN layer.
template <typename T>
void update_running_stats(ModelState<T>& model, const std::vector<ad::BatchStats<T>>& batch_stats,
                          double momentum);

/// Checks that `batch` is (N, rows, cols, channels) for the model's spec.
void check_input_shape(const ArchitectureSpec& spec, const Shape& batch_shape);

// Checkpoint: "ROIR", u32 version, u64 spec digest, u64 update counter,
// u32 tensor count, then per tensor (u32 name length, name, u32 rank,
// u32 extents, float32 payload). BN statistics are stored as
// "<layer>.running_mean" / "<layer>.running_var" tensors.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ModelState<float>& model);
/// Loads into the layout of `spec`; rejects a digest or tensor mismatch.
ModelState<float> load_checkpoint(const std::filesystem::path& path, const ArchitectureSpec& spec);

extern template struct ModelState<float>;
extern template struct ModelState<double>;

}  // namespace rrlab
