#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rrlab/network.hpp"
#include "rrlab/rng.hpp"
#include "rrlab/tape.hpp"
#include "rrlab/tensor.hpp"

namespace rrlab {

/// Maps an input batch (recorded on `tape`) to class probabilities (N, K).
template <typename T>
using ProbabilityFn = std::function<ad::Var<T>(ad::Tape<T>& tape, const ad::Var<T>& input)>;

/// Probability function evaluating `model` with frozen weights.
template <typename T>
ProbabilityFn<T> model_probability_fn(const ModelState<T>& model, ForwardOptions options);

struct Block {
  int row0 = 0;
  int col0 = 0;
  int rows = 0;
  int cols = 0;
};

/// Exact tiling of the rows x cols pixel grid into rectangles, row-major.
/// When the image size is not a multiple of the block size, the last block
/// in each row and column absorbs the remainder.
class BlockPartition {
 public:
  BlockPartition() = default;
  static BlockPartition grid(int rows, int cols, int block_rows, int block_cols);
  /// Blocks of (rows / 8) x (cols / 8) pixels.
  static BlockPartition eighths(int rows, int cols);

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  int block_rows() const noexcept { return block_rows_; }
  int block_cols() const noexcept { return block_cols_; }
  std::size_t size() const noexcept { return blocks_.size(); }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  const Block& operator[](std::size_t q) const { return blocks_.at(q); }
  /// Index of the block containing pixel (row, col).
  std::size_t block_of(int row, int col) const { return owner_.at(static_cast<std::size_t>(row * cols_ + col)); }

 private:
  int rows_ = 0, cols_ = 0, block_rows_ = 0, block_cols_ = 0;
  std::vector<Block> blocks_;
  std::vector<std::size_t> owner_;
};

struct SensitivityMap {
  Shape shape;               ///< (rows, cols, depth)
  std::vector<double> r3d;   ///< signed input gradient of g_max, L1-normalized
  std::vector<double> r2d;   ///< per-block absolute mass, sums to 1
  std::size_t predicted_class = 0;
  bool zero_gradient = false;  ///< gradient L1 norm fell below 1e-12
  std::uint64_t image_id = 0;
  std::uint64_t snapshot_id = 0;
};

struct MaskRegion {
  std::vector<std::size_t> blocks;  ///< in selection order
  double mass = 0.0;                ///< accumulated r2d of the selected blocks
};

/// Per-pixel population statistics over a dataset (same shape as an image).
struct PixelStats {
  Shape shape;
  std::vector<float> mean;
  std::vector<float> stddev;
};

inline constexpr double kZeroGradientThreshold = 1e-12;

/// One differentiable pass over `batch`: fills `probabilities` (N, K) when
/// non-null and returns, per sample, the L1-normalized gradient of its
/// maximum class probability with respect to the input. g_max picks the
/// smallest class index on exact ties.
template <typename T>
std::vector<SensitivityMap> pixel_sensitivity(const ProbabilityFn<T>& fn, const Tensor<T>& batch,
                                              Tensor<T>* probabilities = nullptr);

/// Sums |r3d| over each block and all channels. A zero-gradient map gets
/// uniform 1/Q block values.
void block_sensitivity(SensitivityMap& map, const BlockPartition& partition);

/// Greedy accumulation of blocks in ascending r2d order (ties by block
/// index) while the mass is below lambda. Requires 0 < lambda < 1.
MaskRegion select_mask(std::span<const double> r2d, double lambda);

/// images: (N, rows, cols, depth).
PixelStats compute_pixel_stats(const Tensor<float>& images);

/// Copies `image` outside the region; inside it writes
/// mean + stddev * n with n ~ U[-1, 1] drawn per pixel and channel.
Tensor<float> apply_mask(const Tensor<float>& image, const MaskRegion& region, const BlockPartition& partition,
                         const PixelStats& stats, Rng& rng);

/// Per-pixel 0/1 bitmap (rows x cols) of the masked region.
std::vector<std::uint8_t> mask_bitmap(const MaskRegion& region, const BlockPartition& partition);

}  // namespace rrlab
