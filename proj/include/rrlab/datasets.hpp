#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rrlab/rng.hpp"
#include "rrlab/tensor.hpp"

namespace rrlab {

enum class PixelSpace { Raw, UnitRange, Zca };

struct Dataset {
  Tensor<float> images;               ///< (N, rows, cols, depth)
  std::vector<std::uint32_t> labels;  ///< empty for unlabeled data; 0-based
  std::uint32_t classes = 0;
  std::string split;                  ///< train / val / test / ...
  std::string note;
  PixelSpace space = PixelSpace::Raw;

  std::size_t size() const { return images.rank() == 0 ? 0 : images.dim(0); }
  bool has_labels() const noexcept { return !labels.empty(); }
  Shape image_shape() const { return Shape(images.shape.begin() + 1, images.shape.end()); }
  std::size_t image_size() const { return shape_numel(image_shape()); }

  /// Throws unless images are rank 4 and labels (if any) are in range.
  void validate() const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
  /// Stacks the listed images into a batch (n, rows, cols, depth).
  Tensor<float> gather(const std::vector<std::size_t>& indices) const;
  std::vector<std::uint32_t> gather_labels(const std::vector<std::size_t>& indices) const;
};

// Dataset file (little-endian): "RRDS", u32 version, u64 N, u32 rows,
// u32 cols, u32 depth, u32 K, u8 has-labels, float32 images, u32 labels.
inline constexpr std::uint32_t kDatasetVersion = 1;

void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

/// v / 127.5 - 1. Throws if the data is not in raw [0, 255] space.
void scale_to_unit_range(Dataset& data);
/// (v + 1) * 127.5.
void scale_to_raw(Dataset& data);

class ZcaTransform {
 public:
  /// Fits on (N, ...) images flattened per sample. Eigenvalues are
  /// regularized by `epsilon` before inversion.
  static ZcaTransform fit(const Tensor<float>& images, double epsilon = 1e-5);

  Tensor<float> apply(const Tensor<float>& images) const;
  Tensor<float> invert(const Tensor<float>& images) const;
  void apply(Dataset& data) const;

  const Eigen::VectorXd& mean() const noexcept { return mean_; }
  const Eigen::MatrixXd& whitening() const noexcept { return whiten_; }
  const Eigen::MatrixXd& coloring() const noexcept { return color_; }
  double epsilon() const noexcept { return epsilon_; }

 private:
  Tensor<float> map(const Tensor<float>& images, const Eigen::MatrixXd& m, bool forward) const;

  Eigen::VectorXd mean_;
  Eigen::MatrixXd whiten_;
  Eigen::MatrixXd color_;
  double epsilon_ = 0.0;
};

struct AugmentationPolicy {
  int max_translation = 0;
  bool flip = false;
  bool rgb_shuffle = false;
  double noise_sigma = 0.0;

  bool enabled() const noexcept { return max_translation > 0 || flip || rgb_shuffle || noise_sigma > 0.0; }
  void validate() const;
};

/// Shift by dx columns and dy rows; vacated pixels become 0.
Tensor<float> translate(const Tensor<float>& image, int dx, int dy);
Tensor<float> flip_horizontal(const Tensor<float>& image);
Tensor<float> permute_channels(const Tensor<float>& image, const std::vector<int>& order);

/// Random translation in [-t, t]^2, flip with probability 1/2, one of the
/// 6 channel permutations, additive Gaussian noise; in that order.
Tensor<float> augment(const Tensor<float>& image, const AugmentationPolicy& policy, Rng& rng);
Tensor<float> augment(const Tensor<float>& image, const AugmentationPolicy& policy, std::uint64_t seed);
/// Augments every sample of a batch with one stream.
Tensor<float> augment_batch(const Tensor<float>& batch, const AugmentationPolicy& policy, Rng& rng);

struct SplitPlan {
  std::size_t labels_per_class = 0;
  std::size_t validation = 0;
  std::size_t unlabeled = 0;  ///< 0 takes every remaining in-class sample
  std::uint64_t seed = 0;
  /// Contamination percentage of D_UL drawn from classes outside `in_classes`.
  std::optional<double> lambda_mis;
  std::vector<std::uint32_t> in_classes;  ///< empty means all classes
};

struct Splits {
  Dataset labeled;
  Dataset validation;
  Dataset unlabeled;                           ///< labels stripped
  std::vector<std::uint32_t> unlabeled_origin;  ///< source class of each D_UL sample
  std::vector<std::uint32_t> in_classes;
  std::size_t in_class_unlabeled = 0;
  std::size_t out_class_unlabeled = 0;
};

/// D_L (class-balanced, in-class only), D_val and D_UL are disjoint. Labels of
/// D_L and D_val are renumbered by position in `in_classes`.
Splits build_splits(const Dataset& source, const SplitPlan& plan);

struct Minibatch {
  std::vector<std::size_t> labeled;    ///< indices into D_L
  std::vector<std::size_t> unlabeled;  ///< indices into D_USL = D_L ++ D_UL
};

class MinibatchSampler {
 public:
  MinibatchSampler(std::size_t labeled_size, std::size_t unlabeled_size, std::size_t m_l, std::size_t m_ul,
                   std::uint64_t seed);
  Minibatch next();

 private:
  std::vector<std::size_t> draw(std::size_t population, std::size_t count);

  std::size_t labeled_size_, usl_size_, m_l_, m_ul_;
  Rng rng_;
  std::vector<std::size_t> scratch_;
};

/// Sample `index` of D_USL = D_L followed by D_UL.
Tensor<float> gather_usl(const Dataset& labeled, const Dataset& unlabeled, const std::vector<std::size_t>& indices);

struct GlyphSpec {
  std::uint32_t classes = 4;
  std::size_t per_class = 100;
  int rows = 16;
  int cols = 16;
  int glyph_cells = 4;     ///< glyph is a glyph_cells^2 grid of 2x2 pixel cells
  double noise = 50.0;     ///< Gaussian noise std in raw units
  int clutter = 5;         ///< random background blobs per image
  double contrast_jitter = 0.3;
  std::uint64_t seed = 1;
  /// Independent seed for the class templates so that train and test sets
  /// generated with different `seed` share the same glyphs.
  std::uint64_t template_seed = 7;
};

/// Raw [0, 255] images of `classes` distinct block glyphs placed at a random
/// offset on a dark canvas with clutter and noise; exactly per_class each.
Dataset generate_synthetic(const GlyphSpec& spec);
/// The binary template (cells x cells) of glyph `k`.
std::vector<std::uint8_t> glyph_template(const GlyphSpec& spec, std::uint32_t k);

}  // namespace rrlab
