#include "rrlab/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rrlab/ops.hpp"

namespace rrlab {

template <typename T>
ProbabilityFn<T> model_probability_fn(const ModelState<T>& model, ForwardOptions options) {
  return [&model, options](ad::Tape<T>& tape, const ad::Var<T>& input) {
    const BoundModel<T> bound = bind_model(model, tape, false);
    return ad::softmax(forward_logits(model, bound, input, options));
  };
}

BlockPartition BlockPartition::grid(int rows, int cols, int block_rows, int block_cols) {
  if (rows <= 0 || cols <= 0 || block_rows <= 0 || block_cols <= 0 || block_rows > rows || block_cols > cols) {
    throw std::invalid_argument("block partition: block " + std::to_string(block_rows) + "x" +
                                std::to_string(block_cols) + " does not fit image " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
  BlockPartition p;
  p.rows_ = rows;
  p.cols_ = cols;
  p.block_rows_ = block_rows;
  p.block_cols_ = block_cols;
  const int nr = rows / block_rows;
  const int nc = cols / block_cols;
  p.owner_.assign(static_cast<std::size_t>(rows * cols), 0);
  for (int br = 0; br < nr; ++br) {
    for (int bc = 0; bc < nc; ++bc) {
      Block b;
      b.row0 = br * block_rows;
      b.col0 = bc * block_cols;
      b.rows = br == nr - 1 ? rows - b.row0 : block_rows;
      b.cols = bc == nc - 1 ? cols - b.col0 : block_cols;
      for (int r = b.row0; r < b.row0 + b.rows; ++r) {
        for (int c = b.col0; c < b.col0 + b.cols; ++c) {
          p.owner_[static_cast<std::size_t>(r * cols + c)] = p.blocks_.size();
        }
      }
      p.blocks_.push_back(b);
    }
  }
  return p;
}

BlockPartition BlockPartition::eighths(int rows, int cols) {
  return grid(rows, cols, std::max(1, rows / 8), std::max(1, cols / 8));
}

template <typename T>
std::vector<SensitivityMap> pixel_sensitivity(const ProbabilityFn<T>& fn, const Tensor<T>& batch,
                                              Tensor<T>* probabilities) {
  if (batch.rank() != 4) throw ShapeError("pixel_sensitivity", "expected NHWC batch, got " + shape_string(batch.shape));
  ad::Tape<T> tape;
  const ad::Var<T> x = tape.leaf(batch, true);
  const ad::Var<T> probs = fn(tape, x);
  const ad::Var<T> gmax = ad::max_last(probs);
  tape.backward(ad::reduce_sum(gmax));
  if (probabilities) *probabilities = probs.value();

  const std::size_t n = batch.dim(0);
  const std::size_t per = batch.size() / n;
  const std::size_t k = probs.value().dim(1);
  const Tensor<T>& grad = x.grad();
  std::vector<SensitivityMap> maps(n);
  for (std::size_t i = 0; i < n; ++i) {
    SensitivityMap& m = maps[i];
    m.shape = Shape(batch.shape.begin() + 1, batch.shape.end());
    m.image_id = i;
    const T* p = probs.value().data.data() + i * k;
    m.predicted_class = static_cast<std::size_t>(std::max_element(p, p + k) - p);
    m.r3d.resize(per);
    double l1 = 0.0;
    for (std::size_t j = 0; j < per; ++j) {
      m.r3d[j] = static_cast<double>(grad[i * per + j]);
      l1 += std::abs(m.r3d[j]);
    }
    if (l1 < kZeroGradientThreshold) {
      m.zero_gradient = true;
      std::fill(m.r3d.begin(), m.r3d.end(), 1.0 / static_cast<double>(per));
    } else {
      for (double& v : m.r3d) v /= l1;
    }
  }
  return maps;
}

void block_sensitivity(SensitivityMap& map, const BlockPartition& partition) {
  if (map.shape.size() != 3 || map.shape[0] != static_cast<std::size_t>(partition.rows()) ||
      map.shape[1] != static_cast<std::size_t>(partition.cols())) {
    throw ShapeError("block_sensitivity", "map " + shape_string(map.shape) + " does not match partition " +
                                              std::to_string(partition.rows()) + "x" + std::to_string(partition.cols()));
  }
  const std::size_t q = partition.size();
  map.r2d.assign(q, 0.0);
  if (map.zero_gradient) {
    std::fill(map.r2d.begin(), map.r2d.end(), 1.0 / static_cast<double>(q));
    return;
  }
  const std::size_t depth = map.shape[2];
  const int cols = partition.cols();
  for (int r = 0; r < partition.rows(); ++r) {
    for (int c = 0; c < cols; ++c) {
      const std::size_t owner = partition.block_of(r, c);
      const std::size_t base = static_cast<std::size_t>(r * cols + c) * depth;
      for (std::size_t d = 0; d < depth; ++d) map.r2d[owner] += std::abs(map.r3d[base + d]);
    }
  }
}

MaskRegion select_mask(std::span<const double> r2d, double lambda) {
  if (!(lambda > 0.0 && lambda < 1.0)) {
    throw std::invalid_argument("select_mask: lambda must lie in (0,1), got " + std::to_string(lambda));
  }
  std::vector<std::size_t> order(r2d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return r2d[a] < r2d[b]; });
  MaskRegion region;
  std::size_t i = 0;
  while (region.mass < lambda && i < order.size()) {
    region.blocks.push_back(order[i]);
    region.mass += r2d[order[i]];
    ++i;
  }
  return region;
}

PixelStats compute_pixel_stats(const Tensor<float>& images) {
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw std::invalid_argument("compute_pixel_stats: need a nonempty (N,rows,cols,depth) collection");
  }
  const std::size_t n = images.dim(0);
  const std::size_t per = images.size() / n;
  // Welford accumulation per pixel.
  std::vector<double> mean(per, 0.0), m2(per, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double count = static_cast<double>(i + 1);
    for (std::size_t j = 0; j < per; ++j) {
      const double v = images[i * per + j];
      const double delta = v - mean[j];
      mean[j] += delta / count;
      m2[j] += delta * (v - mean[j]);
    }
  }
  PixelStats stats;
  stats.shape = Shape(images.shape.begin() + 1, images.shape.end());
  stats.mean.resize(per);
  stats.stddev.resize(per);
  for (std::size_t j = 0; j < per; ++j) {
    stats.mean[j] = static_cast<float>(mean[j]);
    stats.stddev[j] = static_cast<float>(std::sqrt(std::max(0.0, m2[j] / static_cast<double>(n))));
  }
  return stats;
}

Tensor<float> apply_mask(const Tensor<float>& image, const MaskRegion& region, const BlockPartition& partition,
                         const PixelStats& stats, Rng& rng) {
  if (image.shape != stats.shape || image.rank() != 3 || image.dim(0) != static_cast<std::size_t>(partition.rows()) ||
      image.dim(1) != static_cast<std::size_t>(partition.cols())) {
    throw ShapeError("apply_mask", "image " + shape_string(image.shape) + " inconsistent with statistics " +
                                       shape_string(stats.shape));
  }
  Tensor<float> out = image;
  const std::size_t depth = image.dim(2);
  const std::size_t cols = image.dim(1);
  std::uniform_real_distribution<float> uniform(-1.0f, 1.0f);
  for (std::size_t q : region.blocks) {
    const Block& b = partition[q];
    for (int r = b.row0; r < b.row0 + b.rows; ++r) {
      for (int c = b.col0; c < b.col0 + b.cols; ++c) {
        const std::size_t base = (static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(c)) * depth;
        for (std::size_t d = 0; d < depth; ++d) {
          out[base + d] = stats.mean[base + d] + stats.stddev[base + d] * uniform(rng);
        }
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> mask_bitmap(const MaskRegion& region, const BlockPartition& partition) {
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(partition.rows() * partition.cols()), 0);
  for (std::size_t q : region.blocks) {
    const Block& b = partition[q];
    for (int r = b.row0; r < b.row0 + b.rows; ++r) {
      for (int c = b.col0; c < b.col0 + b.cols; ++c) bits[static_cast<std::size_t>(r * partition.cols() + c)] = 1;
    }
  }
  return bits;
}

template ProbabilityFn<float> model_probability_fn<float>(const ModelState<float>&, ForwardOptions);
template ProbabilityFn<double> model_probability_fn<double>(const ModelState<double>&, ForwardOptions);
template std::vector<SensitivityMap> pixel_sensitivity<float>(const ProbabilityFn<float>&, const Tensor<float>&,
                                                              Tensor<float>*);
template std::vector<SensitivityMap> pixel_sensitivity<double>(const ProbabilityFn<double>&, const Tensor<double>&,
                                                               Tensor<double>*);

}  // namespace rrlab
