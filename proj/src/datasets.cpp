#include "rrlab/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "rrlab/binary_io.hpp"

namespace rrlab {

void Dataset::validate() const {
  if (images.rank() != 4) throw ShapeError("dataset", "images must be (N, rows, cols, depth), got " + shape_string(images.shape));
  if (has_labels()) {
    if (labels.size() != images.dim(0)) {
      throw ShapeError("dataset", std::to_string(labels.size()) + " labels for " + std::to_string(images.dim(0)) + " images");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= classes) {
        throw std::out_of_range("dataset: label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                                " outside 0.." + std::to_string(classes - 1));
      }
    }
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.images = gather(indices);
  if (has_labels()) out.labels = gather_labels(indices);
  out.classes = classes;
  out.split = split;
  out.note = note;
  out.space = space;
  return out;
}

Tensor<float> Dataset::gather(const std::vector<std::size_t>& indices) const {
  Shape shape = images.shape;
  shape[0] = indices.size();
  Tensor<float> out(shape);
  const std::size_t per = image_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw std::out_of_range("dataset: index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(images.data.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

std::vector<std::uint32_t> Dataset::gather_labels(const std::vector<std::size_t>& indices) const {
  std::vector<std::uint32_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write dataset " + path.string());
  os.write("RRDS", 4);
  io::write_pod(os, kDatasetVersion);
  io::write_pod(os, static_cast<std::uint64_t>(data.size()));
  for (std::size_t i = 1; i < 4; ++i) io::write_pod(os, static_cast<std::uint32_t>(data.images.dim(i)));
  io::write_pod(os, data.classes);
  io::write_pod(os, static_cast<std::uint8_t>(data.has_labels() ? 1 : 0));
  os.write(reinterpret_cast<const char*>(data.images.data.data()),
           static_cast<std::streamsize>(data.images.size() * sizeof(float)));
  if (data.has_labels()) {
    os.write(reinterpret_cast<const char*>(data.labels.data()),
             static_cast<std::streamsize>(data.labels.size() * sizeof(std::uint32_t)));
  }
  if (!os) throw std::runtime_error("write failed for dataset " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset " + path.string());
  io::Reader r(is);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::string(magic, 4) != "RRDS") throw io::FormatError("bad dataset magic", 0);
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kDatasetVersion) throw io::FormatError("unsupported dataset version " + std::to_string(version), 4);
  const auto n = r.pod<std::uint64_t>("sample count");
  const auto rows = r.pod<std::uint32_t>("rows");
  const auto cols = r.pod<std::uint32_t>("cols");
  const auto depth = r.pod<std::uint32_t>("depth");
  const std::uint64_t shape_offset = r.offset();
  const auto classes = r.pod<std::uint32_t>("class count");
  const auto has_labels = r.pod<std::uint8_t>("label flag");
  if (rows == 0 || cols == 0 || depth == 0) throw io::FormatError("zero image extent", shape_offset - 12);
  if (has_labels > 1) throw io::FormatError("label flag must be 0 or 1", r.offset() - 1);

  const std::uint64_t payload = n * rows * cols * depth * sizeof(float) + (has_labels ? n * sizeof(std::uint32_t) : 0);
  const std::uint64_t header = r.offset();
  is.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(is.tellg());
  is.seekg(static_cast<std::streamoff>(header));
  if (file_size != header + payload) {
    throw io::FormatError("header declares " + std::to_string(n) + " samples (" + std::to_string(payload) +
                              " payload bytes) but file holds " + std::to_string(file_size - header),
                          file_size < header + payload ? file_size : header + payload);
  }

  Dataset d;
  d.classes = classes;
  d.images = Tensor<float>({static_cast<std::size_t>(n), rows, cols, depth});
  r.bytes(d.images.data.data(), d.images.size() * sizeof(float), "image payload");
  if (has_labels) {
    const std::uint64_t label_offset = r.offset();
    d.labels.resize(static_cast<std::size_t>(n));
    r.bytes(d.labels.data(), d.labels.size() * sizeof(std::uint32_t), "labels");
    for (std::size_t i = 0; i < d.labels.size(); ++i) {
      if (d.labels[i] >= classes) {
        throw io::FormatError("label " + std::to_string(d.labels[i]) + " outside 0.." + std::to_string(classes - 1),
                              label_offset + i * sizeof(std::uint32_t));
      }
    }
  }
  d.note = path.filename().string();
  return d;
}

void scale_to_unit_range(Dataset& data) {
  if (data.space != PixelSpace::Raw) throw std::logic_error("scale_to_unit_range: data is already preprocessed");
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const float v = data.images[i];
    if (!(v >= 0.0f && v <= 255.0f)) {
      throw std::domain_error("scale_to_unit_range: value " + std::to_string(v) + " at element " + std::to_string(i) +
                              " is not a raw pixel in [0, 255]");
    }
  }
  for (float& v : data.images.data) v = static_cast<float>(static_cast<double>(v) / 127.5 - 1.0);
  data.space = PixelSpace::UnitRange;
}

void scale_to_raw(Dataset& data) {
  if (data.space != PixelSpace::UnitRange) throw std::logic_error("scale_to_raw: data is not in [-1, 1] space");
  for (float& v : data.images.data) v = static_cast<float>((static_cast<double>(v) + 1.0) * 127.5);
  data.space = PixelSpace::Raw;
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMatrix flatten(const Tensor<float>& images) {
  if (images.rank() < 2 || images.dim(0) == 0) throw ShapeError("zca", "need a nonempty batch, got " + shape_string(images.shape));
  const std::size_t n = images.dim(0);
  const std::size_t d = images.size() / n;
  return Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
             images.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d))
      .cast<double>();
}

}  // namespace

ZcaTransform ZcaTransform::fit(const Tensor<float>& images, double epsilon) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("zca: epsilon must be nonnegative");
  RowMatrix x = flatten(images);
  ZcaTransform z;
  z.epsilon_ = epsilon;
  z.mean_ = x.colwise().mean().transpose();
  x.rowwise() -= z.mean_.transpose();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("zca: eigendecomposition failed");
  Eigen::VectorXd lam = eig.eigenvalues().array() + epsilon;
  if (lam.minCoeff() <= 0.0) {
    throw std::runtime_error("zca: covariance is not positive definite after regularization (min eigenvalue " +
                             std::to_string(lam.minCoeff()) + ")");
  }
  const Eigen::MatrixXd& u = eig.eigenvectors();
  z.whiten_ = u * lam.cwiseSqrt().cwiseInverse().asDiagonal() * u.transpose();
  z.color_ = u * lam.cwiseSqrt().asDiagonal() * u.transpose();
  // Symmetrize away rounding.
  z.whiten_ = 0.5 * (z.whiten_ + z.whiten_.transpose()).eval();
  z.color_ = 0.5 * (z.color_ + z.color_.transpose()).eval();
  return z;
}

Tensor<float> ZcaTransform::map(const Tensor<float>& images, const Eigen::MatrixXd& m, bool forward) const {
  RowMatrix x = flatten(images);
  if (x.cols() != mean_.size()) {
    throw ShapeError("zca", "fitted on " + std::to_string(mean_.size()) + " dimensions, got " + std::to_string(x.cols()));
  }
  RowMatrix y;
  if (forward) {
    x.rowwise() -= mean_.transpose();
    y = x * m;
  } else {
    y = x * m;
    y.rowwise() += mean_.transpose();
  }
  Tensor<float> out(images.shape);
  Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data.data(), y.rows(), y.cols()) =
      y.cast<float>();
  return out;
}

Tensor<float> ZcaTransform::apply(const Tensor<float>& images) const { return map(images, whiten_, true); }
Tensor<float> ZcaTransform::invert(const Tensor<float>& images) const { return map(images, color_, false); }

void ZcaTransform::apply(Dataset& data) const {
  if (data.space == PixelSpace::Zca) throw std::logic_error("zca: data is already whitened");
  data.images = apply(data.images);
  data.space = PixelSpace::Zca;
}

void AugmentationPolicy::validate() const {
  if (max_translation < 0) throw std::invalid_argument("augmentation: translation must be >= 0");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("augmentation: noise sigma must be >= 0");
}

Tensor<float> translate(const Tensor<float>& image, int dx, int dy) {
  if (image.rank() != 3) throw ShapeError("translate", "expected (rows, cols, depth), got " + shape_string(image.shape));
  const int rows = static_cast<int>(image.dim(0));
  const int cols = static_cast<int>(image.dim(1));
  const std::size_t depth = image.dim(2);
  Tensor<float> out(image.shape, 0.0f);
  for (int r = 0; r < rows; ++r) {
    const int sr = r - dy;
    if (sr < 0 || sr >= rows) continue;
    for (int c = 0; c < cols; ++c) {
      const int sc = c - dx;
      if (sc < 0 || sc >= cols) continue;
      std::copy_n(image.data.begin() + static_cast<std::ptrdiff_t>((sr * cols + sc) * depth), depth,
                  out.data.begin() + static_cast<std::ptrdiff_t>((r * cols + c) * depth));
    }
  }
  return out;
}

Tensor<float> flip_horizontal(const Tensor<float>& image) {
  if (image.rank() != 3) throw ShapeError("flip", "expected (rows, cols, depth), got " + shape_string(image.shape));
  const std::size_t rows = image.dim(0), cols = image.dim(1), depth = image.dim(2);
  Tensor<float> out(image.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::copy_n(image.data.begin() + static_cast<std::ptrdiff_t>((r * cols + (cols - 1 - c)) * depth), depth,
                  out.data.begin() + static_cast<std::ptrdiff_t>((r * cols + c) * depth));
    }
  }
  return out;
}

Tensor<float> permute_channels(const Tensor<float>& image, const std::vector<int>& order) {
  if (image.rank() != 3 || order.size() != image.dim(2)) {
    throw ShapeError("permute_channels", "order of " + std::to_string(order.size()) + " for image " + shape_string(image.shape));
  }
  const std::size_t depth = image.dim(2);
  Tensor<float> out(image.shape);
  for (std::size_t p = 0; p < image.size() / depth; ++p) {
    for (std::size_t d = 0; d < depth; ++d) out[p * depth + d] = image[p * depth + static_cast<std::size_t>(order[d])];
  }
  return out;
}

Tensor<float> augment(const Tensor<float>& image, const AugmentationPolicy& policy, Rng& rng) {
  policy.validate();
  Tensor<float> out = image;
  if (policy.max_translation > 0) {
    std::uniform_int_distribution<int> shift(-policy.max_translation, policy.max_translation);
    const int dx = shift(rng);
    const int dy = shift(rng);
    out = translate(out, dx, dy);
  }
  if (policy.flip && std::bernoulli_distribution(0.5)(rng)) out = flip_horizontal(out);
  if (policy.rgb_shuffle) {
    if (out.dim(2) != 3) throw ShapeError("augment", "RGB shuffle needs 3 channels, got " + shape_string(out.shape));
    static const std::array<std::array<int, 3>, 6> perms = {
        {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
    const auto& p = perms[std::uniform_int_distribution<int>(0, 5)(rng)];
    out = permute_channels(out, {p[0], p[1], p[2]});
  }
  if (policy.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, policy.noise_sigma);
    for (float& v : out.data) v = static_cast<float>(v + noise(rng));
  }
  return out;
}

Tensor<float> augment(const Tensor<float>& image, const AugmentationPolicy& policy, std::uint64_t seed) {
  Rng rng(seed);
  return augment(image, policy, rng);
}

Tensor<float> augment_batch(const Tensor<float>& batch, const AugmentationPolicy& policy, Rng& rng) {
  if (!policy.enabled()) return batch;
  Tensor<float> out(batch.shape);
  const std::size_t n = batch.dim(0);
  const std::size_t per = batch.size() / n;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<float> a = augment(slice_sample(batch, i), policy, rng);
    std::copy(a.data.begin(), a.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

Splits build_splits(const Dataset& source, const SplitPlan& plan) {
  source.validate();
  if (!source.has_labels()) throw std::invalid_argument("build_splits: source dataset needs labels");
  std::vector<std::uint32_t> in_classes = plan.in_classes;
  if (in_classes.empty()) {
    in_classes.resize(source.classes);
    std::iota(in_classes.begin(), in_classes.end(), 0u);
  }
  std::vector<int> remap(source.classes, -1);
  for (std::size_t i = 0; i < in_classes.size(); ++i) {
    if (in_classes[i] >= source.classes || remap[in_classes[i]] >= 0) {
      throw std::invalid_argument("build_splits: invalid or repeated in-class id " + std::to_string(in_classes[i]));
    }
    remap[in_classes[i]] = static_cast<int>(i);
  }
  if (plan.lambda_mis && !(*plan.lambda_mis >= 0.0 && *plan.lambda_mis <= 100.0)) {
    throw std::invalid_argument("build_splits: lambda_mis must lie in [0, 100]");
  }

  Rng rng(plan.seed);
  std::vector<std::vector<std::size_t>> by_class(source.classes);
  for (std::size_t i = 0; i < source.size(); ++i) by_class[source.labels[i]].push_back(i);
  for (auto& members : by_class) std::shuffle(members.begin(), members.end(), rng);

  std::vector<std::size_t> labeled;
  for (std::uint32_t k : in_classes) {
    if (by_class[k].size() < plan.labels_per_class) {
      throw std::invalid_argument("build_splits: class " + std::to_string(k) + " has " + std::to_string(by_class[k].size()) +
                                  " samples, fewer than " + std::to_string(plan.labels_per_class) + " labels per class");
    }
    labeled.insert(labeled.end(), by_class[k].begin(), by_class[k].begin() + static_cast<std::ptrdiff_t>(plan.labels_per_class));
  }
  std::vector<std::size_t> in_pool, out_pool;
  for (std::uint32_t k = 0; k < source.classes; ++k) {
    const auto first = remap[k] >= 0 ? by_class[k].begin() + static_cast<std::ptrdiff_t>(plan.labels_per_class) : by_class[k].begin();
    (remap[k] >= 0 ? in_pool : out_pool).insert((remap[k] >= 0 ? in_pool : out_pool).end(), first, by_class[k].end());
  }
  std::shuffle(in_pool.begin(), in_pool.end(), rng);
  std::shuffle(out_pool.begin(), out_pool.end(), rng);

  if (in_pool.size() < plan.validation) throw std::invalid_argument("build_splits: not enough in-class samples for validation");
  std::vector<std::size_t> validation(in_pool.begin(), in_pool.begin() + static_cast<std::ptrdiff_t>(plan.validation));
  in_pool.erase(in_pool.begin(), in_pool.begin() + static_cast<std::ptrdiff_t>(plan.validation));

  std::size_t n_out = 0;
  std::size_t n_in = plan.unlabeled == 0 ? in_pool.size() : plan.unlabeled;
  if (plan.lambda_mis) {
    if (plan.unlabeled == 0) throw std::invalid_argument("build_splits: a mismatch split needs an explicit unlabeled size");
    n_out = static_cast<std::size_t>(std::llround(0.01 * *plan.lambda_mis * static_cast<double>(plan.unlabeled)));
    n_in = plan.unlabeled - n_out;
  }
  if (n_in > in_pool.size() || n_out > out_pool.size()) {
    throw std::invalid_argument("build_splits: requested " + std::to_string(n_in) + " in-class and " + std::to_string(n_out) +
                                " out-class unlabeled samples, available " + std::to_string(in_pool.size()) + " and " +
                                std::to_string(out_pool.size()));
  }
  std::vector<std::size_t> unlabeled(in_pool.begin(), in_pool.begin() + static_cast<std::ptrdiff_t>(n_in));
  unlabeled.insert(unlabeled.end(), out_pool.begin(), out_pool.begin() + static_cast<std::ptrdiff_t>(n_out));
  std::shuffle(unlabeled.begin(), unlabeled.end(), rng);

  auto relabel = [&](Dataset d) {
    for (auto& l : d.labels) l = static_cast<std::uint32_t>(remap[l]);
    d.classes = static_cast<std::uint32_t>(in_classes.size());
    return d;
  };
  Splits s;
  s.labeled = relabel(source.subset(labeled));
  s.labeled.split = "labeled";
  s.validation = relabel(source.subset(validation));
  s.validation.split = "val";
  s.unlabeled = source.subset(unlabeled);
  s.unlabeled_origin = std::move(s.unlabeled.labels);
  s.unlabeled.labels.clear();
  s.unlabeled.classes = static_cast<std::uint32_t>(in_classes.size());
  s.unlabeled.split = "unlabeled";
  s.in_classes = in_classes;
  s.in_class_unlabeled = n_in;
  s.out_class_unlabeled = n_out;
  return s;
}

MinibatchSampler::MinibatchSampler(std::size_t labeled_size, std::size_t unlabeled_size, std::size_t m_l,
                                   std::size_t m_ul, std::uint64_t seed)
    : labeled_size_(labeled_size), usl_size_(labeled_size + unlabeled_size), m_l_(m_l), m_ul_(m_ul), rng_(seed) {
  if (m_l > labeled_size) {
    throw std::invalid_argument("sampler: m_L = " + std::to_string(m_l) + " exceeds |D_L| = " + std::to_string(labeled_size));
  }
  if (m_ul > usl_size_) {
    throw std::invalid_argument("sampler: m_UL = " + std::to_string(m_ul) + " exceeds |D_USL| = " + std::to_string(usl_size_));
  }
}

std::vector<std::size_t> MinibatchSampler::draw(std::size_t population, std::size_t count) {
  scratch_.resize(population);
  std::iota(scratch_.begin(), scratch_.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, population - 1)(rng_);
    std::swap(scratch_[i], scratch_[j]);
  }
  return {scratch_.begin(), scratch_.begin() + static_cast<std::ptrdiff_t>(count)};
}

Minibatch MinibatchSampler::next() {
  Minibatch b;
  b.labeled = draw(labeled_size_, m_l_);
  b.unlabeled = draw(usl_size_, m_ul_);
  return b;
}

Tensor<float> gather_usl(const Dataset& labeled, const Dataset& unlabeled, const std::vector<std::size_t>& indices) {
  const Dataset& shape_src = labeled.size() > 0 ? labeled : unlabeled;
  Shape shape = shape_src.images.shape;
  shape[0] = indices.size();
  Tensor<float> out(shape);
  const std::size_t per = shape_src.image_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const bool from_l = indices[i] < labeled.size();
    const Dataset& src = from_l ? labeled : unlabeled;
    const std::size_t j = from_l ? indices[i] : indices[i] - labeled.size();
    if (j >= src.size()) throw std::out_of_range("gather_usl: index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(src.images.data.begin() + static_cast<std::ptrdiff_t>(j * per), per,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

namespace {

bool touches_all_borders(const std::vector<std::uint8_t>& t, int n) {
  bool top = false, bottom = false, left = false, right = false;
  for (int i = 0; i < n; ++i) {
    top |= t[static_cast<std::size_t>(i)] != 0;
    bottom |= t[static_cast<std::size_t>((n - 1) * n + i)] != 0;
    left |= t[static_cast<std::size_t>(i * n)] != 0;
    right |= t[static_cast<std::size_t>(i * n + n - 1)] != 0;
  }
  return top && bottom && left && right;
}

// Fewest differing cells over every relative placement of two n x n glyphs,
// since samples put glyphs at random offsets.
std::size_t shifted_distance(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, int n) {
  auto at = [n](const std::vector<std::uint8_t>& t, int r, int c) {
    return r >= 0 && r < n && c >= 0 && c < n && t[static_cast<std::size_t>(r * n + c)] != 0;
  };
  std::size_t best = std::numeric_limits<std::size_t>::max();
  for (int dy = 1 - n; dy < n; ++dy) {
    for (int dx = 1 - n; dx < n; ++dx) {
      std::size_t d = 0;
      for (int r = std::min(0, dy); r < n + std::max(0, dy); ++r) {
        for (int c = std::min(0, dx); c < n + std::max(0, dx); ++c) d += at(a, r, c) != at(b, r - dy, c - dx);
      }
      best = std::min(best, d);
    }
  }
  return best;
}

std::vector<std::vector<std::uint8_t>> glyph_set(const GlyphSpec& spec) {
  const int n = spec.glyph_cells;
  const std::size_t cells = static_cast<std::size_t>(n * n);
  Rng rng(derive_seed(spec.template_seed, "glyph-templates"));
  std::bernoulli_distribution lit(0.5);
  std::vector<std::vector<std::uint8_t>> set;
  for (int attempt = 0; set.size() < spec.classes; ++attempt) {
    if (attempt > 100000) throw std::runtime_error("glyph templates: cannot find enough distinct glyphs");
    std::vector<std::uint8_t> t(cells);
    for (auto& c : t) c = lit(rng) ? 1 : 0;
    const auto on = static_cast<std::size_t>(std::count(t.begin(), t.end(), 1));
    if (on < cells * 3 / 8 || on > cells * 5 / 8 || !touches_all_borders(t, n)) continue;
    bool distinct = true;
    for (const auto& other : set) distinct &= shifted_distance(t, other, n) >= cells * 3 / 8;
    if (distinct) set.push_back(std::move(t));
  }
  return set;
}

}  // namespace

std::vector<std::uint8_t> glyph_template(const GlyphSpec& spec, std::uint32_t k) {
  if (k >= spec.classes) throw std::out_of_range("glyph_template: class out of range");
  return glyph_set(spec)[k];
}

Dataset generate_synthetic(const GlyphSpec& spec) {
  const int extent = 2 * spec.glyph_cells;
  if (spec.classes < 2 || spec.glyph_cells < 2 || extent > spec.rows || extent > spec.cols) {
    throw std::invalid_argument("generate_synthetic: glyph of " + std::to_string(extent) + " pixels does not fit " +
                                std::to_string(spec.rows) + "x" + std::to_string(spec.cols) + " canvas or K < 2");
  }
  const auto templates = glyph_set(spec);
  const std::size_t n = spec.per_class * spec.classes;
  Dataset d;
  d.classes = spec.classes;
  d.images = Tensor<float>({n, static_cast<std::size_t>(spec.rows), static_cast<std::size_t>(spec.cols), 1});
  d.labels.resize(n);
  d.note = "glyph K=" + std::to_string(spec.classes) + " seed=" + std::to_string(spec.seed);

  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i % spec.classes);
  Rng rng(derive_seed(spec.seed, "glyph-samples"));
  std::shuffle(order.begin(), order.end(), rng);

  std::uniform_int_distribution<int> row_off(0, spec.rows - extent);
  std::uniform_int_distribution<int> col_off(0, spec.cols - extent);
  std::uniform_int_distribution<int> blob_r(0, spec.rows - 2), blob_c(0, spec.cols - 2);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> background(20.0, 50.0), blob_level(60.0, 180.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t per = static_cast<std::size_t>(spec.rows * spec.cols);

  std::vector<double> canvas(per);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t k = order[i];
    d.labels[i] = k;
    std::fill(canvas.begin(), canvas.end(), background(rng));
    for (int b = 0; b < spec.clutter; ++b) {
      const int r0 = blob_r(rng), c0 = blob_c(rng);
      const double level = blob_level(rng);
      for (int r = r0; r < r0 + 2; ++r) {
        for (int c = c0; c < c0 + 2; ++c) canvas[static_cast<std::size_t>(r * spec.cols + c)] = level;
      }
    }
    const double fg = 210.0 * (1.0 + spec.contrast_jitter * unit(rng) * 0.5);
    const int r0 = row_off(rng), c0 = col_off(rng);
    const auto& t = templates[k];
    for (int cr = 0; cr < spec.glyph_cells; ++cr) {
      for (int cc = 0; cc < spec.glyph_cells; ++cc) {
        if (!t[static_cast<std::size_t>(cr * spec.glyph_cells + cc)]) continue;
        for (int r = r0 + 2 * cr; r < r0 + 2 * cr + 2; ++r) {
          for (int c = c0 + 2 * cc; c < c0 + 2 * cc + 2; ++c) canvas[static_cast<std::size_t>(r * spec.cols + c)] = fg;
        }
      }
    }
    for (std::size_t p = 0; p < per; ++p) {
      const double v = canvas[p] + spec.noise * noise(rng);
      d.images[i * per + p] = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
    }
  }
  return d;
}

}  // namespace rrlab
