#include "rrlab/network.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "rrlab/binary_io.hpp"
#include "rrlab/rng.hpp"

namespace rrlab {

LayerDesc LayerDesc::conv(int filters, int kernel, int padding) {
  LayerDesc d;
  d.kind = LayerKind::Conv;
  d.filters = filters;
  d.kernel = kernel;
  d.padding = padding;
  return d;
}

LayerDesc LayerDesc::max_pool(int size, int stride) {
  LayerDesc d;
  d.kind = LayerKind::MaxPool;
  d.pool = size;
  d.stride = stride;
  return d;
}

LayerDesc LayerDesc::drop(double rate) {
  LayerDesc d;
  d.kind = LayerKind::Dropout;
  d.dropout = rate;
  return d;
}

LayerDesc LayerDesc::global_avg_pool() {
  LayerDesc d;
  d.kind = LayerKind::GlobalAvgPool;
  return d;
}

LayerDesc LayerDesc::dense(int outputs, bool batch_norm) {
  LayerDesc d;
  d.kind = LayerKind::Dense;
  d.filters = outputs;
  d.batch_norm = batch_norm;
  d.activation = false;
  return d;
}

ArchitectureSpec ArchitectureSpec::conv_large(int classes, bool final_batch_norm, int rows, int cols,
                                              int channels) {
  ArchitectureSpec s;
  s.name = "conv-large";
  s.rows = rows;
  s.cols = cols;
  s.channels = channels;
  s.classes = classes;
  for (int i = 0; i < 3; ++i) s.layers.push_back(LayerDesc::conv(128, 3, 1));
  s.layers.push_back(LayerDesc::max_pool(2, 2));
  s.layers.push_back(LayerDesc::drop(0.5));
  for (int i = 0; i < 3; ++i) s.layers.push_back(LayerDesc::conv(256, 3, 1));
  s.layers.push_back(LayerDesc::max_pool(2, 2));
  s.layers.push_back(LayerDesc::drop(0.5));
  s.layers.push_back(LayerDesc::conv(512, 3, 0));
  s.layers.push_back(LayerDesc::conv(256, 1, 0));
  s.layers.push_back(LayerDesc::conv(128, 1, 0));
  s.layers.push_back(LayerDesc::global_avg_pool());
  s.layers.push_back(LayerDesc::dense(classes, final_batch_norm));
  return s;
}

ArchitectureSpec ArchitectureSpec::conv_tiny(int rows, int cols, int channels, int classes) {
  ArchitectureSpec s;
  s.name = "conv-tiny";
  s.rows = rows;
  s.cols = cols;
  s.channels = channels;
  s.classes = classes;
  s.layers.push_back(LayerDesc::conv(16, 3, 1));
  s.layers.push_back(LayerDesc::max_pool(2, 2));
  s.layers.push_back(LayerDesc::conv(32, 3, 1));
  s.layers.push_back(LayerDesc::max_pool(2, 2));
  s.layers.push_back(LayerDesc::global_avg_pool());
  s.layers.push_back(LayerDesc::dense(classes, false));
  return s;
}

namespace {

const char* kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::Dense: return "dense";
  }
  return "?";
}

[[noreturn]] void broken_chain(std::size_t index, const LayerDesc& layer, const Shape& in, const std::string& why) {
  throw ShapeError("build", "layer " + std::to_string(index) + " (" + kind_name(layer.kind) + ") cannot take input " +
                                shape_string(in) + ": " + why);
}

}  // namespace

std::vector<Shape> ArchitectureSpec::output_shapes() const {
  if (rows <= 0 || cols <= 0 || channels <= 0) throw ShapeError("build", "input extents must be positive");
  if (classes < 2) throw ShapeError("build", "need at least 2 classes");
  std::vector<Shape> shapes;
  Shape cur{static_cast<std::size_t>(rows), static_cast<std::size_t>(cols), static_cast<std::size_t>(channels)};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerDesc& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        if (cur.size() != 3) broken_chain(i, l, cur, "expects a feature map");
        if (l.filters <= 0 || l.kernel <= 0 || l.stride <= 0) broken_chain(i, l, cur, "bad conv geometry");
        const long h = static_cast<long>(cur[0]) + 2L * l.padding - l.kernel;
        const long w = static_cast<long>(cur[1]) + 2L * l.padding - l.kernel;
        if (h < 0 || w < 0) broken_chain(i, l, cur, "kernel larger than input");
        cur = {static_cast<std::size_t>(h / l.stride + 1), static_cast<std::size_t>(w / l.stride + 1),
               static_cast<std::size_t>(l.filters)};
        break;
      }
      case LayerKind::MaxPool: {
        if (cur.size() != 3) broken_chain(i, l, cur, "expects a feature map");
        if (cur[0] < static_cast<std::size_t>(l.pool) || cur[1] < static_cast<std::size_t>(l.pool)) {
          broken_chain(i, l, cur, "pool window larger than input");
        }
        cur = {(cur[0] - l.pool) / l.stride + 1, (cur[1] - l.pool) / l.stride + 1, cur[2]};
        break;
      }
      case LayerKind::Dropout:
        if (l.dropout < 0.0 || l.dropout >= 1.0) broken_chain(i, l, cur, "rate outside [0,1)");
        break;
      case LayerKind::GlobalAvgPool:
        if (cur.size() != 3) broken_chain(i, l, cur, "expects a feature map");
        cur = {cur[2]};
        break;
      case LayerKind::Dense:
        if (cur.size() != 1) broken_chain(i, l, cur, "expects a flat vector");
        if (l.filters <= 0) broken_chain(i, l, cur, "no outputs");
        cur = {static_cast<std::size_t>(l.filters)};
        break;
    }
    shapes.push_back(cur);
  }
  if (cur != Shape{static_cast<std::size_t>(classes)}) {
    throw ShapeError("build", "final layer yields " + shape_string(cur) + ", expected " + std::to_string(classes) +
                                  " logits");
  }
  return shapes;
}

std::string ArchitectureSpec::describe() const {
  std::ostringstream os;
  os << name << " input=" << rows << 'x' << cols << 'x' << channels << " K=" << classes << " eps=" << bn_eps;
  for (const auto& l : layers) {
    os << " | " << kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::Conv:
        os << ' ' << l.filters << '@' << l.kernel << 'x' << l.kernel << " s" << l.stride << " p" << l.padding
           << (l.batch_norm ? " bn" : "") << (l.activation ? " lrelu" : "");
        break;
      case LayerKind::MaxPool: os << ' ' << l.pool << " s" << l.stride; break;
      case LayerKind::Dropout: os << ' ' << l.dropout; break;
      case LayerKind::GlobalAvgPool: break;
      case LayerKind::Dense: os << ' ' << l.filters << (l.batch_norm ? " bn" : ""); break;
    }
  }
  return os.str();
}

std::uint64_t ArchitectureSpec::digest() const {
  const std::string text = describe();
  return fnv1a(text.data(), text.size());
}

void check_input_shape(const ArchitectureSpec& spec, const Shape& shape) {
  const Shape want{static_cast<std::size_t>(spec.rows), static_cast<std::size_t>(spec.cols),
                   static_cast<std::size_t>(spec.channels)};
  if (shape.size() != 4 || Shape(shape.begin() + 1, shape.end()) != want || shape[0] == 0) {
    throw ShapeError("predict", "input " + shape_string(shape) + " does not match (N," + std::to_string(spec.rows) +
                                    "," + std::to_string(spec.cols) + "," + std::to_string(spec.channels) + ")");
  }
}

template <typename T>
std::size_t ModelState<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

template <typename T>
std::uint64_t ModelState<T>::weights_digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) h = fnv1a(p.data.data(), p.size() * sizeof(T), h);
  return h;
}

template <typename T>
std::uint64_t ModelState<T>::stats_digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < running_mean.size(); ++i) {
    h = fnv1a(running_mean[i].data(), running_mean[i].size() * sizeof(T), h);
    h = fnv1a(running_var[i].data(), running_var[i].size() * sizeof(T), h);
  }
  return h;
}

template <typename T>
ModelState<T> build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  const std::vector<Shape> shapes = spec.output_shapes();
  ModelState<T> m;
  m.spec = spec;
  Rng rng(derive_seed(seed, "init"));
  std::size_t in_channels = static_cast<std::size_t>(spec.channels);
  Shape cur{static_cast<std::size_t>(spec.rows), static_cast<std::size_t>(spec.cols), in_channels};
  int conv_index = 0;

  auto add_param = [&](const std::string& name, Shape shape) {
    m.param_names.push_back(name);
    m.params.emplace_back(std::move(shape));
    return static_cast<int>(m.params.size() - 1);
  };
  auto he_fill = [&](Tensor<T>& t, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (T& v : t.data) v = static_cast<T>(dist(rng));
  };
  auto add_bn = [&](LayerSlots& slots, const std::string& prefix, std::size_t channels) {
    slots.gamma = add_param(prefix + ".gamma", Shape{channels});
    for (T& v : m.params[static_cast<std::size_t>(slots.gamma)].data) v = T{1};
    slots.beta = add_param(prefix + ".beta", Shape{channels});
    slots.bn = static_cast<int>(m.bn_names.size());
    m.bn_names.push_back(prefix);
    m.running_mean.emplace_back(channels, T{0});
    m.running_var.emplace_back(channels, T{1});
  };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    LayerSlots slots;
    if (l.kind == LayerKind::Conv) {
      const std::string prefix = "conv" + std::to_string(++conv_index);
      const std::size_t k = static_cast<std::size_t>(l.kernel);
      const std::size_t cin = cur[2];
      const std::size_t cout = static_cast<std::size_t>(l.filters);
      slots.weight = add_param(prefix + ".weight", Shape{k, k, cin, cout});
      he_fill(m.params[static_cast<std::size_t>(slots.weight)], k * k * cin);
      if (l.batch_norm) {
        add_bn(slots, prefix + ".bn", cout);
      } else {
        slots.bias = add_param(prefix + ".bias", Shape{cout});
      }
    } else if (l.kind == LayerKind::Dense) {
      const std::size_t din = cur[0];
      const std::size_t dout = static_cast<std::size_t>(l.filters);
      slots.weight = add_param("fc.weight", Shape{din, dout});
      he_fill(m.params[static_cast<std::size_t>(slots.weight)], din);
      if (l.batch_norm) {
        add_bn(slots, "fc.bn", dout);
      } else {
        slots.bias = add_param("fc.bias", Shape{dout});
      }
    }
    m.slots.push_back(slots);
    cur = shapes[i];
  }
  return m;
}

template <typename T>
BoundModel<T> bind_model(const ModelState<T>& model, ad::Tape<T>& tape, bool trainable) {
  BoundModel<T> bound;
  bound.params.reserve(model.params.size());
  for (const auto& p : model.params) bound.params.push_back(tape.leaf(p, trainable));
  return bound;
}

template <typename T>
ad::Var<T> forward_logits(const ModelState<T>& model, const BoundModel<T>& bound, const ad::Var<T>& input,
                          const ForwardOptions& options, std::vector<ad::BatchStats<T>>* batch_stats) {
  check_input_shape(model.spec, input.shape());
  if (bound.params.size() != model.params.size()) throw ShapeError("forward", "model not bound to this tape");
  const bool batch_norm_uses_batch = options.training && !options.use_running_stats;
  if (batch_stats) batch_stats->clear();
  ad::Var<T> h = input;
  const T eps = static_cast<T>(model.spec.bn_eps);
  const auto param = [&](int slot) -> const ad::Var<T>& { return bound.params[static_cast<std::size_t>(slot)]; };

  auto normalize = [&](const ad::Var<T>& x, const LayerSlots& s) {
    if (batch_norm_uses_batch) {
      ad::BatchStats<T> stats;
      ad::Var<T> y = ad::batch_norm_train(x, param(s.gamma), param(s.beta), eps, &stats);
      if (batch_stats) batch_stats->push_back(std::move(stats));
      return y;
    }
    const std::size_t b = static_cast<std::size_t>(s.bn);
    return ad::batch_norm_eval(x, param(s.gamma), param(s.beta), model.running_mean[b], model.running_var[b], eps);
  };

  for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
    const LayerDesc& l = model.spec.layers[i];
    const LayerSlots& s = model.slots[i];
    switch (l.kind) {
      case LayerKind::Conv:
        h = ad::conv2d(h, param(s.weight), ad::ConvGeometry{l.stride, l.padding});
        h = l.batch_norm ? normalize(h, s) : ad::bias_add(h, param(s.bias));
        if (l.activation) h = ad::leaky_relu(h, static_cast<T>(l.slope));
        break;
      case LayerKind::MaxPool:
        h = ad::max_pool2d(h, l.pool, l.stride);
        break;
      case LayerKind::Dropout:
        if (options.training && options.dropout && l.dropout > 0.0) {
          h = ad::dropout(h, l.dropout, derive_seed(options.dropout_seed, "dropout-layer", i));
        }
        break;
      case LayerKind::GlobalAvgPool:
        h = ad::global_avg_pool(h);
        break;
      case LayerKind::Dense:
        h = ad::dense(h, param(s.weight), l.batch_norm ? nullptr : &param(s.bias));
        if (l.batch_norm) h = normalize(h, s);
        if (l.activation) h = ad::leaky_relu(h, static_cast<T>(l.slope));
        break;
    }
  }
  return h;
}

template <typename T>
Tensor<T> predict(const ModelState<T>& model, const Tensor<T>& batch, const ForwardOptions& options) {
  ad::Tape<T> tape;
  const BoundModel<T> bound = bind_model(model, tape, false);
  const ad::Var<T> x = tape.constant(batch);
  return ad::softmax(forward_logits(model, bound, x, options)).value();
}

template <typename T>
void update_running_stats(ModelState<T>& model, const std::vector<ad::BatchStats<T>>& batch_stats,
                          double momentum) {
  if (batch_stats.size() != model.running_mean.size()) {
    throw ShapeError("update_running_stats", "got " + std::to_string(batch_stats.size()) + " BN layers, model has " +
                                                 std::to_string(model.running_mean.size()));
  }
  const T keep = static_cast<T>(1.0 - momentum);
  const T take = static_cast<T>(momentum);
  for (std::size_t b = 0; b < batch_stats.size(); ++b) {
    for (std::size_t c = 0; c < model.running_mean[b].size(); ++c) {
      model.running_mean[b][c] = keep * model.running_mean[b][c] + take * batch_stats[b].mean[c];
      model.running_var[b][c] = keep * model.running_var[b][c] + take * batch_stats[b].var[c];
    }
  }
}

namespace {

void write_tensor(std::ostream& os, const std::string& name, const Shape& shape, const float* data) {
  io::write_pod(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  io::write_pod(os, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) io::write_pod(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(shape_numel(shape) * sizeof(float)));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState<float>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write("ROIR", 4);
  io::write_pod(os, kCheckpointVersion);
  io::write_pod(os, model.spec.digest());
  io::write_pod(os, static_cast<std::uint64_t>(model.step));
  io::write_pod(os, static_cast<std::uint32_t>(model.params.size() + 2 * model.bn_names.size()));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    write_tensor(os, model.param_names[i], model.params[i].shape, model.params[i].data.data());
  }
  for (std::size_t b = 0; b < model.bn_names.size(); ++b) {
    const Shape s{model.running_mean[b].size()};
    write_tensor(os, model.bn_names[b] + ".running_mean", s, model.running_mean[b].data());
    write_tensor(os, model.bn_names[b] + ".running_var", s, model.running_var[b].data());
  }
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

ModelState<float> load_checkpoint(const std::filesystem::path& path, const ArchitectureSpec& spec) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  io::Reader r(is);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::string(magic, 4) != "ROIR") throw io::FormatError("bad checkpoint magic", 0);
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw io::FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto digest = r.pod<std::uint64_t>("spec digest");
  if (digest != spec.digest()) throw io::FormatError("checkpoint architecture does not match " + spec.name, 8);

  ModelState<float> model = build_model<float>(spec, 0);
  model.step = r.pod<std::uint64_t>("update counter");
  const auto count = r.pod<std::uint32_t>("tensor count");
  if (count != model.params.size() + 2 * model.bn_names.size()) {
    throw io::FormatError("unexpected tensor count " + std::to_string(count), r.offset() - 4);
  }
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint64_t start = r.offset();
    const auto len = r.pod<std::uint32_t>("name length");
    if (len > 4096) throw io::FormatError("implausible tensor name length", start);
    std::string name(len, '\0');
    r.bytes(name.data(), len, "tensor name");
    const auto rank = r.pod<std::uint32_t>("rank");
    if (rank > 8) throw io::FormatError("implausible rank for " + name, start);
    Shape shape(rank);
    for (auto& d : shape) d = r.pod<std::uint32_t>("extent");
    float* dst = nullptr;
    Shape expected;
    if (t < model.params.size()) {
      if (name != model.param_names[t]) throw io::FormatError("expected tensor " + model.param_names[t] + ", found " + name, start);
      dst = model.params[t].data.data();
      expected = model.params[t].shape;
    } else {
      const std::size_t b = (t - model.params.size()) / 2;
      const bool is_mean = (t - model.params.size()) % 2 == 0;
      const std::string want = model.bn_names[b] + (is_mean ? ".running_mean" : ".running_var");
      if (name != want) throw io::FormatError("expected tensor " + want + ", found " + name, start);
      auto& vec = is_mean ? model.running_mean[b] : model.running_var[b];
      dst = vec.data();
      expected = Shape{vec.size()};
    }
    if (shape != expected) {
      throw io::FormatError("tensor " + name + " has shape " + shape_string(shape) + ", expected " + shape_string(expected), start);
    }
    r.bytes(dst, shape_numel(shape) * sizeof(float), name.c_str());
  }
  if (!r.at_end()) throw io::FormatError("trailing bytes after last tensor", r.offset());
  return model;
}

template struct ModelState<float>;
template struct ModelState<double>;

#define RRLAB_INSTANTIATE_NETWORK(T)                                                                 \
  template ModelState<T> build_model<T>(const ArchitectureSpec&, std::uint64_t);                     \
  template BoundModel<T> bind_model<T>(const ModelState<T>&, ad::Tape<T>&, bool);                    \
  template ad::Var<T> forward_logits<T>(const ModelState<T>&, const BoundModel<T>&, const ad::Var<T>&, \
                                        const ForwardOptions&, std::vector<ad::BatchStats<T>>*);      \
  template Tensor<T> predict<T>(const ModelState<T>&, const Tensor<T>&, const ForwardOptions&);      \
  template void update_running_stats<T>(ModelState<T>&, const std::vector<ad::BatchStats<T>>&, double);

RRLAB_INSTANTIATE_NETWORK(float)
RRLAB_INSTANTIATE_NETWORK(double)

#undef RRLAB_INSTANTIATE_NETWORK

}  // namespace rrlab
