#include "rrlab/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <random>

namespace rrlab::ad {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

enum class BinaryKind { Add, Sub, Mul, Div };

const char* binary_name(BinaryKind kind) {
  switch (kind) {
    case BinaryKind::Add: return "add";
    case BinaryKind::Sub: return "sub";
    case BinaryKind::Mul: return "mul";
    case BinaryKind::Div: return "div";
  }
  return "binary";
}

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinaryKind kind) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const bool same = av.shape == bv.shape;
  const bool a_scalar = av.size() == 1;
  const bool b_scalar = bv.size() == 1;
  if (!same && !a_scalar && !b_scalar) {
    throw ShapeError(binary_name(kind),
                     "incompatible shapes " + shape_string(av.shape) + " and " + shape_string(bv.shape));
  }
  const Shape out_shape = same ? av.shape : (a_scalar ? bv.shape : av.shape);
  const std::size_t n = shape_numel(out_shape);
  const std::size_t sa = av.size() == n ? 1 : 0;  // stride 0 broadcasts
  const std::size_t sb = bv.size() == n ? 1 : 0;
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[i * sa];
    const T y = bv[i * sb];
    switch (kind) {
      case BinaryKind::Add: out[i] = x + y; break;
      case BinaryKind::Sub: out[i] = x - y; break;
      case BinaryKind::Mul: out[i] = x * y; break;
      case BinaryKind::Div: out[i] = x / y; break;
    }
  }
  const NodeId ia = a.id();
  const NodeId ib = b.id();
  return a.tape()->record(binary_name(kind), std::move(out), {a, b},
                          [ia, ib, sa, sb, n, kind](Tape<T>& tape, const Tensor<T>& g) {
                            const Tensor<T>& x = tape.value(ia);
                            const Tensor<T>& y = tape.value(ib);
                            if (tape.requires_grad(ia)) {
                              Tensor<T>& ga = tape.accumulate(ia);
                              for (std::size_t i = 0; i < n; ++i) {
                                T d = g[i];
                                if (kind == BinaryKind::Mul) d *= y[i * sb];
                                if (kind == BinaryKind::Div) d /= y[i * sb];
                                ga[i * sa] += d;
                              }
                            }
                            if (tape.requires_grad(ib)) {
                              Tensor<T>& gb = tape.accumulate(ib);
                              for (std::size_t i = 0; i < n; ++i) {
                                T d = g[i];
                                if (kind == BinaryKind::Sub) d = -d;
                                if (kind == BinaryKind::Mul) d *= x[i * sa];
                                if (kind == BinaryKind::Div) {
                                  const T yv = y[i * sb];
                                  d = -d * x[i * sa] / (yv * yv);
                                }
                                gb[i * sb] += d;
                              }
                            }
                          });
}

/// Applies an elementwise map whose derivative depends on (input, output).
template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const char* name, const Var<T>& x, Fwd fwd, Deriv deriv) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const NodeId ix = x.id();
  Tape<T>* tape = x.tape();
  const NodeId self = tape->size();
  return tape->record(name, std::move(out), {x}, [ix, self, deriv](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& in = t.value(ix);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.accumulate(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(in[i], y[i]);
  });
}

std::size_t last_extent(const Shape& s, const char* op) {
  if (s.empty()) throw ShapeError(op, "requires rank >= 1, got scalar");
  return s.back();
}

/// Copies zero-padded sliding windows of an NHWC tensor into rows of a
/// (N*Ho*Wo, kh*kw*C) matrix, column order (ky, kx, c).
template <typename T>
void im2col(const T* x, std::size_t n, std::size_t h, std::size_t w, std::size_t c, std::size_t kh,
            std::size_t kw, int stride, int pad, std::size_t ho, std::size_t wo, T* cols) {
  const std::size_t row_len = kh * kw * c;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T* row = cols + ((b * ho + oy) * wo + ox) * row_len;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long iy = static_cast<long>(oy) * stride + static_cast<long>(ky) - pad;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const long ix = static_cast<long>(ox) * stride + static_cast<long>(kx) - pad;
            T* dst = row + (ky * kw + kx) * c;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) {
              std::fill_n(dst, c, T{0});
            } else {
              const T* src = x + ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * c;
              std::copy_n(src, c, dst);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t n, std::size_t h, std::size_t w, std::size_t c, std::size_t kh,
            std::size_t kw, int stride, int pad, std::size_t ho, std::size_t wo, T* x) {
  const std::size_t row_len = kh * kw * c;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const T* row = cols + ((b * ho + oy) * wo + ox) * row_len;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long iy = static_cast<long>(oy) * stride + static_cast<long>(ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const long ix = static_cast<long>(ox) * stride + static_cast<long>(kx) - pad;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const T* src = row + (ky * kw + kx) * c;
            T* dst = x + ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::Add);
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::Sub);
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::Mul);
}
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::Div);
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary<T>("scale", a, [factor](T v) { return v * factor; },
                  [factor](T, T) { return factor; });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return unary<T>("leaky_relu", x, [slope](T v) { return v >= T{0} ? v : v * slope; },
                  [slope](T v, T) { return v >= T{0} ? T{1} : slope; });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
  return unary<T>("abs", x, [](T v) { return std::abs(v); },
                  [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  const T floor = static_cast<T>(kLogFloor);
  return unary<T>("log", x, [floor](T v) { return std::log(std::max(v, floor)); },
                  [floor](T v, T) { return v > floor ? T{1} / v : T{0}; });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  const std::size_t k = last_extent(xv.shape, "softmax");
  const std::size_t rows = xv.size() / k;
  Tensor<T> out(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data.data() + r * k;
    T* o = out.data.data() + r * k;
    const T m = *std::max_element(in, in + k);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = std::exp(in[j] - m);
      total += o[j];
    }
    for (std::size_t j = 0; j < k; ++j) o[j] /= total;
  }
  const NodeId ix = x.id();
  const NodeId self = x.tape()->size();
  return x.tape()->record("softmax", std::move(out), {x},
                          [ix, self, k, rows](Tape<T>& t, const Tensor<T>& g) {
                            const Tensor<T>& y = t.value(self);
                            Tensor<T>& gx = t.accumulate(ix);
                            for (std::size_t r = 0; r < rows; ++r) {
                              T dot{0};
                              for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
                              for (std::size_t j = 0; j < k; ++j) {
                                gx[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
                              }
                            }
                          });
}

template <typename T>
Var<T> reduce_sum(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  T total{0};
  for (T v : xv.data) total += v;
  const NodeId ix = x.id();
  return x.tape()->record("reduce_sum", Tensor<T>(Shape{}, std::vector<T>{total}), {x},
                          [ix](Tape<T>& t, const Tensor<T>& g) {
                            Tensor<T>& gx = t.accumulate(ix);
                            for (T& v : gx.data) v += g[0];
                          });
}

template <typename T>
Var<T> sum_last(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  const std::size_t k = last_extent(xv.shape, "sum_last");
  const std::size_t rows = xv.size() / k;
  Tensor<T> out(Shape(xv.shape.begin(), xv.shape.end() - 1));
  for (std::size_t r = 0; r < rows; ++r) {
    T total{0};
    for (std::size_t j = 0; j < k; ++j) total += xv[r * k + j];
    out[r] = total;
  }
  const NodeId ix = x.id();
  return x.tape()->record("sum_last", std::move(out), {x}, [ix, k, rows](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.accumulate(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += g[r];
    }
  });
}

template <typename T>
Var<T> reduce_max(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.empty()) throw ShapeError("reduce_max", "empty input");
  const std::size_t arg =
      static_cast<std::size_t>(std::max_element(xv.data.begin(), xv.data.end()) - xv.data.begin());
  const NodeId ix = x.id();
  return x.tape()->record("reduce_max", Tensor<T>(Shape{}, std::vector<T>{xv[arg]}), {x},
                          [ix, arg](Tape<T>& t, const Tensor<T>& g) { t.accumulate(ix)[arg] += g[0]; });
}

template <typename T>
Var<T> max_last(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  const std::size_t k = last_extent(xv.shape, "max_last");
  const std::size_t rows = xv.size() / k;
  Tensor<T> out(Shape(xv.shape.begin(), xv.shape.end() - 1));
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data.data() + r * k;
    // max_element returns the first of equal maxima.
    arg[r] = static_cast<std::size_t>(std::max_element(in, in + k) - in);
    out[r] = in[arg[r]];
  }
  const NodeId ix = x.id();
  return x.tape()->record("max_last", std::move(out), {x},
                          [ix, k, arg = std::move(arg)](Tape<T>& t, const Tensor<T>& g) {
                            Tensor<T>& gx = t.accumulate(ix);
                            for (std::size_t r = 0; r < arg.size(); ++r) gx[r * k + arg[r]] += g[r];
                          });
}

template <typename T>
Var<T> l1_norm(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  T total{0};
  for (T v : xv.data) total += std::abs(v);
  const NodeId ix = x.id();
  return x.tape()->record("l1_norm", Tensor<T>(Shape{}, std::vector<T>{total}), {x},
                          [ix](Tape<T>& t, const Tensor<T>& g) {
                            const Tensor<T>& in = t.value(ix);
                            Tensor<T>& gx = t.accumulate(ix);
                            for (std::size_t i = 0; i < in.size(); ++i) {
                              const T s = in[i] > T{0} ? T{1} : (in[i] < T{0} ? T{-1} : T{0});
                              gx[i] += g[0] * s;
                            }
                          });
}

template <typename T>
Var<T> l2_norm(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  T total{0};
  for (T v : xv.data) total += v * v;
  const T norm = std::sqrt(total);
  const NodeId ix = x.id();
  return x.tape()->record("l2_norm", Tensor<T>(Shape{}, std::vector<T>{norm}), {x},
                          [ix, norm](Tape<T>& t, const Tensor<T>& g) {
                            if (norm == T{0}) return;
                            const Tensor<T>& in = t.value(ix);
                            Tensor<T>& gx = t.accumulate(ix);
                            for (std::size_t i = 0; i < in.size(); ++i) gx[i] += g[0] * in[i] / norm;
                          });
}

template <typename T>
Var<T> pick(const Var<T>& x, const std::vector<std::uint32_t>& labels) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2 || xv.dim(0) != labels.size()) {
    throw ShapeError("pick", "expected (" + std::to_string(labels.size()) + ",K), got " +
                                 shape_string(xv.shape));
  }
  const std::size_t k = xv.dim(1);
  Tensor<T> out(Shape{labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) {
      throw ShapeError("pick", "label " + std::to_string(labels[i]) + " out of range for K=" + std::to_string(k));
    }
    out[i] = xv[i * k + labels[i]];
  }
  const NodeId ix = x.id();
  return x.tape()->record("pick", std::move(out), {x}, [ix, k, labels](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.accumulate(ix);
    for (std::size_t i = 0; i < labels.size(); ++i) gx[i * k + labels[i]] += g[i];
  });
}

template <typename T>
Var<T> stop_gradient(const Var<T>& x) {
  // Recorded as a fresh constant so nothing upstream is ever reached.
  Var<T> out = x.tape()->record("stop_gradient", x.value(), {}, nullptr);
  return out;
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape", "cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  Tensor<T> out(std::move(shape), x.value().data);
  const NodeId ix = x.id();
  return x.tape()->record("reshape", std::move(out), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.accumulate(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> bias_add(const Var<T>& x, const Var<T>& bias) {
  const Tensor<T>& xv = x.value();
  const std::size_t c = last_extent(xv.shape, "bias_add");
  if (bias.value().rank() != 1 || bias.size() != c) {
    throw ShapeError("bias_add", "bias " + shape_string(bias.shape()) + " for input " + shape_string(xv.shape));
  }
  const Tensor<T>& bv = bias.value();
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % c];
  const NodeId ix = x.id(), ib = bias.id();
  return x.tape()->record("bias_add", std::move(out), {x, bias}, [ix, ib, c](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ix)) {
      Tensor<T>& gx = t.accumulate(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.accumulate(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
    }
  });
}

template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>* bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0)) {
    throw ShapeError("dense", "input " + shape_string(xv.shape) + " incompatible with weight " +
                                  shape_string(wv.shape));
  }
  const std::size_t n = xv.dim(0), d = xv.dim(1), o = wv.dim(1);
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != o)) {
    throw ShapeError("dense", "bias " + shape_string(bias->shape()) + " does not match " + std::to_string(o) +
                                  " outputs");
  }
  Tensor<T> out(Shape{n, o});
  MatMap<T>(out.data.data(), n, o).noalias() =
      ConstMatMap<T>(xv.data.data(), n, d) * ConstMatMap<T>(wv.data.data(), d, o);
  if (bias) {
    const Tensor<T>& bv = bias->value();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < o; ++j) out[i * o + j] += bv[j];
    }
  }
  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const NodeId ix = x.id(), iw = w.id();
  const NodeId ib = bias ? bias->id() : 0;
  const bool has_bias = bias != nullptr;
  return x.tape()->record("dense", std::move(out), inputs,
                          [=](Tape<T>& t, const Tensor<T>& g) {
                            ConstMatMap<T> gm(g.data.data(), n, o);
                            if (t.requires_grad(ix)) {
                              MatMap<T>(t.accumulate(ix).data.data(), n, d).noalias() +=
                                  gm * ConstMatMap<T>(t.value(iw).data.data(), d, o).transpose();
                            }
                            if (t.requires_grad(iw)) {
                              MatMap<T>(t.accumulate(iw).data.data(), d, o).noalias() +=
                                  ConstMatMap<T>(t.value(ix).data.data(), n, d).transpose() * gm;
                            }
                            if (has_bias && t.requires_grad(ib)) {
                              Tensor<T>& gb = t.accumulate(ib);
                              for (std::size_t i = 0; i < n; ++i) {
                                for (std::size_t j = 0; j < o; ++j) gb[j] += g[i * o + j];
                              }
                            }
                          });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, ConvGeometry geo) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(3) != wv.dim(2)) {
    throw ShapeError("conv2d", "input " + shape_string(xv.shape) + " incompatible with weight " +
                                   shape_string(wv.shape));
  }
  if (geo.stride < 1 || geo.padding < 0) throw ShapeError("conv2d", "invalid stride/padding");
  const std::size_t n = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), c = xv.dim(3);
  const std::size_t kh = wv.dim(0), kw = wv.dim(1), co = wv.dim(3);
  const long hp = static_cast<long>(h) + 2L * geo.padding - static_cast<long>(kh);
  const long wp = static_cast<long>(wd) + 2L * geo.padding - static_cast<long>(kw);
  if (hp < 0 || wp < 0) {
    throw ShapeError("conv2d", "kernel " + shape_string(wv.shape) + " larger than padded input " +
                                   shape_string(xv.shape));
  }
  const std::size_t ho = static_cast<std::size_t>(hp / geo.stride + 1);
  const std::size_t wo = static_cast<std::size_t>(wp / geo.stride + 1);
  const std::size_t rows = n * ho * wo, klen = kh * kw * c;

  std::vector<T> cols(rows * klen);
  im2col(xv.data.data(), n, h, wd, c, kh, kw, geo.stride, geo.padding, ho, wo, cols.data());
  Tensor<T> out(Shape{n, ho, wo, co});
  MatMap<T>(out.data.data(), rows, co).noalias() =
      ConstMatMap<T>(cols.data(), rows, klen) * ConstMatMap<T>(wv.data.data(), klen, co);

  const NodeId ix = x.id(), iw = w.id();
  return x.tape()->record(
      "conv2d", std::move(out), {x, w}, [=](Tape<T>& t, const Tensor<T>& g) {
        ConstMatMap<T> gm(g.data.data(), rows, co);
        if (t.requires_grad(iw)) {
          std::vector<T> patches(rows * klen);
          im2col(t.value(ix).data.data(), n, h, wd, c, kh, kw, geo.stride, geo.padding, ho, wo,
                 patches.data());
          MatMap<T>(t.accumulate(iw).data.data(), klen, co).noalias() +=
              ConstMatMap<T>(patches.data(), rows, klen).transpose() * gm;
        }
        if (t.requires_grad(ix)) {
          std::vector<T> dcols(rows * klen);
          MatMap<T>(dcols.data(), rows, klen).noalias() =
              gm * ConstMatMap<T>(t.value(iw).data.data(), klen, co).transpose();
          col2im(dcols.data(), n, h, wd, c, kh, kw, geo.stride, geo.padding, ho, wo,
                 t.accumulate(ix).data.data());
        }
      });
}

template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        BatchStats<T>* stats) {
  const Tensor<T>& xv = x.value();
  const std::size_t c = last_extent(xv.shape, "batch_norm");
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("batch_norm", "scale/shift of size " + std::to_string(gamma.size()) + " for " +
                                       std::to_string(c) + " channels");
  }
  const std::size_t m = xv.size() / c;
  if (m < 2) throw ShapeError("batch_norm", "train mode needs at least 2 values per channel");
  std::vector<T> mean(c, T{0}), var(c, T{0});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < c; ++j) mean[j] += xv[i * c + j];
  }
  for (T& v : mean) v /= static_cast<T>(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const T d = xv[i * c + j] - mean[j];
      var[j] += d * d;
    }
  }
  for (T& v : var) v /= static_cast<T>(m);
  std::vector<T> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = T{1} / std::sqrt(var[j] + eps);

  Tensor<T> xhat(xv.shape);
  Tensor<T> out(xv.shape);
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t k = i * c + j;
      xhat[k] = (xv[k] - mean[j]) * inv_std[j];
      out[k] = gv[j] * xhat[k] + bv[j];
    }
  }
  if (stats) *stats = BatchStats<T>{mean, var};

  const NodeId ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
        std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            sum_g[j] += g[i * c + j];
            sum_gx[j] += g[i * c + j] * xhat[i * c + j];
          }
        }
        if (t.requires_grad(ig)) {
          Tensor<T>& gg = t.accumulate(ig);
          for (std::size_t j = 0; j < c; ++j) gg[j] += sum_gx[j];
        }
        if (t.requires_grad(ib)) {
          Tensor<T>& gb = t.accumulate(ib);
          for (std::size_t j = 0; j < c; ++j) gb[j] += sum_g[j];
        }
        if (t.requires_grad(ix)) {
          const Tensor<T>& gam = t.value(ig);
          Tensor<T>& gx = t.accumulate(ix);
          const T inv_m = T{1} / static_cast<T>(m);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              const std::size_t k = i * c + j;
              gx[k] += gam[j] * inv_std[j] * (g[k] - inv_m * sum_g[j] - xhat[k] * inv_m * sum_gx[j]);
            }
          }
        }
      });
}

template <typename T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       const std::vector<T>& mean, const std::vector<T>& var, T eps) {
  const Tensor<T>& xv = x.value();
  const std::size_t c = last_extent(xv.shape, "batch_norm");
  if (gamma.size() != c || beta.size() != c || mean.size() != c || var.size() != c) {
    throw ShapeError("batch_norm", "statistics do not match " + std::to_string(c) + " channels");
  }
  const std::size_t m = xv.size() / c;
  std::vector<T> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = T{1} / std::sqrt(var[j] + eps);
  Tensor<T> xhat(xv.shape);
  Tensor<T> out(xv.shape);
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t k = i * c + j;
      xhat[k] = (xv[k] - mean[j]) * inv_std[j];
      out[k] = gv[j] * xhat[k] + bv[j];
    }
  }
  const NodeId ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->record(
      "batch_norm_eval", std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& gam = t.value(ig);
        Tensor<T>* gg = t.requires_grad(ig) ? &t.accumulate(ig) : nullptr;
        Tensor<T>* gb = t.requires_grad(ib) ? &t.accumulate(ib) : nullptr;
        Tensor<T>* gx = t.requires_grad(ix) ? &t.accumulate(ix) : nullptr;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t k = i * c + j;
            if (gg) (*gg)[j] += g[k] * xhat[k];
            if (gb) (*gb)[j] += g[k];
            if (gx) (*gx)[k] += g[k] * gam[j] * inv_std[j];
          }
        }
      });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, int size, int stride) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4 || size < 1 || stride < 1 || xv.dim(1) < static_cast<std::size_t>(size) ||
      xv.dim(2) < static_cast<std::size_t>(size)) {
    throw ShapeError("max_pool2d", "window " + std::to_string(size) + " on input " + shape_string(xv.shape));
  }
  const std::size_t n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  const std::size_t ho = (h - static_cast<std::size_t>(size)) / static_cast<std::size_t>(stride) + 1;
  const std::size_t wo = (w - static_cast<std::size_t>(size)) / static_cast<std::size_t>(stride) + 1;
  Tensor<T> out(Shape{n, ho, wo, c});
  std::vector<std::size_t> arg(out.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = 0;
          bool first = true;
          for (int ky = 0; ky < size; ++ky) {
            for (int kx = 0; kx < size; ++kx) {
              const std::size_t iy = oy * static_cast<std::size_t>(stride) + static_cast<std::size_t>(ky);
              const std::size_t ix = ox * static_cast<std::size_t>(stride) + static_cast<std::size_t>(kx);
              const std::size_t idx = ((b * h + iy) * w + ix) * c + ch;
              if (first || xv[idx] > xv[best]) {
                best = idx;
                first = false;
              }
            }
          }
          const std::size_t o = ((b * ho + oy) * wo + ox) * c + ch;
          out[o] = xv[best];
          arg[o] = best;
        }
      }
    }
  }
  const NodeId ix = x.id();
  return x.tape()->record("max_pool2d", std::move(out), {x},
                          [ix, arg = std::move(arg)](Tape<T>& t, const Tensor<T>& g) {
                            Tensor<T>& gx = t.accumulate(ix);
                            for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += g[o];
                          });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("global_avg_pool", "expected NHWC input, got " + shape_string(xv.shape));
  const std::size_t n = xv.dim(0), hw = xv.dim(1) * xv.dim(2), c = xv.dim(3);
  Tensor<T> out(Shape{n, c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] += xv[(b * hw + p) * c + ch];
    }
  }
  const T inv = T{1} / static_cast<T>(hw);
  for (T& v : out.data) v *= inv;
  const NodeId ix = x.id();
  return x.tape()->record("global_avg_pool", std::move(out), {x},
                          [ix, n, hw, c, inv](Tape<T>& t, const Tensor<T>& g) {
                            Tensor<T>& gx = t.accumulate(ix);
                            for (std::size_t b = 0; b < n; ++b) {
                              for (std::size_t p = 0; p < hw; ++p) {
                                for (std::size_t ch = 0; ch < c; ++ch) {
                                  gx[(b * hw + p) * c + ch] += g[b * c + ch] * inv;
                                }
                              }
                            }
                          });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout", "rate must be in [0,1)");
  const Tensor<T>& xv = x.value();
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  const T factor = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(xv.size());
  for (T& m : mask) m = keep(rng) ? factor : T{0};
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * mask[i];
  const NodeId ix = x.id();
  return x.tape()->record("dropout", std::move(out), {x},
                          [ix, mask = std::move(mask)](Tape<T>& t, const Tensor<T>& g) {
                            Tensor<T>& gx = t.accumulate(ix);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                          });
}

#define RRLAB_INSTANTIATE_OPS(T)                                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                             \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                             \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                             \
  template Var<T> div(const Var<T>&, const Var<T>&);                                             \
  template Var<T> scale(const Var<T>&, T);                                                       \
  template Var<T> leaky_relu(const Var<T>&, T);                                                  \
  template Var<T> abs(const Var<T>&);                                                            \
  template Var<T> log(const Var<T>&);                                                            \
  template Var<T> softmax(const Var<T>&);                                                        \
  template Var<T> reduce_sum(const Var<T>&);                                                     \
  template Var<T> sum_last(const Var<T>&);                                                       \
  template Var<T> reduce_max(const Var<T>&);                                                     \
  template Var<T> max_last(const Var<T>&);                                                       \
  template Var<T> l1_norm(const Var<T>&);                                                        \
  template Var<T> l2_norm(const Var<T>&);                                                        \
  template Var<T> pick(const Var<T>&, const std::vector<std::uint32_t>&);                        \
  template Var<T> stop_gradient(const Var<T>&);                                                  \
  template Var<T> reshape(const Var<T>&, Shape);                                                 \
  template Var<T> bias_add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> dense(const Var<T>&, const Var<T>&, const Var<T>*);                            \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, ConvGeometry);                            \
  template Var<T> batch_norm_train(const Var<T>&, const Var<T>&, const Var<T>&, T, BatchStats<T>*); \
  template Var<T> batch_norm_eval(const Var<T>&, const Var<T>&, const Var<T>&, const std::vector<T>&, \
                                  const std::vector<T>&, T);                                     \
  template Var<T> max_pool2d(const Var<T>&, int, int);                                           \
  template Var<T> global_avg_pool(const Var<T>&);                                                \
  template Var<T> dropout(const Var<T>&, double, std::uint64_t);

RRLAB_INSTANTIATE_OPS(float)
RRLAB_INSTANTIATE_OPS(double)

#undef RRLAB_INSTANTIATE_OPS

}  // namespace rrlab::ad
