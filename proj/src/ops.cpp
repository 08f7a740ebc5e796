#include "qlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <type_traits>

#include "qlab/kernels.hpp"

namespace qlab::ops {

namespace {

namespace kx = kernels::parallel;

template <typename T>
using Slots = std::span<std::vector<T>* const>;

template <typename T>
Tensor<T> finish(std::string_view op, Tensor<T> out, std::vector<Tensor<T>> inputs,
                 typename Tape<T>::BackwardFn backward) {
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const auto& in : inputs)
    for (T v : in.values()) inputs_finite = inputs_finite && std::isfinite(v);
  if (inputs_finite)
    for (T v : out.values())
      if (!std::isfinite(v)) throw std::runtime_error(std::string(op) + ": non-finite output from finite inputs");
#endif
  Tape<T>* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    if (tape && tape != in.tape()) throw std::logic_error(std::string(op) + ": inputs recorded on different tapes");
    tape = in.tape();
  }
  if (!tape) return out;
  return tape->record(std::move(out), inputs, std::move(backward));
}

[[noreturn]] void shape_error(std::string_view op, const std::string& expected, const Shape& actual) {
  throw ShapeError(std::string(op) + ": expected " + expected + ", got " + to_string(actual));
}

[[noreturn]] void shape_error(std::string_view op, const Shape& a, const Shape& b, const std::string& rule) {
  throw ShapeError(std::string(op) + ": " + rule + ", got " + to_string(a) + " and " + to_string(b));
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

template <typename T>
void check_broadcast(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(a.shape(), b.shape()))
    shape_error(op, a.shape(), b.shape(), "second operand must match the first or a trailing suffix of it");
}

// Elementwise binary op with suffix broadcasting of b. `fwd(x, y)` gives the
// value, `da(x, y, g)` / `db(x, y, g)` the partial contributions.
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(std::string_view op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
  check_broadcast(op, a, b);
  const std::size_t n = a.size();
  const std::size_t m = b.size();
  std::vector<T> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i % m]);
  return finish<T>(op, Tensor<T>(a.shape(), std::move(out)), {a, b}, [a, b, da, db](std::span<const T> g, Slots<T> s) {
    auto av = a.values();
    auto bv = b.values();
    const std::size_t n = av.size();
    const std::size_t m = bv.size();
    if (s[0])
      for (std::size_t i = 0; i < n; ++i) (*s[0])[i] += da(av[i], bv[i % m], g[i]);
    if (s[1])
      for (std::size_t i = 0; i < n; ++i) (*s[1])[i % m] += db(av[i], bv[i % m], g[i]);
  });
}

template <typename T, typename Fwd, typename Dx>
Tensor<T> unary(std::string_view op, const Tensor<T>& a, Fwd fwd, Dx dx) {
  std::vector<T> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  Tensor<T> result(a.shape(), std::move(out));
  return finish<T>(op, result, {a}, [a, result, dx](std::span<const T> g, Slots<T> s) {
    auto av = a.values();
    auto yv = result.values();
    for (std::size_t i = 0; i < av.size(); ++i) (*s[0])[i] += dx(av[i], yv[i], g[i]);
  });
}

// tanh for the GELU. Floats use a [13/6] rational fit on [-7.9, 7.9] (within
// 4e-7 of the exact value, saturating beyond), which vectorizes where the
// libm call does not; doubles keep std::tanh.
template <typename T>
inline T gelu_tanh(T x) {
  if constexpr (std::is_same_v<T, float>) {
    constexpr float c = 7.90531110763549805f;
    x = std::clamp(x, -c, c);
    const float x2 = x * x;
    float p = x2 * -2.76076847742355e-16f + 2.00018790482477e-13f;
    p = x2 * p + -8.60467152213735e-11f;
    p = x2 * p + 5.12229709037114e-08f;
    p = x2 * p + 1.48572235717979e-05f;
    p = x2 * p + 6.37261928875436e-04f;
    p = x2 * p + 4.89352455891786e-03f;
    float q = x2 * 1.19825839466702e-06f + 1.18534705686654e-04f;
    q = x2 * q + 2.26843463243900e-03f;
    q = x2 * q + 4.89352518554385e-03f;
    return x * p / q;
  } else {
    return std::tanh(x);
  }
}

std::size_t leading(const Shape& s, std::size_t keep) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + keep < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T g) { return g / y; },
      [](T x, T y, T g) { return -g * x / (y * y); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary<T>("add_scalar", a, [c](T x) { return x + c; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return unary<T>("mul_scalar", a, [c](T x) { return x * c; }, [c](T, T, T g) { return g * c; });
}

template <typename T>
Tensor<T> div_scalar(const Tensor<T>& a, T c) {
  if (c == T{0}) throw std::invalid_argument("div_scalar: division by zero");
  return unary<T>("div_scalar", a, [c](T x) { return x / c; }, [c](T, T, T g) { return g / c; });
}

template <typename T>
Tensor<T> maximum_scalar(const Tensor<T>& a, T floor) {
  return unary<T>(
      "maximum_scalar", a, [floor](T x) { return std::max(x, floor); },
      [floor](T x, T, T g) { return x >= floor ? g : T{0}; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary<T>("sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y, T g) { return g / (T{2} * y); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = static_cast<T>(0.044715);
  return unary<T>(
      "gelu", a,
      [](T x) { return T{0.5} * x * (T{1} + gelu_tanh(c * (x + k * x * x * x))); },
      [](T x, T, T g) {
        T t = gelu_tanh(c * (x + k * x * x * x));
        T d = T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * c * (T{1} + T{3} * k * x * x);
        return g * d;
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, bool causal) {
  if (a.rank() == 0) shape_error("softmax", "rank >= 1", a.shape());
  const std::size_t cols = a.dim(-1);
  if (causal && (a.rank() < 2 || a.dim(-2) != cols))
    shape_error("softmax", "trailing square [S, S] axes for causal masking", a.shape());
  const std::size_t rows = a.size() / cols;
  Tensor<T> y(a.shape());
  kx::softmax_rows(rows, cols, causal, a.values().data(), y.mutable_values().data());
  return finish<T>("softmax", y, {a}, [y, rows, cols](std::span<const T> g, Slots<T> s) {
    auto yv = y.values();
    auto& dx = *s[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      T dot = 0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[o + j] * yv[o + j];
      for (std::size_t j = 0; j < cols; ++j) dx[o + j] += yv[o + j] * (g[o + j] - dot);
    }
  });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() == 0) shape_error("layernorm", "rank >= 1", x.shape());
  const std::size_t cols = x.dim(-1);
  if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols})
    shape_error("layernorm", gain.shape(), bias.shape(), "gain and bias must both be [" + std::to_string(cols) + "]");
  const std::size_t rows = x.size() / cols;
  Tensor<T> y(x.shape());
  auto mean = std::make_shared<std::vector<T>>(rows);
  auto rstd = std::make_shared<std::vector<T>>(rows);
  kx::layernorm_rows(rows, cols, eps, x.values().data(), gain.values().data(), bias.values().data(),
                     y.mutable_values().data(), mean->data(), rstd->data());
  return finish<T>("layernorm", y, {x, gain, bias}, [x, gain, mean, rstd, rows, cols](std::span<const T> g, Slots<T> s) {
    auto xv = x.values();
    auto gv = gain.values();
    std::vector<T> xhat(cols), dxhat(cols);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      const T mu = (*mean)[r];
      const T rs = (*rstd)[r];
      T m1 = 0, m2 = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        xhat[j] = (xv[o + j] - mu) * rs;
        dxhat[j] = g[o + j] * gv[j];
        m1 += dxhat[j];
        m2 += dxhat[j] * xhat[j];
      }
      m1 /= static_cast<T>(cols);
      m2 /= static_cast<T>(cols);
      if (s[0])
        for (std::size_t j = 0; j < cols; ++j) (*s[0])[o + j] += rs * (dxhat[j] - m1 - xhat[j] * m2);
      if (s[1])
        for (std::size_t j = 0; j < cols; ++j) (*s[1])[j] += g[o + j] * xhat[j];
      if (s[2])
        for (std::size_t j = 0; j < cols; ++j) (*s[2])[j] += g[o + j];
    }
  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, const Shape& ids_shape) {
  if (table.rank() != 2) shape_error("embedding", "table of rank 2 [V, D]", table.shape());
  if (numel(ids_shape) != ids.size())
    throw ShapeError("embedding: ids shape " + to_string(ids_shape) + " does not hold " + std::to_string(ids.size()) +
                     " ids");
  const std::size_t vocab = table.dim(0);
  const std::size_t width = table.dim(1);
  Shape out_shape = ids_shape;
  out_shape.push_back(width);
  std::vector<T> out(ids.size() * width);
  auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * width), width, out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return finish<T>("embedding", Tensor<T>(out_shape, std::move(out)), {table},
                   [saved = std::move(saved), width](std::span<const T> g, Slots<T> s) {
                     auto& dt = *s[0];
                     for (std::size_t i = 0; i < saved.size(); ++i) {
                       const std::size_t row = static_cast<std::size_t>(saved[i]) * width;
                       for (std::size_t j = 0; j < width; ++j) dt[row + j] += g[i * width + j];
                     }
                   });
}

namespace {

// Index map for swapping two axes: out[i] = in[perm[i]].
std::vector<std::size_t> swap_axes_map(const Shape& shape, std::size_t a0, std::size_t a1, Shape& out_shape) {
  const std::size_t r = shape.size();
  out_shape = shape;
  std::swap(out_shape[a0], out_shape[a1]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * shape[i + 1];
  std::vector<std::size_t> stride = in_stride;
  std::swap(stride[a0], stride[a1]);
  const std::size_t n = numel(shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += stride[d];
        break;
      }
      src -= stride[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1) {
  const int r = static_cast<int>(x.rank());
  const int a0 = axis0 < 0 ? axis0 + r : axis0;
  const int a1 = axis1 < 0 ? axis1 + r : axis1;
  if (a0 < 0 || a0 >= r || a1 < 0 || a1 >= r)
    shape_error("transpose", "axes " + std::to_string(axis0) + " and " + std::to_string(axis1) + " to exist", x.shape());
  Shape out_shape;
  auto map = std::make_shared<std::vector<std::size_t>>(
      swap_axes_map(x.shape(), static_cast<std::size_t>(a0), static_cast<std::size_t>(a1), out_shape));
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*map)[i]];
  return finish<T>("transpose", Tensor<T>(out_shape, std::move(out)), {x}, [map](std::span<const T> g, Slots<T> s) {
    auto& dx = *s[0];
    for (std::size_t i = 0; i < g.size(); ++i) dx[(*map)[i]] += g[i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", x.shape(), shape, "element counts must agree");
  return finish<T>("reshape", x.view(std::move(shape)), {x}, [](std::span<const T> g, Slots<T> s) {
    auto& dx = *s[0];
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_error("matmul", a.shape(), b.shape(), "operands need rank >= 2");
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  if (b.dim(-2) != k) shape_error("matmul", a.shape(), b.shape(), "inner dimensions must agree");
  const std::size_t n = b.dim(-1);
  const bool batched = b.rank() > 2;
  if (batched && (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())))
    shape_error("matmul", a.shape(), b.shape(), "batched operands need identical leading axes");
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.mutable_values().data();
  if (!batched) {
    kx::gemm_nn(a.size() / k, n, k, av, bv, ov, false);
  } else {
    const std::size_t batch = leading(a.shape(), 2);
    for (std::size_t p = 0; p < batch; ++p) kx::gemm_nn(m, n, k, av + p * m * k, bv + p * k * n, ov + p * m * n, false);
  }
  return finish<T>("matmul", out, {a, b}, [a, b, m, n, k, batched](std::span<const T> g, Slots<T> s) {
    const T* av = a.values().data();
    const T* bv = b.values().data();
    if (!batched) {
      const std::size_t rows = a.size() / k;
      if (s[0]) kx::gemm_nt(rows, k, n, g.data(), bv, s[0]->data(), true);
      if (s[1]) kx::gemm_tn(k, n, rows, av, g.data(), s[1]->data(), true);
      return;
    }
    const std::size_t batch = a.size() / (m * k);
    for (std::size_t p = 0; p < batch; ++p) {
      const T* gp = g.data() + p * m * n;
      if (s[0]) kx::gemm_nt(m, k, n, gp, bv + p * k * n, s[0]->data() + p * m * k, true);
      if (s[1]) kx::gemm_tn(k, n, m, av + p * m * k, gp, s[1]->data() + p * k * n, true);
    }
  });
}

namespace {

template <typename T>
Tensor<T> linear_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  if (w.rank() != 2) shape_error("linear", "weight of rank 2 [out, in]", w.shape());
  if (x.rank() == 0 || x.dim(-1) != w.dim(1))
    shape_error("linear", x.shape(), w.shape(), "input features must equal weight columns");
  const std::size_t out_f = w.dim(0), in_f = w.dim(1);
  if (bias && bias->shape() != Shape{out_f})
    shape_error("linear", w.shape(), bias->shape(), "bias must be [out]");
  const std::size_t rows = x.size() / in_f;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor<T> y(out_shape);
  T* yv = y.mutable_values().data();
  kx::gemm_nt(rows, out_f, in_f, x.values().data(), w.values().data(), yv, false);
  if (bias) {
    auto bv = bias->values();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_f; ++j) yv[r * out_f + j] += bv[j];
  }
  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return finish<T>("linear", y, std::move(inputs), [x, w, rows, in_f, out_f](std::span<const T> g, Slots<T> s) {
    if (s[0]) kx::gemm_nn(rows, in_f, out_f, g.data(), w.values().data(), s[0]->data(), true);
    if (s[1]) kx::gemm_tn(out_f, in_f, rows, g.data(), x.values().data(), s[1]->data(), true);
    if (s.size() > 2 && s[2]) {
      auto& db = *s[2];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out_f; ++j) db[j] += g[r * out_f + j];
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  return linear_impl<T>(x, w, nullptr);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  return linear_impl(x, w, &bias);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.values()) acc += v;
  return finish<T>("sum", Tensor<T>::scalar(static_cast<T>(acc)), {x}, [](std::span<const T> g, Slots<T> s) {
    for (auto& d : *s[0]) d += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.values()) acc += v;
  const T n = static_cast<T>(x.size());
  return finish<T>("mean", Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(x.size()))), {x},
                   [n](std::span<const T> g, Slots<T> s) {
                     for (auto& d : *s[0]) d += g[0] / n;
                   });
}

template <typename T>
Tensor<T> squared_frobenius(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  return finish<T>("squared_frobenius", Tensor<T>::scalar(static_cast<T>(acc)), {x},
                   [x](std::span<const T> g, Slots<T> s) {
                     auto xv = x.values();
                     for (std::size_t i = 0; i < xv.size(); ++i) (*s[0])[i] += T{2} * xv[i] * g[0];
                   });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  if (logits.rank() == 0) shape_error("cross_entropy", "logits of rank >= 1", logits.shape());
  const std::size_t vocab = logits.dim(-1);
  const std::size_t rows = logits.size() / vocab;
  if (targets.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(rows) + " logit rows in " + to_string(logits.shape()) + " but " +
                     std::to_string(targets.size()) + " targets");
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  kx::softmax_rows(rows, vocab, false, logits.values().data(), probs->data());
  auto lv = logits.values();
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
    const T* row = lv.data() + r * vocab;
    const T mx = *std::max_element(row, row + vocab);
    double z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(z) - static_cast<double>(row[t] - mx);
  }
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return finish<T>("cross_entropy", Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(rows))), {logits},
                   [probs, saved = std::move(saved), rows, vocab](std::span<const T> g, Slots<T> s) {
                     auto& dx = *s[0];
                     const T scale = g[0] / static_cast<T>(rows);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const std::size_t o = r * vocab;
                       for (std::size_t j = 0; j < vocab; ++j) dx[o + j] += scale * (*probs)[o + j];
                       dx[o + static_cast<std::size_t>(saved[r])] -= scale;
                     }
                   });
}

template <typename T>
Tensor<T> round_ste(const Tensor<T>& x) {
  // nearbyint honours the default rounding mode: round half to even. Adding
  // +0 maps -0 to +0, so a rounded grid index is bitwise the stored one.
  return unary<T>("round_ste", x, [](T v) { return std::nearbyint(v) + T{0}; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> clip_ste(const Tensor<T>& x, T lo, T hi) {
  if (lo > hi) throw std::invalid_argument("clip_ste: lower bound exceeds upper bound");
  return unary<T>(
      "clip_ste", x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T v, T, T g) { return (v >= lo && v <= hi) ? g : T{0}; });
}

template <typename T>
Tensor<T> repeat_groups(const Tensor<T>& x, std::size_t group_size, std::size_t cols) {
  if (group_size == 0) throw std::invalid_argument("repeat_groups: group size must be positive");
  const std::size_t groups = (cols + group_size - 1) / group_size;
  if (x.rank() != 2 || x.dim(1) != groups)
    shape_error("repeat_groups", "[rows, " + std::to_string(groups) + "]", x.shape());
  const std::size_t rows = x.dim(0);
  std::vector<T> out(rows * cols);
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * groups + c / group_size];
  return finish<T>("repeat_groups", Tensor<T>({rows, cols}, std::move(out)), {x},
                   [rows, cols, groups, group_size](std::span<const T> g, Slots<T> s) {
                     auto& dx = *s[0];
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < cols; ++c) dx[r * groups + c / group_size] += g[r * cols + c];
                   });
}

#define QLAB_INSTANTIATE_OPS(T)                                                                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                                \
  template Tensor<T> div_scalar(const Tensor<T>&, T);                                                \
  template Tensor<T> maximum_scalar(const Tensor<T>&, T);                                            \
  template Tensor<T> sqrt(const Tensor<T>&);                                                         \
  template Tensor<T> gelu(const Tensor<T>&);                                                         \
  template Tensor<T> softmax(const Tensor<T>&, bool);                                                \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);             \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, const Shape&);       \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> sum(const Tensor<T>&);                                                          \
  template Tensor<T> mean(const Tensor<T>&);                                                         \
  template Tensor<T> squared_frobenius(const Tensor<T>&);                                            \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);                 \
  template Tensor<T> round_ste(const Tensor<T>&);                                                    \
  template Tensor<T> clip_ste(const Tensor<T>&, T, T);                                               \
  template Tensor<T> repeat_groups(const Tensor<T>&, std::size_t, std::size_t);

QLAB_INSTANTIATE_OPS(float)
QLAB_INSTANTIATE_OPS(double)

}  // namespace qlab::ops
