#include "qlab/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "qlab/ops.hpp"

namespace qlab {

std::string to_string(QuantMode mode) { return mode == QuantMode::zero_point ? "zero_point" : "literal"; }

QuantMode parse_quant_mode(std::string_view text) {
  if (text == "zero_point" || text == "zero-point") return QuantMode::zero_point;
  if (text == "literal") return QuantMode::literal;
  throw std::invalid_argument("unknown quantization mode '" + std::string(text) + "'");
}

void QuantConfig::validate() const {
  if (bits < 2 || bits > 8) throw std::invalid_argument("quant config: bits must lie in [2, 8], got " + std::to_string(bits));
  if (group_size < 1) throw std::invalid_argument("quant config: group_size must be at least 1");
}

template <typename T>
ScaleZero<T> scale_and_zero(std::span<const T> group, T alpha, T beta, int bits, QuantMode mode) {
  if (group.empty()) throw std::invalid_argument("scale_and_zero: empty group");
  const T mx = *std::max_element(group.begin(), group.end());
  const T mn = *std::min_element(group.begin(), group.end());
  const T qmax = static_cast<T>((1 << bits) - 1);
  // Same operation order as the graph in fake_quantize.
  const T s = std::max((alpha * mx - beta * mn) / qmax, static_cast<T>(kScaleFloor));
  T z = 0;
  if (mode == QuantMode::zero_point) z = std::clamp(std::nearbyint(-(beta * mn) / s), T{0}, qmax);
  return {s, z};
}

template <typename T>
QuantParams<T> QuantParams<T>::bind(Tape<T>& tape) const {
  return {tape.watch(alpha), tape.watch(beta), tape.watch(rounding), group_size};
}

template <typename T>
QuantParams<T> QuantParams<T>::clone() const {
  return {alpha.clone(), beta.clone(), rounding.clone(), group_size};
}

template <typename T>
void QuantParams<T>::clamp() {
  for (auto& v : alpha.mutable_values()) v = std::clamp(v, T{0}, T{1});
  for (auto& v : beta.mutable_values()) v = std::clamp(v, T{0}, T{1});
  for (auto& v : rounding.mutable_values()) v = std::clamp(v, T{-0.5}, T{0.5});
}

template <typename T>
QuantParams<T> init_quant_params(const Tensor<T>& weight, const QuantConfig& config) {
  config.validate();
  if (weight.rank() != 2) throw ShapeError("init_quant_params: expected a [rows, cols] weight, got " + to_string(weight.shape()));
  const std::size_t rows = weight.dim(0), groups = config.groups(weight.dim(1));
  return {Tensor<T>::full({rows, groups}, T{1}), Tensor<T>::full({rows, groups}, T{1}), Tensor<T>(weight.shape()),
          config.group_size};
}

namespace {

template <typename T>
void check_params(const Tensor<T>& weight, const QuantParams<T>& p, const QuantConfig& config) {
  config.validate();
  if (weight.rank() != 2) throw ShapeError("quantize: expected a [rows, cols] weight, got " + to_string(weight.shape()));
  const Shape grid{weight.dim(0), config.groups(weight.dim(1))};
  if (p.group_size != config.group_size)
    throw ShapeError("quantize: params built for group size " + std::to_string(p.group_size) + ", config says " +
                     std::to_string(config.group_size));
  if (p.alpha.shape() != grid || p.beta.shape() != grid)
    throw ShapeError("quantize: alpha/beta must be " + to_string(grid) + ", got " + to_string(p.alpha.shape()) +
                     " and " + to_string(p.beta.shape()));
  if (p.rounding.shape() != weight.shape())
    throw ShapeError("quantize: V must match the weight " + to_string(weight.shape()) + ", got " +
                     to_string(p.rounding.shape()));
}

// Per-group max and min of the (constant) weight.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> group_extrema(const Tensor<T>& weight, std::size_t group_size) {
  const std::size_t rows = weight.dim(0), cols = weight.dim(1);
  const std::size_t groups = (cols + group_size - 1) / group_size;
  Tensor<T> mx({rows, groups}), mn({rows, groups});
  auto w = weight.values();
  auto mxv = mx.mutable_values();
  auto mnv = mn.mutable_values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t lo = g * group_size, hi = std::min(cols, lo + group_size);
      T a = w[r * cols + lo], b = a;
      for (std::size_t c = lo; c < hi; ++c) {
        a = std::max(a, w[r * cols + c]);
        b = std::min(b, w[r * cols + c]);
      }
      mxv[r * groups + g] = a;
      mnv[r * groups + g] = b;
    }
  return {mx, mn};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> grid_graph(const Tensor<T>& weight, const QuantParams<T>& params,
                                           const QuantConfig& config) {
  const T qmax = static_cast<T>(config.max_level());
  auto [mx, mn] = group_extrema(weight, config.group_size);
  auto span = ops::sub(ops::mul(params.alpha, mx), ops::mul(params.beta, mn));
  auto scale = ops::maximum_scalar(ops::div_scalar(span, qmax), static_cast<T>(kScaleFloor));
  Tensor<T> zero(scale.shape());
  if (config.mode == QuantMode::zero_point) {
    auto neg_low = ops::mul_scalar(ops::mul(params.beta, mn), T{-1});
    zero = ops::div(neg_low, scale);
    if (!config.smooth_surrogate) zero = ops::clip_ste(ops::round_ste(zero), T{0}, qmax);
  }
  return {scale, zero};
}

}  // namespace

template <typename T>
FakeQuant<T> fake_quantize_on_grid(const Tensor<T>& weight, const Tensor<T>& scale, const Tensor<T>& zero,
                                   const Tensor<T>& rounding, std::size_t group_size, const QuantConfig& config) {
  const std::size_t cols = weight.dim(1);
  const T qmax = static_cast<T>(config.max_level());
  auto s = ops::repeat_groups(scale, group_size, cols);
  auto z = ops::repeat_groups(zero, group_size, cols);
  auto u = ops::add(ops::add(ops::div(weight, s), z), rounding);
  auto q = config.smooth_surrogate ? u : ops::clip_ste(ops::round_ste(u), T{0}, qmax);
  auto w = ops::mul(s, ops::sub(q, z));
  return {w, scale, zero, q.detach()};
}

template <typename T>
FakeQuant<T> fake_quantize(const Tensor<T>& weight, const QuantParams<T>& params, const QuantConfig& config) {
  check_params(weight, params, config);
  auto [scale, zero] = grid_graph(weight, params, config);
  return fake_quantize_on_grid(weight, scale, zero, params.rounding, config.group_size, config);
}

template <typename T>
Tensor<T> quantize_dequantize(const Tensor<T>& weight, const QuantParams<T>& params, const QuantConfig& config) {
  return fake_quantize(weight, params, config).dequantized;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> derive_grid(const Tensor<T>& weight, const QuantParams<T>& params,
                                            const QuantConfig& config) {
  check_params(weight, params, config);
  QuantParams<T> plain{params.alpha.detach(), params.beta.detach(), params.rounding.detach(), params.group_size};
  auto [s, z] = grid_graph(weight, plain, config);
  return {s.detach(), z.detach()};
}

template <typename T>
std::vector<T> rtn_oracle(std::span<const T> weights, T scale, T zero, int bits) {
  if (!(scale > 0)) throw std::invalid_argument("rtn_oracle: scale must be positive");
  const int qmax = (1 << bits) - 1;
  std::vector<T> out;
  out.reserve(weights.size());
  for (T w : weights) {
    const T u = w / scale + zero;
    int best = 0;
    T best_dist = std::numeric_limits<T>::infinity();
    for (int q = 0; q <= qmax; ++q) {
      const T d = std::abs(u - static_cast<T>(q));
      if (d < best_dist || (d == best_dist && q % 2 == 0)) {
        best = q;
        best_dist = d;
      }
    }
    out.push_back(scale * (static_cast<T>(best) - zero));
  }
  return out;
}

template <typename T>
Tensor<T> dequantize_levels(std::span<const std::uint8_t> levels, const Tensor<T>& scale, const Tensor<T>& zero,
                            std::size_t rows, std::size_t cols, std::size_t group_size) {
  if (levels.size() != rows * cols) throw ShapeError("dequantize_levels: level count does not match rows * cols");
  const std::size_t groups = (cols + group_size - 1) / group_size;
  if (scale.shape() != Shape{rows, groups} || zero.shape() != Shape{rows, groups})
    throw ShapeError("dequantize_levels: scale/zero must be [rows, groups]");
  std::vector<T> out(rows * cols);
  auto s = scale.values();
  auto z = zero.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t g = r * groups + c / group_size;
      out[r * cols + c] = s[g] * (static_cast<T>(levels[r * cols + c]) - z[g]);
    }
  return Tensor<T>({rows, cols}, std::move(out));
}

std::vector<std::uint8_t> pack_quantized(std::span<const std::uint8_t> levels, int bits) {
  if (bits != 4) throw std::invalid_argument("pack_quantized: only 4-bit packing is supported");
  std::vector<std::uint8_t> out((levels.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i] > 15)
      throw std::out_of_range("pack_quantized: index " + std::to_string(levels[i]) + " does not fit in 4 bits");
    out[i / 2] |= static_cast<std::uint8_t>(i % 2 == 0 ? levels[i] : levels[i] << 4);
  }
  return out;
}

std::vector<std::uint8_t> unpack_quantized(std::span<const std::uint8_t> bytes, std::size_t count, int bits) {
  if (bits != 4) throw std::invalid_argument("unpack_quantized: only 4-bit packing is supported");
  if (bytes.size() != (count + 1) / 2)
    throw std::invalid_argument("unpack_quantized: " + std::to_string(bytes.size()) + " bytes cannot hold exactly " +
                                std::to_string(count) + " indices");
  std::vector<std::uint8_t> out(count);
  for (std::size_t i = 0; i < count; ++i)
    out[i] = static_cast<std::uint8_t>(i % 2 == 0 ? bytes[i / 2] & 0x0F : bytes[i / 2] >> 4);
  return out;
}

#define QLAB_INSTANTIATE_QUANT(T)                                                                             \
  template ScaleZero<T> scale_and_zero(std::span<const T>, T, T, int, QuantMode);                            \
  template struct QuantParams<T>;                                                                           \
  template QuantParams<T> init_quant_params(const Tensor<T>&, const QuantConfig&);                          \
  template FakeQuant<T> fake_quantize(const Tensor<T>&, const QuantParams<T>&, const QuantConfig&);         \
  template FakeQuant<T> fake_quantize_on_grid(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                              const Tensor<T>&, std::size_t, const QuantConfig&);           \
  template Tensor<T> quantize_dequantize(const Tensor<T>&, const QuantParams<T>&, const QuantConfig&);      \
  template std::pair<Tensor<T>, Tensor<T>> derive_grid(const Tensor<T>&, const QuantParams<T>&,             \
                                                       const QuantConfig&);                                 \
  template std::vector<T> rtn_oracle(std::span<const T>, T, T, int);                                        \
  template Tensor<T> dequantize_levels(std::span<const std::uint8_t>, const Tensor<T>&, const Tensor<T>&,   \
                                       std::size_t, std::size_t, std::size_t);

QLAB_INSTANTIATE_QUANT(float)
QLAB_INSTANTIATE_QUANT(double)

}  // namespace qlab
