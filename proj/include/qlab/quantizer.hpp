#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qlab/tensor.hpp"

namespace qlab {

/// zero_point: W~ = s * (clip(round(W/s + z + V), 0, 2^b - 1) - z)
/// literal:    W~ = s * clip(round(W/s + V), 0, 2^b - 1)   (negative weights clip to 0)
enum class QuantMode { zero_point, literal };

std::string to_string(QuantMode mode);
QuantMode parse_quant_mode(std::string_view text);

struct QuantConfig {
  int bits = 4;
  std::size_t group_size = 32;
  QuantMode mode = QuantMode::zero_point;
  /// Gradient-checking aid: round and clip become the identity, leaving a
  /// smooth graph whose analytic gradients equal the straight-through ones
  /// wherever nothing clips. Never stored or used for real quantization.
  bool smooth_surrogate = false;

  void validate() const;
  int max_level() const { return (1 << bits) - 1; }
  std::size_t groups(std::size_t cols) const { return (cols + group_size - 1) / group_size; }
};

inline constexpr double kScaleFloor = 1e-8;

template <typename T>
struct ScaleZero {
  T scale;
  T zero;  // integral-valued; 0 in literal mode
};

/// s = (max(group) * alpha - min(group) * beta) / (2^b - 1), floored at 1e-8;
/// z = round_half_even(-min(group) * beta / s) clamped to [0, 2^b - 1].
template <typename T>
ScaleZero<T> scale_and_zero(std::span<const T> group, T alpha, T beta, int bits, QuantMode mode);

/// Learnable state of one quantized linear layer. alpha and beta are
/// [rows, groups]; `rounding` (V) has the weight's shape. Groups are
/// contiguous runs of `group_size` columns in each row; the last may be short.
template <typename T>
struct QuantParams {
  Tensor<T> alpha;
  Tensor<T> beta;
  Tensor<T> rounding;
  std::size_t group_size = 0;

  std::size_t rows() const { return rounding.dim(0); }
  std::size_t cols() const { return rounding.dim(1); }
  std::size_t groups() const { return alpha.dim(1); }

  /// Leaves on `tape` sharing this state's storage.
  QuantParams bind(Tape<T>& tape) const;
  QuantParams clone() const;
  /// alpha, beta into [0, 1]; V into [-0.5, 0.5].
  void clamp();
};

/// alpha = beta = 1 and V = 0, which reduces the fake quantizer to plain RTN.
template <typename T>
QuantParams<T> init_quant_params(const Tensor<T>& weight, const QuantConfig& config);

template <typename T>
struct FakeQuant {
  Tensor<T> dequantized;  // W~, [rows, cols]
  Tensor<T> scale;        // s, [rows, groups]
  Tensor<T> zero;         // z, [rows, groups]
  Tensor<T> levels;       // integer grid index q in [0, 2^b - 1], [rows, cols]
};

/// Differentiable fake quantization. Gradients reach alpha and beta through s
/// (in both places it appears, and through z) and reach V through the
/// straight-through round and clip.
template <typename T>
FakeQuant<T> fake_quantize(const Tensor<T>& weight, const QuantParams<T>& params, const QuantConfig& config);

/// Second half of fake_quantize for an explicitly given grid: s and z are
/// [rows, groups], V has the weight's shape.
template <typename T>
FakeQuant<T> fake_quantize_on_grid(const Tensor<T>& weight, const Tensor<T>& scale, const Tensor<T>& zero,
                                   const Tensor<T>& rounding, std::size_t group_size, const QuantConfig& config);

template <typename T>
Tensor<T> quantize_dequantize(const Tensor<T>& weight, const QuantParams<T>& params, const QuantConfig& config);

/// s and z from the current alpha, beta (no tape).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> derive_grid(const Tensor<T>& weight, const QuantParams<T>& params,
                                            const QuantConfig& config);

/// Exhaustive RTN reference: for each weight picks q in [0, 2^b - 1] minimising
/// the distance between W/s + z and q (ties to even q) and returns s * (q - z).
template <typename T>
std::vector<T> rtn_oracle(std::span<const T> weights, T scale, T zero, int bits);

/// s * (q - z) for stored grid indices; the inverse of the storage path.
template <typename T>
Tensor<T> dequantize_levels(std::span<const std::uint8_t> levels, const Tensor<T>& scale, const Tensor<T>& zero,
                            std::size_t rows, std::size_t cols, std::size_t group_size);

/// Two 4-bit indices per byte, earlier index in the low nibble; an odd count
/// leaves the final high nibble zero.
std::vector<std::uint8_t> pack_quantized(std::span<const std::uint8_t> levels, int bits = 4);
std::vector<std::uint8_t> unpack_quantized(std::span<const std::uint8_t> bytes, std::size_t count, int bits = 4);

}  // namespace qlab
