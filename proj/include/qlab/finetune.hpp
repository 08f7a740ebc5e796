#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qlab/corpus.hpp"
#include "qlab/model.hpp"
#include "qlab/quantizer.hpp"

namespace qlab {

/// sb: one block per window, loss on its own output.
/// la: one tuned block, loss on the output of the (n-1)-th block after it.
/// mb: n jointly tuned blocks, windows partition the model without overlap.
enum class Strategy { sb, la, mb };

std::string to_string(Strategy s);
Strategy parse_strategy(std::string_view text);

/// Blocks numbered from 1. Tuned blocks are first_tuned..last_tuned; blocks
/// last_tuned+1..target are traversed at full precision but not tuned; the
/// reconstruction loss sits on target's output.
struct Window {
  Strategy kind = Strategy::sb;
  std::size_t first_tuned = 1;
  std::size_t last_tuned = 1;
  std::size_t target = 1;

  BlockRange tuned() const { return {first_tuned, last_tuned}; }
  BlockRange span() const { return {first_tuned, target}; }
  std::vector<std::size_t> frozen() const;
  bool operator==(const Window&) const = default;
};

struct Schedule {
  Strategy kind = Strategy::sb;
  std::size_t n = 1;
  std::size_t blocks = 0;
  std::vector<Window> windows;
};

/// n counts every block involved in one optimisation round (LA-n tunes one
/// block with n-1 look-ahead blocks, target min(k + n - 1, L); MB-n tunes n
/// blocks). n is ignored for sb.
Schedule make_schedule(Strategy kind, std::size_t n, std::size_t blocks);

enum class LossForm { mean_square, frobenius };

struct OptimConfig {
  double lr0 = 1e-3;
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  std::size_t calib_samples = 64;
  std::size_t seq_len = 128;
  std::uint64_t seed = 0;
  /// Keep prefix activations and reference outputs in memory for the whole
  /// window; when false they are recomputed for every batch.
  bool cache_activations = true;
  LossForm loss = LossForm::mean_square;

  void validate() const;
};

/// lr0 * (1 - t / T) for 0 <= t < T.
double lr_at(std::size_t t, std::size_t total, double lr0);

/// theta <- theta - lr * sign(g), sign(0) = 0.
template <typename T>
void signsgd_update(std::span<T> theta, std::span<const T> grad, T lr);

/// SignSGD on one layer's alpha, beta and V, followed by clamping.
template <typename T>
void signsgd_step(QuantParams<T>& params, const QuantParams<T>& grads, T lr);

/// Inputs to a window: activations after the already quantized prefix
/// (blocks 1..boundary), one [seq, d_model] tensor per calibration sample.
template <typename T>
class ActivationStore {
 public:
  static ActivationStore eager(std::size_t boundary, std::vector<Tensor<T>> activations);
  static ActivationStore lazy(std::size_t boundary, const Model<T>& model, WeightOverride<T> prefix,
                              std::vector<Sample> samples);

  std::size_t boundary() const { return boundary_; }
  std::size_t size() const;
  bool is_lazy() const { return lazy_; }
  /// Stacked activations [indices.size(), seq, d_model].
  Tensor<T> gather(std::span<const std::size_t> indices) const;
  const std::vector<Tensor<T>>& cached() const { return cached_; }

  /// Store at `new_boundary` >= boundary(), forwarding through the blocks in
  /// between with `prefix` weight overrides.
  ActivationStore advance(const Model<T>& model, const WeightOverride<T>& prefix, std::size_t new_boundary) const;

 private:
  std::size_t boundary_ = 0;
  bool lazy_ = false;
  std::vector<Tensor<T>> cached_;
  const Model<T>* model_ = nullptr;
  WeightOverride<T> prefix_;
  std::vector<Sample> samples_;
};

/// boundary 0 is the embedding output; boundary b > 0 the output of block b
/// with `prefix` (the quantized W~ of blocks 1..b) substituted.
template <typename T>
ActivationStore<T> cache_prefix_activations(const Model<T>& model, const WeightOverride<T>& prefix,
                                            std::span<const Sample> samples, std::size_t boundary);

/// Reconstruction loss of a window on activations x [B, S, D] entering block
/// window.first_tuned. The reference path runs window.span() at full
/// precision; the candidate path substitutes W~ for the tuned blocks only.
/// `reference`, when given, is the precomputed reference output.
template <typename T>
Tensor<T> window_loss(const Window& window, const Tensor<T>& x, const Model<T>& model,
                      const std::map<std::string, QuantParams<T>>& params, const QuantConfig& quant,
                      LossForm form = LossForm::mean_square, const Tensor<T>* reference = nullptr);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
};

struct WindowLog {
  std::size_t first_block = 1;
  std::vector<StepRecord> steps;
};

template <typename T>
struct WindowResult {
  std::map<std::string, QuantParams<T>> tuned;
  WindowLog log;
};

/// Runs opt.steps SignSGD steps on the tuned blocks' quantization parameters.
/// `params` must hold entries for every tuned layer; it is not modified.
template <typename T>
WindowResult<T> finetune_window(const Window& window, const ActivationStore<T>& store, const Model<T>& model,
                                const std::map<std::string, QuantParams<T>>& params, const QuantConfig& quant,
                                const OptimConfig& opt);

struct QuantizedLayer {
  QuantParams<float> params;
  Tensor<float> scale;  // [rows, groups]
  Tensor<float> zero;   // [rows, groups]
  std::vector<std::uint8_t> levels;
};

/// A runnable model whose quantized layers hold W~, plus everything needed to
/// store them (grid indices, s, z, alpha, beta, V).
struct QuantizedModel {
  Model<float> model;
  QuantConfig quant;
  std::map<std::string, QuantizedLayer> layers;
  std::map<std::string, std::string> info;  // free-form provenance, e.g. strategy
};

QuantizedModel assemble_quantized(const Model<float>& fp, const std::map<std::string, QuantParams<float>>& params,
                                  const QuantConfig& quant);
/// Plain round-to-nearest (initial parameters, no tuning).
QuantizedModel rtn_quantize(const Model<float>& fp, const QuantConfig& quant);

struct PipelineResult {
  QuantizedModel quantized;
  std::vector<WindowLog> logs;
  std::vector<Sample> calibration;
};

/// Sequential quantization: windows in schedule order, each fed by the
/// quantized prefix produced by the windows before it.
PipelineResult run_pipeline(const Model<float>& model, const TokenStream& corpus, const Schedule& schedule,
                            const QuantConfig& quant, const OptimConfig& opt);

/// Writes window_<first_block>.csv with columns step,lr,loss.
void write_window_csv(const std::filesystem::path& dir, const WindowLog& log);

}  // namespace qlab
