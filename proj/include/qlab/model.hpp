#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qlab/corpus.hpp"
#include "qlab/tensor.hpp"

namespace qlab {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 128;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
};

/// The six linear layers of a block; these (and only these) get quantized.
enum class LayerKind { attn_q, attn_k, attn_v, attn_o, mlp_up, mlp_down };
inline constexpr std::array kLayerKinds{LayerKind::attn_q, LayerKind::attn_k, LayerKind::attn_v,
                                        LayerKind::attn_o, LayerKind::mlp_up, LayerKind::mlp_down};

std::string_view layer_suffix(LayerKind kind);
/// "blocks.<block>.<suffix>", block numbered from 1.
std::string layer_name(std::size_t block, LayerKind kind);
/// Block number encoded in a layer name; throws for non-block names.
std::size_t block_of_layer(std::string_view name);

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct Norm {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct Block {
  Norm<T> ln1;
  Linear<T> attn_q, attn_k, attn_v, attn_o;
  Norm<T> ln2;
  Linear<T> mlp_up, mlp_down;

  Linear<T>& layer(LayerKind kind);
  const Linear<T>& layer(LayerKind kind) const;
};

/// Replacement weights by layer name ("blocks.2.mlp_up"), e.g. fake-quantized W~.
template <typename T>
using WeightOverride = std::map<std::string, Tensor<T>>;

/// Optional instrumentation of a forward pass: additive offsets on a layer's
/// pre-activations (for differentiating with respect to them) and capture of
/// the inputs a layer sees.
template <typename T>
struct ForwardTaps {
  std::map<std::string, Tensor<T>> preact_offsets;
  std::set<std::string> capture_inputs;
  std::map<std::string, Tensor<T>> captured;
};

/// Pre-norm GPT-style decoder: token + learned position embedding, L blocks of
/// causal multi-head attention and a GELU MLP with residuals, final layer norm
/// and an untied output head.
template <typename T>
struct Model {
  ModelConfig config;
  Tensor<T> token_embedding;     // [V, D]
  Tensor<T> position_embedding;  // [S_max, D]
  std::vector<Block<T>> blocks;
  Norm<T> final_norm;
  Tensor<T> head;  // [V, D]

  /// Every parameter by name, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>*>> parameters();
  std::vector<std::pair<std::string, const Tensor<T>*>> parameters() const;
  const Tensor<T>& parameter(std::string_view name) const;
  Tensor<T>& parameter(std::string_view name);

  std::vector<std::string> quantizable_layers() const;
  const Linear<T>& layer(std::string_view name) const;
  Linear<T>& layer(std::string_view name);

  /// Deep copy (independent storage).
  Model clone() const;
  /// Shallow copy whose parameters are leaves on `tape` (shared storage).
  Model bind(Tape<T>& tape) const;
};

template <typename T>
Model<T> build_model(const ModelConfig& config);

template <typename To, typename From>
Model<To> model_cast(const Model<From>& model);

/// Inclusive block range, numbered from 1.
struct BlockRange {
  std::size_t first = 1;
  std::size_t last = 1;
};

/// Token + position embedding: [B, S] -> [B, S, D].
template <typename T>
Tensor<T> embed(const Model<T>& model, const TokenBatch& tokens);

/// Applies blocks range.first..range.last in order to x [B, S, D]. Layers
/// named in `overrides` use the given weights instead of the model's.
template <typename T>
Tensor<T> block_forward(const Model<T>& model, BlockRange range, const Tensor<T>& x,
                        const WeightOverride<T>& overrides = {}, ForwardTaps<T>* taps = nullptr);

/// Final layer norm and output head: [B, S, D] -> [B, S, V].
template <typename T>
Tensor<T> head_forward(const Model<T>& model, const Tensor<T>& h);

template <typename T>
Tensor<T> full_forward(const Model<T>& model, const TokenBatch& tokens, const WeightOverride<T>& overrides = {},
                       ForwardTaps<T>* taps = nullptr);

/// Mean next-token cross-entropy of the model on (tokens, labels).
template <typename T>
Tensor<T> task_loss(const Model<T>& model, const TokenBatch& tokens, std::span<const std::int32_t> labels,
                    const WeightOverride<T>& overrides = {}, ForwardTaps<T>* taps = nullptr);

struct PretrainOptions {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::size_t seq_len = 64;
  double lr = 0.1;
  double momentum = 0.9;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
};

struct TrainLog {
  std::vector<double> loss;  // one entry per step, before the update
};

/// SGD with momentum on random corpus windows. steps == 0 leaves the model
/// untouched.
TrainLog pretrain_toy(Model<float>& model, const TokenStream& corpus, const PretrainOptions& options);

}  // namespace qlab
