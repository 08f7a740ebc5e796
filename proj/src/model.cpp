#include "qlab/model.hpp"

#include <cmath>
#include <stdexcept>

#include "qlab/ops.hpp"
#include "qlab/rng.hpp"

namespace qlab {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("model config: ") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_blocks, "n_blocks");
  positive(d_ff, "d_ff");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("model config: d_model (" + std::to_string(d_model) +
                                ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
}

std::string_view layer_suffix(LayerKind kind) {
  switch (kind) {
    case LayerKind::attn_q: return "attn_q";
    case LayerKind::attn_k: return "attn_k";
    case LayerKind::attn_v: return "attn_v";
    case LayerKind::attn_o: return "attn_o";
    case LayerKind::mlp_up: return "mlp_up";
    case LayerKind::mlp_down: return "mlp_down";
  }
  throw std::logic_error("layer_suffix: unknown kind");
}

std::string layer_name(std::size_t block, LayerKind kind) {
  return "blocks." + std::to_string(block) + "." + std::string(layer_suffix(kind));
}

std::size_t block_of_layer(std::string_view name) {
  constexpr std::string_view prefix = "blocks.";
  if (name.substr(0, prefix.size()) != prefix) throw std::invalid_argument("not a block layer: " + std::string(name));
  auto rest = name.substr(prefix.size());
  auto dot = rest.find('.');
  try {
    return std::stoul(std::string(rest.substr(0, dot)));
  } catch (const std::exception&) {
    throw std::invalid_argument("not a block layer: " + std::string(name));
  }
}

template <typename T>
Linear<T>& Block<T>::layer(LayerKind kind) {
  switch (kind) {
    case LayerKind::attn_q: return attn_q;
    case LayerKind::attn_k: return attn_k;
    case LayerKind::attn_v: return attn_v;
    case LayerKind::attn_o: return attn_o;
    case LayerKind::mlp_up: return mlp_up;
    case LayerKind::mlp_down: return mlp_down;
  }
  throw std::logic_error("Block::layer: unknown kind");
}

template <typename T>
const Linear<T>& Block<T>::layer(LayerKind kind) const {
  return const_cast<Block<T>*>(this)->layer(kind);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::parameters() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  out.emplace_back("tok_emb", &token_embedding);
  out.emplace_back("pos_emb", &position_embedding);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "blocks." + std::to_string(b + 1) + ".";
    auto& blk = blocks[b];
    out.emplace_back(p + "ln1.gain", &blk.ln1.gain);
    out.emplace_back(p + "ln1.bias", &blk.ln1.bias);
    for (auto kind : kLayerKinds) {
      if (kind == LayerKind::mlp_up) {
        out.emplace_back(p + "ln2.gain", &blk.ln2.gain);
        out.emplace_back(p + "ln2.bias", &blk.ln2.bias);
      }
      const std::string n = p + std::string(layer_suffix(kind));
      out.emplace_back(n + ".weight", &blk.layer(kind).weight);
      out.emplace_back(n + ".bias", &blk.layer(kind).bias);
    }
  }
  out.emplace_back("ln_f.gain", &final_norm.gain);
  out.emplace_back("ln_f.bias", &final_norm.bias);
  out.emplace_back("head.weight", &head);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> Model<T>::parameters() const {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (auto& [name, t] : const_cast<Model<T>*>(this)->parameters()) out.emplace_back(name, t);
  return out;
}

template <typename T>
Tensor<T>& Model<T>::parameter(std::string_view name) {
  for (auto& [n, t] : parameters())
    if (n == name) return *t;
  throw std::out_of_range("model has no parameter named " + std::string(name));
}

template <typename T>
const Tensor<T>& Model<T>::parameter(std::string_view name) const {
  return const_cast<Model<T>*>(this)->parameter(name);
}

template <typename T>
std::vector<std::string> Model<T>::quantizable_layers() const {
  std::vector<std::string> out;
  for (std::size_t b = 1; b <= blocks.size(); ++b)
    for (auto kind : kLayerKinds) out.push_back(layer_name(b, kind));
  return out;
}

template <typename T>
Linear<T>& Model<T>::layer(std::string_view name) {
  const std::size_t b = block_of_layer(name);
  if (b < 1 || b > blocks.size()) throw std::out_of_range("no such block in layer name " + std::string(name));
  for (auto kind : kLayerKinds)
    if (layer_name(b, kind) == name) return blocks[b - 1].layer(kind);
  throw std::out_of_range("no such layer " + std::string(name));
}

template <typename T>
const Linear<T>& Model<T>::layer(std::string_view name) const {
  return const_cast<Model<T>*>(this)->layer(name);
}

template <typename T>
Model<T> Model<T>::clone() const {
  Model<T> out = *this;
  for (auto& [name, t] : out.parameters()) *t = t->clone();
  return out;
}

template <typename T>
Model<T> Model<T>::bind(Tape<T>& tape) const {
  Model<T> out = *this;
  for (auto& [name, t] : out.parameters()) *t = tape.watch(*t);
  return out;
}

template <typename T>
Model<T> build_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  auto gaussian = [&](Shape shape) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(0.02 * rng.normal());
    return Tensor<T>(std::move(shape), std::move(v));
  };
  auto norm = [&] { return Norm<T>{Tensor<T>::full({config.d_model}, T{1}), Tensor<T>({config.d_model})}; };
  auto linear = [&](std::size_t out, std::size_t in) { return Linear<T>{gaussian({out, in}), Tensor<T>({out})}; };

  Model<T> m;
  m.config = config;
  m.token_embedding = gaussian({config.vocab_size, config.d_model});
  m.position_embedding = gaussian({config.max_seq_len, config.d_model});
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    Block<T> blk;
    blk.ln1 = norm();
    blk.attn_q = linear(config.d_model, config.d_model);
    blk.attn_k = linear(config.d_model, config.d_model);
    blk.attn_v = linear(config.d_model, config.d_model);
    blk.attn_o = linear(config.d_model, config.d_model);
    blk.ln2 = norm();
    blk.mlp_up = linear(config.d_ff, config.d_model);
    blk.mlp_down = linear(config.d_model, config.d_ff);
    m.blocks.push_back(std::move(blk));
  }
  m.final_norm = norm();
  m.head = gaussian({config.vocab_size, config.d_model});
  return m;
}

template <typename To, typename From>
Model<To> model_cast(const Model<From>& model) {
  auto convert = [](const Tensor<From>& t) {
    std::vector<To> v(t.size());
    auto src = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(src[i]);
    return Tensor<To>(t.shape(), std::move(v));
  };
  Model<To> out = build_model<To>(model.config);
  auto dst = out.parameters();
  auto src = model.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].second = convert(*src[i].second);
  return out;
}

template <typename T>
Tensor<T> embed(const Model<T>& model, const TokenBatch& tokens) {
  if (tokens.seq > model.config.max_seq_len)
    throw std::invalid_argument("embed: sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                                std::to_string(model.config.max_seq_len));
  auto tok = ops::embedding(model.token_embedding, tokens.ids, tokens.shape());
  std::vector<std::int32_t> positions(tokens.seq);
  for (std::size_t i = 0; i < tokens.seq; ++i) positions[i] = static_cast<std::int32_t>(i);
  auto pos = ops::embedding(model.position_embedding, positions, Shape{tokens.seq});
  return ops::add(tok, pos);
}

namespace {

template <typename T>
Tensor<T> apply_linear(const Model<T>& model, std::size_t block, LayerKind kind, const Tensor<T>& x,
                       const WeightOverride<T>& overrides, ForwardTaps<T>* taps) {
  const std::string name = layer_name(block, kind);
  const Linear<T>& lin = model.blocks[block - 1].layer(kind);
  auto it = overrides.find(name);
  const Tensor<T>& w = it == overrides.end() ? lin.weight : it->second;
  if (w.shape() != lin.weight.shape())
    throw ShapeError("block_forward: override for " + name + " has shape " + to_string(w.shape()) + ", expected " +
                     to_string(lin.weight.shape()));
  if (taps && taps->capture_inputs.count(name)) taps->captured[name] = x;
  auto z = ops::linear(x, w, lin.bias);
  if (taps) {
    auto off = taps->preact_offsets.find(name);
    if (off != taps->preact_offsets.end()) z = ops::add(z, off->second);
  }
  return z;
}

template <typename T>
Tensor<T> one_block(const Model<T>& model, std::size_t b, const Tensor<T>& x, const WeightOverride<T>& overrides,
                    ForwardTaps<T>* taps) {
  const auto& cfg = model.config;
  const auto& blk = model.blocks[b - 1];
  const std::size_t batch = x.dim(0), seq = x.dim(1), heads = cfg.n_heads, hd = cfg.head_dim();

  auto h = ops::layernorm(x, blk.ln1.gain, blk.ln1.bias);
  auto split = [&](const Tensor<T>& t) { return ops::transpose(ops::reshape(t, {batch, seq, heads, hd}), 1, 2); };
  auto q = split(apply_linear(model, b, LayerKind::attn_q, h, overrides, taps));
  auto k = split(apply_linear(model, b, LayerKind::attn_k, h, overrides, taps));
  auto v = split(apply_linear(model, b, LayerKind::attn_v, h, overrides, taps));
  auto scores = ops::div_scalar(ops::matmul(q, ops::transpose(k, -1, -2)), static_cast<T>(std::sqrt(static_cast<double>(hd))));
  auto attn = ops::matmul(ops::softmax(scores, true), v);
  auto merged = ops::reshape(ops::transpose(attn, 1, 2), {batch, seq, cfg.d_model});
  auto x1 = ops::add(x, apply_linear(model, b, LayerKind::attn_o, merged, overrides, taps));

  auto h2 = ops::layernorm(x1, blk.ln2.gain, blk.ln2.bias);
  auto up = ops::gelu(apply_linear(model, b, LayerKind::mlp_up, h2, overrides, taps));
  return ops::add(x1, apply_linear(model, b, LayerKind::mlp_down, up, overrides, taps));
}

}  // namespace

template <typename T>
Tensor<T> block_forward(const Model<T>& model, BlockRange range, const Tensor<T>& x, const WeightOverride<T>& overrides,
                        ForwardTaps<T>* taps) {
  const std::size_t L = model.blocks.size();
  if (range.first < 1 || range.first > range.last || range.last > L)
    throw std::out_of_range("block_forward: block range [" + std::to_string(range.first) + ", " +
                            std::to_string(range.last) + "] outside 1.." + std::to_string(L));
  if (x.rank() != 3 || x.dim(2) != model.config.d_model)
    throw ShapeError("block_forward: expected input [batch, seq, " + std::to_string(model.config.d_model) + "], got " +
                     to_string(x.shape()));
  Tensor<T> h = x;
  for (std::size_t b = range.first; b <= range.last; ++b) h = one_block(model, b, h, overrides, taps);
  return h;
}

template <typename T>
Tensor<T> head_forward(const Model<T>& model, const Tensor<T>& h) {
  return ops::linear(ops::layernorm(h, model.final_norm.gain, model.final_norm.bias), model.head);
}

template <typename T>
Tensor<T> full_forward(const Model<T>& model, const TokenBatch& tokens, const WeightOverride<T>& overrides,
                       ForwardTaps<T>* taps) {
  for (auto id : tokens.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= model.config.vocab_size)
      throw std::out_of_range("full_forward: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(model.config.vocab_size));
  auto h = embed(model, tokens);
  h = block_forward(model, {1, model.blocks.size()}, h, overrides, taps);
  return head_forward(model, h);
}

template <typename T>
Tensor<T> task_loss(const Model<T>& model, const TokenBatch& tokens, std::span<const std::int32_t> labels,
                    const WeightOverride<T>& overrides, ForwardTaps<T>* taps) {
  return ops::cross_entropy(full_forward(model, tokens, overrides, taps), labels);
}

TrainLog pretrain_toy(Model<float>& model, const TokenStream& corpus, const PretrainOptions& options) {
  if (corpus.size() == 0) throw std::invalid_argument("pretrain_toy: empty corpus");
  if (corpus.size() < options.seq_len + 1)
    throw std::invalid_argument("pretrain_toy: corpus shorter than one training window");
  TrainLog log;
  if (options.steps == 0) return log;

  auto params = model.parameters();
  std::vector<std::vector<float>> velocity;
  for (auto& [name, t] : params) velocity.emplace_back(t->size(), 0.0f);

  Rng rng(derive_seed(options.seed, {0x7072657472ULL}));
  const std::size_t valid = corpus.size() - options.seq_len;
  for (std::size_t step = 0; step < options.steps; ++step) {
    TokenBatch batch{options.batch_size, options.seq_len, {}};
    std::vector<std::int32_t> labels;
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      const auto off = static_cast<std::ptrdiff_t>(rng.below(valid));
      auto first = corpus.tokens.begin() + off;
      batch.ids.insert(batch.ids.end(), first, first + static_cast<std::ptrdiff_t>(options.seq_len));
      labels.insert(labels.end(), first + 1, first + 1 + static_cast<std::ptrdiff_t>(options.seq_len));
    }

    Tape<float> tape;
    Model<float> bound = model.bind(tape);
    auto loss = task_loss(bound, batch, labels);
    log.loss.push_back(loss.item());
    auto grads = tape.backward(loss);

    auto bound_params = bound.parameters();
    std::vector<Tensor<float>> g;
    double norm2 = 0;
    for (auto& [name, t] : bound_params) {
      g.push_back(grads.of(*t));
      for (float v : g.back().values()) norm2 += static_cast<double>(v) * v;
    }
    float scale = 1.0f;
    if (options.grad_clip > 0 && std::sqrt(norm2) > options.grad_clip)
      scale = static_cast<float>(options.grad_clip / std::sqrt(norm2));
    const auto lr = static_cast<float>(options.lr);
    const auto mu = static_cast<float>(options.momentum);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto w = params[p].second->mutable_values();
      auto gv = g[p].values();
      auto& vel = velocity[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        vel[i] = mu * vel[i] + scale * gv[i];
        w[i] -= lr * vel[i];
      }
    }
  }
  return log;
}

#define QLAB_INSTANTIATE_MODEL(T)                                                                                \
  template struct Block<T>;                                                                                      \
  template struct Model<T>;                                                                                      \
  template Model<T> build_model<T>(const ModelConfig&);                                                          \
  template Tensor<T> embed(const Model<T>&, const TokenBatch&);                                                  \
  template Tensor<T> block_forward(const Model<T>&, BlockRange, const Tensor<T>&, const WeightOverride<T>&,      \
                                   ForwardTaps<T>*);                                                             \
  template Tensor<T> head_forward(const Model<T>&, const Tensor<T>&);                                            \
  template Tensor<T> full_forward(const Model<T>&, const TokenBatch&, const WeightOverride<T>&, ForwardTaps<T>*); \
  template Tensor<T> task_loss(const Model<T>&, const TokenBatch&, std::span<const std::int32_t>,                \
                               const WeightOverride<T>&, ForwardTaps<T>*);

QLAB_INSTANTIATE_MODEL(float)
QLAB_INSTANTIATE_MODEL(double)
template Model<double> model_cast<double, float>(const Model<float>&);
template Model<float> model_cast<float, double>(const Model<double>&);
template Model<float> model_cast<float, float>(const Model<float>&);
template Model<double> model_cast<double, double>(const Model<double>&);

}  // namespace qlab
