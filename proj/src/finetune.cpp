#include "qlab/finetune.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "qlab/csv.hpp"
#include "qlab/ops.hpp"
#include "qlab/rng.hpp"

namespace qlab {

namespace {
// Samples forwarded together when filling or advancing a store.
constexpr std::size_t kChunk = 8;
}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::sb: return "sb";
    case Strategy::la: return "la";
    case Strategy::mb: return "mb";
  }
  throw std::logic_error("to_string: unknown strategy");
}

Strategy parse_strategy(std::string_view text) {
  if (text == "sb" || text == "SB") return Strategy::sb;
  if (text == "la" || text == "LA") return Strategy::la;
  if (text == "mb" || text == "MB") return Strategy::mb;
  throw std::invalid_argument("unknown strategy '" + std::string(text) + "' (expected sb, la or mb)");
}

std::vector<std::size_t> Window::frozen() const {
  std::vector<std::size_t> out;
  for (std::size_t b = last_tuned + 1; b <= target; ++b) out.push_back(b);
  return out;
}

Schedule make_schedule(Strategy kind, std::size_t n, std::size_t blocks) {
  if (blocks < 1) throw std::invalid_argument("make_schedule: block count must be at least 1");
  if (n < 1) throw std::invalid_argument("make_schedule: window size n must be at least 1");
  Schedule s{kind, kind == Strategy::sb ? 1 : n, blocks, {}};
  switch (kind) {
    case Strategy::sb:
      for (std::size_t k = 1; k <= blocks; ++k) s.windows.push_back({kind, k, k, k});
      break;
    case Strategy::la:
      for (std::size_t k = 1; k <= blocks; ++k) s.windows.push_back({kind, k, k, std::min(k + n - 1, blocks)});
      break;
    case Strategy::mb:
      for (std::size_t k = 1; k <= blocks; k += n) {
        const std::size_t last = std::min(k + n - 1, blocks);
        s.windows.push_back({kind, k, last, last});
      }
      break;
  }
  return s;
}

void OptimConfig::validate() const {
  if (!(lr0 > 0)) throw std::invalid_argument("optim: lr0 must be positive");
  if (steps == 0) throw std::invalid_argument("optim: steps must be positive");
  if (batch_size == 0) throw std::invalid_argument("optim: batch_size must be positive");
  if (calib_samples == 0) throw std::invalid_argument("optim: calib_samples must be positive");
  if (seq_len == 0) throw std::invalid_argument("optim: seq_len must be positive");
}

double lr_at(std::size_t t, std::size_t total, double lr0) {
  if (t >= total)
    throw std::out_of_range("lr_at: step " + std::to_string(t) + " outside [0, " + std::to_string(total) + ")");
  return lr0 * (1.0 - static_cast<double>(t) / static_cast<double>(total));
}

template <typename T>
void signsgd_update(std::span<T> theta, std::span<const T> grad, T lr) {
  if (theta.size() != grad.size())
    throw ShapeError("signsgd: " + std::to_string(theta.size()) + " parameters but " + std::to_string(grad.size()) +
                     " gradients");
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T g = grad[i];
    if (g > 0)
      theta[i] -= lr;
    else if (g < 0)
      theta[i] += lr;
  }
}

template <typename T>
void signsgd_step(QuantParams<T>& params, const QuantParams<T>& grads, T lr) {
  signsgd_update(params.alpha.mutable_values(), grads.alpha.values(), lr);
  signsgd_update(params.beta.mutable_values(), grads.beta.values(), lr);
  signsgd_update(params.rounding.mutable_values(), grads.rounding.values(), lr);
  params.clamp();
}

namespace {

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items, std::span<const std::size_t> indices) {
  const Shape& one = items.at(indices[0]).shape();
  const std::size_t n = numel(one);
  std::vector<T> out;
  out.reserve(n * indices.size());
  for (auto i : indices) {
    auto v = items.at(i).values();
    out.insert(out.end(), v.begin(), v.end());
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), one.begin(), one.end());
  return Tensor<T>(std::move(shape), std::move(out));
}

template <typename T>
std::vector<Tensor<T>> unstack(const Tensor<T>& batch) {
  const Shape one(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = numel(one);
  std::vector<Tensor<T>> out;
  auto v = batch.values();
  for (std::size_t b = 0; b < batch.dim(0); ++b)
    out.emplace_back(one, std::vector<T>(v.begin() + static_cast<std::ptrdiff_t>(b * n),
                                         v.begin() + static_cast<std::ptrdiff_t>((b + 1) * n)));
  return out;
}

// Applies `fn` to chunks of the index range and concatenates the per-sample results.
template <typename T, typename Fn>
std::vector<Tensor<T>> chunked(std::size_t count, Fn fn) {
  std::vector<Tensor<T>> out;
  out.reserve(count);
  for (std::size_t lo = 0; lo < count; lo += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, count - lo));
    std::iota(idx.begin(), idx.end(), lo);
    for (auto& t : unstack(fn(std::span<const std::size_t>(idx)))) out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
Tensor<T> prefix_forward(const Model<T>& model, const WeightOverride<T>& prefix, std::span<const Sample> samples,
                         std::span<const std::size_t> idx, std::size_t boundary) {
  auto h = embed(model, stack_inputs(samples, idx));
  if (boundary > 0) h = block_forward(model, {1, boundary}, h, prefix);
  return h;
}

}  // namespace

template <typename T>
ActivationStore<T> ActivationStore<T>::eager(std::size_t boundary, std::vector<Tensor<T>> activations) {
  ActivationStore s;
  s.boundary_ = boundary;
  s.cached_ = std::move(activations);
  return s;
}

template <typename T>
ActivationStore<T> ActivationStore<T>::lazy(std::size_t boundary, const Model<T>& model, WeightOverride<T> prefix,
                                            std::vector<Sample> samples) {
  ActivationStore s;
  s.boundary_ = boundary;
  s.lazy_ = true;
  s.model_ = &model;
  s.prefix_ = std::move(prefix);
  s.samples_ = std::move(samples);
  return s;
}

template <typename T>
std::size_t ActivationStore<T>::size() const {
  return lazy_ ? samples_.size() : cached_.size();
}

template <typename T>
Tensor<T> ActivationStore<T>::gather(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw std::invalid_argument("ActivationStore::gather: empty selection");
  if (!lazy_) return stack(cached_, indices);
  return prefix_forward(*model_, prefix_, samples_, indices, boundary_);
}

template <typename T>
ActivationStore<T> ActivationStore<T>::advance(const Model<T>& model, const WeightOverride<T>& prefix,
                                               std::size_t new_boundary) const {
  if (new_boundary < boundary_ || new_boundary > model.blocks.size())
    throw std::out_of_range("ActivationStore::advance: cannot move from boundary " + std::to_string(boundary_) +
                            " to " + std::to_string(new_boundary));
  if (lazy_) return lazy(new_boundary, model, prefix, samples_);
  if (new_boundary == boundary_) return *this;
  auto next = chunked<T>(cached_.size(), [&](std::span<const std::size_t> idx) {
    return block_forward(model, {boundary_ + 1, new_boundary}, stack(cached_, idx), prefix);
  });
  return eager(new_boundary, std::move(next));
}

template <typename T>
ActivationStore<T> cache_prefix_activations(const Model<T>& model, const WeightOverride<T>& prefix,
                                            std::span<const Sample> samples, std::size_t boundary) {
  if (boundary > model.blocks.size())
    throw std::out_of_range("cache_prefix_activations: boundary " + std::to_string(boundary) + " outside [0, " +
                            std::to_string(model.blocks.size()) + "]");
  if (samples.empty()) throw std::invalid_argument("cache_prefix_activations: no samples");
  auto acts = chunked<T>(samples.size(), [&](std::span<const std::size_t> idx) {
    return prefix_forward(model, prefix, samples, idx, boundary);
  });
  return ActivationStore<T>::eager(boundary, std::move(acts));
}

template <typename T>
Tensor<T> window_loss(const Window& window, const Tensor<T>& x, const Model<T>& model,
                      const std::map<std::string, QuantParams<T>>& params, const QuantConfig& quant, LossForm form,
                      const Tensor<T>* reference) {
  if (x.rank() != 3 || x.dim(2) != model.config.d_model)
    throw ShapeError("window_loss: expected activations [batch, seq, " + std::to_string(model.config.d_model) +
                     "], got " + to_string(x.shape()));
  const Tensor<T> ref = reference ? *reference : block_forward(model, window.span(), x.detach());
  if (ref.shape() != x.shape())
    throw ShapeError("window_loss: reference " + to_string(ref.shape()) + " does not match input " + to_string(x.shape()));

  WeightOverride<T> overrides;
  for (std::size_t b = window.first_tuned; b <= window.last_tuned; ++b)
    for (auto kind : kLayerKinds) {
      const std::string name = layer_name(b, kind);
      auto it = params.find(name);
      if (it == params.end()) throw std::invalid_argument("window_loss: no quantization parameters for " + name);
      overrides.emplace(name, quantize_dequantize(model.layer(name).weight, it->second, quant));
    }
  auto candidate = block_forward(model, window.span(), x, overrides);
  auto sq = ops::squared_frobenius(ops::sub(candidate, ref));
  if (form == LossForm::frobenius) return ops::sqrt(sq);
  return ops::div_scalar(sq, static_cast<T>(x.size()));
}

template <typename T>
WindowResult<T> finetune_window(const Window& window, const ActivationStore<T>& store, const Model<T>& model,
                                const std::map<std::string, QuantParams<T>>& params, const QuantConfig& quant,
                                const OptimConfig& opt) {
  opt.validate();
  if (store.size() == 0) throw std::invalid_argument("finetune_window: empty activation store");
  if (store.boundary() + 1 != window.first_tuned)
    throw std::invalid_argument("finetune_window: store holds activations after block " +
                                std::to_string(store.boundary()) + " but the window starts at block " +
                                std::to_string(window.first_tuned));

  WindowResult<T> result;
  result.log.first_block = window.first_tuned;
  for (std::size_t b = window.first_tuned; b <= window.last_tuned; ++b)
    for (auto kind : kLayerKinds) {
      const std::string name = layer_name(b, kind);
      auto it = params.find(name);
      if (it == params.end()) throw std::invalid_argument("finetune_window: no quantization parameters for " + name);
      result.tuned.emplace(name, it->second.clone());
    }

  const std::size_t n = store.size();
  std::vector<Tensor<T>> references;
  const bool cache = opt.cache_activations && !store.is_lazy();
  if (cache)
    references = chunked<T>(n, [&](std::span<const std::size_t> idx) {
      return block_forward(model, window.span(), store.gather(idx));
    });

  Rng rng(derive_seed(opt.seed, {0x77696e646f77ULL, window.first_tuned}));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const std::size_t bs = std::min(opt.batch_size, n);
  std::size_t pos = 0;

  for (std::size_t t = 0; t < opt.steps; ++t) {
    if (pos + bs > n) {
      rng.shuffle(order);
      pos = 0;
    }
    std::span<const std::size_t> idx(order.data() + pos, bs);
    pos += bs;

    const Tensor<T> x = store.gather(idx);
    const Tensor<T> ref = cache ? stack(references, idx) : block_forward(model, window.span(), x);

    Tape<T> tape;
    std::map<std::string, QuantParams<T>> bound;
    for (const auto& [name, p] : result.tuned) bound.emplace(name, p.bind(tape));
    auto loss = window_loss(window, x, model, bound, quant, opt.loss, &ref);
    auto grads = tape.backward(loss);

    const double lr = lr_at(t, opt.steps, opt.lr0);
    result.log.steps.push_back({t, lr, static_cast<double>(loss.item())});
    for (auto& [name, p] : result.tuned) {
      const auto& b = bound.at(name);
      QuantParams<T> g{grads.of(b.alpha), grads.of(b.beta), grads.of(b.rounding), p.group_size};
      signsgd_step(p, g, static_cast<T>(lr));
    }
  }
  return result;
}

QuantizedModel assemble_quantized(const Model<float>& fp, const std::map<std::string, QuantParams<float>>& params,
                                  const QuantConfig& quant) {
  QuantizedModel out{fp.clone(), quant, {}, {}};
  for (const auto& name : fp.quantizable_layers()) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("assemble_quantized: no parameters for " + name);
    auto fq = fake_quantize(fp.layer(name).weight, it->second, quant);
    QuantizedLayer layer{it->second.clone(), fq.scale.detach(), fq.zero.detach(), {}};
    layer.levels.reserve(fq.levels.size());
    for (float q : fq.levels.values()) layer.levels.push_back(static_cast<std::uint8_t>(q));
    out.model.layer(name).weight = fq.dequantized.detach();
    out.layers.emplace(name, std::move(layer));
  }
  return out;
}

QuantizedModel rtn_quantize(const Model<float>& fp, const QuantConfig& quant) {
  std::map<std::string, QuantParams<float>> params;
  for (const auto& name : fp.quantizable_layers()) params.emplace(name, init_quant_params(fp.layer(name).weight, quant));
  auto q = assemble_quantized(fp, params, quant);
  q.info["strategy"] = "rtn";
  return q;
}

PipelineResult run_pipeline(const Model<float>& model, const TokenStream& corpus, const Schedule& schedule,
                            const QuantConfig& quant, const OptimConfig& opt) {
  quant.validate();
  opt.validate();
  const std::size_t L = model.blocks.size();
  if (schedule.blocks != L)
    throw std::invalid_argument("run_pipeline: schedule built for " + std::to_string(schedule.blocks) +
                                " blocks, model has " + std::to_string(L));
  std::size_t expected = 1;
  for (const auto& w : schedule.windows) {
    if (w.first_tuned != expected) throw std::invalid_argument("run_pipeline: schedule does not cover blocks in order");
    expected = w.last_tuned + 1;
  }
  if (expected != L + 1) throw std::invalid_argument("run_pipeline: schedule does not cover every block");

  PipelineResult result;
  result.calibration = sample_calibration(corpus, opt.calib_samples, opt.seq_len, opt.seed);

  std::map<std::string, QuantParams<float>> params;
  for (const auto& name : model.quantizable_layers())
    params.emplace(name, init_quant_params(model.layer(name).weight, quant));

  WeightOverride<float> prefix;
  ActivationStore<float> store = opt.cache_activations
                                     ? cache_prefix_activations(model, prefix, result.calibration, 0)
                                     : ActivationStore<float>::lazy(0, model, prefix, result.calibration);
  for (const auto& window : schedule.windows) {
    auto tuned = finetune_window(window, store, model, params, quant, opt);
    for (auto& [name, p] : tuned.tuned) {
      prefix[name] = quantize_dequantize(model.layer(name).weight, p, quant);
      params[name] = std::move(p);
    }
    result.logs.push_back(std::move(tuned.log));
    store = store.advance(model, prefix, window.last_tuned);
  }

  result.quantized = assemble_quantized(model, params, quant);
  // The schedule is deliberately not recorded: equivalent schedules (sb, la-1,
  // mb-1) must produce identical checkpoints.
  result.quantized.info["seed"] = std::to_string(opt.seed);
  return result;
}

void write_window_csv(const std::filesystem::path& dir, const WindowLog& log) {
  std::filesystem::create_directories(dir);
  const auto path = dir / ("window_" + std::to_string(log.first_block) + ".csv");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,lr,loss\n";
  for (const auto& r : log.steps) out << r.step << ',' << format_number(r.lr) << ',' << format_number(r.loss) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

#define QLAB_INSTANTIATE_FINETUNE(T)                                                                          \
  template void signsgd_update(std::span<T>, std::span<const T>, T);                                          \
  template void signsgd_step(QuantParams<T>&, const QuantParams<T>&, T);                                      \
  template class ActivationStore<T>;                                                                          \
  template ActivationStore<T> cache_prefix_activations(const Model<T>&, const WeightOverride<T>&,             \
                                                       std::span<const Sample>, std::size_t);                 \
  template Tensor<T> window_loss(const Window&, const Tensor<T>&, const Model<T>&,                            \
                                 const std::map<std::string, QuantParams<T>>&, const QuantConfig&, LossForm,  \
                                 const Tensor<T>*);                                                           \
  template WindowResult<T> finetune_window(const Window&, const ActivationStore<T>&, const Model<T>&,         \
                                           const std::map<std::string, QuantParams<T>>&, const QuantConfig&,  \
                                           const OptimConfig&);

QLAB_INSTANTIATE_FINETUNE(float)
QLAB_INSTANTIATE_FINETUNE(double)

}  // namespace qlab
