#include "qlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace qlab {

PerplexityResult perplexity(const LogitsFn& logits, std::span<const Sample> windows, std::size_t batch_size) {
  if (windows.empty()) throw std::invalid_argument("perplexity: no evaluation windows");
  if (batch_size == 0) throw std::invalid_argument("perplexity: batch_size must be positive");
  double total = 0;
  std::size_t count = 0;
  for (std::size_t lo = 0; lo < windows.size(); lo += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, windows.size() - lo));
    std::iota(idx.begin(), idx.end(), lo);
    const TokenBatch batch = stack_inputs(windows, idx);
    const auto labels = stack_labels(windows, idx);
    const Tensor<float> out = logits(batch);
    if (out.rank() != 3 || out.dim(0) != batch.batch || out.dim(1) != batch.seq)
      throw ShapeError("perplexity: logits " + to_string(out.shape()) + " do not match batch " +
                       to_string(batch.shape()));
    const std::size_t vocab = out.dim(2);
    auto v = out.values();
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const float* row = v.data() + r * vocab;
      const auto label = static_cast<std::size_t>(labels[r]);
      if (label >= vocab) throw std::out_of_range("perplexity: label outside the vocabulary");
      double mx = row[0];
      for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, static_cast<double>(row[c]));
      double sum = 0;
      for (std::size_t c = 0; c < vocab; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
      total += std::log(sum) + mx - static_cast<double>(row[label]);
      ++count;
    }
  }
  if (count < 1) throw std::invalid_argument("perplexity: no tokens to score");
  const double mean = total / static_cast<double>(count);
  return {mean, std::exp(mean), count};
}

PerplexityResult perplexity(const Model<float>& model, std::span<const Sample> windows, std::size_t batch_size) {
  return perplexity([&](const TokenBatch& b) { return full_forward(model, b); }, windows, batch_size);
}

std::vector<Sample> evaluation_windows(const TokenStream& stream, std::size_t seq_len, std::size_t max_windows) {
  auto all = contiguous_windows(stream, seq_len);
  if (max_windows > 0 && all.size() > max_windows) all.resize(max_windows);
  if (all.empty()) throw std::invalid_argument("evaluation_windows: stream shorter than one window");
  return all;
}

namespace {

double squared_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double s = 0;
  auto x = a.values();
  auto y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    s += d * d;
  }
  return s;
}

}  // namespace

std::vector<BlockError> block_reconstruction_report(const Model<float>& fp, const Model<float>& quantized,
                                                    std::span<const Sample> calib, std::size_t batch_size) {
  const auto& a = fp.config;
  const auto& b = quantized.config;
  if (a.vocab_size != b.vocab_size || a.d_model != b.d_model || a.n_heads != b.n_heads || a.n_blocks != b.n_blocks ||
      a.d_ff != b.d_ff || a.max_seq_len != b.max_seq_len)
    throw std::invalid_argument("block_reconstruction_report: models have different architectures");
  if (calib.empty()) throw std::invalid_argument("block_reconstruction_report: no calibration samples");
  if (batch_size == 0) throw std::invalid_argument("block_reconstruction_report: batch_size must be positive");

  const std::size_t L = a.n_blocks;
  std::vector<double> iso(L, 0.0), cum(L, 0.0);
  std::size_t elements = 0;
  for (std::size_t lo = 0; lo < calib.size(); lo += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, calib.size() - lo));
    std::iota(idx.begin(), idx.end(), lo);
    const TokenBatch batch = stack_inputs(calib, idx);
    Tensor<float> h_fp = embed(fp, batch);
    Tensor<float> h_q = embed(quantized, batch);
    for (std::size_t k = 1; k <= L; ++k) {
      auto next_fp = block_forward(fp, {k, k}, h_fp);
      iso[k - 1] += squared_diff(block_forward(quantized, {k, k}, h_fp), next_fp);
      h_q = block_forward(quantized, {k, k}, h_q);
      cum[k - 1] += squared_diff(h_q, next_fp);
      h_fp = next_fp;
    }
    elements += h_fp.size();
  }
  std::vector<BlockError> out;
  for (std::size_t k = 0; k < L; ++k)
    out.push_back({k + 1, iso[k] / static_cast<double>(elements), cum[k] / static_cast<double>(elements)});
  return out;
}

RunEvaluation evaluate_run(const Model<float>& fp, const Model<float>& rtn, const Model<float>& tuned,
                           std::span<const Sample> holdout, std::span<const Sample> calib) {
  RunEvaluation e;
  e.fp = perplexity(fp, holdout);
  e.rtn = perplexity(rtn, holdout);
  e.tuned = perplexity(tuned, holdout);
  e.rtn_blocks = block_reconstruction_report(fp, rtn, calib);
  e.tuned_blocks = block_reconstruction_report(fp, tuned, calib);
  return e;
}

}  // namespace qlab
