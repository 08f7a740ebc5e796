#pragma once

#include <functional>
#include <span>
#include <vector>

#include "qlab/corpus.hpp"
#include "qlab/model.hpp"

namespace qlab {

/// Anything that maps a token batch [B, S] to logits [B, S, V].
using LogitsFn = std::function<Tensor<float>(const TokenBatch&)>;

struct PerplexityResult {
  double mean_nll = 0;
  double perplexity = 0;
  std::size_t tokens = 0;
};

/// exp(mean next-token cross-entropy). Per-token losses are computed in
/// double and summed in sample-then-position order, so the result does not
/// depend on how the windows are grouped into batches.
PerplexityResult perplexity(const LogitsFn& logits, std::span<const Sample> windows, std::size_t batch_size = 8);
PerplexityResult perplexity(const Model<float>& model, std::span<const Sample> windows, std::size_t batch_size = 8);

/// The first `max_windows` non-overlapping windows of the stream (all when 0).
std::vector<Sample> evaluation_windows(const TokenStream& stream, std::size_t seq_len, std::size_t max_windows);

struct BlockError {
  std::size_t block = 0;
  /// Both models fed the full-precision activations entering the block.
  double isolated = 0;
  /// Each model fed its own prefix.
  double cumulative = 0;
};

/// Mean squared difference of block outputs, per block, between a
/// full-precision model and a quantized one of the same architecture.
std::vector<BlockError> block_reconstruction_report(const Model<float>& fp, const Model<float>& quantized,
                                                    std::span<const Sample> calib, std::size_t batch_size = 8);

/// Everything the report needs about one quantization run.
struct RunEvaluation {
  PerplexityResult fp, rtn, tuned;
  std::vector<BlockError> rtn_blocks, tuned_blocks;
};

RunEvaluation evaluate_run(const Model<float>& fp, const Model<float>& rtn, const Model<float>& tuned,
                           std::span<const Sample> holdout, std::span<const Sample> calib);

}  // namespace qlab
