#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qlab/tensor.hpp"

namespace qlab {

/// Byte-level token stream: one token per byte, ids in [0, 256).
struct TokenStream {
  std::vector<std::int32_t> tokens;
  std::string source;

  std::size_t size() const { return tokens.size(); }
};

/// A [batch, seq] block of token ids.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;

  Shape shape() const { return {batch, seq}; }
};

/// One calibration window: `inputs` = tokens[offset, offset + seq_len),
/// `labels` = tokens[offset + 1, offset + seq_len + 1).
struct Sample {
  std::size_t offset = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> labels;
};

TokenStream tokenize(std::string_view text, std::string source = "<memory>");

/// Reads a file as raw bytes. Throws when the file is missing, unreadable or empty.
TokenStream load_corpus(const std::filesystem::path& path);

/// Draws `count` distinct windows uniformly over the valid start offsets
/// [0, size - seq_len - 1] using Rng(seed) and a sparse Fisher-Yates walk, so
/// the result is a pure function of (stream, count, seq_len, seed). Samples
/// come back in draw order.
std::vector<Sample> sample_calibration(const TokenStream& stream, std::size_t count, std::size_t seq_len,
                                       std::uint64_t seed);

/// Non-overlapping consecutive windows covering the stream (remainder dropped).
std::vector<Sample> contiguous_windows(const TokenStream& stream, std::size_t seq_len);

/// Stacks the inputs (or labels) of the selected samples into a batch.
TokenBatch stack_inputs(std::span<const Sample> samples, std::span<const std::size_t> indices);
TokenBatch stack_inputs(std::span<const Sample> samples);
std::vector<std::int32_t> stack_labels(std::span<const Sample> samples, std::span<const std::size_t> indices);
std::vector<std::int32_t> stack_labels(std::span<const Sample> samples);

/// Splits off the trailing `fraction` of the stream as a held-out stream.
std::pair<TokenStream, TokenStream> split_holdout(const TokenStream& stream, double fraction);

/// Deterministic pseudo-English text (words, sentences, paragraphs) of exactly
/// `bytes` bytes, used as the toy pretraining corpus.
std::string synthesize_corpus(std::size_t bytes, std::uint64_t seed);

}  // namespace qlab
