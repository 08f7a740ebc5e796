#include "qlab/corpus.hpp"

#include <array>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <unordered_map>

#include "qlab/rng.hpp"

namespace qlab {

TokenStream tokenize(std::string_view text, std::string source) {
  TokenStream out;
  out.source = std::move(source);
  out.tokens.reserve(text.size());
  for (unsigned char c : text) out.tokens.push_back(static_cast<std::int32_t>(c));
  return out;
}

TokenStream load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error("load_corpus: read error on " + path.string());
  if (bytes.empty()) throw std::runtime_error("load_corpus: " + path.string() + " is empty");
  return tokenize(bytes, path.string());
}

namespace {

Sample window_at(const TokenStream& stream, std::size_t offset, std::size_t seq_len) {
  Sample s;
  s.offset = offset;
  auto first = stream.tokens.begin() + static_cast<std::ptrdiff_t>(offset);
  s.inputs.assign(first, first + static_cast<std::ptrdiff_t>(seq_len));
  s.labels.assign(first + 1, first + static_cast<std::ptrdiff_t>(seq_len) + 1);
  return s;
}

}  // namespace

std::vector<Sample> sample_calibration(const TokenStream& stream, std::size_t count, std::size_t seq_len,
                                       std::uint64_t seed) {
  if (seq_len == 0) throw std::invalid_argument("sample_calibration: seq_len must be positive");
  if (stream.size() < seq_len + 1)
    throw std::invalid_argument("sample_calibration: stream of " + std::to_string(stream.size()) +
                                " tokens is shorter than seq_len + 1 = " + std::to_string(seq_len + 1));
  const std::size_t valid = stream.size() - seq_len;
  if (count > valid)
    throw std::invalid_argument("sample_calibration: " + std::to_string(count) + " samples requested but only " +
                                std::to_string(valid) + " distinct start offsets exist");
  Rng rng(seed);
  std::unordered_map<std::size_t, std::size_t> displaced;
  auto at = [&](std::size_t i) {
    auto it = displaced.find(i);
    return it == displaced.end() ? i : it->second;
  };
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(valid - i));
    const std::size_t picked = at(j);
    displaced[j] = at(i);
    out.push_back(window_at(stream, picked, seq_len));
  }
  return out;
}

std::vector<Sample> contiguous_windows(const TokenStream& stream, std::size_t seq_len) {
  if (seq_len == 0) throw std::invalid_argument("contiguous_windows: seq_len must be positive");
  std::vector<Sample> out;
  for (std::size_t off = 0; off + seq_len + 1 <= stream.size(); off += seq_len)
    out.push_back(window_at(stream, off, seq_len));
  return out;
}

TokenBatch stack_inputs(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("stack_inputs: empty selection");
  TokenBatch b;
  b.batch = indices.size();
  b.seq = samples[indices[0]].inputs.size();
  b.ids.reserve(b.batch * b.seq);
  for (auto i : indices) {
    const auto& s = samples[i];
    if (s.inputs.size() != b.seq) throw std::invalid_argument("stack_inputs: samples differ in length");
    b.ids.insert(b.ids.end(), s.inputs.begin(), s.inputs.end());
  }
  return b;
}

TokenBatch stack_inputs(std::span<const Sample> samples) {
  std::vector<std::size_t> all(samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return stack_inputs(samples, all);
}

std::vector<std::int32_t> stack_labels(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  std::vector<std::int32_t> out;
  for (auto i : indices) out.insert(out.end(), samples[i].labels.begin(), samples[i].labels.end());
  return out;
}

std::vector<std::int32_t> stack_labels(std::span<const Sample> samples) {
  std::vector<std::int32_t> out;
  for (const auto& s : samples) out.insert(out.end(), s.labels.begin(), s.labels.end());
  return out;
}

std::pair<TokenStream, TokenStream> split_holdout(const TokenStream& stream, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split_holdout: fraction must lie in (0, 1)");
  const auto cut = static_cast<std::size_t>(static_cast<double>(stream.size()) * (1.0 - fraction));
  TokenStream head, tail;
  head.source = stream.source + "#train";
  tail.source = stream.source + "#holdout";
  head.tokens.assign(stream.tokens.begin(), stream.tokens.begin() + static_cast<std::ptrdiff_t>(cut));
  tail.tokens.assign(stream.tokens.begin() + static_cast<std::ptrdiff_t>(cut), stream.tokens.end());
  return {std::move(head), std::move(tail)};
}

namespace {

constexpr std::array kNouns{"river",  "stone",   "garden", "window", "market", "teacher", "engine", "forest",
                            "letter", "harbor",  "signal", "valley", "clock",  "bridge",  "farmer", "lantern",
                            "school", "kitchen", "island", "number", "winter", "castle",  "doctor", "mirror"};
constexpr std::array kVerbs{"finds",  "builds",  "carries", "follows", "watches", "opens",  "measures", "paints",
                            "keeps",  "answers", "crosses", "repairs", "counts",  "writes", "remembers", "visits"};
constexpr std::array kAdjectives{"quiet", "bright", "old",   "narrow", "heavy", "gentle", "distant", "small",
                                 "green", "silver", "early", "broken", "warm",  "simple", "careful", "tall"};
constexpr std::array kAdverbs{"slowly", "again", "today", "carefully", "often", "quickly", "later", "together"};
constexpr std::array kLinks{"and", "but", "while", "because", "so"};
constexpr std::array kPreps{"near", "under", "behind", "across", "beside", "inside"};

template <typename Arr>
const char* pick(Rng& rng, const Arr& words) {
  return words[static_cast<std::size_t>(rng.below(words.size()))];
}

void clause(Rng& rng, std::string& out) {
  out += "the ";
  if (rng.below(2)) {
    out += pick(rng, kAdjectives);
    out += ' ';
  }
  out += pick(rng, kNouns);
  out += ' ';
  out += pick(rng, kVerbs);
  out += " the ";
  out += pick(rng, kNouns);
  if (rng.below(3) == 0) {
    out += ' ';
    out += pick(rng, kPreps);
    out += " the ";
    out += pick(rng, kNouns);
  }
  if (rng.below(3) == 0) {
    out += ' ';
    out += pick(rng, kAdverbs);
  }
}

}  // namespace

std::string synthesize_corpus(std::size_t bytes, std::uint64_t seed) {
  Rng rng(seed);
  std::string out;
  out.reserve(bytes + 256);
  while (out.size() < bytes) {
    const std::size_t sentences = 3 + static_cast<std::size_t>(rng.below(4));
    for (std::size_t s = 0; s < sentences; ++s) {
      std::string sentence;
      clause(rng, sentence);
      if (rng.below(2)) {
        sentence += ' ';
        sentence += pick(rng, kLinks);
        sentence += ' ';
        clause(rng, sentence);
      }
      sentence[0] = static_cast<char>(sentence[0] - 'a' + 'A');
      sentence += rng.below(6) == 0 ? "?" : ".";
      out += sentence;
      out += s + 1 < sentences ? " " : "\n";
    }
    if (rng.below(3) == 0) out += '\n';
  }
  out.resize(bytes);
  return out;
}

}  // namespace qlab
