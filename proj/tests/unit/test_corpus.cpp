#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "qlab/corpus.hpp"

using namespace qlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& content) {
  const auto path = fs::temp_directory_path() / ("qlab_corpus_" + name);
  std::ofstream(path, std::ios::binary) << content;
  return path;
}

}  // namespace

TEST_CASE("bytes map to token ids") {
  const auto s = load_corpus(temp_file("abc", "abc"));
  CHECK(s.tokens == std::vector<std::int32_t>{97, 98, 99});
  const auto hi = tokenize("\xff\x01");
  CHECK(hi.tokens == std::vector<std::int32_t>{255, 1});
}

TEST_CASE("empty and missing corpora are rejected with the path") {
  const auto empty = temp_file("empty", "");
  CHECK_THROWS_WITH_AS(load_corpus(empty), doctest::Contains("empty"), std::runtime_error);
  CHECK_THROWS_WITH_AS(load_corpus("/nonexistent/corpus.txt"), doctest::Contains("/nonexistent/corpus.txt"),
                       std::runtime_error);
}

TEST_CASE("calibration sampling is a pure function of its arguments") {
  const auto stream = tokenize(synthesize_corpus(5000, 1));
  const auto a = sample_calibration(stream, 32, 16, 9);
  const auto b = sample_calibration(stream, 32, 16, 9);
  const auto c = sample_calibration(stream, 32, 16, 10);
  REQUIRE(a.size() == 32);
  bool differs = false;
  std::set<std::size_t> offsets;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].offset == b[i].offset);
    differs = differs || a[i].offset != c[i].offset;
    offsets.insert(a[i].offset);
    CHECK(a[i].inputs.size() == 16);
    for (std::size_t t = 0; t < 16; ++t) {
      CHECK(a[i].inputs[t] == stream.tokens[a[i].offset + t]);
      CHECK(a[i].labels[t] == stream.tokens[a[i].offset + t + 1]);
    }
  }
  CHECK(differs);
  CHECK(offsets.size() == 32);
}

TEST_CASE("a stream with room for exactly one window") {
  const auto stream = tokenize("abcdefghi");  // 9 tokens, seq 8 -> offset 0 only
  const auto s = sample_calibration(stream, 1, 8, 3);
  REQUIRE(s.size() == 1);
  CHECK(s[0].offset == 0);
  CHECK(s[0].labels.back() == 'i');
  CHECK_THROWS_AS(sample_calibration(stream, 2, 8, 3), std::invalid_argument);
  CHECK_THROWS_AS(sample_calibration(stream, 1, 9, 3), std::invalid_argument);
}

TEST_CASE("requesting more windows than offsets fails") {
  const auto stream = tokenize("0123456789");
  CHECK_THROWS_WITH_AS(sample_calibration(stream, 100, 4, 1), doctest::Contains("100"), std::invalid_argument);
}

TEST_CASE("contiguous windows drop the remainder") {
  const auto stream = tokenize("0123456789");
  const auto w = contiguous_windows(stream, 3);
  REQUIRE(w.size() == 3);
  CHECK(w[2].offset == 6);
  CHECK(w[2].labels.back() == '9');
}

TEST_CASE("stacking and holdout split") {
  const auto stream = tokenize(synthesize_corpus(1000, 2));
  const auto s = sample_calibration(stream, 4, 5, 1);
  const auto batch = stack_inputs(s);
  CHECK(batch.shape() == Shape{4, 5});
  CHECK(batch.ids[5] == s[1].inputs[0]);
  const std::vector<std::size_t> pick{2};
  CHECK(stack_labels(s, pick) == s[2].labels);

  const auto [train, hold] = split_holdout(stream, 0.1);
  CHECK(train.size() + hold.size() == stream.size());
  CHECK(hold.size() == 100);
  CHECK(hold.tokens.front() == stream.tokens[train.size()]);
  CHECK_THROWS_AS(split_holdout(stream, 1.0), std::invalid_argument);
}

TEST_CASE("synthetic corpus is deterministic and exactly sized") {
  const auto a = synthesize_corpus(4096, 7);
  CHECK(a.size() == 4096);
  CHECK(a == synthesize_corpus(4096, 7));
  CHECK(a != synthesize_corpus(4096, 8));
}
