#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "qlab/checkpoint.hpp"
#include "qlab/config.hpp"
#include "qlab/rng.hpp"

using namespace qlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "qlab_dataio";
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_text(const std::string& name, const std::string& text) {
  const auto p = scratch(name);
  std::ofstream(p) << text;
  return p;
}

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_blocks = 2;
  c.d_ff = 32;
  c.max_seq_len = 8;
  c.seed = 9;
  return c;
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(float)) == 0;
}

QuantizedModel tuned_quantized(int bits) {
  const auto m = build_model<float>(tiny());
  QuantConfig q;
  q.bits = bits;
  q.group_size = 8;
  std::map<std::string, QuantParams<float>> params;
  Rng rng(static_cast<std::uint64_t>(bits));
  for (const auto& name : m.quantizable_layers()) {
    auto p = init_quant_params(m.layer(name).weight, q);
    for (auto& v : p.rounding.mutable_values()) v = static_cast<float>(rng.uniform() - 0.5);
    for (auto& v : p.alpha.mutable_values()) v = static_cast<float>(0.6 + 0.4 * rng.uniform());
    params.emplace(name, std::move(p));
  }
  auto out = assemble_quantized(m, params, q);
  out.info["note"] = "test";
  return out;
}

}  // namespace

TEST_CASE("config defaults") {
  const auto c = config_from_json(json{{"data", {{"corpus", "x.txt"}}}});
  CHECK(c.optim.lr0 == 1e-3);
  CHECK(c.optim.steps == 300);
  CHECK(c.optim.batch_size == 8);
  CHECK(c.quant.bits == 4);
  CHECK(c.quant.group_size == 32);
  CHECK(c.strategy == Strategy::sb);
  CHECK(c.n == 1);
  const auto empty_optim = config_from_json(json{{"data", {{"corpus", "x.txt"}}}, {"optim", json::object()}});
  CHECK(empty_optim.optim.lr0 == 1e-3);
  // to_json round-trips
  const auto again = config_from_json(to_json(c));
  CHECK(to_json(again) == to_json(c));
}

TEST_CASE("config errors name the key") {
  const json base{{"data", {{"corpus", "x.txt"}}}};
  auto with = [&](json patch) {
    json doc = base;
    doc.merge_patch(patch);
    return doc;
  };
  CHECK_THROWS_WITH_AS(config_from_json(with({{"optim", {{"leraning_rate", 0.1}}}})),
                       doctest::Contains("leraning_rate"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_json(with({{"schedule", {{"n", 0}}}})), doctest::Contains("schedule.n"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(config_from_json(with({{"quant", {{"bits", "four"}}}})), doctest::Contains("quant.bits"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(config_from_json(with({{"quant", {{"bits", 12}}}})), doctest::Contains("quant"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_json(with({{"schedule", {{"strategy", "zz"}}}})),
                       doctest::Contains("schedule.strategy"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_json(json::object()), doctest::Contains("data.corpus"), ConfigError);
}

TEST_CASE("config files and overrides") {
  const auto corpus = write_text("corpus.txt", "hello world, hello world");
  const auto path = write_text("cfg.json", R"({"data": {"corpus": "corpus.txt"}, "seed": 7,
                                              "schedule": {"strategy": "la", "n": 2}})");
  auto c = parse_config(path);
  CHECK(fs::path(c.data.corpus) == corpus);
  CHECK(c.strategy == Strategy::la);
  CHECK(c.n == 2);
  CHECK(c.seed == 7);
  CHECK(c.optim.seed == 7);
  CHECK(c.model.seed != c.pretrain.seed);

  apply_override(c, "optim.steps=50");
  apply_override(c, "schedule.strategy=mb");
  apply_override(c, "optim.loss=frobenius");
  CHECK(c.optim.steps == 50);
  CHECK(c.strategy == Strategy::mb);
  CHECK(c.optim.loss == LossForm::frobenius);
  apply_override(c, "seed=11");
  CHECK(c.optim.seed == 11);
  CHECK_THROWS_WITH_AS(apply_override(c, "optim.stepz=3"), doctest::Contains("optim.stepz"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "optim"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "optim=3"), ConfigError);

  CHECK_THROWS_WITH_AS(parse_config(scratch("missing.json")), doctest::Contains("missing.json"), ConfigError);
  const auto bad_corpus = write_text("cfg2.json", R"({"data": {"corpus": "nope.txt"}})");
  CHECK_THROWS_WITH_AS(parse_config(bad_corpus), doctest::Contains("nope.txt"), ConfigError);
  const auto bad_json = write_text("cfg3.json", "{ not json");
  CHECK_THROWS_AS(parse_config(bad_json), ConfigError);
}

TEST_CASE("model checkpoints round-trip byte-identically") {
  const auto m = build_model<float>(tiny());
  const std::map<std::string, std::string> info{{"seed", "3"}};
  const auto bytes = serialize_checkpoint(m, info);
  CHECK(std::memcmp(bytes.data(), "BQCK", 4) == 0);
  const auto loaded = deserialize_checkpoint(bytes);
  CHECK(loaded.kind == CheckpointKind::model);
  CHECK(loaded.info == info);
  CHECK(loaded.model.config.d_model == 16);
  const auto params = m.parameters();
  const auto lp = loaded.model.parameters();
  REQUIRE(params.size() == lp.size());
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(bit_equal(*params[i].second, *lp[i].second));
  CHECK(serialize_checkpoint(loaded.model, loaded.info) == bytes);

  const auto path = scratch("model.bqck");
  save_checkpoint(m, path, info);
  save_checkpoint(load_model(path), scratch("model2.bqck"), info);
  std::ifstream a(path, std::ios::binary), b(scratch("model2.bqck"), std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));
  CHECK_THROWS_AS(load_quantized(path), CheckpointError);
}

TEST_CASE("quantized checkpoints rebuild W~ bit-exactly") {
  for (int bits : {3, 4, 8}) {
    const auto q = tuned_quantized(bits);
    const auto bytes = serialize_checkpoint(q);
    const auto loaded = deserialize_checkpoint(bytes);
    REQUIRE(loaded.quantized);
    CHECK(loaded.kind == CheckpointKind::quantized);
    CHECK(loaded.quantized->quant.bits == bits);
    CHECK(loaded.info.at("note") == "test");
    for (const auto& name : q.model.quantizable_layers()) {
      CHECK(bit_equal(loaded.model.layer(name).weight, q.model.layer(name).weight));
      const auto& a = q.layers.at(name);
      const auto& b = loaded.quantized->layers.at(name);
      CHECK(a.levels == b.levels);
      CHECK(bit_equal(a.params.rounding, b.params.rounding));
      CHECK(bit_equal(a.scale, b.scale));
    }
    CHECK(bit_equal(loaded.model.head, q.model.head));
    CHECK(serialize_checkpoint(*loaded.quantized) == bytes);
  }
}

TEST_CASE("low-bit checkpoints store packed grid indices") {
  const auto q4 = serialize_checkpoint(tuned_quantized(4));
  const auto q8 = serialize_checkpoint(tuned_quantized(8));
  CHECK(q4.size() < q8.size());
}

TEST_CASE("damaged checkpoints name the failing section") {
  const auto good = serialize_checkpoint(build_model<float>(tiny()));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bad_magic), doctest::Contains("bad magic"), CheckpointError);

  auto future = good;
  future[4] = 2;
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(future), doctest::Contains("version 2"), CheckpointError);

  CHECK_THROWS_WITH_AS(deserialize_checkpoint(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)),
                       doctest::Contains("header"), CheckpointError);
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(std::vector<std::uint8_t>(good.begin(), good.begin() + 40)),
                       doctest::Contains("metadata"), CheckpointError);
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(std::vector<std::uint8_t>(good.begin(), good.end() - 3)),
                       doctest::Contains("payload"), CheckpointError);
  auto longer = good;
  longer.push_back(0);
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(longer), doctest::Contains("trailing"), CheckpointError);

  CHECK_THROWS_WITH_AS(load_checkpoint(scratch("absent.bqck")), doctest::Contains("absent.bqck"), CheckpointError);
}
