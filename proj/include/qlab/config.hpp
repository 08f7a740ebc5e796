#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "qlab/finetune.hpp"
#include "qlab/model.hpp"
#include "qlab/quantizer.hpp"

namespace qlab {

/// Bad configuration: unknown key, wrong type, missing required key or an
/// invalid value. The message names the dotted key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  std::string corpus;  // required
  /// Trailing fraction of the corpus held out for perplexity.
  double holdout_fraction = 0.1;
  /// Holdout windows scored by `eval`; 0 uses every complete window.
  std::size_t eval_windows = 64;
  std::size_t eval_seq_len = 64;
};

struct HessianConfig {
  std::vector<std::string> layers{"blocks.1.attn_q", "blocks.1.mlp_up"};
  std::size_t rows = 2;
  std::size_t cols = 8;
  std::size_t samples = 4;
  std::size_t seq_len = 8;
  std::size_t directions = 3;
  double direction_norm = 0.05;
};

/// Everything a pipeline run depends on. Model init, pretraining, calibration
/// sampling and curvature probes all derive their seeds from `seed`.
struct RunConfig {
  ModelConfig model;
  PretrainOptions pretrain;
  QuantConfig quant;
  OptimConfig optim;
  Strategy strategy = Strategy::sb;
  std::size_t n = 1;
  DataConfig data;
  HessianConfig hessian;
  std::string output_dir = "run";
  std::uint64_t seed = 0;

  /// Copies `seed` into the per-component seeds.
  void propagate_seed();
  void validate() const;
};

RunConfig default_config();
nlohmann::json to_json(const RunConfig& config);

/// Strict: every key must be known and carry the default's type. Absent
/// optional keys keep their defaults; data.corpus is required.
RunConfig config_from_json(const nlohmann::json& doc);

/// Reads a JSON config file. Relative data paths resolve against the file's
/// directory; the corpus must exist.
RunConfig parse_config(const std::filesystem::path& path);

/// Applies "dotted.key=value". The value is read as JSON when it parses and
/// as a plain string otherwise.
void apply_override(RunConfig& config, std::string_view assignment);

}  // namespace qlab
