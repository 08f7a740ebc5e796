#include "qlab/config.hpp"

#include <fstream>
#include <sstream>

#include "qlab/rng.hpp"

namespace qlab {

using nlohmann::json;

namespace {

std::string loss_name(LossForm f) { return f == LossForm::frobenius ? "frobenius" : "mean_square"; }

LossForm parse_loss(const std::string& s) {
  if (s == "mean_square") return LossForm::mean_square;
  if (s == "frobenius") return LossForm::frobenius;
  throw ConfigError("optim.loss: expected mean_square or frobenius, got '" + s + "'");
}

bool compatible(const json& def, const json& val) {
  if (def.is_number_unsigned()) return val.is_number_unsigned() || (val.is_number_integer() && val.get<long long>() >= 0);
  if (def.is_number_integer()) return val.is_number_integer();
  if (def.is_number_float()) return val.is_number();
  if (def.is_string()) return val.is_string();
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_array()) {
    if (!val.is_array()) return false;
    if (def.empty()) return true;
    for (const auto& v : val)
      if (!compatible(def.front(), v)) return false;
    return true;
  }
  if (def.is_object()) return val.is_object();
  return false;
}

std::string type_name(const json& def) {
  if (def.is_number_unsigned()) return "a non-negative integer";
  if (def.is_number_integer()) return "an integer";
  if (def.is_number()) return "a number";
  if (def.is_string()) return "a string";
  if (def.is_boolean()) return "a boolean";
  if (def.is_array()) return "an array";
  return "an object";
}

// Overwrites entries of `base` with `doc`, refusing unknown keys and type changes.
void merge_strict(json& base, const json& doc, const std::string& prefix) {
  if (!doc.is_object()) throw ConfigError((prefix.empty() ? std::string("config") : prefix) + ": expected an object");
  for (const auto& [key, val] : doc.items()) {
    const std::string dotted = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + dotted + "'");
    json& slot = base[key];
    if (!compatible(slot, val)) throw ConfigError("config key '" + dotted + "' must be " + type_name(slot));
    if (slot.is_object())
      merge_strict(slot, val, dotted);
    else
      slot = val;
  }
}

template <typename V>
V take(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + section + "." + key + "' is missing or malformed");
  }
}

RunConfig from_tree(const json& j) {
  RunConfig c;
  c.model.vocab_size = take<std::size_t>(j, "model", "vocab_size");
  c.model.d_model = take<std::size_t>(j, "model", "d_model");
  c.model.n_heads = take<std::size_t>(j, "model", "n_heads");
  c.model.n_blocks = take<std::size_t>(j, "model", "n_blocks");
  c.model.d_ff = take<std::size_t>(j, "model", "d_ff");
  c.model.max_seq_len = take<std::size_t>(j, "model", "max_seq_len");

  c.pretrain.steps = take<std::size_t>(j, "pretrain", "steps");
  c.pretrain.batch_size = take<std::size_t>(j, "pretrain", "batch_size");
  c.pretrain.seq_len = take<std::size_t>(j, "pretrain", "seq_len");
  c.pretrain.lr = take<double>(j, "pretrain", "lr");
  c.pretrain.momentum = take<double>(j, "pretrain", "momentum");
  c.pretrain.grad_clip = take<double>(j, "pretrain", "grad_clip");

  c.quant.bits = take<int>(j, "quant", "bits");
  c.quant.group_size = take<std::size_t>(j, "quant", "group_size");
  try {
    c.quant.mode = parse_quant_mode(take<std::string>(j, "quant", "mode"));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("quant.mode: ") + e.what());
  }

  c.optim.lr0 = take<double>(j, "optim", "lr0");
  c.optim.steps = take<std::size_t>(j, "optim", "steps");
  c.optim.batch_size = take<std::size_t>(j, "optim", "batch_size");
  c.optim.calib_samples = take<std::size_t>(j, "optim", "calib_samples");
  c.optim.seq_len = take<std::size_t>(j, "optim", "seq_len");
  c.optim.cache_activations = take<bool>(j, "optim", "cache_activations");
  c.optim.loss = parse_loss(take<std::string>(j, "optim", "loss"));

  try {
    c.strategy = parse_strategy(take<std::string>(j, "schedule", "strategy"));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("schedule.strategy: ") + e.what());
  }
  c.n = take<std::size_t>(j, "schedule", "n");

  c.data.corpus = take<std::string>(j, "data", "corpus");
  c.data.holdout_fraction = take<double>(j, "data", "holdout_fraction");
  c.data.eval_windows = take<std::size_t>(j, "data", "eval_windows");
  c.data.eval_seq_len = take<std::size_t>(j, "data", "eval_seq_len");

  c.hessian.layers = take<std::vector<std::string>>(j, "hessian", "layers");
  c.hessian.rows = take<std::size_t>(j, "hessian", "rows");
  c.hessian.cols = take<std::size_t>(j, "hessian", "cols");
  c.hessian.samples = take<std::size_t>(j, "hessian", "samples");
  c.hessian.seq_len = take<std::size_t>(j, "hessian", "seq_len");
  c.hessian.directions = take<std::size_t>(j, "hessian", "directions");
  c.hessian.direction_norm = take<double>(j, "hessian", "direction_norm");

  c.output_dir = j.at("output_dir").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.propagate_seed();
  return c;
}

// Re-throws component validation errors as ConfigError prefixed with the section.
template <typename Fn>
void check(const char* section, Fn fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    if (what.starts_with(section)) throw ConfigError(what);
    throw ConfigError(std::string(section) + ": " + what);
  }
}

}  // namespace

void RunConfig::propagate_seed() {
  model.seed = derive_seed(seed, {0x6d6f64656cULL});
  pretrain.seed = derive_seed(seed, {0x7072657472ULL});
  optim.seed = seed;
}

void RunConfig::validate() const {
  check("model", [&] { model.validate(); });
  check("quant", [&] { quant.validate(); });
  check("optim", [&] { optim.validate(); });
  if (n < 1) throw ConfigError("schedule.n must be at least 1");
  if (pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
  if (pretrain.seq_len == 0 || pretrain.seq_len > model.max_seq_len)
    throw ConfigError("pretrain.seq_len must lie in [1, model.max_seq_len]");
  if (optim.seq_len > model.max_seq_len) throw ConfigError("optim.seq_len exceeds model.max_seq_len");
  if (data.eval_seq_len == 0 || data.eval_seq_len > model.max_seq_len)
    throw ConfigError("data.eval_seq_len must lie in [1, model.max_seq_len]");
  if (!(data.holdout_fraction > 0 && data.holdout_fraction < 1))
    throw ConfigError("data.holdout_fraction must lie in (0, 1)");
  if (hessian.layers.empty()) throw ConfigError("hessian.layers must name at least one layer");
  if (hessian.rows == 0 || hessian.cols == 0 || hessian.samples == 0 || hessian.seq_len == 0)
    throw ConfigError("hessian.rows, cols, samples and seq_len must be positive");
  if (hessian.seq_len > model.max_seq_len) throw ConfigError("hessian.seq_len exceeds model.max_seq_len");
  if (!(hessian.direction_norm > 0)) throw ConfigError("hessian.direction_norm must be positive");
}

RunConfig default_config() {
  RunConfig c;
  c.propagate_seed();
  return c;
}

json to_json(const RunConfig& c) {
  return {
      {"model",
       {{"vocab_size", c.model.vocab_size},
        {"d_model", c.model.d_model},
        {"n_heads", c.model.n_heads},
        {"n_blocks", c.model.n_blocks},
        {"d_ff", c.model.d_ff},
        {"max_seq_len", c.model.max_seq_len}}},
      {"pretrain",
       {{"steps", c.pretrain.steps},
        {"batch_size", c.pretrain.batch_size},
        {"seq_len", c.pretrain.seq_len},
        {"lr", c.pretrain.lr},
        {"momentum", c.pretrain.momentum},
        {"grad_clip", c.pretrain.grad_clip}}},
      {"quant", {{"bits", c.quant.bits}, {"group_size", c.quant.group_size}, {"mode", to_string(c.quant.mode)}}},
      {"optim",
       {{"lr0", c.optim.lr0},
        {"steps", c.optim.steps},
        {"batch_size", c.optim.batch_size},
        {"calib_samples", c.optim.calib_samples},
        {"seq_len", c.optim.seq_len},
        {"cache_activations", c.optim.cache_activations},
        {"loss", loss_name(c.optim.loss)}}},
      {"schedule", {{"strategy", to_string(c.strategy)}, {"n", c.n}}},
      {"data",
       {{"corpus", c.data.corpus},
        {"holdout_fraction", c.data.holdout_fraction},
        {"eval_windows", c.data.eval_windows},
        {"eval_seq_len", c.data.eval_seq_len}}},
      {"hessian",
       {{"layers", c.hessian.layers},
        {"rows", c.hessian.rows},
        {"cols", c.hessian.cols},
        {"samples", c.hessian.samples},
        {"seq_len", c.hessian.seq_len},
        {"directions", c.hessian.directions},
        {"direction_norm", c.hessian.direction_norm}}},
      {"output_dir", c.output_dir},
      {"seed", c.seed},
  };
}

RunConfig config_from_json(const json& doc) {
  json tree = to_json(default_config());
  merge_strict(tree, doc, "");
  if (!doc.contains("data") || !doc["data"].contains("corpus") || doc["data"]["corpus"].get<std::string>().empty())
    throw ConfigError("missing required config key 'data.corpus'");
  RunConfig c = from_tree(tree);
  c.validate();
  return c;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig c = config_from_json(doc);
  std::filesystem::path corpus(c.data.corpus);
  if (corpus.is_relative()) corpus = path.parent_path() / corpus;
  if (!std::filesystem::exists(corpus)) throw ConfigError("data.corpus: file " + corpus.string() + " does not exist");
  c.data.corpus = corpus.lexically_normal().string();
  return c;
}

void apply_override(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));

  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json tree = to_json(config);
  json* slot = &tree;
  std::stringstream parts(key);
  std::string part;
  while (std::getline(parts, part, '.')) {
    if (!slot->is_object() || !slot->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    slot = &(*slot)[part];
  }
  if (slot->is_object()) throw ConfigError("config key '" + key + "' is a section, not a value");
  if (!compatible(*slot, value)) {
    // A bare word like "la" parses as a string already; "1e-3" for a string key stays text.
    if (slot->is_string())
      value = text;
    else
      throw ConfigError("config key '" + key + "' must be " + type_name(*slot));
  }
  *slot = value;
  RunConfig next = from_tree(tree);
  next.validate();
  config = std::move(next);
}

}  // namespace qlab
