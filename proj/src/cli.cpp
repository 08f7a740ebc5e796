#include "qlab/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "qlab/checkpoint.hpp"
#include "qlab/csv.hpp"
#include "qlab/curvature.hpp"
#include "qlab/eval.hpp"
#include "qlab/finetune.hpp"
#include "qlab/ops.hpp"
#include "qlab/report.hpp"
#include "qlab/rng.hpp"

namespace qlab {

namespace fs = std::filesystem;

CorpusSplit load_split(const RunConfig& config) {
  auto [train, holdout] = split_holdout(load_corpus(config.data.corpus), config.data.holdout_fraction);
  return {std::move(train), std::move(holdout)};
}

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config) {
  auto* opt = cmd->add_option("--config", c.config_path, "JSON run configuration");
  if (needs_config) opt->required();
  cmd->add_option("--set", c.overrides, "Override a config value, e.g. --set optim.steps=100")->take_all();
  cmd->add_option("--out", c.out_dir, "Output directory (overrides output_dir)");
}

RunConfig load_config(const Common& c) {
  if (!fs::exists(c.config_path)) throw ConfigError("config file not found: " + c.config_path);
  RunConfig cfg = parse_config(c.config_path);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  if (!fs::exists(cfg.data.corpus)) throw ConfigError("data.corpus: file " + cfg.data.corpus + " does not exist");
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(f);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_train(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = cfg.output_dir;
  const auto split = load_split(cfg);
  Model<float> model = build_model<float>(cfg.model);
  const auto log = pretrain_toy(model, split.train, cfg.pretrain);
  save_checkpoint(model, dir / "model.bqck", {{"seed", std::to_string(cfg.seed)}});

  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < log.loss.size(); ++i) csv += std::to_string(i) + "," + format_number(log.loss[i]) + "\n";
  write_text(dir / "train_loss.csv", csv);
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");

  const auto windows = evaluation_windows(split.holdout, cfg.data.eval_seq_len, cfg.data.eval_windows);
  const auto ppl = perplexity(model, windows);
  out << "trained " << cfg.pretrain.steps << " steps";
  if (!log.loss.empty()) out << ", final loss " << format_number(log.loss.back());
  out << ", holdout perplexity " << format_number(ppl.perplexity) << "\n";
  out << "wrote " << (dir / "model.bqck").string() << "\n";
  return kExitOk;
}

int run_quantize(const RunConfig& cfg, const fs::path& model_path, std::ostream& out) {
  const fs::path dir = cfg.output_dir;
  const auto split = load_split(cfg);
  const Model<float> model = load_model(model_path);
  const auto schedule = make_schedule(cfg.strategy, cfg.n, model.blocks.size());

  const auto t0 = std::chrono::steady_clock::now();
  auto result = run_pipeline(model, split.train, schedule, cfg.quant, cfg.optim);
  const double seconds = seconds_since(t0);

  save_checkpoint(result.quantized, dir / "quantized.bqck");
  for (const auto& log : result.logs) write_window_csv(dir / "windows", log);
  nlohmann::json run = {{"strategy", to_string(cfg.strategy)},
                        {"n", schedule.n},
                        {"seed", cfg.seed},
                        {"bits", cfg.quant.bits},
                        {"group_size", cfg.quant.group_size}};
  write_text(dir / "run.json", run.dump(2) + "\n");
  write_text(dir / "timing.json", nlohmann::json{{"seconds", seconds}}.dump(2) + "\n");
  out << "quantized " << model.blocks.size() << " blocks with " << to_string(cfg.strategy) << "-" << schedule.n << " ("
      << schedule.windows.size() << " windows)\n";
  out << "wrote " << (dir / "quantized.bqck").string() << "\n";
  return kExitOk;
}

int run_eval(const RunConfig& cfg, const fs::path& model_path, const fs::path& quant_path, bool timing,
             std::ostream& out) {
  const fs::path dir = cfg.output_dir;
  const auto split = load_split(cfg);
  const Model<float> fp = load_model(model_path);
  const QuantizedModel tuned = load_quantized(quant_path);
  const QuantizedModel rtn = rtn_quantize(fp, tuned.quant);

  const auto holdout = evaluation_windows(split.holdout, cfg.data.eval_seq_len, cfg.data.eval_windows);
  const auto calib = sample_calibration(split.train, cfg.optim.calib_samples, cfg.optim.seq_len, cfg.optim.seed);
  const auto eval = evaluate_run(fp, rtn.model, tuned.model, holdout, calib);

  std::string strategy = to_string(cfg.strategy);
  std::size_t n = cfg.strategy == Strategy::sb ? 1 : cfg.n;
  std::uint64_t seed = cfg.seed;
  const fs::path run_file = quant_path.parent_path() / "run.json";
  if (fs::exists(run_file)) {
    const auto run = read_json(run_file);
    strategy = run.at("strategy").get<std::string>();
    n = run.at("n").get<std::size_t>();
    seed = run.at("seed").get<std::uint64_t>();
  }
  double seconds = 0;
  const fs::path timing_file = quant_path.parent_path() / "timing.json";
  if (timing) {
    if (!fs::exists(timing_file)) throw std::runtime_error("--timing given but " + timing_file.string() + " is missing");
    seconds = read_json(timing_file).at("seconds").get<double>();
  }

  const auto rows = report_rows(eval, strategy, n, seed, seconds);
  emit_report(rows, dir / "report.csv", ReportFormat::csv);
  emit_report(rows, dir / "report.json", ReportFormat::json);

  std::string blocks = "block,isolated_rtn,isolated_tuned,cumulative_rtn,cumulative_tuned\n";
  for (std::size_t k = 0; k < eval.tuned_blocks.size(); ++k)
    blocks += std::to_string(k + 1) + "," + format_number(eval.rtn_blocks[k].isolated) + "," +
              format_number(eval.tuned_blocks[k].isolated) + "," + format_number(eval.rtn_blocks[k].cumulative) + "," +
              format_number(eval.tuned_blocks[k].cumulative) + "\n";
  write_text(dir / "blocks.csv", blocks);

  out << "perplexity fp " << format_number(eval.fp.perplexity) << ", rtn " << format_number(eval.rtn.perplexity)
      << ", tuned " << format_number(eval.tuned.perplexity) << " over " << eval.fp.tokens << " tokens\n";
  out << "wrote " << (dir / "report.csv").string() << "\n";
  return kExitOk;
}

int run_hessian(const RunConfig& cfg, const fs::path& model_path, const std::string& quant_path, std::ostream& out) {
  const fs::path dir = cfg.output_dir;
  const auto split = load_split(cfg);
  const Model<double> model = model_cast<double>(load_model(model_path));
  const auto& h = cfg.hessian;
  const auto samples = sample_calibration(split.train, h.samples, h.seq_len, derive_seed(cfg.seed, {0x68657373ULL}));

  CurvatureOptions opt;
  opt.directions = h.directions;
  opt.direction_norm = h.direction_norm;
  opt.seed = derive_seed(cfg.seed, {0x64697273ULL});
  for (const auto& layer : h.layers) {
    LayerSubset s{layer, {}, {}};
    for (std::size_t r = 0; r < h.rows; ++r) s.rows.push_back(r);
    for (std::size_t c = 0; c < h.cols; ++c) s.cols.push_back(c);
    opt.subset.layers.push_back(std::move(s));
  }

  std::map<std::string, Tensor<double>> delta;
  if (!quant_path.empty()) {
    const Model<double> q = model_cast<double>(load_model(quant_path));
    for (const auto& layer : h.layers)
      delta.emplace(layer, ops::sub(q.layer(layer).weight, model.layer(layer).weight));
  }
  const auto report = analyze_curvature(model, samples, opt, quant_path.empty() ? nullptr : &delta);
  write_text(dir / "curvature.json", to_json(report).dump(2) + "\n");
  out << "hessian over " << report.hessian.rows << " weights: block-diagonal error "
      << format_number(report.block_diag_error) << ", kronecker error " << format_number(report.kron_error) << "\n";
  out << "wrote " << (dir / "curvature.json").string() << "\n";
  return kExitOk;
}

int run_report(const std::vector<std::string>& runs, const fs::path& dir, std::ostream& out) {
  std::vector<ReportRow> rows;
  for (const auto& run : runs) {
    const fs::path file = fs::path(run) / "report.csv";
    if (!fs::exists(file)) throw std::runtime_error("no report.csv in run directory " + run);
    auto r = read_report_csv(file);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const auto agg = aggregate(rows);
  emit_report(rows, dir / "report.csv", ReportFormat::csv);
  emit_report(rows, dir / "report.json", ReportFormat::json);
  emit_aggregate(agg, dir / "aggregate.csv", ReportFormat::csv);
  emit_aggregate(agg, dir / "aggregate.json", ReportFormat::json);
  out << "aggregated " << runs.size() << " runs into " << agg.size() << " groups\n";
  out << "wrote " << (dir / "aggregate.csv").string() << "\n";
  return kExitOk;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Block-wise post-training quantization lab"};
  app.name("qlab");
  app.require_subcommand(1, 1);

  Common train_c, quant_c, eval_c, hess_c;
  std::string quant_model, quant_strategy, eval_model, eval_quant, hess_model, hess_quant, report_out = "report";
  std::size_t quant_n = 0;
  bool eval_timing = false;
  std::vector<std::string> report_runs;

  auto* train = app.add_subcommand("train", "Pretrain the toy model and save a checkpoint");
  add_common(train, train_c, true);

  auto* quant = app.add_subcommand("quantize", "Quantize a checkpoint with a block schedule");
  add_common(quant, quant_c, true);
  quant->add_option("--model", quant_model, "Full-precision checkpoint (default <out>/model.bqck)");
  quant->add_option("--strategy", quant_strategy, "sb, la or mb")->check(CLI::IsMember({"sb", "la", "mb"}));
  quant->add_option("--n", quant_n, "Blocks per window (la, mb)")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "Perplexity and per-block reconstruction report");
  add_common(eval, eval_c, true);
  eval->add_option("--model", eval_model, "Full-precision checkpoint (default <out>/model.bqck)");
  eval->add_option("--quantized", eval_quant, "Quantized checkpoint (default <out>/quantized.bqck)");
  eval->add_flag("--timing", eval_timing, "Fill the seconds column from the quantize run's timing.json");

  auto* hess = app.add_subcommand("hessian", "Curvature analysis on a small weight subset");
  add_common(hess, hess_c, true);
  hess->add_option("--model", hess_model, "Full-precision checkpoint (default <out>/model.bqck)");
  hess->add_option("--quantized", hess_quant, "Quantized checkpoint whose weight change is also analysed");

  auto* report = app.add_subcommand("report", "Aggregate report.csv files across run directories");
  report->add_option("runs", report_runs, "Run directories")->required();
  report->add_option("--out", report_out, "Output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto default_path = [](const std::string& given, const RunConfig& cfg, const char* name) {
    return given.empty() ? fs::path(cfg.output_dir) / name : fs::path(given);
  };

  try {
    if (*train) return run_train(load_config(train_c), out);
    if (*quant) {
      RunConfig cfg = load_config(quant_c);
      if (!quant_strategy.empty()) apply_override(cfg, "schedule.strategy=" + quant_strategy);
      if (quant_n > 0) apply_override(cfg, "schedule.n=" + std::to_string(quant_n));
      return run_quantize(cfg, default_path(quant_model, cfg, "model.bqck"), out);
    }
    if (*eval) {
      RunConfig cfg = load_config(eval_c);
      return run_eval(cfg, default_path(eval_model, cfg, "model.bqck"), default_path(eval_quant, cfg, "quantized.bqck"),
                      eval_timing, out);
    }
    if (*hess) {
      RunConfig cfg = load_config(hess_c);
      return run_hessian(cfg, default_path(hess_model, cfg, "model.bqck"), hess_quant, out);
    }
    return run_report(report_runs, report_out, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace qlab
