#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qlab/eval.hpp"

namespace qlab {

/// One block of one run. Run-level fields (perplexities, loss delta,
/// seconds) repeat on every block row of the run.
struct ReportRow {
  std::string strategy;
  std::size_t n = 1;
  std::uint64_t seed = 0;
  std::size_t block = 1;
  double mse_rtn = 0;
  double mse_tuned = 0;
  double ppl_fp = 0;
  double ppl_rtn = 0;
  double ppl_tuned = 0;
  double loss_delta = 0;
  double seconds = 0;

  bool operator==(const ReportRow&) const = default;
};

inline constexpr const char* kReportHeader =
    "strategy,n,seed,block,mse_rtn,mse_tuned,ppl_fp,ppl_rtn,ppl_tuned,loss_delta,seconds";

/// One row per block. The MSE columns use the cumulative (quantized-prefix)
/// error; loss_delta is the holdout mean-loss change of the tuned model.
std::vector<ReportRow> report_rows(const RunEvaluation& eval, const std::string& strategy, std::size_t n,
                                   std::uint64_t seed, double seconds);

enum class ReportFormat { csv, json };

/// Throws on empty rows or an unwritable path.
void emit_report(std::span<const ReportRow> rows, const std::filesystem::path& path, ReportFormat format);
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);
nlohmann::json to_json(std::span<const ReportRow> rows);

/// Mean and standard error (sample standard deviation / sqrt(count); 0 for a
/// single value).
struct Summary {
  double mean = 0;
  double stderr_ = 0;
  std::size_t count = 0;
};
Summary summarize(std::span<const double> values);

/// Per (strategy, n): each metric is first reduced to one value per seed (the
/// mean over blocks for the MSE columns), then summarized across seeds.
struct AggregateRow {
  std::string strategy;
  std::size_t n = 1;
  std::size_t seeds = 0;
  Summary mse_rtn, mse_tuned, ppl_fp, ppl_rtn, ppl_tuned, loss_delta, seconds;
};

/// Groups in first-appearance order.
std::vector<AggregateRow> aggregate(std::span<const ReportRow> rows);
void emit_aggregate(std::span<const AggregateRow> rows, const std::filesystem::path& path, ReportFormat format);

/// One run of a one-factor sweep (calibration size or step count).
struct AblationRow {
  std::string factor;  // "calib_samples" or "steps"
  std::size_t value = 0;
  std::string strategy;
  std::size_t n = 1;
  std::uint64_t seed = 0;
  double mse_rtn = 0;
  double mse_tuned = 0;
  double ppl_rtn = 0;
  double ppl_tuned = 0;
};

inline constexpr const char* kAblationHeader = "factor,value,strategy,n,seed,mse_rtn,mse_tuned,ppl_rtn,ppl_tuned";

void emit_ablation(std::span<const AblationRow> rows, const std::filesystem::path& path);
/// Mean and standard error of mse_tuned and ppl_tuned per (factor, value, strategy, n).
void emit_ablation_aggregate(std::span<const AblationRow> rows, const std::filesystem::path& path);

}  // namespace qlab
