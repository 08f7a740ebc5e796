#include "qlab/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <tuple>

#include "qlab/csv.hpp"

namespace qlab {

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw std::runtime_error("write failed for report " + path.string());
}

std::string num(double v) { return format_number(v); }

double parse_double(const std::string& s, const std::string& column) {
  double v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size())
    throw std::runtime_error("report: column " + column + " holds '" + s + "', not a number");
  return v;
}

std::uint64_t parse_uint(const std::string& s, const std::string& column) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw std::runtime_error("report: column " + column + " holds '" + s + "', not an unsigned integer");
  return std::stoull(s);
}

nlohmann::json summary_json(const Summary& s) { return {{"mean", s.mean}, {"stderr", s.stderr_}}; }

}  // namespace

std::vector<ReportRow> report_rows(const RunEvaluation& eval, const std::string& strategy, std::size_t n,
                                   std::uint64_t seed, double seconds) {
  if (eval.rtn_blocks.size() != eval.tuned_blocks.size())
    throw std::invalid_argument("report_rows: RTN and tuned block tables differ in length");
  std::vector<ReportRow> rows;
  for (std::size_t k = 0; k < eval.tuned_blocks.size(); ++k)
    rows.push_back({strategy, n, seed, eval.tuned_blocks[k].block, eval.rtn_blocks[k].cumulative,
                    eval.tuned_blocks[k].cumulative, eval.fp.perplexity, eval.rtn.perplexity, eval.tuned.perplexity,
                    eval.tuned.mean_nll - eval.fp.mean_nll, seconds});
  return rows;
}

void emit_report(std::span<const ReportRow> rows, const std::filesystem::path& path, ReportFormat format) {
  if (rows.empty()) throw std::invalid_argument("emit_report: no rows");
  auto out = open_output(path);
  if (format == ReportFormat::json) {
    out << to_json(rows).dump(2) << '\n';
  } else {
    out << kReportHeader << '\n';
    for (const auto& r : rows)
      out << csv_escape(r.strategy) << ',' << r.n << ',' << r.seed << ',' << r.block << ',' << num(r.mse_rtn) << ','
          << num(r.mse_tuned) << ',' << num(r.ppl_fp) << ',' << num(r.ppl_rtn) << ',' << num(r.ppl_tuned) << ','
          << num(r.loss_delta) << ',' << num(r.seconds) << '\n';
  }
  finish(out, path);
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open report " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader)
    throw std::runtime_error("report " + path.string() + ": unexpected header");
  std::vector<ReportRow> rows;
  const std::vector<std::string> names = csv_split(kReportHeader);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_split(line);
    if (f.size() != names.size())
      throw std::runtime_error("report " + path.string() + ": row has " + std::to_string(f.size()) + " fields");
    ReportRow r;
    r.strategy = f[0];
    r.n = parse_uint(f[1], names[1]);
    r.seed = parse_uint(f[2], names[2]);
    r.block = parse_uint(f[3], names[3]);
    r.mse_rtn = parse_double(f[4], names[4]);
    r.mse_tuned = parse_double(f[5], names[5]);
    r.ppl_fp = parse_double(f[6], names[6]);
    r.ppl_rtn = parse_double(f[7], names[7]);
    r.ppl_tuned = parse_double(f[8], names[8]);
    r.loss_delta = parse_double(f[9], names[9]);
    r.seconds = parse_double(f[10], names[10]);
    rows.push_back(std::move(r));
  }
  return rows;
}

nlohmann::json to_json(std::span<const ReportRow> rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"strategy", r.strategy},
                   {"n", r.n},
                   {"seed", r.seed},
                   {"block", r.block},
                   {"mse_rtn", r.mse_rtn},
                   {"mse_tuned", r.mse_tuned},
                   {"ppl_fp", r.ppl_fp},
                   {"ppl_rtn", r.ppl_rtn},
                   {"ppl_tuned", r.ppl_tuned},
                   {"loss_delta", r.loss_delta},
                   {"seconds", r.seconds}});
  return arr;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("summarize: no values");
  Summary s;
  s.count = values.size();
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.count);
  if (s.count > 1) {
    double sq = 0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.stderr_ = std::sqrt(sq / static_cast<double>(s.count - 1)) / std::sqrt(static_cast<double>(s.count));
  }
  return s;
}

std::vector<AggregateRow> aggregate(std::span<const ReportRow> rows) {
  if (rows.empty()) throw std::invalid_argument("aggregate: no rows");
  // (strategy, n) in first-appearance order -> seed in first-appearance order -> rows
  std::vector<std::pair<std::string, std::size_t>> groups;
  std::map<std::pair<std::string, std::size_t>, std::vector<std::pair<std::uint64_t, std::vector<const ReportRow*>>>>
      by_group;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.strategy, r.n);
    auto [it, fresh] = by_group.try_emplace(key);
    if (fresh) groups.push_back(key);
    auto& seeds = it->second;
    auto s = std::find_if(seeds.begin(), seeds.end(), [&](const auto& p) { return p.first == r.seed; });
    if (s == seeds.end()) {
      seeds.emplace_back(r.seed, std::vector<const ReportRow*>{});
      s = std::prev(seeds.end());
    }
    s->second.push_back(&r);
  }

  std::vector<AggregateRow> out;
  for (const auto& key : groups) {
    const auto& seeds = by_group.at(key);
    std::vector<double> mse_rtn, mse_tuned, ppl_fp, ppl_rtn, ppl_tuned, loss_delta, seconds;
    for (const auto& [seed, block_rows] : seeds) {
      double a = 0, b = 0;
      for (const auto* r : block_rows) {
        a += r->mse_rtn;
        b += r->mse_tuned;
      }
      mse_rtn.push_back(a / static_cast<double>(block_rows.size()));
      mse_tuned.push_back(b / static_cast<double>(block_rows.size()));
      const ReportRow& first = *block_rows.front();
      ppl_fp.push_back(first.ppl_fp);
      ppl_rtn.push_back(first.ppl_rtn);
      ppl_tuned.push_back(first.ppl_tuned);
      loss_delta.push_back(first.loss_delta);
      seconds.push_back(first.seconds);
    }
    out.push_back({key.first, key.second, seeds.size(), summarize(mse_rtn), summarize(mse_tuned), summarize(ppl_fp),
                   summarize(ppl_rtn), summarize(ppl_tuned), summarize(loss_delta), summarize(seconds)});
  }
  return out;
}

void emit_aggregate(std::span<const AggregateRow> rows, const std::filesystem::path& path, ReportFormat format) {
  if (rows.empty()) throw std::invalid_argument("emit_aggregate: no rows");
  auto out = open_output(path);
  if (format == ReportFormat::json) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows)
      arr.push_back({{"strategy", r.strategy},
                     {"n", r.n},
                     {"seeds", r.seeds},
                     {"mse_rtn", summary_json(r.mse_rtn)},
                     {"mse_tuned", summary_json(r.mse_tuned)},
                     {"ppl_fp", summary_json(r.ppl_fp)},
                     {"ppl_rtn", summary_json(r.ppl_rtn)},
                     {"ppl_tuned", summary_json(r.ppl_tuned)},
                     {"loss_delta", summary_json(r.loss_delta)},
                     {"seconds", summary_json(r.seconds)}});
    out << arr.dump(2) << '\n';
  } else {
    out << "strategy,n,seeds";
    for (const char* m : {"mse_rtn", "mse_tuned", "ppl_fp", "ppl_rtn", "ppl_tuned", "loss_delta", "seconds"})
      out << ',' << m << "_mean," << m << "_stderr";
    out << '\n';
    for (const auto& r : rows) {
      out << csv_escape(r.strategy) << ',' << r.n << ',' << r.seeds;
      for (const Summary* s :
           {&r.mse_rtn, &r.mse_tuned, &r.ppl_fp, &r.ppl_rtn, &r.ppl_tuned, &r.loss_delta, &r.seconds})
        out << ',' << num(s->mean) << ',' << num(s->stderr_);
      out << '\n';
    }
  }
  finish(out, path);
}

void emit_ablation(std::span<const AblationRow> rows, const std::filesystem::path& path) {
  if (rows.empty()) throw std::invalid_argument("emit_ablation: no rows");
  auto out = open_output(path);
  out << kAblationHeader << '\n';
  for (const auto& r : rows)
    out << csv_escape(r.factor) << ',' << r.value << ',' << csv_escape(r.strategy) << ',' << r.n << ',' << r.seed << ','
        << num(r.mse_rtn) << ',' << num(r.mse_tuned) << ',' << num(r.ppl_rtn) << ',' << num(r.ppl_tuned) << '\n';
  finish(out, path);
}

void emit_ablation_aggregate(std::span<const AblationRow> rows, const std::filesystem::path& path) {
  if (rows.empty()) throw std::invalid_argument("emit_ablation_aggregate: no rows");
  using Key = std::tuple<std::string, std::size_t, std::string, std::size_t>;
  std::vector<Key> order;
  std::map<Key, std::pair<std::vector<double>, std::vector<double>>> cells;
  for (const auto& r : rows) {
    Key k{r.factor, r.value, r.strategy, r.n};
    auto [it, fresh] = cells.try_emplace(k);
    if (fresh) order.push_back(k);
    it->second.first.push_back(r.mse_tuned);
    it->second.second.push_back(r.ppl_tuned);
  }
  auto out = open_output(path);
  out << "factor,value,strategy,n,seeds,mse_tuned_mean,mse_tuned_stderr,ppl_tuned_mean,ppl_tuned_stderr\n";
  for (const auto& k : order) {
    const auto& [mse, ppl] = cells.at(k);
    const Summary a = summarize(mse), b = summarize(ppl);
    out << csv_escape(std::get<0>(k)) << ',' << std::get<1>(k) << ',' << csv_escape(std::get<2>(k)) << ','
        << std::get<3>(k) << ',' << a.count << ',' << num(a.mean) << ',' << num(a.stderr_) << ',' << num(b.mean) << ','
        << num(b.stderr_) << '\n';
  }
  finish(out, path);
}

}  // namespace qlab
