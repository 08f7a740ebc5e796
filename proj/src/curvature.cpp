#include "qlab/curvature.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "qlab/ops.hpp"
#include "qlab/rng.hpp"

namespace qlab {

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

double DenseMatrix::frobenius() const {
  double s = 0;
  for (double v : data) s += v * v;
  return std::sqrt(s);
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols, rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t(c, r) = (*this)(r, c);
  return t;
}

DenseMatrix DenseMatrix::select(std::span<const std::size_t> row_idx, std::span<const std::size_t> col_idx) const {
  DenseMatrix out(row_idx.size(), col_idx.size());
  for (std::size_t i = 0; i < row_idx.size(); ++i)
    for (std::size_t j = 0; j < col_idx.size(); ++j) {
      if (row_idx[i] >= rows || col_idx[j] >= cols) throw std::out_of_range("DenseMatrix::select: index out of range");
      out(i, j) = (*this)(row_idx[i], col_idx[j]);
    }
  return out;
}

namespace {

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* what) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                                " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
}

void require_square(const DenseMatrix& h, std::size_t n, const char* what) {
  if (h.rows != h.cols) throw std::invalid_argument(std::string(what) + ": matrix is not square");
  if (h.rows != n)
    throw std::invalid_argument(std::string(what) + ": vector of length " + std::to_string(n) + " against a " +
                                std::to_string(h.rows) + "x" + std::to_string(h.cols) + " matrix");
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

double relative_frobenius_error(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "relative_frobenius_error");
  DenseMatrix d(a.rows, a.cols);
  for (std::size_t i = 0; i < a.data.size(); ++i) d.data[i] = a.data[i] - b.data[i];
  const double ref = b.frobenius();
  if (ref == 0) return d.frobenius() == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return d.frobenius() / ref;
}

double symmetry_residual(const DenseMatrix& h) {
  const double n = h.frobenius();
  if (n == 0) return 0;
  DenseMatrix d = h.transposed();
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = h.data[i] - d.data[i];
  return d.frobenius() / n;
}

DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out(a.rows * b.rows, a.cols * b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j)
      for (std::size_t k = 0; k < b.rows; ++k)
        for (std::size_t l = 0; l < b.cols; ++l) out(i * b.rows + k, j * b.cols + l) = a(i, j) * b(k, l);
  return out;
}

GradientFn tape_gradient(std::function<Tensor<double>(const Tensor<double>&)> objective) {
  return [objective = std::move(objective)](std::span<const double> theta) {
    Tape<double> tape;
    auto x = tape.watch(Tensor<double>({theta.size()}, std::vector<double>(theta.begin(), theta.end())));
    auto grads = tape.backward(objective(x));
    auto g = grads.of(x).values();
    return std::vector<double>(g.begin(), g.end());
  };
}

DenseMatrix exact_hessian_fd(const GradientFn& grad, std::span<const double> theta, double step) {
  const std::size_t n = theta.size();
  if (n == 0) throw std::invalid_argument("exact_hessian_fd: empty parameter subset");
  if (n > kMaxHessianParams)
    throw std::invalid_argument("exact_hessian_fd: " + std::to_string(n) + " parameters exceed the dense limit of " +
                                std::to_string(kMaxHessianParams));
  if (!(step > 0)) throw std::invalid_argument("exact_hessian_fd: step must be positive");
  DenseMatrix h(n, n);
  std::vector<double> point(theta.begin(), theta.end());
  for (std::size_t j = 0; j < n; ++j) {
    point[j] = theta[j] + step;
    const auto gp = grad(point);
    point[j] = theta[j] - step;
    const auto gm = grad(point);
    point[j] = theta[j];
    if (gp.size() != n || gm.size() != n)
      throw std::invalid_argument("exact_hessian_fd: gradient has " + std::to_string(gp.size()) + " entries, expected " +
                                  std::to_string(n));
    for (std::size_t i = 0; i < n; ++i) h(i, j) = (gp[i] - gm[i]) / (2 * step);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      const double m = 0.5 * (h(i, j) + h(j, i));
      if (!std::isfinite(m))
        throw std::runtime_error("exact_hessian_fd: non-finite entry at (" + std::to_string(i) + ", " +
                                 std::to_string(j) + ")");
      h(i, j) = h(j, i) = m;
    }
  return h;
}

CheckedHessian exact_hessian_fd_checked(const GradientFn& grad, std::span<const double> theta, double step) {
  CheckedHessian out{exact_hessian_fd(grad, theta, step), 0};
  out.halving_change = relative_frobenius_error(exact_hessian_fd(grad, theta, step / 2), out.hessian);
  return out;
}

double block_diag_error(const DenseMatrix& h, const Partition& partition) {
  if (h.rows != h.cols) throw std::invalid_argument("block_diag_error: matrix is not square");
  std::vector<int> owner(h.rows, -1);
  for (std::size_t p = 0; p < partition.size(); ++p) {
    const auto [lo, hi] = partition[p];
    if (lo >= hi || hi > h.rows)
      throw std::invalid_argument("block_diag_error: range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                                  ") is empty or outside 0.." + std::to_string(h.rows));
    for (std::size_t i = lo; i < hi; ++i) {
      if (owner[i] != -1) throw std::invalid_argument("block_diag_error: index " + std::to_string(i) + " covered twice");
      owner[i] = static_cast<int>(p);
    }
  }
  for (std::size_t i = 0; i < h.rows; ++i)
    if (owner[i] == -1) throw std::invalid_argument("block_diag_error: index " + std::to_string(i) + " not covered");
  const double total = h.frobenius();
  if (total == 0) return 0;
  double off = 0;
  for (std::size_t i = 0; i < h.rows; ++i)
    for (std::size_t j = 0; j < h.cols; ++j)
      if (owner[i] != owner[j]) off += h(i, j) * h(i, j);
  return std::sqrt(off) / total;
}

double taylor_quadratic(std::span<const double> dw, const DenseMatrix& h) {
  require_square(h, dw.size(), "taylor_quadratic");
  double s = 0;
  for (std::size_t i = 0; i < h.rows; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < h.cols; ++j) row += h(i, j) * dw[j];
    s += dw[i] * row;
  }
  return s;
}

double second_order_prediction(std::span<const double> grad, std::span<const double> dw, const DenseMatrix& h) {
  if (grad.size() != dw.size())
    throw std::invalid_argument("second_order_prediction: gradient of length " + std::to_string(grad.size()) +
                                " against a perturbation of length " + std::to_string(dw.size()));
  return dot(grad, dw) + 0.5 * taylor_quadratic(dw, h);
}

double local_objective(const DenseMatrix& dw, const DenseMatrix& inputs, double c) {
  if (dw.cols != inputs.cols)
    throw std::invalid_argument("local_objective: perturbation has " + std::to_string(dw.cols) +
                                " input columns, inputs have " + std::to_string(inputs.cols));
  if (inputs.rows == 0) throw std::invalid_argument("local_objective: no inputs");
  double total = 0;
  for (std::size_t s = 0; s < inputs.rows; ++s)
    for (std::size_t o = 0; o < dw.rows; ++o) {
      double z = 0;
      for (std::size_t i = 0; i < dw.cols; ++i) z += dw(o, i) * inputs(s, i);
      total += z * z;
    }
  return c * total / static_cast<double>(inputs.rows);
}

double local_objective_quadratic(const DenseMatrix& dw, const DenseMatrix& inputs, double c) {
  if (dw.cols != inputs.cols)
    throw std::invalid_argument("local_objective_quadratic: perturbation has " + std::to_string(dw.cols) +
                                " input columns, inputs have " + std::to_string(inputs.cols));
  if (inputs.rows == 0) throw std::invalid_argument("local_objective_quadratic: no inputs");
  const std::size_t d = inputs.cols;
  DenseMatrix second(d, d);
  for (std::size_t s = 0; s < inputs.rows; ++s)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) second(i, j) += inputs(s, i) * inputs(s, j);
  for (double& v : second.data) v /= static_cast<double>(inputs.rows);
  double total = 0;
  for (std::size_t o = 0; o < dw.rows; ++o)
    total += taylor_quadratic(std::span<const double>(dw.data.data() + o * d, d), second);
  return c * total;
}

DenseMatrix kron_hessian(std::span<const KronSample> samples, std::size_t out_features, std::size_t in_features,
                         double step) {
  if (samples.empty()) throw std::invalid_argument("kron_hessian: no calibration samples");
  const std::size_t n = out_features * in_features;
  if (n > kMaxHessianParams)
    throw std::invalid_argument("kron_hessian: " + std::to_string(n) + " weights exceed the dense limit of " +
                                std::to_string(kMaxHessianParams));
  DenseMatrix h(n, n);
  for (const auto& sample : samples) {
    const std::size_t t_count = sample.positions;
    if (sample.inputs.size() != t_count * in_features)
      throw std::invalid_argument("kron_hessian: sample inputs have " + std::to_string(sample.inputs.size()) +
                                  " values, expected " + std::to_string(t_count * in_features));
    const std::vector<double> origin(t_count * out_features, 0.0);
    const DenseMatrix hz = exact_hessian_fd(sample.preact_gradient, origin, step);
    auto x = [&](std::size_t t, std::size_t i) { return sample.inputs[t * in_features + i]; };
    for (std::size_t a = 0; a < out_features; ++a)
      for (std::size_t b = 0; b < out_features; ++b) {
        // y[t', i] = sum_t Hz[(t, a), (t', b)] x[t, i]
        std::vector<double> y(t_count * in_features, 0.0);
        for (std::size_t t = 0; t < t_count; ++t)
          for (std::size_t u = 0; u < t_count; ++u) {
            const double m = hz(t * out_features + a, u * out_features + b);
            for (std::size_t i = 0; i < in_features; ++i) y[u * in_features + i] += m * x(t, i);
          }
        for (std::size_t i = 0; i < in_features; ++i)
          for (std::size_t j = 0; j < in_features; ++j) {
            double s = 0;
            for (std::size_t u = 0; u < t_count; ++u) s += y[u * in_features + i] * x(u, j);
            h(a * in_features + i, b * in_features + j) += s;
          }
      }
  }
  for (double& v : h.data) {
    v /= static_cast<double>(samples.size());
    if (!std::isfinite(v)) throw std::runtime_error("kron_hessian: non-finite entry");
  }
  return h;
}

std::size_t ParamSubset::size() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

Partition ParamSubset::partition() const {
  Partition p;
  std::size_t at = 0;
  for (const auto& l : layers) {
    p.emplace_back(at, at + l.size());
    at += l.size();
  }
  return p;
}

void ParamSubset::validate(const Model<double>& model) const {
  if (layers.empty()) throw std::invalid_argument("parameter subset is empty");
  std::set<std::string> seen;
  for (const auto& l : layers) {
    if (!seen.insert(l.layer).second) throw std::invalid_argument("parameter subset names " + l.layer + " twice");
    const auto& w = model.layer(l.layer).weight;
    if (l.rows.empty() || l.cols.empty()) throw std::invalid_argument("parameter subset for " + l.layer + " is empty");
    for (auto r : l.rows)
      if (r >= w.dim(0)) throw std::out_of_range(l.layer + ": row " + std::to_string(r) + " out of range");
    for (auto c : l.cols)
      if (c >= w.dim(1)) throw std::out_of_range(l.layer + ": column " + std::to_string(c) + " out of range");
  }
  if (size() > kMaxHessianParams)
    throw std::invalid_argument("parameter subset has " + std::to_string(size()) + " entries, the dense limit is " +
                                std::to_string(kMaxHessianParams));
}

std::vector<double> gather_subset(const Model<double>& model, const ParamSubset& subset) {
  subset.validate(model);
  std::vector<double> out;
  for (const auto& l : subset.layers) {
    const auto& w = model.layer(l.layer).weight;
    const std::size_t cols = w.dim(1);
    for (auto r : l.rows)
      for (auto c : l.cols) out.push_back(w.values()[r * cols + c]);
  }
  return out;
}

std::map<std::string, Tensor<double>> scatter_subset(const Model<double>& model, const ParamSubset& subset,
                                                     std::span<const double> values) {
  subset.validate(model);
  if (values.size() != subset.size())
    throw std::invalid_argument("scatter_subset: " + std::to_string(values.size()) + " values for a subset of " +
                                std::to_string(subset.size()));
  std::map<std::string, Tensor<double>> out;
  std::size_t k = 0;
  for (const auto& l : subset.layers) {
    Tensor<double> d(model.layer(l.layer).weight.shape());
    auto v = d.mutable_values();
    const std::size_t cols = d.dim(1);
    for (auto r : l.rows)
      for (auto c : l.cols) v[r * cols + c] = values[k++];
    out.emplace(l.layer, d);
  }
  return out;
}

GradientFn subset_gradient(const Model<double>& model, const ParamSubset& subset, const TokenBatch& tokens,
                           std::vector<std::int32_t> labels) {
  subset.validate(model);
  auto work = std::make_shared<Model<double>>(model.clone());
  return [work, subset, tokens, labels = std::move(labels)](std::span<const double> theta) {
    if (theta.size() != subset.size())
      throw std::invalid_argument("subset gradient: point has " + std::to_string(theta.size()) + " entries, expected " +
                                  std::to_string(subset.size()));
    std::size_t k = 0;
    for (const auto& l : subset.layers) {
      auto v = work->layer(l.layer).weight.mutable_values();
      const std::size_t cols = work->layer(l.layer).weight.dim(1);
      for (auto r : l.rows)
        for (auto c : l.cols) v[r * cols + c] = theta[k++];
    }
    Tape<double> tape;
    const auto bound = work->bind(tape);
    auto grads = tape.backward(task_loss(bound, tokens, labels));
    std::vector<double> out;
    out.reserve(theta.size());
    for (const auto& l : subset.layers) {
      const auto& w = bound.layer(l.layer).weight;
      const auto g = grads.of(w).values();
      const std::size_t cols = w.dim(1);
      for (auto r : l.rows)
        for (auto c : l.cols) out.push_back(g[r * cols + c]);
    }
    return out;
  };
}

double task_loss_delta(const Model<double>& model, const std::map<std::string, Tensor<double>>& delta,
                       const TokenBatch& tokens, std::span<const std::int32_t> labels) {
  WeightOverride<double> shifted;
  for (const auto& [name, d] : delta) {
    const auto& w = model.layer(name).weight;
    if (d.shape() != w.shape())
      throw ShapeError("task_loss_delta: delta for " + name + " is " + to_string(d.shape()) + ", weight is " +
                       to_string(w.shape()));
    shifted.emplace(name, ops::add(w, d));
  }
  const double base = task_loss(model, tokens, labels).item();
  const double moved = task_loss(model, tokens, labels, shifted).item();
  return moved - base;
}

std::vector<KronSample> layer_kron_samples(const Model<double>& model, const LayerSubset& subset,
                                           std::span<const Sample> samples) {
  ParamSubset{{subset}}.validate(model);
  if (samples.empty()) throw std::invalid_argument("layer_kron_samples: no samples");
  auto shared = std::make_shared<const Model<double>>(model);
  const std::size_t out = model.layer(subset.layer).weight.dim(0);
  std::vector<KronSample> result;
  for (const auto& sample : samples) {
    const std::span<const Sample> one(&sample, 1);
    TokenBatch tokens = stack_inputs(one);
    std::vector<std::int32_t> labels = stack_labels(one);
    const std::size_t seq = tokens.seq;

    ForwardTaps<double> taps;
    taps.capture_inputs.insert(subset.layer);
    full_forward(model, tokens, {}, &taps);
    const auto& x = taps.captured.at(subset.layer);
    const std::size_t in = x.dim(-1);

    KronSample ks;
    ks.positions = seq;
    for (std::size_t t = 0; t < seq; ++t)
      for (auto c : subset.cols) ks.inputs.push_back(x.values()[t * in + c]);
    ks.preact_gradient = [shared, subset, tokens, labels, seq, out](std::span<const double> delta) {
      const std::size_t k = subset.rows.size();
      if (delta.size() != seq * k) throw std::invalid_argument("preactivation gradient: wrong offset length");
      Tensor<double> offset({1, seq, out});
      auto ov = offset.mutable_values();
      for (std::size_t t = 0; t < seq; ++t)
        for (std::size_t a = 0; a < k; ++a) ov[t * out + subset.rows[a]] = delta[t * k + a];
      Tape<double> tape;
      ForwardTaps<double> probe;
      auto leaf = tape.watch(offset);
      probe.preact_offsets.emplace(subset.layer, leaf);
      auto grads = tape.backward(task_loss(*shared, tokens, labels, {}, &probe));
      const auto g = grads.of(leaf).values();
      std::vector<double> result(seq * k);
      for (std::size_t t = 0; t < seq; ++t)
        for (std::size_t a = 0; a < k; ++a) result[t * k + a] = g[t * out + subset.rows[a]];
      return result;
    };
    result.push_back(std::move(ks));
  }
  return result;
}

DenseMatrix layer_inputs(const Model<double>& model, const std::string& layer, std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("layer_inputs: no samples");
  model.layer(layer);
  ForwardTaps<double> taps;
  taps.capture_inputs.insert(layer);
  full_forward(model, stack_inputs(samples), {}, &taps);
  const auto& x = taps.captured.at(layer);
  const std::size_t in = x.dim(-1);
  DenseMatrix out(x.size() / in, in);
  auto v = x.values();
  std::copy(v.begin(), v.end(), out.data.begin());
  return out;
}

namespace {

double subset_local_objective(const ParamSubset& subset, std::span<const double> dw,
                              const std::map<std::string, DenseMatrix>& inputs) {
  double total = 0;
  std::size_t k = 0;
  for (const auto& l : subset.layers) {
    DenseMatrix d(l.rows.size(), l.cols.size());
    for (double& v : d.data) v = dw[k++];
    const DenseMatrix& x = inputs.at(l.layer);
    std::vector<std::size_t> all(x.rows);
    std::iota(all.begin(), all.end(), 0);
    total += local_objective(d, x.select(all, l.cols));
  }
  return total;
}

}  // namespace

CurvatureReport analyze_curvature(const Model<double>& model, std::span<const Sample> samples,
                                  const CurvatureOptions& options,
                                  const std::map<std::string, Tensor<double>>* quant_delta) {
  const ParamSubset& subset = options.subset;
  subset.validate(model);
  if (samples.empty()) throw std::invalid_argument("analyze_curvature: no samples");
  const TokenBatch tokens = stack_inputs(samples);
  const std::vector<std::int32_t> labels = stack_labels(samples);

  CurvatureReport report;
  const auto grad = subset_gradient(model, subset, tokens, labels);
  const auto theta = gather_subset(model, subset);
  auto checked = exact_hessian_fd_checked(grad, theta);
  report.hessian = std::move(checked.hessian);
  report.halving_change = checked.halving_change;
  report.symmetry_residual = symmetry_residual(report.hessian);
  report.partition = subset.partition();
  for (const auto& l : subset.layers) {
    report.partition_names.push_back(l.layer);
    for (auto r : l.rows)
      for (auto c : l.cols)
        report.parameter_names.push_back(l.layer + "[" + std::to_string(r) + "," + std::to_string(c) + "]");
  }
  report.block_diag_error = block_diag_error(report.hessian, report.partition);

  const auto& first = subset.layers.front();
  report.kron_layer = first.layer;
  const auto ks = layer_kron_samples(model, first, samples);
  const auto kh = kron_hessian(ks, first.rows.size(), first.cols.size());
  std::vector<std::size_t> idx(first.size());
  std::iota(idx.begin(), idx.end(), 0);
  report.kron_error = relative_frobenius_error(kh, report.hessian.select(idx, idx));

  std::map<std::string, DenseMatrix> inputs;
  for (const auto& l : subset.layers) inputs.emplace(l.layer, layer_inputs(model, l.layer, samples));
  const auto g0 = grad(theta);

  auto add_sample = [&](std::string description, const std::vector<double>& dw) {
    ObjectiveSample s;
    s.description = std::move(description);
    s.task_delta = task_loss_delta(model, scatter_subset(model, subset, dw), tokens, labels);
    s.first_order = dot(g0, dw);
    s.quadratic = taylor_quadratic(dw, report.hessian);
    s.second_order = s.first_order + 0.5 * s.quadratic;
    s.local = subset_local_objective(subset, dw, inputs);
    report.objective_samples.push_back(std::move(s));
  };

  for (std::size_t d = 0; d < options.directions; ++d) {
    Rng rng(derive_seed(options.seed, {0x6469726563ULL, d}));
    std::vector<double> dw(subset.size());
    for (double& v : dw) v = rng.normal();
    const double norm = std::sqrt(dot(dw, dw));
    for (double& v : dw) v *= options.direction_norm / norm;
    add_sample("random direction " + std::to_string(d), dw);
  }
  if (quant_delta) {
    std::vector<double> dw;
    for (const auto& l : subset.layers) {
      auto it = quant_delta->find(l.layer);
      if (it == quant_delta->end()) throw std::invalid_argument("analyze_curvature: no quantization delta for " + l.layer);
      const auto v = it->second.values();
      const std::size_t cols = it->second.dim(1);
      for (auto r : l.rows)
        for (auto c : l.cols) dw.push_back(v[r * cols + c]);
    }
    add_sample("quantization delta", dw);
  }
  return report;
}

nlohmann::json to_json(const CurvatureReport& report) {
  nlohmann::json j;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < report.hessian.rows; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < report.hessian.cols; ++c) row.push_back(report.hessian(r, c));
    rows.push_back(std::move(row));
  }
  j["hessian"] = std::move(rows);
  j["parameters"] = report.parameter_names;
  nlohmann::json parts = nlohmann::json::array();
  for (std::size_t i = 0; i < report.partition.size(); ++i)
    parts.push_back({{"name", report.partition_names.at(i)},
                     {"begin", report.partition[i].first},
                     {"end", report.partition[i].second}});
  j["partition"] = std::move(parts);
  j["symmetry_residual"] = report.symmetry_residual;
  j["halving_change"] = report.halving_change;
  j["block_diag_error"] = report.block_diag_error;
  j["kron_layer"] = report.kron_layer;
  j["kron_error"] = report.kron_error;
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : report.objective_samples)
    samples.push_back({{"description", s.description},
                       {"task_loss_delta", s.task_delta},
                       {"first_order", s.first_order},
                       {"quadratic", s.quadratic},
                       {"second_order", s.second_order},
                       {"local_objective", s.local}});
  j["objective_samples"] = std::move(samples);
  return j;
}

}  // namespace qlab
