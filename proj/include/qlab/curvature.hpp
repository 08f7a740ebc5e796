#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qlab/corpus.hpp"
#include "qlab/model.hpp"
#include "json.hpp"

namespace qlab {

/// Row-major dense matrix of doubles.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  static DenseMatrix identity(std::size_t n);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double frobenius() const;
  DenseMatrix transposed() const;
  /// Sub-matrix on the given row and column index lists.
  DenseMatrix select(std::span<const std::size_t> row_idx, std::span<const std::size_t> col_idx) const;
};

/// ||a - b||_F / ||b||_F.
double relative_frobenius_error(const DenseMatrix& a, const DenseMatrix& b);
/// ||H - H^T||_F / ||H||_F (0 for the zero matrix).
double symmetry_residual(const DenseMatrix& h);
/// Kronecker product: (a ⊗ b)[i*b.rows + k, j*b.cols + l] = a(i,j) * b(k,l).
DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b);

inline constexpr std::size_t kMaxHessianParams = 200;
inline constexpr double kFdStep = 1e-4;

/// Analytic gradient of a scalar objective at a point.
using GradientFn = std::function<std::vector<double>(std::span<const double>)>;

/// Gradient of a scalar graph built on a fresh tape from a watched parameter vector.
GradientFn tape_gradient(std::function<Tensor<double>(const Tensor<double>&)> objective);

/// Hessian by central differences of the gradient, (H + H^T) / 2.
DenseMatrix exact_hessian_fd(const GradientFn& grad, std::span<const double> theta, double step = kFdStep);

struct CheckedHessian {
  DenseMatrix hessian;  // at `step`
  /// Relative Frobenius change when the step is halved; small when both
  /// truncation and rounding error are under control.
  double halving_change = 0;
};
CheckedHessian exact_hessian_fd_checked(const GradientFn& grad, std::span<const double> theta, double step = kFdStep);

/// Half-open index ranges [begin, end) into a Hessian's rows.
using Partition = std::vector<std::pair<std::size_t, std::size_t>>;

/// ||H - blockdiag(H)||_F / ||H||_F; the ranges must cover 0..n-1 exactly once.
double block_diag_error(const DenseMatrix& h, const Partition& partition);

/// dw^T H dw.
double taylor_quadratic(std::span<const double> dw, const DenseMatrix& h);
/// g^T dw + dw^T H dw / 2: the full second-order prediction of a loss change.
double second_order_prediction(std::span<const double> grad, std::span<const double> dw, const DenseMatrix& h);

/// c * mean over rows x of `inputs` of ||dW x||^2, evaluated directly.
/// dw is [out, in]; inputs is [samples, in].
double local_objective(const DenseMatrix& dw, const DenseMatrix& inputs, double c = 1.0);
/// The same quantity as c * sum_o dw_o^T E[x x^T] dw_o.
double local_objective_quadratic(const DenseMatrix& dw, const DenseMatrix& inputs, double c = 1.0);

/// One calibration input of a linear layer z = W x applied at `positions`
/// positions (inputs is [positions, in]); preact_gradient returns dL/dz at
/// z + delta for a flat delta of size positions * out.
struct KronSample {
  std::vector<double> inputs;
  std::size_t positions = 1;
  GradientFn preact_gradient;
};

/// E[x x^T ⊗ d2L/dz2] over the samples, summed over position pairs, in
/// row-major weight order: entry ((o, i), (p, j)) is
/// sum_{t,t'} d2L/dz_{t,o}dz_{t',p} * x_{t,i} * x_{t',j}. With one position
/// this is kron(d2L/dz2, x x^T).
DenseMatrix kron_hessian(std::span<const KronSample> samples, std::size_t out_features, std::size_t in_features,
                         double step = kFdStep);

/// Weights (r, c) of one quantizable layer for r in rows, c in cols,
/// flattened row by row.
struct LayerSubset {
  std::string layer;
  std::vector<std::size_t> rows;
  std::vector<std::size_t> cols;

  std::size_t size() const { return rows.size() * cols.size(); }
};

/// Flat parameter vector made of several layer subsets, in order.
struct ParamSubset {
  std::vector<LayerSubset> layers;

  std::size_t size() const;
  /// One range per layer subset.
  Partition partition() const;
  void validate(const Model<double>& model) const;
};

std::vector<double> gather_subset(const Model<double>& model, const ParamSubset& subset);
/// Per-layer weight deltas that are zero outside the subset.
std::map<std::string, Tensor<double>> scatter_subset(const Model<double>& model, const ParamSubset& subset,
                                                     std::span<const double> values);

/// Gradient of the mean next-token loss on (tokens, labels) with respect to
/// the subset, at the point given to the returned function.
GradientFn subset_gradient(const Model<double>& model, const ParamSubset& subset, const TokenBatch& tokens,
                           std::vector<std::int32_t> labels);

/// mean L(w + dw) - mean L(w) on (tokens, labels); dw by layer name, each
/// shaped like that layer's weight.
double task_loss_delta(const Model<double>& model, const std::map<std::string, Tensor<double>>& delta,
                       const TokenBatch& tokens, std::span<const std::int32_t> labels);

/// Kronecker samples for rows/cols of one layer, one per calibration sample.
std::vector<KronSample> layer_kron_samples(const Model<double>& model, const LayerSubset& subset,
                                           std::span<const Sample> samples);
/// Inputs seen by a layer over all positions of all samples: [samples * seq, in].
DenseMatrix layer_inputs(const Model<double>& model, const std::string& layer, std::span<const Sample> samples);

struct ObjectiveSample {
  std::string description;
  double task_delta = 0;   // measured loss change
  double first_order = 0;  // g^T dw
  double quadratic = 0;    // dw^T H dw
  double second_order = 0; // g^T dw + dw^T H dw / 2
  double local = 0;        // sum over layers of E||dW x||^2
};

struct CurvatureReport {
  DenseMatrix hessian;
  std::vector<std::string> parameter_names;
  Partition partition;
  std::vector<std::string> partition_names;
  double symmetry_residual = 0;
  double halving_change = 0;
  double block_diag_error = 0;
  std::string kron_layer;
  double kron_error = 0;
  std::vector<ObjectiveSample> objective_samples;
};

nlohmann::json to_json(const CurvatureReport& report);

struct CurvatureOptions {
  ParamSubset subset;
  std::size_t directions = 3;
  double direction_norm = 0.05;
  std::uint64_t seed = 0;
};

/// Full analysis on a small parameter subset: exact Hessian, block-diagonal
/// error over the layer partition, Kronecker error on the first layer, and
/// objective values for random directions and (if given) quantization deltas.
CurvatureReport analyze_curvature(const Model<double>& model, std::span<const Sample> samples,
                                  const CurvatureOptions& options,
                                  const std::map<std::string, Tensor<double>>* quant_delta = nullptr);

}  // namespace qlab
