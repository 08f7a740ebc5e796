#include "doctest.h"

#include <cstring>
#include <vector>

#include "qlab/kernels.hpp"
#include "qlab/rng.hpp"

using namespace qlab;

namespace {

template <typename T>
std::vector<T> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return v;
}

template <typename T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace

TEST_CASE_TEMPLATE("serial gemm matches a naive triple loop", T, float, double) {
  const std::size_t m = 7, n = 5, k = 9;
  const auto a = random_values<T>(m * k, 1), b = random_values<T>(k * n, 2);
  std::vector<T> c(m * n);
  kernels::serial::gemm_nn(m, n, k, a.data(), b.data(), c.data(), false);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double ref = 0;
      for (std::size_t p = 0; p < k; ++p) ref += double(a[i * k + p]) * double(b[p * n + j]);
      CHECK(c[i * n + j] == doctest::Approx(ref).epsilon(1e-5));
    }
}

TEST_CASE_TEMPLATE("transposed gemm variants agree with gemm_nn on transposed operands", T, float, double) {
  const std::size_t m = 6, n = 4, k = 5;
  const auto a = random_values<T>(m * k, 3), b = random_values<T>(k * n, 4);
  std::vector<T> at(k * m), bt(n * k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  std::vector<T> nn(m * n), tn(m * n), nt(m * n);
  kernels::serial::gemm_nn(m, n, k, a.data(), b.data(), nn.data(), false);
  kernels::serial::gemm_tn(m, n, k, at.data(), b.data(), tn.data(), false);
  kernels::serial::gemm_nt(m, n, k, a.data(), bt.data(), nt.data(), false);
  for (std::size_t i = 0; i < m * n; ++i) {
    CHECK(tn[i] == doctest::Approx(nn[i]).epsilon(1e-5));
    CHECK(nt[i] == doctest::Approx(nn[i]).epsilon(1e-5));
  }
}

TEST_CASE("accumulate adds into the destination") {
  const auto a = random_values<double>(6, 5), b = random_values<double>(6, 6);
  std::vector<double> once(4), twice(4);
  kernels::serial::gemm_nn(2, 2, 3, a.data(), b.data(), once.data(), false);
  kernels::serial::gemm_nn(2, 2, 3, a.data(), b.data(), twice.data(), false);
  kernels::serial::gemm_nn(2, 2, 3, a.data(), b.data(), twice.data(), true);
  for (std::size_t i = 0; i < 4; ++i) CHECK(twice[i] == doctest::Approx(2 * once[i]));
}

TEST_CASE_TEMPLATE("parallel kernels are bit-identical to the serial reference", T, float, double) {
  for (std::size_t trial = 0; trial < 4; ++trial) {
    const std::size_t m = 3 + 11 * trial, n = 2 + 7 * trial, k = 1 + 13 * trial;
    const auto a = random_values<T>(m * k, 10 + trial), b = random_values<T>(k * n, 20 + trial);
    const auto bt = random_values<T>(n * k, 30 + trial), at = random_values<T>(k * m, 40 + trial);
    for (bool acc : {false, true}) {
      auto s = random_values<T>(m * n, 50), p = s;
      kernels::serial::gemm_nn(m, n, k, a.data(), b.data(), s.data(), acc);
      kernels::parallel::gemm_nn(m, n, k, a.data(), b.data(), p.data(), acc);
      CHECK(bitwise_equal(s, p));
      kernels::serial::gemm_tn(m, n, k, at.data(), b.data(), s.data(), acc);
      kernels::parallel::gemm_tn(m, n, k, at.data(), b.data(), p.data(), acc);
      CHECK(bitwise_equal(s, p));
      kernels::serial::gemm_nt(m, n, k, a.data(), bt.data(), s.data(), acc);
      kernels::parallel::gemm_nt(m, n, k, a.data(), bt.data(), p.data(), acc);
      CHECK(bitwise_equal(s, p));
    }

    const std::size_t cols = n, rows = cols * (trial + 1);
    const auto x = random_values<T>(rows * cols, 60 + trial);
    for (bool causal : {false, true}) {
      std::vector<T> ys(rows * cols), yp(rows * cols);
      kernels::serial::softmax_rows(rows, cols, causal, x.data(), ys.data());
      kernels::parallel::softmax_rows(rows, cols, causal, x.data(), yp.data());
      CHECK(bitwise_equal(ys, yp));
    }

    const auto g = random_values<T>(cols, 70), bias = random_values<T>(cols, 71);
    std::vector<T> ys(rows * cols), yp(rows * cols), ms(rows), mp(rows), rs(rows), rp(rows);
    kernels::serial::layernorm_rows(rows, cols, T(1e-5), x.data(), g.data(), bias.data(), ys.data(), ms.data(),
                                    rs.data());
    kernels::parallel::layernorm_rows(rows, cols, T(1e-5), x.data(), g.data(), bias.data(), yp.data(), mp.data(),
                                      rp.data());
    CHECK(bitwise_equal(ys, yp));
    CHECK(bitwise_equal(ms, mp));
    CHECK(bitwise_equal(rs, rp));
  }
}

TEST_CASE("layernorm rows have zero mean and unit variance before the affine map") {
  const std::size_t rows = 3, cols = 16;
  const auto x = random_values<double>(rows * cols, 80);
  std::vector<double> g(cols, 1.0), b(cols, 0.0), y(rows * cols), mean(rows), rstd(rows);
  kernels::serial::layernorm_rows(rows, cols, 0.0, x.data(), g.data(), b.data(), y.data(), mean.data(), rstd.data());
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0, sq = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      s += y[r * cols + c];
      sq += y[r * cols + c] * y[r * cols + c];
    }
    CHECK(s / cols == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(sq / cols == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("thread count is positive") { CHECK(kernels::thread_count() >= 1); }
