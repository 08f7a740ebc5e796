#include "qlab/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#ifdef QLAB_HAVE_OPENMP
#include <omp.h>
#endif
#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace qlab::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

template <typename T>
inline T madd(T a, T b, T c) {
#ifdef __FMA__
  return std::fma(a, b, c);
#else
  return a * b + c;
#endif
}

// Register tile of the gemm kernels: kTileRows rows of C by kTileCols<T>
// columns are accumulated in locals while p runs over the whole inner
// dimension. Every C element still sees its k products added in order
// p = 0, 1, ..., k-1 with one fused multiply-add each, so the tile shape
// never changes the result; edge elements go through the same loop with a
// narrower tile.
constexpr std::size_t kTileRows = 4;
template <typename T>
constexpr std::size_t kTileCols = 64 / sizeof(T);

// A is [M, K] (nn) or [K, M] (tn); `a_at(i, p)` hides the layout.
template <typename T, std::size_t R, std::size_t W, typename AAt>
inline void gemm_tile(std::size_t i0, std::size_t j0, std::size_t n, std::size_t k, AAt a_at, const T* __restrict b,
                      T* __restrict c, bool accumulate) {
#if defined(__AVX2__) && defined(__FMA__)
  // Same arithmetic as the portable loop below, spelled with 256-bit FMA
  // intrinsics because the compiler does not keep the tile in registers.
  if constexpr (std::is_same_v<T, float>) {
    constexpr std::size_t V = W / 8;
    __m256 acc[R][V];
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t v = 0; v < V; ++v)
        acc[r][v] = accumulate ? _mm256_loadu_ps(c + (i0 + r) * n + j0 + 8 * v) : _mm256_setzero_ps();
    for (std::size_t p = 0; p < k; ++p) {
      const float* bp = b + p * n + j0;
      __m256 bv[V];
      for (std::size_t v = 0; v < V; ++v) bv[v] = _mm256_loadu_ps(bp + 8 * v);
      for (std::size_t r = 0; r < R; ++r) {
        const __m256 ap = _mm256_set1_ps(a_at(i0 + r, p));
        for (std::size_t v = 0; v < V; ++v) acc[r][v] = _mm256_fmadd_ps(ap, bv[v], acc[r][v]);
      }
    }
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t v = 0; v < V; ++v) _mm256_storeu_ps(c + (i0 + r) * n + j0 + 8 * v, acc[r][v]);
    return;
  } else if constexpr (std::is_same_v<T, double>) {
    constexpr std::size_t V = W / 4;
    __m256d acc[R][V];
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t v = 0; v < V; ++v)
        acc[r][v] = accumulate ? _mm256_loadu_pd(c + (i0 + r) * n + j0 + 4 * v) : _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n + j0;
      __m256d bv[V];
      for (std::size_t v = 0; v < V; ++v) bv[v] = _mm256_loadu_pd(bp + 4 * v);
      for (std::size_t r = 0; r < R; ++r) {
        const __m256d ap = _mm256_set1_pd(a_at(i0 + r, p));
        for (std::size_t v = 0; v < V; ++v) acc[r][v] = _mm256_fmadd_pd(ap, bv[v], acc[r][v]);
      }
    }
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t v = 0; v < V; ++v) _mm256_storeu_pd(c + (i0 + r) * n + j0 + 4 * v, acc[r][v]);
    return;
  }
#endif
  T acc[R][W];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t w = 0; w < W; ++w) acc[r][w] = accumulate ? c[(i0 + r) * n + j0 + w] : T{0};
  for (std::size_t p = 0; p < k; ++p) {
    const T* bp = b + p * n + j0;
    for (std::size_t r = 0; r < R; ++r) {
      const T ap = a_at(i0 + r, p);
      for (std::size_t w = 0; w < W; ++w) acc[r][w] = madd(ap, bp[w], acc[r][w]);
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t w = 0; w < W; ++w) c[(i0 + r) * n + j0 + w] = acc[r][w];
}

// Scalar path for ragged edges; same per-element order as the tiles.
template <typename T, typename AAt>
inline void gemm_edge(std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1, std::size_t n, std::size_t k,
                      AAt a_at, const T* b, T* c, bool accumulate) {
  for (std::size_t i = i0; i < i1; ++i)
    for (std::size_t j = j0; j < j1; ++j) {
      T acc = accumulate ? c[i * n + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) acc = madd(a_at(i, p), b[p * n + j], acc);
      c[i * n + j] = acc;
    }
}

// Rows [i0, i1) of C; i1 - i0 is kTileRows except for the last band.
template <typename T, typename AAt>
inline void gemm_band(std::size_t i0, std::size_t i1, std::size_t n, std::size_t k, AAt a_at, const T* b, T* c,
                      bool accumulate) {
  constexpr std::size_t W = kTileCols<T>;
  const std::size_t full = n - n % W;
  if (i1 - i0 == kTileRows) {
    for (std::size_t j = 0; j < full; j += W) gemm_tile<T, kTileRows, W>(i0, j, n, k, a_at, b, c, accumulate);
  } else {
    for (std::size_t i = i0; i < i1; ++i)
      for (std::size_t j = 0; j < full; j += W) gemm_tile<T, 1, W>(i, j, n, k, a_at, b, c, accumulate);
  }
  gemm_edge(i0, i1, full, n, n, k, a_at, b, c, accumulate);
}

template <typename T>
inline void gemm_nn_band(std::size_t band, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                         bool accumulate) {
  const std::size_t i0 = band * kTileRows, i1 = std::min(m, i0 + kTileRows);
  gemm_band(i0, i1, n, k, [a, k](std::size_t i, std::size_t p) { return a[i * k + p]; }, b, c, accumulate);
}

template <typename T>
inline void gemm_tn_band(std::size_t band, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                         bool accumulate) {
  const std::size_t i0 = band * kTileRows, i1 = std::min(m, i0 + kTileRows);
  gemm_band(i0, i1, n, k, [a, m](std::size_t i, std::size_t p) { return a[p * m + i]; }, b, c, accumulate);
}

inline std::size_t bands(std::size_t m) { return (m + kTileRows - 1) / kTileRows; }

template <typename T>
std::vector<T> transposed(std::size_t rows, std::size_t cols, const T* x) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  return out;
}

template <typename T>
inline void softmax_row(std::size_t r, std::size_t cols, bool causal, const T* x, T* y) {
  const T* xr = x + r * cols;
  T* yr = y + r * cols;
  std::size_t live = causal ? (r % cols) + 1 : cols;
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < live; ++j) mx = std::max(mx, xr[j]);
  T sum = 0;
  for (std::size_t j = 0; j < live; ++j) {
    yr[j] = std::exp(xr[j] - mx);
    sum += yr[j];
  }
  T inv = T{1} / sum;
  for (std::size_t j = 0; j < live; ++j) yr[j] *= inv;
  for (std::size_t j = live; j < cols; ++j) yr[j] = 0;
}

template <typename T>
inline void layernorm_row(std::size_t r, std::size_t cols, T eps, const T* x, const T* gain, const T* bias, T* y,
                          T* mean, T* rstd) {
  const T* xr = x + r * cols;
  T* yr = y + r * cols;
  T mu = 0;
  for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
  mu /= static_cast<T>(cols);
  T var = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    T d = xr[j] - mu;
    var += d * d;
  }
  var /= static_cast<T>(cols);
  T rs = T{1} / std::sqrt(var + eps);
  for (std::size_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * rs * gain[j] + bias[j];
  mean[r] = mu;
  rstd[r] = rs;
}

}  // namespace

namespace serial {

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t band = 0; band < bands(m); ++band) gemm_nn_band(band, m, n, k, a, b, c, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t band = 0; band < bands(m); ++band) gemm_tn_band(band, m, n, k, a, b, c, accumulate);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  auto bt = transposed(n, k, b);
  gemm_nn(m, n, k, a, bt.data(), c, accumulate);
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, bool causal, const T* x, T* y) {
  for (std::size_t r = 0; r < rows; ++r) softmax_row(r, cols, causal, x, y);
}

template <typename T>
void layernorm_rows(std::size_t rows, std::size_t cols, T eps, const T* x, const T* gain, const T* bias, T* y,
                    T* mean, T* rstd) {
  for (std::size_t r = 0; r < rows; ++r) layernorm_row(r, cols, eps, x, gain, bias, y, mean, rstd);
}

}  // namespace serial

namespace parallel {

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  const auto count = static_cast<std::ptrdiff_t>(bands(m));
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelWork)
  for (std::ptrdiff_t band = 0; band < count; ++band)
    gemm_nn_band(static_cast<std::size_t>(band), m, n, k, a, b, c, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  const auto count = static_cast<std::ptrdiff_t>(bands(m));
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelWork)
  for (std::ptrdiff_t band = 0; band < count; ++band)
    gemm_tn_band(static_cast<std::size_t>(band), m, n, k, a, b, c, accumulate);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  auto bt = transposed(n, k, b);
  gemm_nn(m, n, k, a, bt.data(), c, accumulate);
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, bool causal, const T* x, T* y) {
  const auto count = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (std::ptrdiff_t r = 0; r < count; ++r) softmax_row(static_cast<std::size_t>(r), cols, causal, x, y);
}

template <typename T>
void layernorm_rows(std::size_t rows, std::size_t cols, T eps, const T* x, const T* gain, const T* bias, T* y,
                    T* mean, T* rstd) {
  const auto count = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (std::ptrdiff_t r = 0; r < count; ++r)
    layernorm_row(static_cast<std::size_t>(r), cols, eps, x, gain, bias, y, mean, rstd);
}

}  // namespace parallel

int thread_count() {
#ifdef QLAB_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

#define QLAB_INSTANTIATE_KERNELS(NS, T)                                                                       \
  template void NS::gemm_nn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);          \
  template void NS::gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);          \
  template void NS::gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);          \
  template void NS::softmax_rows<T>(std::size_t, std::size_t, bool, const T*, T*);                            \
  template void NS::layernorm_rows<T>(std::size_t, std::size_t, T, const T*, const T*, const T*, T*, T*, T*);

QLAB_INSTANTIATE_KERNELS(serial, float)
QLAB_INSTANTIATE_KERNELS(serial, double)
QLAB_INSTANTIATE_KERNELS(parallel, float)
QLAB_INSTANTIATE_KERNELS(parallel, double)

}  // namespace qlab::kernels
