#pragma once

#include <cstddef>
#include <span>

// Dense kernels behind the differentiable ops. Every kernel exists twice:
// `serial` is the plain reference loop nest, `parallel` distributes
// independent output rows over OpenMP threads. Both call the same per-row
// routine, so each output element is accumulated in the same order and the
// two variants agree bit for bit regardless of thread count.
namespace qlab::kernels {

namespace serial {

/// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);
/// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);
/// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);

/// Row softmax. With `causal`, rows are grouped into square [cols x cols]
/// matrices and entry j of local row i is masked out when j > i.
template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, bool causal, const T* x, T* y);

/// Row layer norm; writes the per-row mean and reciprocal std for backward.
template <typename T>
void layernorm_rows(std::size_t rows, std::size_t cols, T eps, const T* x, const T* gain, const T* bias, T* y,
                    T* mean, T* rstd);

}  // namespace serial

namespace parallel {

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);
template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, bool causal, const T* x, T* y);
template <typename T>
void layernorm_rows(std::size_t rows, std::size_t cols, T eps, const T* x, const T* gain, const T* bias, T* y,
                    T* mean, T* rstd);

}  // namespace parallel

/// Number of worker threads the parallel kernels use (1 without OpenMP).
int thread_count();

/// Keeps freed heap memory mapped instead of returning it to the OS. Autodiff
/// graphs allocate and drop many large buffers per step, and without this
/// most of the time goes to page faults. No-op outside glibc.
void retain_freed_memory();

}  // namespace qlab::kernels
