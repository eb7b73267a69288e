#pragma once

#include <cstddef>

// Dense row-major matrix kernels. Every kernel exists twice: a serial
// reference and an OpenMP version that splits output rows across threads.
// Both call the same per-row body, so their results are bitwise identical
// for any thread count.
namespace echo::kernels {

namespace serial {
// C[n x m] (+)= A[n x k] * B[k x m]
template <class T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate);
// C[n x m] (+)= A[n x k] * B[m x k]^T
template <class T>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate);
// C[k x m] += A[n x k]^T * B[n x m]
template <class T>
void gemm_tn_acc(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c);
// Row-wise softmax of an r x c block; entries at or below the masked
// sentinel get probability 0. Returns false if a row has no finite entry.
template <class T>
bool softmax_rows(std::size_t r, std::size_t c, const T* x, T* y);
}  // namespace serial

namespace omp {
template <class T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate);
template <class T>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate);
template <class T>
void gemm_tn_acc(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c);
template <class T>
bool softmax_rows(std::size_t r, std::size_t c, const T* x, T* y);
}  // namespace omp

// Work (multiply-adds) below which the dispatching entry points stay serial.
inline constexpr std::size_t kParallelThreshold = 1u << 16;

template <class T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate) {
  if (n > 1 && n * k * m >= kParallelThreshold)
    omp::gemm_nn(n, k, m, a, b, c, accumulate);
  else
    serial::gemm_nn(n, k, m, a, b, c, accumulate);
}

template <class T>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate) {
  if (n > 1 && n * k * m >= kParallelThreshold)
    omp::gemm_nt(n, k, m, a, b, c, accumulate);
  else
    serial::gemm_nt(n, k, m, a, b, c, accumulate);
}

template <class T>
void gemm_tn_acc(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  if (k > 1 && n * k * m >= kParallelThreshold)
    omp::gemm_tn_acc(n, k, m, a, b, c);
  else
    serial::gemm_tn_acc(n, k, m, a, b, c);
}

template <class T>
bool softmax_rows(std::size_t r, std::size_t c, const T* x, T* y) {
  if (r > 1 && r * c >= kParallelThreshold) return omp::softmax_rows(r, c, x, y);
  return serial::softmax_rows(r, c, x, y);
}

// Value treated as -infinity. Exact -inf in 64-bit; a large finite
// sentinel in 32-bit keeps softmax backward free of NaN.
template <class T>
constexpr T masked_value();
template <>
constexpr double masked_value<double>() {
  return -__builtin_huge_val();
}
template <>
constexpr float masked_value<float>() {
  return -1e30f;
}

template <class T>
constexpr bool is_masked(T v) {
  return v <= T(-1e29);
}

}  // namespace echo::kernels
