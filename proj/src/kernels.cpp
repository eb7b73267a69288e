#include "echo/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace echo::kernels {
namespace {

template <class T>
inline void nn_row(std::size_t i, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
                   bool accumulate) {
  T* out = c + i * m;
  if (!accumulate) std::fill(out, out + m, T(0));
  const T* arow = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const T s = arow[p];
    if (s == T(0)) continue;
    const T* brow = b + p * m;
#pragma omp simd
    for (std::size_t j = 0; j < m; ++j) out[j] += s * brow[j];
  }
}

template <class T>
inline void nt_row(std::size_t i, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
                   bool accumulate) {
  const T* arow = a + i * k;
  T* out = c + i * m;
  for (std::size_t j = 0; j < m; ++j) {
    const T* brow = b + j * k;
    T acc = 0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
    out[j] = accumulate ? out[j] + acc : acc;
  }
}

template <class T>
inline void tn_row(std::size_t p, std::size_t n, std::size_t k, std::size_t m, const T* a,
                   const T* b, T* c) {
  T* out = c + p * m;
  for (std::size_t i = 0; i < n; ++i) {
    const T s = a[i * k + p];
    if (s == T(0)) continue;
    const T* brow = b + i * m;
#pragma omp simd
    for (std::size_t j = 0; j < m; ++j) out[j] += s * brow[j];
  }
}

template <class T>
inline bool softmax_row(std::size_t c, const T* x, T* y) {
  T mx = masked_value<T>();
  bool any = false;
  for (std::size_t j = 0; j < c; ++j)
    if (!is_masked(x[j])) {
      mx = any ? std::max(mx, x[j]) : x[j];
      any = true;
    }
  if (!any) return false;
  double sum = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    const double e = is_masked(x[j]) ? 0.0 : std::exp(static_cast<double>(x[j] - mx));
    y[j] = static_cast<T>(e);
    sum += e;
  }
  for (std::size_t j = 0; j < c; ++j)
    y[j] = static_cast<T>(static_cast<double>(y[j]) / sum);
  return true;
}

}  // namespace

namespace serial {
template <class T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate) {
  for (std::size_t i = 0; i < n; ++i) nn_row(i, k, m, a, b, c, accumulate);
}
template <class T>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate) {
  for (std::size_t i = 0; i < n; ++i) nt_row(i, k, m, a, b, c, accumulate);
}
template <class T>
void gemm_tn_acc(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) tn_row(p, n, k, m, a, b, c);
}
template <class T>
bool softmax_rows(std::size_t r, std::size_t c, const T* x, T* y) {
  bool ok = true;
  for (std::size_t i = 0; i < r; ++i) ok = softmax_row(c, x + i * c, y + i * c) && ok;
  return ok;
}
}  // namespace serial

namespace omp {
template <class T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate) {
  const auto rows = static_cast<long>(n);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < rows; ++i) nn_row(static_cast<std::size_t>(i), k, m, a, b, c, accumulate);
}
template <class T>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate) {
  const auto rows = static_cast<long>(n);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < rows; ++i) nt_row(static_cast<std::size_t>(i), k, m, a, b, c, accumulate);
}
template <class T>
void gemm_tn_acc(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  const auto rows = static_cast<long>(k);
#pragma omp parallel for schedule(static)
  for (long p = 0; p < rows; ++p) tn_row(static_cast<std::size_t>(p), n, k, m, a, b, c);
}
template <class T>
bool softmax_rows(std::size_t r, std::size_t c, const T* x, T* y) {
  const auto rows = static_cast<long>(r);
  int bad = 0;
#pragma omp parallel for schedule(static) reduction(+ : bad)
  for (long i = 0; i < rows; ++i)
    bad += softmax_row(c, x + static_cast<std::size_t>(i) * c, y + static_cast<std::size_t>(i) * c)
               ? 0
               : 1;
  return bad == 0;
}
}  // namespace omp

#define ECHO_INSTANTIATE_KERNELS(NS, T)                                                          \
  template void NS::gemm_nn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*,   \
                               bool);                                                           \
  template void NS::gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*,   \
                               bool);                                                           \
  template void NS::gemm_tn_acc<T>(std::size_t, std::size_t, std::size_t, const T*, const T*,   \
                                   T*);                                                         \
  template bool NS::softmax_rows<T>(std::size_t, std::size_t, const T*, T*);

ECHO_INSTANTIATE_KERNELS(serial, float)
ECHO_INSTANTIATE_KERNELS(serial, double)
ECHO_INSTANTIATE_KERNELS(omp, float)
ECHO_INSTANTIATE_KERNELS(omp, double)

#undef ECHO_INSTANTIATE_KERNELS

}  // namespace echo::kernels
