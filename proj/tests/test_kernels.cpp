#include <omp.h>

#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "echo/kernels.hpp"

using namespace echo::kernels;

namespace {

template <class T>
std::vector<T> random_block(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

struct Dims {
  std::size_t n, k, m;
};

const Dims kShapes[] = {{1, 1, 1}, {3, 5, 7}, {17, 64, 33}, {128, 64, 256}, {257, 31, 65}};

}  // namespace

TEST_CASE("gemm kernels match a naive triple loop") {
  for (const auto& s : kShapes) {
    const auto a = random_block<double>(s.n * s.k, 1);
    const auto b = random_block<double>(s.k * s.m, 2);
    const auto bt = random_block<double>(s.m * s.k, 3);
    const auto g = random_block<double>(s.n * s.m, 4);
    std::vector<double> c(s.n * s.m), ct(s.n * s.m), tn(s.k * s.m, 0.5);
    serial::gemm_nn(s.n, s.k, s.m, a.data(), b.data(), c.data(), false);
    serial::gemm_nt(s.n, s.k, s.m, a.data(), bt.data(), ct.data(), false);
    serial::gemm_tn_acc(s.n, s.k, s.m, a.data(), g.data(), tn.data());
    for (std::size_t i = 0; i < s.n; ++i)
      for (std::size_t j = 0; j < s.m; ++j) {
        double nn = 0, nt = 0;
        for (std::size_t p = 0; p < s.k; ++p) {
          nn += a[i * s.k + p] * b[p * s.m + j];
          nt += a[i * s.k + p] * bt[j * s.k + p];
        }
        CHECK(c[i * s.m + j] == doctest::Approx(nn).epsilon(1e-12));
        CHECK(ct[i * s.m + j] == doctest::Approx(nt).epsilon(1e-12));
      }
    for (std::size_t p = 0; p < s.k; ++p)
      for (std::size_t j = 0; j < s.m; ++j) {
        double acc = 0.5;
        for (std::size_t i = 0; i < s.n; ++i) acc += a[i * s.k + p] * g[i * s.m + j];
        CHECK(tn[p * s.m + j] == doctest::Approx(acc).epsilon(1e-12));
      }
  }
}

TEST_CASE("accumulate adds onto the existing output") {
  const auto a = random_block<double>(6, 5), b = random_block<double>(6, 6);
  std::vector<double> c(4, 1.0), fresh(4);
  serial::gemm_nn<double>(2, 3, 2, a.data(), b.data(), c.data(), true);
  serial::gemm_nn<double>(2, 3, 2, a.data(), b.data(), fresh.data(), false);
  for (std::size_t i = 0; i < 4; ++i) CHECK(c[i] == doctest::Approx(fresh[i] + 1.0));
}

TEST_CASE_TEMPLATE("OpenMP kernels are bitwise identical to the serial reference", T, float, double) {
  for (int threads : {1, 2, 3, 4}) {
    omp_set_num_threads(threads);
    for (const auto& s : kShapes) {
      const auto a = random_block<T>(s.n * s.k, 7);
      const auto b = random_block<T>(s.k * s.m, 8);
      const auto g = random_block<T>(s.n * s.m, 9);
      std::vector<T> c1(s.n * s.m), c2(s.n * s.m), t1(s.k * s.m), t2(s.k * s.m);
      serial::gemm_nn(s.n, s.k, s.m, a.data(), b.data(), c1.data(), false);
      omp::gemm_nn(s.n, s.k, s.m, a.data(), b.data(), c2.data(), false);
      CHECK(c1 == c2);
      serial::gemm_nt(s.n, s.k, s.m, a.data(), b.data(), c1.data(), false);
      omp::gemm_nt(s.n, s.k, s.m, a.data(), b.data(), c2.data(), false);
      CHECK(c1 == c2);
      serial::gemm_tn_acc(s.n, s.k, s.m, a.data(), g.data(), t1.data());
      omp::gemm_tn_acc(s.n, s.k, s.m, a.data(), g.data(), t2.data());
      CHECK(t1 == t2);
      std::vector<T> y1(s.n * s.m), y2(s.n * s.m);
      serial::softmax_rows(s.n, s.m, g.data(), y1.data());
      omp::softmax_rows(s.n, s.m, g.data(), y2.data());
      CHECK(y1 == y2);
    }
  }
  omp_set_num_threads(1);
}

TEST_CASE_TEMPLATE("softmax rows ignore masked entries", T, float, double) {
  const T mv = masked_value<T>();
  const std::vector<T> x = {1, mv, 2, mv, mv, mv};
  std::vector<T> y(6);
  CHECK_FALSE(serial::softmax_rows<T>(2, 3, x.data(), y.data()));
  CHECK(serial::softmax_rows<T>(1, 3, x.data(), y.data()));
  const double e = std::exp(1.0);
  CHECK(static_cast<double>(y[0]) == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-6));
  CHECK(y[1] == T(0));
  CHECK(static_cast<double>(y[2]) == doctest::Approx(e / (1.0 + e)).epsilon(1e-6));
  CHECK(is_masked(mv));
  CHECK_FALSE(is_masked(T(-1e20)));
}
