#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "doctest.h"
#include "echo/common.hpp"
#include "echo/gradcheck.hpp"
#include "echo/kernels.hpp"
#include "echo/ops.hpp"

using namespace echo;
using namespace echo::nn;

namespace {

Tensor<double> random_tensor(Shape s, unsigned seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.data) v = u(rng);
  return t;
}

using Build = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Reduces op output to a scalar with random row and column weights, then
// compares reverse mode against central differences on every input entry.
double op_gradient_error(const std::vector<Shape>& shapes, const Build& build, unsigned seed = 1) {
  std::vector<double> x0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto t = random_tensor(shapes[i], seed + static_cast<unsigned>(i));
    x0.insert(x0.end(), t.data.begin(), t.data.end());
  }
  const Objective f = [&](std::span<const double> x, std::vector<double>* grad) {
    Tape<double> t;
    std::vector<Var> in;
    std::size_t off = 0;
    for (const auto& s : shapes) {
      in.push_back(t.variable(Tensor<double>(s, std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(off),
                                                                    x.begin() + static_cast<std::ptrdiff_t>(off + s.size())))));
      off += s.size();
    }
    const Var out = build(t, in);
    const Shape so = t.shape(out);
    const Var rw = t.constant(random_tensor(Shape{so.rows(), 1}, 101));
    const Var cw = t.constant(random_tensor(Shape{so.last(), 1}, 102));
    const Var loss = sum(t, linear(t, mul_rows(t, out, rw), cw));
    if (grad) {
      t.backward(loss);
      grad->clear();
      for (Var v : in) {
        auto g = t.grad(v);
        if (g.empty()) grad->insert(grad->end(), t.shape(v).size(), 0.0);
        else grad->insert(grad->end(), g.begin(), g.end());
      }
    }
    return t.value(loss)[0];
  };
  return gradient_check(f, x0, x0.size(), 3).max_rel_error;
}

}  // namespace

TEST_CASE("elementwise and linear ops have correct gradients") {
  CHECK(op_gradient_error({{4, 3}, {3, 5}}, [](auto& t, auto& v) { return linear(t, v[0], v[1]); }) < 1e-7);
  CHECK(op_gradient_error({{2, 4, 3}, {3, 5}, {5}},
                          [](auto& t, auto& v) { return linear(t, v[0], v[1], v[2]); }) < 1e-7);
  CHECK(op_gradient_error({{4, 3}, {5, 3}}, [](auto& t, auto& v) { return matmul_nt(t, v[0], v[1]); }) < 1e-7);
  CHECK(op_gradient_error({{4, 3}, {4, 3}}, [](auto& t, auto& v) { return add(t, v[0], v[1]); }) < 1e-7);
  CHECK(op_gradient_error({{6, 3}, {3}}, [](auto& t, auto& v) { return add_row(t, v[0], v[1], 3, 1); }) < 1e-7);
  CHECK(op_gradient_error({{4, 3}}, [](auto& t, auto& v) { return scale(t, v[0], 2.5); }) < 1e-7);
  CHECK(op_gradient_error({{4, 3}}, [](auto& t, auto& v) { return relu(t, v[0]); }) < 1e-7);
  CHECK(op_gradient_error({{4, 3}}, [](auto& t, auto& v) { return tanh(t, v[0]); }) < 1e-7);
  CHECK(op_gradient_error({{4, 3}}, [](auto& t, auto& v) { return sigmoid(t, v[0]); }) < 1e-7);
  CHECK(op_gradient_error({{4, 3}, {4, 1}}, [](auto& t, auto& v) { return mul_rows(t, v[0], v[1]); }) < 1e-7);
  CHECK(op_gradient_error({{2, 2, 3}, {2, 2, 1}}, [](auto& t, auto& v) { return concat(t, v[0], v[1]); }) < 1e-7);
  CHECK(op_gradient_error({{3, 5}}, [](auto& t, auto& v) { return softmax(t, v[0]); }) < 1e-7);
  CHECK(op_gradient_error({{3, 5}}, [](auto& t, auto& v) { return mean(t, v[0]); }) < 1e-7);
  CHECK(op_gradient_error({{5, 3}}, [](auto& t, auto& v) { return gather_rows(t, v[0], {4, 0, 4, 2}); }) < 1e-7);
}

TEST_CASE("masked softmax and log-probability gradients") {
  const std::vector<unsigned char> mask = {1, 0, 1, 1, 0, 1};
  CHECK(op_gradient_error({{2, 3}}, [&](auto& t, auto& v) { return softmax(t, masked_fill(t, v[0], mask)); }) < 1e-7);
  CHECK(op_gradient_error({{2, 3}}, [&](auto& t, auto& v) {
          return log_prob_at(t, masked_fill(t, v[0], mask), 3);
        }) < 1e-7);
  CHECK(op_gradient_error({{1}, {1}, {1}}, [](auto& t, auto& v) {
          return weighted_sum<double>(t, {v[0], v[1], v[2]}, {0.5, -2.0, 3.0});
        }) < 1e-7);
}

TEST_CASE("batch norm gradients in both modes") {
  const auto rm = random_tensor(Shape{3}, 5), rv = random_tensor(Shape{3}, 6, 0.5, 2.0);
  CHECK(op_gradient_error({{2, 4, 3}, {3}, {3}}, [](auto& t, auto& v) {
          BatchNormMode<double> m;
          return batch_norm(t, v[0], v[1], v[2], m);
        }) < 1e-6);
  CHECK(op_gradient_error({{2, 4, 3}, {3}, {3}}, [&](auto& t, auto& v) {
          BatchNormMode<double> m;
          m.training = false;
          m.running_mean = rm.data.data();
          m.running_var = rv.data.data();
          return batch_norm(t, v[0], v[1], v[2], m);
        }) < 1e-7);
}

TEST_CASE("attention gradients with heads, batches and key masks") {
  CHECK(op_gradient_error({{3, 8}, {4, 8}, {4, 8}}, [](auto& t, auto& v) {
          return attention(t, v[0], v[1], v[2], 2);
        }) < 1e-6);
  const std::vector<unsigned char> mask = {1, 0, 1, 1, 1, 1, 0, 0};
  CHECK(op_gradient_error({{2, 3, 8}, {2, 4, 8}, {2, 4, 8}}, [&](auto& t, auto& v) {
          return attention(t, v[0], v[1], v[2], 4, &mask);
        }) < 1e-6);
}

TEST_CASE("attention forward matches a naive per-head computation") {
  const std::size_t B = 2, nq = 3, nk = 5, d = 8, h = 4, dh = d / h;
  const auto q = random_tensor(Shape{B, nq, d}, 11), k = random_tensor(Shape{B, nk, d}, 12),
             v = random_tensor(Shape{B, nk, d}, 13);
  const std::vector<unsigned char> mask = {1, 1, 0, 1, 1, 0, 1, 1, 1, 0};
  Tape<double> t(false);
  const auto out = t.value(attention(t, t.constant(q), t.constant(k), t.constant(v), h, &mask));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t hh = 0; hh < h; ++hh) {
        std::vector<double> w(nk, 0.0);
        double mx = -1e300, z = 0;
        for (std::size_t j = 0; j < nk; ++j) {
          if (!mask[b * nk + j]) continue;
          double s = 0;
          for (std::size_t c = 0; c < dh; ++c)
            s += q.data[(b * nq + i) * d + hh * dh + c] * k.data[(b * nk + j) * d + hh * dh + c];
          w[j] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, w[j]);
        }
        for (std::size_t j = 0; j < nk; ++j) {
          w[j] = mask[b * nk + j] ? std::exp(w[j] - mx) : 0.0;
          z += w[j];
        }
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j < nk; ++j) acc += w[j] / z * v.data[(b * nk + j) * d + hh * dh + c];
          CHECK(out[(b * nq + i) * d + hh * dh + c] == doctest::Approx(acc).epsilon(1e-12));
        }
      }
}

TEST_CASE("batch norm forward matches the textbook formula and reports statistics") {
  const auto x = random_tensor(Shape{3, 4, 2}, 21);
  Tape<double> t(false);
  std::vector<double> om, ov;
  BatchNormMode<double> m;
  m.observed_mean = &om;
  m.observed_var = &ov;
  const auto g = Tensor<double>(Shape{2}, {1.5, -0.5}), b = Tensor<double>(Shape{2}, {0.1, 0.2});
  const auto y = t.value(batch_norm(t, t.constant(x), t.constant(g), t.constant(b), m));
  for (std::size_t c = 0; c < 2; ++c) {
    double mu = 0, var = 0;
    for (std::size_t r = 0; r < 12; ++r) mu += x.data[r * 2 + c];
    mu /= 12;
    for (std::size_t r = 0; r < 12; ++r) var += (x.data[r * 2 + c] - mu) * (x.data[r * 2 + c] - mu);
    var /= 12;
    CHECK(om[c] == doctest::Approx(mu).epsilon(1e-14));
    CHECK(ov[c] == doctest::Approx(var).epsilon(1e-14));
    for (std::size_t r = 0; r < 12; ++r)
      CHECK(y[r * 2 + c] == doctest::Approx(g.data[c] * (x.data[r * 2 + c] - mu) / std::sqrt(var + 1e-5) + b.data[c]).epsilon(1e-12));
  }
}

TEST_CASE("log_prob_at equals the flat log-softmax") {
  Tape<double> t(false);
  const auto x = Tensor<double>(Shape{2, 2}, {0.3, -1.0, 2.0, 0.5});
  const double z = std::exp(0.3) + std::exp(-1.0) + std::exp(2.0) + std::exp(0.5);
  CHECK(t.value(log_prob_at(t, t.constant(x), 2))[0] == doctest::Approx(2.0 - std::log(z)).epsilon(1e-14));
}

TEST_CASE("error paths") {
  Tape<double> t;
  const Var a = t.constant(Tensor<double>(Shape{2, 3}));
  const Var b = t.constant(Tensor<double>(Shape{2, 4}));
  CHECK_THROWS_AS(add(t, a, b), ValidationError);
  CHECK_THROWS_AS(linear(t, a, b), ValidationError);
  CHECK_THROWS_AS(attention(t, a, a, a, 2), ValidationError);
  const std::vector<unsigned char> none(3, 0);
  CHECK_THROWS_AS(softmax(t, masked_fill(t, t.constant(Tensor<double>(Shape{1, 3})), none)), NumericError);
  const std::vector<unsigned char> hide(2, 0);
  const Var q = t.constant(Tensor<double>(Shape{1, 8}));
  const Var kv = t.constant(Tensor<double>(Shape{2, 8}));
  CHECK_THROWS_AS(attention(t, q, kv, kv, 8, &hide), NumericError);
  Tape<double> off(false);
  const Var c = off.constant(Tensor<double>(Shape{1}, {1.0}));
  CHECK_THROWS_AS(off.backward(c), NumericError);
}

TEST_CASE("gradients accumulate across uses and reset with zero_grad") {
  Tape<double> t;
  const Var x = t.variable(Tensor<double>(Shape{1, 2}, {1.0, 2.0}));
  const Var y = sum(t, add(t, x, x));
  t.backward(y);
  CHECK(t.grad(x)[0] == 2.0);
  CHECK(t.grad(x)[1] == 2.0);
  t.zero_grad();
  CHECK(t.grad(x).empty());
}

TEST_CASE("external leaves alias caller memory") {
  std::vector<double> w = {1.0, 2.0, 3.0};
  Tape<double> t;
  const Var v = t.external(Shape{1, 3}, w.data(), true);
  CHECK(t.data(v) == w.data());
  t.backward(sum(t, scale(t, v, 3.0)));
  CHECK(t.grad(v)[2] == 3.0);
}
