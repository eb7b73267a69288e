#include "echo/ops.hpp"

#include <algorithm>
#include <cmath>

#include "echo/common.hpp"
#include "echo/kernels.hpp"

namespace echo::nn {
namespace {

template <class T>
bool any_grad(const Tape<T>& t, std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (v.valid() && t.requires_grad(v)) return true;
  return false;
}

template <class T>
void require_same(const Tape<T>& t, Var a, Var b, const char* op) {
  if (!(t.shape(a) == t.shape(b)))
    throw ValidationError(std::string(op) + ": shape mismatch " + t.shape(a).str() + " vs " +
                          t.shape(b).str());
}

struct AttnDims {
  std::size_t batch, nq, nk, d;
};

template <class T>
AttnDims attention_dims(const Tape<T>& t, Var q, Var k, Var v) {
  const Shape& sq = t.shape(q);
  const Shape& sk = t.shape(k);
  auto split = [](const Shape& s, std::size_t& b, std::size_t& n) {
    if (s.rank == 2) {
      b = 1;
      n = s[0];
    } else if (s.rank == 3) {
      b = s[0];
      n = s[1];
    } else {
      throw ValidationError("attention operands must have rank 2 or 3, got " + s.str());
    }
  };
  AttnDims dims{};
  std::size_t bk = 0;
  split(sq, dims.batch, dims.nq);
  split(sk, bk, dims.nk);
  dims.d = sq.last();
  if (bk != dims.batch || sk.last() != dims.d || !(t.shape(v) == sk))
    throw ValidationError("attention: incompatible shapes q" + sq.str() + " k" + sk.str() + " v" +
                          t.shape(v).str());
  return dims;
}

}  // namespace

template <class T>
Var linear(Tape<T>& t, Var x, Var w, Var bias) {
  const Shape& sx = t.shape(x);
  const Shape& sw = t.shape(w);
  if (sw.rank != 2 || sw[0] != sx.last())
    throw ValidationError("linear: cannot apply " + sw.str() + " to " + sx.str());
  const std::size_t rows = sx.rows(), k = sw[0], m = sw[1];
  if (bias.valid() && t.shape(bias).size() != m) throw ValidationError("linear: bias size mismatch");
  std::vector<T> out(rows * m);
  kernels::gemm_nn(rows, k, m, t.data(x), t.data(w), out.data(), false);
  if (bias.valid()) {
    const T* b = t.data(bias);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < m; ++j) out[r * m + j] += b[j];
  }
  const std::uint32_t xi = x.id, wi = w.id, bi = bias.id;
  const bool has_bias = bias.valid();
  return t.push(sx.with_last(m), std::move(out), any_grad(t, {x, w, bias}),
                [xi, wi, bi, has_bias, rows, k, m](Tape<T>& tp, std::uint32_t self) {
                  const T* g = tp.grad(Var{self}).data();
                  if (tp.requires_grad(Var{xi}))
                    kernels::gemm_nt(rows, m, k, g, tp.data(Var{wi}), tp.grad_acc(xi).data(), true);
                  if (tp.requires_grad(Var{wi}))
                    kernels::gemm_tn_acc(rows, k, m, tp.data(Var{xi}), g, tp.grad_acc(wi).data());
                  if (has_bias && tp.requires_grad(Var{bi})) {
                    auto gb = tp.grad_acc(bi);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < m; ++j) gb[j] += g[r * m + j];
                  }
                });
}

template <class T>
Var matmul_nt(Tape<T>& t, Var a, Var b) {
  const Shape& sa = t.shape(a);
  const Shape& sb = t.shape(b);
  if (sa.last() != sb.last())
    throw ValidationError("matmul_nt: inner dimensions differ " + sa.str() + " vs " + sb.str());
  const std::size_t n = sa.rows(), k = sa.last(), m = sb.rows();
  std::vector<T> out(n * m);
  kernels::gemm_nt(n, k, m, t.data(a), t.data(b), out.data(), false);
  const std::uint32_t ai = a.id, bi = b.id;
  return t.push(Shape{n, m}, std::move(out), any_grad(t, {a, b}),
                [ai, bi, n, k, m](Tape<T>& tp, std::uint32_t self) {
                  const T* g = tp.grad(Var{self}).data();
                  if (tp.requires_grad(Var{ai}))
                    kernels::gemm_nn(n, m, k, g, tp.data(Var{bi}), tp.grad_acc(ai).data(), true);
                  if (tp.requires_grad(Var{bi}))
                    kernels::gemm_tn_acc(n, m, k, g, tp.data(Var{ai}), tp.grad_acc(bi).data());
                });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  require_same(t, a, b, "add");
  auto va = t.value(a);
  auto vb = t.value(b);
  std::vector<T> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  const std::uint32_t ai = a.id, bi = b.id;
  return t.push(t.shape(a), std::move(out), any_grad(t, {a, b}),
                [ai, bi](Tape<T>& tp, std::uint32_t self) {
                  auto g = tp.grad(Var{self});
                  for (std::uint32_t in : {ai, bi}) {
                    if (!tp.requires_grad(Var{in})) continue;
                    auto gi = tp.grad_acc(in);
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                  }
                });
}

template <class T>
Var add_row(Tape<T>& t, Var x, Var row, std::size_t period, std::size_t offset) {
  const Shape& sx = t.shape(x);
  const std::size_t d = sx.last(), rows = sx.rows();
  if (t.shape(row).size() != d) throw ValidationError("add_row: row size mismatch");
  if (period == 0 || offset >= period) throw ValidationError("add_row: bad period/offset");
  auto vx = t.value(x);
  const T* r = t.data(row);
  std::vector<T> out(vx.begin(), vx.end());
  for (std::size_t i = offset; i < rows; i += period)
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] += r[c];
  const std::uint32_t xi = x.id, ri = row.id;
  return t.push(sx, std::move(out), any_grad(t, {x, row}),
                [xi, ri, d, rows, period, offset](Tape<T>& tp, std::uint32_t self) {
                  auto g = tp.grad(Var{self});
                  if (tp.requires_grad(Var{xi})) {
                    auto gx = tp.grad_acc(xi);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  }
                  if (tp.requires_grad(Var{ri})) {
                    auto gr = tp.grad_acc(ri);
                    for (std::size_t i = offset; i < rows; i += period)
                      for (std::size_t c = 0; c < d; ++c) gr[c] += g[i * d + c];
                  }
                });
}

template <class T>
Var scale(Tape<T>& t, Var x, T c) {
  auto vx = t.value(x);
  std::vector<T> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] * c;
  const std::uint32_t xi = x.id;
  return t.push(t.shape(x), std::move(out), any_grad(t, {x}),
                [xi, c](Tape<T>& tp, std::uint32_t self) {
                  auto g = tp.grad(Var{self});
                  auto gx = tp.grad_acc(xi);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
                });
}

namespace {
// Elementwise map whose derivative is a function of the output.
template <class T, class F, class DF>
Var unary(Tape<T>& t, Var x, F f, DF dfy) {
  auto vx = t.value(x);
  std::vector<T> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(vx[i]);
  const std::uint32_t xi = x.id;
  return t.push(t.shape(x), std::move(out), any_grad(t, {x}),
                [xi, dfy](Tape<T>& tp, std::uint32_t self) {
                  auto g = tp.grad(Var{self});
                  auto y = tp.value(Var{self});
                  auto gx = tp.grad_acc(xi);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfy(y[i]);
                });
}
}  // namespace

template <class T>
Var relu(Tape<T>& t, Var x) {
  return unary(
      t, x, [](T v) { return v > T(0) ? v : T(0); }, [](T y) { return y > T(0) ? T(1) : T(0); });
}

template <class T>
Var tanh(Tape<T>& t, Var x) {
  return unary(
      t, x, [](T v) { return std::tanh(v); }, [](T y) { return T(1) - y * y; });
}

template <class T>
Var sigmoid(Tape<T>& t, Var x) {
  return unary(
      t, x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T y) { return y * (T(1) - y); });
}

template <class T>
Var mul_rows(Tape<T>& t, Var x, Var s) {
  const Shape& sx = t.shape(x);
  const std::size_t d = sx.last(), rows = sx.rows();
  if (t.shape(s).size() != rows) throw ValidationError("mul_rows: scale count mismatch");
  auto vx = t.value(x);
  const T* vs = t.data(s);
  std::vector<T> out(vx.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = vs[r] * vx[r * d + c];
  const std::uint32_t xi = x.id, si = s.id;
  return t.push(sx, std::move(out), any_grad(t, {x, s}),
                [xi, si, d, rows](Tape<T>& tp, std::uint32_t self) {
                  auto g = tp.grad(Var{self});
                  if (tp.requires_grad(Var{xi})) {
                    const T* vs = tp.data(Var{si});
                    auto gx = tp.grad_acc(xi);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r * d + c] * vs[r];
                  }
                  if (tp.requires_grad(Var{si})) {
                    auto vx = tp.value(Var{xi});
                    auto gs = tp.grad_acc(si);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T acc = 0;
                      for (std::size_t c = 0; c < d; ++c) acc += g[r * d + c] * vx[r * d + c];
                      gs[r] += acc;
                    }
                  }
                });
}

template <class T>
Var concat(Tape<T>& t, Var a, Var b) {
  const Shape& sa = t.shape(a);
  const Shape& sb = t.shape(b);
  if (sa.rows() != sb.rows() || sa.rank != sb.rank)
    throw ValidationError("concat: leading axes differ " + sa.str() + " vs " + sb.str());
  const std::size_t rows = sa.rows(), da = sa.last(), db = sb.last(), d = da + db;
  auto va = t.value(a);
  auto vb = t.value(b);
  std::vector<T> out(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(va.data() + r * da, da, out.data() + r * d);
    std::copy_n(vb.data() + r * db, db, out.data() + r * d + da);
  }
  const std::uint32_t ai = a.id, bi = b.id;
  return t.push(sa.with_last(d), std::move(out), any_grad(t, {a, b}),
                [ai, bi, rows, da, db, d](Tape<T>& tp, std::uint32_t self) {
                  auto g = tp.grad(Var{self});
                  if (tp.requires_grad(Var{ai})) {
                    auto ga = tp.grad_acc(ai);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < da; ++c) ga[r * da + c] += g[r * d + c];
                  }
                  if (tp.requires_grad(Var{bi})) {
                    auto gb = tp.grad_acc(bi);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < db; ++c) gb[r * db + c] += g[r * d + da + c];
                  }
                });
}

template <class T>
Var softmax(Tape<T>& t, Var x) {
  const Shape& sx = t.shape(x);
  const std::size_t rows = sx.rows(), d = sx.last();
  std::vector<T> out(sx.size());
  if (!kernels::softmax_rows(rows, d, t.data(x), out.data()))
    throw NumericError("softmax over an entirely masked axis");
  const std::uint32_t xi = x.id;
  return t.push(sx, std::move(out), any_grad(t, {x}),
                [xi, rows, d](Tape<T>& tp, std::uint32_t self) {
                  auto g = tp.grad(Var{self});
                  auto y = tp.value(Var{self});
                  auto gx = tp.grad_acc(xi);
                  for (std::size_t r = 0; r < rows; ++r) {
                    T dot = 0;
                    for (std::size_t c = 0; c < d; ++c) dot += y[r * d + c] * g[r * d + c];
                    for (std::size_t c = 0; c < d; ++c)
                      gx[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
                  }
                });
}

template <class T>
Var sum(Tape<T>& t, Var x) {
  auto vx = t.value(x);
  double acc = 0.0;
  for (T v : vx) acc += static_cast<double>(v);
  const std::uint32_t xi = x.id;
  return t.push(Shape{1}, {static_cast<T>(acc)}, any_grad(t, {x}),
                [xi](Tape<T>& tp, std::uint32_t self) {
                  const T g = tp.grad(Var{self})[0];
                  auto gx = tp.grad_acc(xi);
                  for (auto& v : gx) v += g;
                });
}

template <class T>
Var mean(Tape<T>& t, Var x) {
  const std::size_t n = t.shape(x).size();
  if (n == 0) throw ValidationError("mean of an empty tensor");
  return scale(t, sum(t, x), T(1) / static_cast<T>(n));
}

template <class T>
Var batch_norm(Tape<T>& t, Var x, Var gamma, Var beta, const BatchNormMode<T>& mode) {
  const Shape& sx = t.shape(x);
  const std::size_t d = sx.last(), rows = sx.rows();
  if (sx.rank == 0 || d == 0) throw ValidationError("batch_norm: missing feature axis");
  if (rows == 0) throw ValidationError("batch_norm: zero-size normalization axis");
  if (t.shape(gamma).size() != d || t.shape(beta).size() != d)
    throw ValidationError("batch_norm: affine parameter size mismatch");
  auto vx = t.value(x);
  const T* g = t.data(gamma);
  const T* b = t.data(beta);
  std::vector<double> mu(d, 0.0), var(d, 0.0), inv_std(d);
  if (mode.training) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < d; ++c) mu[c] += static_cast<double>(vx[r * d + c]);
    for (auto& m : mu) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double dv = static_cast<double>(vx[r * d + c]) - mu[c];
        var[c] += dv * dv;
      }
    for (auto& v : var) v /= static_cast<double>(rows);
    if (mode.observed_mean) *mode.observed_mean = mu;
    if (mode.observed_var) *mode.observed_var = var;
  } else {
    if (!mode.running_mean || !mode.running_var)
      throw ValidationError("batch_norm: inference mode needs running statistics");
    for (std::size_t c = 0; c < d; ++c) {
      mu[c] = static_cast<double>(mode.running_mean[c]);
      var[c] = static_cast<double>(mode.running_var[c]);
    }
  }
  for (std::size_t c = 0; c < d; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + mode.eps);

  std::vector<T> xhat(vx.size()), out(vx.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (static_cast<double>(vx[r * d + c]) - mu[c]) * inv_std[c];
      xhat[r * d + c] = static_cast<T>(h);
      out[r * d + c] = static_cast<T>(static_cast<double>(g[c]) * h + static_cast<double>(b[c]));
    }
  const std::uint32_t xi = x.id, gi = gamma.id, bi = beta.id;
  const bool training = mode.training;
  return t.push(
      sx, std::move(out), any_grad(t, {x, gamma, beta}),
      [xi, gi, bi, rows, d, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& tp, std::uint32_t self) {
        auto gy = tp.grad(Var{self});
        const T* gam = tp.data(Var{gi});
        if (tp.requires_grad(Var{gi}) || tp.requires_grad(Var{bi})) {
          std::vector<double> sg(d, 0.0), sb(d, 0.0);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) {
              sg[c] += static_cast<double>(gy[r * d + c]) * static_cast<double>(xhat[r * d + c]);
              sb[c] += static_cast<double>(gy[r * d + c]);
            }
          if (tp.requires_grad(Var{gi})) {
            auto gg = tp.grad_acc(gi);
            for (std::size_t c = 0; c < d; ++c) gg[c] += static_cast<T>(sg[c]);
          }
          if (tp.requires_grad(Var{bi})) {
            auto gb = tp.grad_acc(bi);
            for (std::size_t c = 0; c < d; ++c) gb[c] += static_cast<T>(sb[c]);
          }
        }
        if (!tp.requires_grad(Var{xi})) return;
        auto gx = tp.grad_acc(xi);
        if (!training) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c)
              gx[r * d + c] += static_cast<T>(static_cast<double>(gy[r * d + c]) *
                                              static_cast<double>(gam[c]) * inv_std[c]);
          return;
        }
        std::vector<double> s1(d, 0.0), s2(d, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < d; ++c) {
            const double dh = static_cast<double>(gy[r * d + c]) * static_cast<double>(gam[c]);
            s1[c] += dh;
            s2[c] += dh * static_cast<double>(xhat[r * d + c]);
          }
        const double n = static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < d; ++c) {
            const double dh = static_cast<double>(gy[r * d + c]) * static_cast<double>(gam[c]);
            gx[r * d + c] += static_cast<T>(
                inv_std[c] / n * (n * dh - s1[c] - static_cast<double>(xhat[r * d + c]) * s2[c]));
          }
      });
}

template <class T>
Var attention(Tape<T>& t, Var q, Var k, Var v, std::size_t heads,
              const std::vector<unsigned char>* key_mask) {
  const AttnDims dims = attention_dims(t, q, k, v);
  if (heads == 0 || dims.d % heads != 0)
    throw ValidationError("attention: feature dim " + std::to_string(dims.d) +
                          " not divisible by " + std::to_string(heads) + " heads");
  if (key_mask && key_mask->size() != dims.batch * dims.nk)
    throw ValidationError("attention: key mask shape mismatch");
  const std::size_t B = dims.batch, nq = dims.nq, nk = dims.nk, d = dims.d, dh = d / heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const T* vq = t.data(q);
  const T* vk = t.data(k);
  const T* vv = t.data(v);
  std::vector<T> out(B * nq * d);
  std::vector<T> weights(B * heads * nq * nk);
  int bad = 0;
#pragma omp parallel for schedule(static) reduction(+ : bad) if (B > 8)
  for (long bl = 0; bl < static_cast<long>(B); ++bl) {
    const auto b = static_cast<std::size_t>(bl);
    std::vector<T> scores(nk);
    std::vector<double> acc(dh);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < nq; ++i) {
        const T* qi = vq + (b * nq + i) * d + h * dh;
        for (std::size_t j = 0; j < nk; ++j) {
          if (key_mask && !(*key_mask)[b * nk + j]) {
            scores[j] = kernels::masked_value<T>();
            continue;
          }
          const T* kj = vk + (b * nk + j) * d + h * dh;
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
        }
        T* w = weights.data() + ((b * heads + h) * nq + i) * nk;
        if (!kernels::serial::softmax_rows(1, nk, scores.data(), w)) {
          ++bad;
          continue;
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < nk; ++j) {
          if (w[j] == T(0)) continue;
          const T* vj = vv + (b * nk + j) * d + h * dh;
          const double wj = static_cast<double>(w[j]);
          for (std::size_t c = 0; c < dh; ++c) acc[c] += wj * static_cast<double>(vj[c]);
        }
        T* o = out.data() + (b * nq + i) * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) o[c] = static_cast<T>(acc[c]);
      }
  }
  if (bad) throw NumericError("attention: a query sees no unmasked key");

  const std::uint32_t qi = q.id, ki = k.id, vi = v.id;
  return t.push(
      t.shape(q), std::move(out), any_grad(t, {q, k, v}),
      [qi, ki, vi, B, nq, nk, d, dh, heads, inv_sqrt, weights = std::move(weights)](
          Tape<T>& tp, std::uint32_t self) {
        const T* g = tp.grad(Var{self}).data();
        const T* vq = tp.data(Var{qi});
        const T* vk = tp.data(Var{ki});
        const T* vv = tp.data(Var{vi});
        T* gq = tp.requires_grad(Var{qi}) ? tp.grad_acc(qi).data() : nullptr;
        T* gk = tp.requires_grad(Var{ki}) ? tp.grad_acc(ki).data() : nullptr;
        T* gv = tp.requires_grad(Var{vi}) ? tp.grad_acc(vi).data() : nullptr;
#pragma omp parallel for schedule(static) if (B > 8)
        for (long bl = 0; bl < static_cast<long>(B); ++bl) {
          const auto b = static_cast<std::size_t>(bl);
          std::vector<T> dw(nk), ds(nk);
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < nq; ++i) {
              const T* w = weights.data() + ((b * heads + h) * nq + i) * nk;
              const T* go = g + (b * nq + i) * d + h * dh;
              T s = 0;
              for (std::size_t j = 0; j < nk; ++j) {
                if (w[j] == T(0)) {
                  dw[j] = 0;
                  continue;
                }
                const T* vj = vv + (b * nk + j) * d + h * dh;
                T acc = 0;
                for (std::size_t c = 0; c < dh; ++c) acc += go[c] * vj[c];
                dw[j] = acc;
                s += w[j] * acc;
                if (gv) {
                  T* gvj = gv + (b * nk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += w[j] * go[c];
                }
              }
              for (std::size_t j = 0; j < nk; ++j) ds[j] = w[j] * (dw[j] - s) * inv_sqrt;
              const T* qrow = vq + (b * nq + i) * d + h * dh;
              T* gqi = gq ? gq + (b * nq + i) * d + h * dh : nullptr;
              for (std::size_t j = 0; j < nk; ++j) {
                if (ds[j] == T(0)) continue;
                const T* kj = vk + (b * nk + j) * d + h * dh;
                if (gqi)
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds[j] * kj[c];
                if (gk) {
                  T* gkj = gk + (b * nk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds[j] * qrow[c];
                }
              }
            }
        }
      });
}

template <class T>
Var gather_rows(Tape<T>& t, Var x, const std::vector<int>& rows) {
  const Shape& sx = t.shape(x);
  const std::size_t d = sx.last(), n = sx.rows();
  auto vx = t.value(x);
  std::vector<T> out(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || static_cast<std::size_t>(rows[r]) >= n)
      throw ValidationError("gather_rows: index out of range");
    std::copy_n(vx.data() + static_cast<std::size_t>(rows[r]) * d, d, out.data() + r * d);
  }
  const std::uint32_t xi = x.id;
  return t.push(Shape{rows.size(), d}, std::move(out), any_grad(t, {x}),
                [xi, rows, d](Tape<T>& tp, std::uint32_t self) {
                  auto g = tp.grad(Var{self});
                  auto gx = tp.grad_acc(xi);
                  for (std::size_t r = 0; r < rows.size(); ++r) {
                    const std::size_t src = static_cast<std::size_t>(rows[r]) * d;
                    for (std::size_t c = 0; c < d; ++c) gx[src + c] += g[r * d + c];
                  }
                });
}

template <class T>
Var masked_fill(Tape<T>& t, Var x, const std::vector<unsigned char>& mask) {
  auto vx = t.value(x);
  if (mask.size() != vx.size()) throw ValidationError("masked_fill: mask shape mismatch");
  std::vector<T> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = mask[i] ? vx[i] : kernels::masked_value<T>();
  const std::uint32_t xi = x.id;
  return t.push(t.shape(x), std::move(out), any_grad(t, {x}),
                [xi, mask](Tape<T>& tp, std::uint32_t self) {
                  auto g = tp.grad(Var{self});
                  auto gx = tp.grad_acc(xi);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if (mask[i]) gx[i] += g[i];
                });
}

template <class T>
Var log_prob_at(Tape<T>& t, Var x, std::size_t index) {
  auto vx = t.value(x);
  if (index >= vx.size()) throw ValidationError("log_prob_at: index out of range");
  if (kernels::is_masked(vx[index])) throw NumericError("log_prob_at: selected entry is masked");
  std::vector<T> p(vx.size());
  kernels::serial::softmax_rows(1, vx.size(), vx.data(), p.data());
  T mx = vx[index];
  for (T v : vx)
    if (!kernels::is_masked(v)) mx = std::max(mx, v);
  double se = 0.0;
  for (T v : vx)
    if (!kernels::is_masked(v)) se += std::exp(static_cast<double>(v - mx));
  const double lp = static_cast<double>(vx[index] - mx) - std::log(se);
  const std::uint32_t xi = x.id;
  return t.push(Shape{1}, {static_cast<T>(lp)}, any_grad(t, {x}),
                [xi, index, p = std::move(p)](Tape<T>& tp, std::uint32_t self) {
                  const T g = tp.grad(Var{self})[0];
                  auto gx = tp.grad_acc(xi);
                  for (std::size_t i = 0; i < p.size(); ++i) gx[i] -= g * p[i];
                  gx[index] += g;
                });
}

template <class T>
Var weighted_sum(Tape<T>& t, const std::vector<Var>& scalars, const std::vector<T>& weights) {
  if (scalars.size() != weights.size()) throw ValidationError("weighted_sum: size mismatch");
  double acc = 0.0;
  bool grad = false;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (t.shape(scalars[i]).size() != 1) throw ValidationError("weighted_sum: non-scalar input");
    acc += static_cast<double>(weights[i]) * static_cast<double>(t.value(scalars[i])[0]);
    grad = grad || t.requires_grad(scalars[i]);
  }
  std::vector<std::uint32_t> ids;
  for (Var v : scalars) ids.push_back(v.id);
  return t.push(Shape{1}, {static_cast<T>(acc)}, grad,
                [ids, weights](Tape<T>& tp, std::uint32_t self) {
                  const T g = tp.grad(Var{self})[0];
                  for (std::size_t i = 0; i < ids.size(); ++i)
                    if (tp.requires_grad(Var{ids[i]})) tp.grad_acc(ids[i])[0] += g * weights[i];
                });
}

#define ECHO_INSTANTIATE_OPS(T)                                                                 \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                             \
  template Var matmul_nt<T>(Tape<T>&, Var, Var);                                               \
  template Var add<T>(Tape<T>&, Var, Var);                                                     \
  template Var add_row<T>(Tape<T>&, Var, Var, std::size_t, std::size_t);                       \
  template Var scale<T>(Tape<T>&, Var, T);                                                     \
  template Var relu<T>(Tape<T>&, Var);                                                         \
  template Var tanh<T>(Tape<T>&, Var);                                                         \
  template Var sigmoid<T>(Tape<T>&, Var);                                                      \
  template Var mul_rows<T>(Tape<T>&, Var, Var);                                                \
  template Var concat<T>(Tape<T>&, Var, Var);                                                  \
  template Var softmax<T>(Tape<T>&, Var);                                                      \
  template Var sum<T>(Tape<T>&, Var);                                                          \
  template Var mean<T>(Tape<T>&, Var);                                                         \
  template Var batch_norm<T>(Tape<T>&, Var, Var, Var, const BatchNormMode<T>&);                     \
  template Var attention<T>(Tape<T>&, Var, Var, Var, std::size_t,                              \
                            const std::vector<unsigned char>*);                                \
  template Var gather_rows<T>(Tape<T>&, Var, const std::vector<int>&);                         \
  template Var masked_fill<T>(Tape<T>&, Var, const std::vector<unsigned char>&);               \
  template Var log_prob_at<T>(Tape<T>&, Var, std::size_t);                                     \
  template Var weighted_sum<T>(Tape<T>&, const std::vector<Var>&, const std::vector<T>&);

ECHO_INSTANTIATE_OPS(float)
ECHO_INSTANTIATE_OPS(double)

#undef ECHO_INSTANTIATE_OPS

}  // namespace echo::nn
