#pragma once

#include <vector>

#include "echo/tensor.hpp"

// Differentiable primitives recorded on a Tape. Tensors are viewed as
// (rows, features) with the feature axis last unless stated otherwise.
namespace echo::nn {

// x (..., k) times w (k, m) -> (..., m); optional bias (m).
template <class T>
Var linear(Tape<T>& t, Var x, Var w, Var bias = {});

// a (n, k) times b (m, k)^T -> (n, m).
template <class T>
Var matmul_nt(Tape<T>& t, Var a, Var b);

template <class T>
Var add(Tape<T>& t, Var a, Var b);

// Adds a (d) vector to rows r with r % period == offset (period 1 = all rows).
template <class T>
Var add_row(Tape<T>& t, Var x, Var row, std::size_t period = 1, std::size_t offset = 0);

template <class T>
Var scale(Tape<T>& t, Var x, T c);

template <class T>
Var relu(Tape<T>& t, Var x);
template <class T>
Var tanh(Tape<T>& t, Var x);
template <class T>
Var sigmoid(Tape<T>& t, Var x);

// x (..., d) scaled row-wise by s (..., 1).
template <class T>
Var mul_rows(Tape<T>& t, Var x, Var s);

// Concatenation along the feature axis.
template <class T>
Var concat(Tape<T>& t, Var a, Var b);

// Softmax along the feature axis; masked entries map to 0. Throws
// NumericError when a row is entirely masked.
template <class T>
Var softmax(Tape<T>& t, Var x);

template <class T>
Var mean(Tape<T>& t, Var x);

template <class T>
Var sum(Tape<T>& t, Var x);

template <class T>
struct BatchNormMode {
  bool training = true;
  double eps = 1e-5;
  // Read in inference mode.
  const T* running_mean = nullptr;
  const T* running_var = nullptr;
  // Filled in training mode with the batch mean and biased variance.
  std::vector<double>* observed_mean = nullptr;
  std::vector<double>* observed_var = nullptr;
};

// Per-feature normalization over all rows (batch x set jointly). Training
// mode uses batch statistics, inference mode the running buffers.
template <class T>
Var batch_norm(Tape<T>& t, Var x, Var gamma, Var beta, const BatchNormMode<T>& mode);

// Scaled dot-product attention split into `heads` contiguous feature blocks.
// q (B, nq, d), k and v (B, nk, d); rank-2 operands mean B = 1. key_mask,
// when given, has B * nk entries (nonzero = visible).
template <class T>
Var attention(Tape<T>& t, Var q, Var k, Var v, std::size_t heads,
              const std::vector<unsigned char>* key_mask = nullptr);

// Row gather from a rank-2 tensor.
template <class T>
Var gather_rows(Tape<T>& t, Var x, const std::vector<int>& rows);

// Sets entries with mask == 0 to the masked sentinel.
template <class T>
Var masked_fill(Tape<T>& t, Var x, const std::vector<unsigned char>& mask);

// log softmax over every entry of x, evaluated at flat index `index`.
template <class T>
Var log_prob_at(Tape<T>& t, Var x, std::size_t index);

// sum_i weights[i] * scalars[i]
template <class T>
Var weighted_sum(Tape<T>& t, const std::vector<Var>& scalars, const std::vector<T>& weights);

}  // namespace echo::nn
