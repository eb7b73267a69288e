#include "echo/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "echo/common.hpp"

namespace echo::nn {

Shape::Shape(std::initializer_list<std::size_t> d) {
  if (d.size() > dims.size()) throw ValidationError("tensor rank exceeds 4");
  rank = d.size();
  std::copy(d.begin(), d.end(), dims.begin());
}

Shape Shape::from(std::span<const std::size_t> d) {
  if (d.size() > 4) throw ValidationError("tensor rank exceeds 4");
  Shape s;
  s.rank = d.size();
  std::copy(d.begin(), d.end(), s.dims.begin());
  return s;
}

std::size_t Shape::size() const {
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank; ++i) n *= dims[i];
  return n;
}

Shape Shape::with_last(std::size_t d) const {
  Shape s = *this;
  if (s.rank == 0) {
    s.rank = 1;
    s.dims[0] = d;
  } else {
    s.dims[s.rank - 1] = d;
  }
  return s;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < rank; ++i) os << (i ? ", " : "") << dims[i];
  os << ')';
  return os.str();
}

template <class T>
Tensor<T>::Tensor(Shape s, std::vector<T> values) : shape(s), data(std::move(values)) {
  if (data.size() != shape.size())
    throw ValidationError("tensor value count " + std::to_string(data.size()) +
                          " does not match shape " + shape.str());
}

template <class T>
Var Tape<T>::constant(Tensor<T> value) {
  return push(value.shape, std::move(value.data), false, nullptr);
}

template <class T>
Var Tape<T>::variable(Tensor<T> value) {
  return push(value.shape, std::move(value.data), record_, nullptr);
}

template <class T>
Var Tape<T>::external(const Shape& shape, const T* data, bool requires_grad) {
  Node n;
  n.shape = shape;
  n.ext = data;
  n.requires_grad = record_ && requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
Var Tape<T>::push(Shape shape, std::vector<T> value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.shape = shape;
  n.own = std::move(value);
  n.requires_grad = record_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
std::span<const T> Tape<T>::value(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.ext) return {n.ext, n.shape.size()};
  return n.own;
}

template <class T>
Tensor<T> Tape<T>::tensor(Var v) const {
  auto s = value(v);
  return Tensor<T>(shape(v), std::vector<T>(s.begin(), s.end()));
}

template <class T>
std::span<T> Tape<T>::grad_acc(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.shape.size(), T(0));
  return n.grad;
}

template <class T>
void Tape<T>::backward(Var out) {
  std::vector<T> seed(nodes_[out.id].shape.size(), T(1));
  backward(out, seed);
}

template <class T>
void Tape<T>::backward(Var out, std::span<const T> seed) {
  if (!record_) throw NumericError("backward on a tape that does not record");
  if (seed.size() != nodes_[out.id].shape.size())
    throw ValidationError("backward seed size does not match output");
  if (!nodes_[out.id].requires_grad) return;
  auto g = grad_acc(out.id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (std::uint32_t id = out.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, id);
  }
}

template <class T>
void Tape<T>::zero_grad() {
  for (auto& n : nodes_) n.grad.clear();
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace echo::nn
