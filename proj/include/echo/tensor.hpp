#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace echo::nn {

// Up to four axes: (batch, set, head, feature). The last axis is always the
// feature axis; "rows" is the product of the leading axes.
struct Shape {
  std::array<std::size_t, 4> dims{};
  std::size_t rank = 0;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> d);
  static Shape from(std::span<const std::size_t> d);

  std::size_t operator[](std::size_t i) const { return dims[i]; }
  std::size_t size() const;
  std::size_t last() const { return rank == 0 ? 1 : dims[rank - 1]; }
  std::size_t rows() const { return last() == 0 ? 0 : size() / last(); }
  Shape with_last(std::size_t d) const;
  std::vector<std::size_t> to_vector() const { return {dims.begin(), dims.begin() + rank}; }
  std::string str() const;

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank != b.rank) return false;
    for (std::size_t i = 0; i < a.rank; ++i)
      if (a.dims[i] != b.dims[i]) return false;
    return true;
  }
};

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.size(), fill) {}
  Tensor(Shape s, std::vector<T> values);

  std::size_t size() const { return data.size(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  T& at(std::size_t r, std::size_t c) { return data[r * shape.last() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * shape.last() + c]; }
};

template <class To, class From>
Tensor<To> cast(const Tensor<From>& t) {
  Tensor<To> out(t.shape);
  for (std::size_t i = 0; i < t.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

// Reverse-mode tape. Nodes are appended in execution order; backward walks
// them in exact reverse and accumulates gradients additively. A tape built
// with record = false keeps values only (inference).
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var constant(Tensor<T> value);
  Var variable(Tensor<T> value);
  // Non-owning leaf; `data` must outlive the tape.
  Var external(const Shape& shape, const T* data, bool requires_grad);

  Var push(Shape shape, std::vector<T> value, bool requires_grad, BackwardFn fn);

  const Shape& shape(Var v) const { return nodes_[v.id].shape; }
  std::span<const T> value(Var v) const;
  const T* data(Var v) const { return value(v).data(); }
  Tensor<T> tensor(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient of a node after backward; empty span if none reached it.
  std::span<const T> grad(Var v) const { return nodes_[v.id].grad; }
  // Gradient accumulator, allocated on first use.
  std::span<T> grad_acc(std::uint32_t id);

  void backward(Var out);
  void backward(Var out, std::span<const T> seed);
  void zero_grad();

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<T> own;
    const T* ext = nullptr;
    bool requires_grad = false;
    std::vector<T> grad;
    BackwardFn backward;
  };
  bool record_;
  std::vector<Node> nodes_;
};

extern template struct Tensor<float>;
extern template struct Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace echo::nn
