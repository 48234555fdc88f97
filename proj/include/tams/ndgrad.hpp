#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tams/common.hpp"

namespace tams::ndgrad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {
struct TensorData;
struct GraphState;
}  // namespace detail

class Graph;

// Dense 64-bit float tensor. Value-semantic handle over a shared payload.
// Untracked tensors are plain eager values; tracked tensors are nodes on a
// Graph and are immutable (each op yields a fresh node).
class Tensor {
 public:
  Tensor();
  explicit Tensor(double scalar);  // rank-0
  Tensor(Shape shape, double fill);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const;

  const std::vector<double>& data() const;
  // Mutable access; rejected for tracked tensors.
  std::vector<double>& mutable_data();

  // Scalar value of a one-element tensor.
  double item() const;

  bool tracked() const;
  std::int64_t node_id() const;
  const std::vector<double>& grad() const;

  // Untracked deep copy of the value.
  Tensor detached() const;

 private:
  friend class Graph;
  friend struct OpAccess;
  std::shared_ptr<detail::TensorData> data_;
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : data_(std::move(d)) {}
};

// Recorded tape of operations. Tensors produced from a tracked input are
// appended in execution order, so reverse iteration is a valid reverse
// topological order.
class Graph {
 public:
  Graph();

  // Tracked leaf initialized from `value` (deep copy), gradient zeroed.
  Tensor leaf(const Tensor& value);

  // Reverse-mode sweep from a one-element root. Leaf gradients accumulate
  // across calls; intermediate gradients are recomputed per call.
  void backward(const Tensor& root);

  std::int64_t node_count() const;
  std::uint64_t domain_error_count() const;

 private:
  friend struct OpAccess;
  std::shared_ptr<detail::GraphState> state_;
};

// Domain-error flag for untracked evaluation (log of non-positive values).
std::uint64_t domain_error_count();
void reset_domain_error_count();

enum class EwKind { add, sub, mul, div, neg, relu, sigmoid, exp, log, tanh, softplus };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor softplus(const Tensor& a);

// Dispatcher over the elementwise kinds; b required only for binary kinds.
Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b = nullptr);

Tensor matmul(const Tensor& a, const Tensor& b);

// 3x3 cross-correlation, stride 1, zero padding 1: x[B,C,H,W] * k[F,C,3,3]
// -> [B,F,H,W].
Tensor conv2d(const Tensor& x, const Tensor& k);

Tensor maxpool2(const Tensor& x);   // [B,C,H,W] -> [B,C,H/2,W/2]
Tensor upsample2(const Tensor& x);  // nearest neighbour, [B,C,H,W] -> [B,C,2H,2W]
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);

enum class ReduceKind { sum, mean, max };

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor max(const Tensor& x);
Tensor max(const Tensor& x, std::size_t axis);
Tensor reduce(ReduceKind kind, const Tensor& x, std::optional<std::size_t> axis = {});

// Losses (scalar outputs).
// Mean over all elements of softplus(z) - z*t; numerically stable.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);
// logits [B,K], one integer class per row; mean over rows.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& classes);
// 1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps), eps = 1e-6. p are probabilities.
Tensor soft_dice_loss(const Tensor& probs, const Tensor& targets);

inline constexpr double kSoftDiceEps = 1e-6;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// NaN anywhere reports +infinity.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double step = 1e-5);

}  // namespace tams::ndgrad
