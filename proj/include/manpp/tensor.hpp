#pragma once

// Dense float64 tensors with reverse-mode differentiation.
//
// Every op records a node with its parents and a backward rule. Node ids come
// from a per-thread counter, so parents always carry smaller ids than their
// children and a reverse sort by id is a valid topological order. Graphs are
// confined to the thread that built them; values cross threads only as
// TensorSnapshot copies.
//
// Gradient mode: backward() accumulates into leaf grads. Nothing is zeroed
// implicitly; optimizers call zero_grad() after stepping.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace manpp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

/// Plain value copy of a tensor. Carries no graph state and is safe to move
/// between threads.
struct TensorSnapshot {
  Shape shape;
  std::vector<double> data;

  bool operator==(const TensorSnapshot&) const = default;
};

class Tensor {
 public:
  Tensor() = default;
  /// Throws InputError on non-finite values, ShapeError on size mismatch.
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_snapshot(const TensorSnapshot& snap, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  /// In-place access for optimizer updates on leaves. Throws UsageError when
  /// the tensor is an op output.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  std::uint64_t node_id() const;
  /// Zeros when no gradient has been deposited yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Value-identical leaf with no gradient parents.
  Tensor detach() const;
  /// Deep copy as a fresh leaf, keeping requires_grad.
  Tensor clone() const;
  TensorSnapshot snapshot() const;
  /// Overwrites the values of a leaf from a same-shaped snapshot.
  void assign(const TensorSnapshot& snap);

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct OpBuilder;
};

/// Runs the reverse sweep from a scalar loss. Throws UsageError on a
/// non-scalar loss or when called re-entrantly from a backward rule.
void backward(const Tensor& loss);

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[n x in] * w[out x in]^T + b[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Valid cross-correlation. x[n,c,h,w], k[o,c,kh,kw]; bias[o] optional.
Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& bias, std::size_t stride);
Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride);
Tensor relu(const Tensor& x);
/// Non-overlapping window x window average, floor on the output extent.
Tensor mean_pool2d(const Tensor& x, std::size_t window);
/// [n,c,h,w] -> [n,c]
Tensor global_mean_pool(const Tensor& x);
Tensor flatten(const Tensor& x);
/// Same-shape add, or bias-add of b[c] over the channel axis (axis 1) of a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale_by(const Tensor& x, double s);
/// x * s where s is a learnable one-element tensor.
Tensor scale_by(const Tensor& x, const Tensor& s);
Tensor sum(const Tensor& x);
/// Mean over rows of -log softmax(logits)[label]. Throws InputError on a
/// label outside [0, classes).
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
inline Tensor detach(const Tensor& x) { return x.detach(); }

/// Count of rows whose argmax equals the label.
std::size_t count_correct(const Tensor& logits, std::span<const int> labels);

}  // namespace manpp
