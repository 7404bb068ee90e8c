#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// Every differentiable op records its inputs and a backward closure on the
// result node. backward() walks the graph in reverse topological order.
// Most ops treat a tensor as a row-major matrix of shape [rows x cols] where
// cols is the last dimension; token grids are stored as [tokens x channels]
// with the spatial extent carried separately as a Shape3.

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace volssl {

using Index = std::int64_t;

/// Spatial extent (depth, height, width).
using Shape3 = std::array<Index, 3>;

inline Index volume_of(const Shape3& s) { return s[0] * s[1] * s[2]; }
std::string to_string(const Shape3& s);

using MatRef = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatRef =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// 64-byte aligned storage, so vectorised reductions peel identically for
/// every buffer and results do not depend on heap addresses.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlign}));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t{kAlign}); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using AlignedBuffer = std::vector<double, AlignedAllocator<double>>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<Index> shape, double fill = 0.0);
  Tensor(std::vector<Index> shape, std::vector<double> data);

  static Tensor matrix(Index rows, Index cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }
  static Tensor scalar(double v) { return Tensor(std::vector<Index>{1}, std::vector<double>{v}); }

  const std::vector<Index>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  /// Product of all but the last dimension.
  Index rows() const;
  /// Last dimension (1 for rank-0/empty).
  Index cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  /// Copy of the elements.
  std::vector<double> storage() const { return {data_.begin(), data_.end()}; }

  double& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }
  double item() const;

  MatRef mat() { return MatRef(data_.data(), rows(), cols()); }
  ConstMatRef mat() const { return ConstMatRef(data_.data(), rows(), cols()); }

  void fill(double v);
  Tensor reshaped(std::vector<Index> shape) const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  Tensor(std::vector<Index> shape, AlignedBuffer data);

  std::vector<Index> shape_;
  AlignedBuffer data_;
};

std::string shape_string(const std::vector<Index>& shape);

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor& ensure_grad();
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  std::shared_ptr<Node> node_;
};

/// Seeds d(out)/d(out)=1 on a single-element tensor and propagates.
void backward(const Var& out);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Collects, on the current thread, which side of zero every leaky_relu input
/// fell on while alive. Two evaluations with different patterns straddle a kink.
class KinkRecorder {
 public:
  KinkRecorder();
  ~KinkRecorder();
  KinkRecorder(const KinkRecorder&) = delete;
  KinkRecorder& operator=(const KinkRecorder&) = delete;
  const std::vector<std::uint8_t>& signs() const { return signs_; }

 private:
  std::vector<std::uint8_t> signs_;
  std::vector<std::uint8_t>* previous_;
};

namespace ag {

Var constant(Tensor t);

// Dense algebra.
Var linear(const Var& x, const Var& weight, const Var& bias = Var());  // x[N,in] * W[in,out] + b[out]
Var matmul_nt(const Var& a, const Var& b);                            // a[n,k] * b[m,k]^T
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_bias(const Var& x, const Var& bias);  // bias broadcast over rows
Var sum(const Var& a);
Var mean(const Var& a);
/// Weighted sum of scalar vars; weights are constants.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

// Pointwise.
Var gelu(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.01);

// Normalisation.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Per-channel statistics over the rows (spatial positions) of one sample.
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

// Row/column bookkeeping.
Var concat_cols(const Var& a, const Var& b);
Var stack_rows(std::span<const Var> parts);
Var select_rows(const Var& x, std::span<const Index> rows);
Var mean_rows(const Var& x);
/// out[i] = mask[i] ? embedding : x[i]; embedding is [1, C].
Var replace_rows(const Var& x, std::span<const std::uint8_t> mask, const Var& embedding);

// Spatial rearrangement of [D*H*W, C] grids in (d, h, w) row-major order.
Var space_to_depth(const Var& x, const Shape3& grid, const Shape3& factor);
Var depth_to_space(const Var& x, const Shape3& coarse_grid, const Shape3& factor);

/// Same-padded stride-1 3D convolution. weight is [k^3 * Cin, Cout] with row
/// index tap * Cin + c_in, taps enumerated in (kd, kh, kw) row-major order.
Var conv3d(const Var& x, const Shape3& grid, const Var& weight, const Var& bias, int kernel);

struct WindowGeometry {
  Shape3 grid{};
  Shape3 window{};
  Shape3 shift{};
};

/// Multi-head self-attention inside non-overlapping (optionally cyclically
/// shifted) windows. qkv is [N, 3C] laid out as [q | k | v]; bias_table is
/// [(2wd-1)(2wh-1)(2ww-1), heads]. Returns [N, C].
Var window_attention(const Var& qkv, const WindowGeometry& geom, int heads, const Var& bias_table);

// Loss primitives. All return a single-element tensor.

/// sum_i w_i * ||pred_i - target_i||^2 / sum_i w_i over rows; weight has one entry per row.
Var weighted_mse(const Var& pred, const Tensor& target, std::span<const double> row_weight);
/// Mean multi-class cross-entropy of softmax(logits) against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);
/// Mean over rows of -sum_k p_k log softmax(logits / tau)_k with constant targets p.
Var soft_cross_entropy(const Var& logits, const Tensor& target_probs, double tau);
/// Mean InfoNCE over all rows of a cosine-similarity matrix.
Var info_nce(const Var& similarity, std::span<const int> partner, double temperature);
/// 1 - mean over `classes` of soft Dice between softmax(logits) and one-hot labels.
Var soft_dice(const Var& logits, std::span<const int> labels, std::span<const int> classes,
              double smooth = 1e-5);

}  // namespace ag

/// Row-wise softmax of a plain tensor (no graph).
Tensor softmax_rows(const Tensor& logits, double tau = 1.0);

}  // namespace volssl
