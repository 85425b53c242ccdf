#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Graphs are built eagerly by the free functions below and
// released when the last Tensor handle referencing them goes away.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ldmi::ag {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  /// Leaf tensor that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  /// In-place access for optimizers and initializers; never use on a
  /// tensor that is part of a live graph.
  std::span<double> mutable_data() { return node_->value; }
  std::vector<double> to_vector() const { return node_->value; }
  double item() const;
  double at(std::size_t flat) const { return node_->value.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  /// Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Back-propagates from this scalar.
  void backward() const;

  /// Same values, no history.
  Tensor detach() const;
  /// Independent copy of the values; keeps the parameter flag.
  Tensor clone() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph construction within its scope (per thread).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor sin(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);  // erf form
Tensor clamp(const Tensor& a, double lo, double hi);

/// a viewed as [numel/n, n] plus bias[n] broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Linear algebra on rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor transpose(const Tensor& a);

// Layout.
Tensor reshape(const Tensor& a, Shape shape);
/// out[i] = a[index[i]]; gradients scatter-add back.
Tensor gather(const Tensor& a, std::vector<std::size_t> index, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);

/// Row-wise layer normalization of a [rows, n] tensor.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Multi-head scaled dot-product attention. q is [n, heads*d], k and v are
/// [m, heads*d]. key_mask, when given, has m entries; false keys receive
/// zero attention weight. probs_out, when given, receives [heads, n, m].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t heads, const std::vector<bool>* key_mask = nullptr,
                 std::vector<double>* probs_out = nullptr);

/// Convolution over [batch, c_in, h, w] with weight [c_out, c_in, kh, kw]
/// and bias [c_out]; symmetric zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t pad);

/// x [batch, c, h, w] plus per-(batch, channel) offsets t [batch, c].
Tensor add_channel_bias(const Tensor& x, const Tensor& t);

/// Nearest-neighbour upsampling by 2 of [batch, c, h, w], cropped to
/// (out_h, out_w).
Tensor upsample2x(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// Rescales each column of a [rows, cols] tensor to unit Euclidean norm.
/// Throws Error(kDegenerateNorm) if a column norm is below min_norm.
Tensor normalize_columns(const Tensor& a, double min_norm);

}  // namespace ldmi::ag
