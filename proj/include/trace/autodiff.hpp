#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape records every operation in execution order, so the record is
// topologically sorted by construction; backward() walks it once in reverse.
// Leaf tensors (constants and parameters) live outside the tape. Parameter
// gradients accumulate across backward passes until the caller zeroes them.
//
// Broadcasting is limited to the additive softmax mask and the row bias of
// add_bias(); every other op requires exactly matching shapes.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trace/random.hpp"

namespace trace::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tape;

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor parameter(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  // Leading extents flattened; a 1-D tensor is a single row.
  std::size_t rows() const;
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);

  T item() const;
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  const char* op() const { return node_->op; }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<Node<T>> node_;
  friend class Tape<T>;
};

// Row reference for gather_rows: row `row` of source tensor `source`.
struct RowRef {
  std::size_t source;
  std::size_t row;
};

// One InfoNCE term: logits row, the positive column, and the negative columns.
struct ContrastiveRow {
  std::size_t row;
  std::size_t positive;
  std::vector<std::size_t> negatives;
};

// Channel-biased multi-head attention over a batch of equally laid-out sequences.
template <typename T>
struct AttentionSpec {
  std::size_t batch = 1;
  std::size_t seq_len = 0;
  std::size_t n_heads = 1;
  // Rotary position per token (same layout for every batch item). Position 0 is the identity rotation.
  std::vector<int> positions;
  // Additive seq_len×seq_len mask with entries 0 or -inf; empty means unrestricted.
  std::vector<T> mask;
  double rope_base = 10000.0;
  // Logit scale; 0 means 1/sqrt(head width).
  double scale = 0.0;
};

// Rotates consecutive (even, odd) feature pairs of one head vector by position·θ_m,
// θ_m = base^(-2m/width). `inverse` applies the transpose rotation.
template <typename T>
void rope_rotate_inplace(std::span<T> head, int position, double base, bool inverse = false);

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> op_names() const;
  // Drops every recorded intermediate.
  void clear() { nodes_.clear(); }

  // Populates gradients of every requires_grad leaf reachable from `loss`.
  void backward(const Tensor<T>& loss);
  // Number of node backward functions run by the last backward().
  std::size_t last_backward_visits() const { return last_visits_; }

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> scale(const Tensor<T>& a, T factor);
  Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias);
  Tensor<T> gelu(const Tensor<T>& a);
  Tensor<T> softmax(const Tensor<T>& x, const Tensor<T>* additive_mask = nullptr);
  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);
  Tensor<T> concat(std::span<const Tensor<T>> parts, int axis);
  Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);
  Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);
  Tensor<T> transpose(const Tensor<T>& x);
  Tensor<T> reshape(const Tensor<T>& x, Shape shape);
  Tensor<T> gather_rows(std::span<const Tensor<T>> sources, std::span<const RowRef> index);
  Tensor<T> sum(const Tensor<T>& x);
  Tensor<T> mean(const Tensor<T>& x);
  // Mean squared error over entries with mask != 0 (empty mask selects all).
  Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target, std::span<const std::uint8_t> mask = {});
  Tensor<T> rope(const Tensor<T>& x, std::span<const int> row_positions, std::size_t n_heads, double base);
  Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12));
  // Mean over rows of −log softmax(logits[row])[positive], restricted to {positive} ∪ negatives.
  Tensor<T> info_nce(const Tensor<T>& logits, std::span<const ContrastiveRow> rows);
  Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);
  // y[r, :] = x[r, :] * row_scale[r] + row_shift[r]
  Tensor<T> row_affine(const Tensor<T>& x, std::span<const T> row_scale, std::span<const T> row_shift);
  Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);
  // qkv is [batch·seq_len × 3d] with column blocks Q | K | V; returns [batch·seq_len × d].
  Tensor<T> attention(const Tensor<T>& qkv, const AttentionSpec<T>& spec);

 private:
  using NodePtr = std::shared_ptr<Node<T>>;
  Tensor<T> record(Shape shape, std::vector<T> value, const char* op, std::vector<NodePtr> parents,
                   std::function<void(Node<T>&)> backward);

  std::vector<NodePtr> nodes_;
  std::size_t last_visits_ = 0;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace trace::ad
