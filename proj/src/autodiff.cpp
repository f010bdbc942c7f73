#include "trace/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "trace/simd.hpp"

namespace trace::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_2d(const Shape& s, const char* op) {
  require(s.size() == 2, std::string(op) + ": expected a 2-D tensor, got " + shape_str(s));
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return cdf + x * pdf;
}

// Row softmax with additive mask in place. Throws if a row has no finite entry.
template <typename T>
void softmax_row(T* row, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
  if (!std::isfinite(mx)) throw std::domain_error("softmax: fully masked row");
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    total += row[j];
  }
  const T inv = T(1) / total;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

// dS = A ⊙ (dA − rowsum(dA ⊙ A)), written into dA.
template <typename T>
void softmax_row_backward(const T* prob, T* dprob, std::size_t n) {
  T inner = 0;
  for (std::size_t j = 0; j < n; ++j) inner += prob[j] * dprob[j];
  for (std::size_t j = 0; j < n; ++j) dprob[j] = prob[j] * (dprob[j] - inner);
}

struct RopeTable {
  std::vector<double> cos, sin;  // [positions × half]
  std::size_t half = 0;
};

RopeTable make_rope_table(std::span<const int> positions, std::size_t width, double base) {
  RopeTable t;
  t.half = width / 2;
  t.cos.resize(positions.size() * t.half);
  t.sin.resize(positions.size() * t.half);
  for (std::size_t p = 0; p < positions.size(); ++p) {
    for (std::size_t m = 0; m < t.half; ++m) {
      const double theta = std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(width));
      const double angle = static_cast<double>(positions[p]) * theta;
      t.cos[p * t.half + m] = std::cos(angle);
      t.sin[p * t.half + m] = std::sin(angle);
    }
  }
  return t;
}

template <typename T>
void rotate_with_table(T* v, const RopeTable& t, std::size_t p, bool inverse) {
  for (std::size_t m = 0; m < t.half; ++m) {
    const T c = static_cast<T>(t.cos[p * t.half + m]);
    const T s = inverse ? -static_cast<T>(t.sin[p * t.half + m]) : static_cast<T>(t.sin[p * t.half + m]);
    const T x0 = v[2 * m];
    const T x1 = v[2 * m + 1];
    v[2 * m] = x0 * c - x1 * s;
    v[2 * m + 1] = x0 * s + x1 * c;
  }
}

}  // namespace

template <typename T>
void rope_rotate_inplace(std::span<T> head, int position, double base, bool inverse) {
  require(head.size() % 2 == 0, "rope: head width must be even");
  const int pos[1] = {position};
  const RopeTable table = make_rope_table(pos, head.size(), base);
  rotate_with_table(head.data(), table, 0, inverse);
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  require(numel(shape) == values.size(),
          "tensor: shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
  require(!shape.empty(), "tensor: empty shape");
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = numel(shape);
  Tensor t = constant(std::move(shape), std::vector<T>(n, T(0)));
  t.node_->requires_grad = requires_grad;
  return t;
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return node_->value.size() / node_->shape.back();
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->is_leaf) throw std::logic_error("requires_grad can only be set on leaf tensors");
  node_->requires_grad = flag;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

// ---------------------------------------------------------------------------
// Tape core

template <typename T>
Tensor<T> Tape<T>::record(Shape shape, std::vector<T> value, const char* op, std::vector<NodePtr> parents,
                          std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;
  node->op = op;
  node->requires_grad = std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  nodes_.push_back(node);
  return Tensor<T>(std::move(node));
}

template <typename T>
std::vector<std::string> Tape<T>::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.emplace_back(n->op);
  return names;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  for (auto& n : nodes_) n->grad.clear();
  auto& root = *loss.node();
  root.ensure_grad();
  root.grad[0] += T(1);
  last_visits_ = 0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& n = **it;
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(n);
    ++last_visits_;
  }
}

// ---------------------------------------------------------------------------
// Ops

template <typename T>
Tensor<T> Tape<T>::matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a.shape(), "matmul");
  require_2d(b.shape(), "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner extents differ for " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  std::vector<T> out(m * n);
  simd::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n, false);
  Node<T>* pa = a.node().get();
  Node<T>* pb = b.node().get();
  return record({m, n}, std::move(out), "matmul", {a.node(), b.node()}, [pa, pb, m, k, n](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      simd::gemm_nt(self.grad.data(), pb->value.data(), pa->grad.data(), m, n, k, true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      simd::gemm_tn(pa->value.data(), self.grad.data(), pb->grad.data(), k, m, n, true);
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  Node<T>* pa = a.node().get();
  Node<T>* pb = b.node().get();
  return record(a.shape(), std::move(out), "add", {a.node(), b.node()}, [pa, pb](Node<T>& self) {
    for (Node<T>* p : {pa, pb}) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  Node<T>* pa = a.node().get();
  Node<T>* pb = b.node().get();
  return record(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  Node<T>* pa = a.node().get();
  Node<T>* pb = b.node().get();
  return record(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (T& v : out) v *= factor;
  Node<T>* pa = a.node().get();
  return record(a.shape(), std::move(out), "scale", {a.node()}, [pa, factor](Node<T>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  const std::size_t n = a.cols();
  require(bias.size() == n, "add_bias: bias of " + shape_str(bias.shape()) + " does not match last extent of " +
                                shape_str(a.shape()));
  const std::size_t m = a.rows();
  std::vector<T> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.values()[j];
  }
  Node<T>* pa = a.node().get();
  Node<T>* pb = bias.node().get();
  return record(a.shape(), std::move(out), "add_bias", {a.node(), bias.node()}, [pa, pb, m, n](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) pb->grad[j] += self.grad[i * n + j];
      }
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::gelu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(a.values()[i]);
  Node<T>* pa = a.node().get();
  return record(a.shape(), std::move(out), "gelu", {a.node()}, [pa](Node<T>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * gelu_grad(pa->value[i]);
  });
}

template <typename T>
Tensor<T> Tape<T>::softmax(const Tensor<T>& x, const Tensor<T>* additive_mask) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.rows();
  std::vector<T> out(x.values().begin(), x.values().end());
  if (additive_mask != nullptr) {
    const std::size_t period = additive_mask->size();
    require(period % n == 0 && x.size() % period == 0,
            "softmax: mask " + shape_str(additive_mask->shape()) + " not broadcastable to " + shape_str(x.shape()));
    const auto mask = additive_mask->values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += mask[i % period];
  }
  for (std::size_t r = 0; r < rows; ++r) softmax_row(out.data() + r * n, n);
  Node<T>* px = x.node().get();
  return record(x.shape(), std::move(out), "softmax", {x.node()}, [px, rows, n](Node<T>& self) {
    px->ensure_grad();
    std::vector<T> g(self.grad);
    for (std::size_t r = 0; r < rows; ++r) softmax_row_backward(self.value.data() + r * n, g.data() + r * n, n);
    for (std::size_t i = 0; i < g.size(); ++i) px->grad[i] += g[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.rows();
  require(gain.size() == n && bias.size() == n, "layer_norm: gain/bias must match last extent of " + shape_str(x.shape()));
  require(eps > T(0), "layer_norm: eps must be positive");
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gain.values()[j] + bias.values()[j];
    }
  }
  Node<T>* px = x.node().get();
  Node<T>* pg = gain.node().get();
  Node<T>* pb = bias.node().get();
  return record(x.shape(), std::move(out), "layer_norm", {x.node(), gain.node(), bias.node()},
                [px, pg, pb, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                  if (pg->requires_grad || pb->requires_grad) {
                    pg->ensure_grad();
                    pb->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < n; ++j) {
                        pg->grad[j] += self.grad[r * n + j] * xhat[r * n + j];
                        pb->grad[j] += self.grad[r * n + j];
                      }
                    }
                  }
                  if (!px->requires_grad) return;
                  px->ensure_grad();
                  const T inv_n = T(1) / static_cast<T>(n);
                  for (std::size_t r = 0; r < rows; ++r) {
                    T mean_d = 0, mean_dx = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                      const T d = self.grad[r * n + j] * pg->value[j];
                      mean_d += d;
                      mean_dx += d * xhat[r * n + j];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    for (std::size_t j = 0; j < n; ++j) {
                      const T d = self.grad[r * n + j] * pg->value[j];
                      px->grad[r * n + j] += inv_std[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                    }
                  }
                });
}

template <typename T>
Tensor<T> Tape<T>::concat(std::span<const Tensor<T>> parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  if (axis == 0) {
    std::vector<RowRef> index;
    for (std::size_t s = 0; s < parts.size(); ++s) {
      for (std::size_t r = 0; r < parts[s].rows(); ++r) index.push_back({s, r});
    }
    return gather_rows(parts, index);
  }
  require(axis == 1, "concat: axis must be 0 or 1");
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat: row counts differ, " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    offsets.push_back(total);
    total += p.cols();
    parents.push_back(p.node());
  }
  std::vector<T> out(rows * total);
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const std::size_t w = parts[s].cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(parts[s].values().data() + r * w, w, out.data() + r * total + offsets[s]);
    }
  }
  std::vector<Node<T>*> raw;
  for (const auto& p : parents) raw.push_back(p.get());
  return record({rows, total}, std::move(out), "concat", std::move(parents),
                [raw, offsets, rows, total](Node<T>& self) {
                  for (std::size_t s = 0; s < raw.size(); ++s) {
                    Node<T>* p = raw[s];
                    if (!p->requires_grad) continue;
                    p->ensure_grad();
                    const std::size_t w = p->shape.back();
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < w; ++j) p->grad[r * w + j] += self.grad[r * total + offsets[s] + j];
                    }
                  }
                });
}

template <typename T>
Tensor<T> Tape<T>::slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require(begin < end && end <= x.rows(), "slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                               ") out of bounds for " + shape_str(x.shape()));
  const std::size_t n = x.cols();
  std::vector<T> out(x.values().begin() + begin * n, x.values().begin() + end * n);
  Node<T>* px = x.node().get();
  return record({end - begin, n}, std::move(out), "slice_rows", {x.node()}, [px, begin, n](Node<T>& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[begin * n + i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.rows();
  require(begin < end && end <= n, "slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                       ") out of bounds for " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  std::vector<T> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.values().data() + r * n + begin, w, out.data() + r * w);
  Node<T>* px = x.node().get();
  return record({rows, w}, std::move(out), "slice_cols", {x.node()}, [px, begin, n, w, rows](Node<T>& self) {
    px->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) px->grad[r * n + begin + j] += self.grad[r * w + j];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::transpose(const Tensor<T>& x) {
  require_2d(x.shape(), "transpose");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.values()[i * n + j];
  }
  Node<T>* px = x.node().get();
  return record({n, m}, std::move(out), "transpose", {x.node()}, [px, m, n](Node<T>& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) px->grad[i * n + j] += self.grad[j * m + i];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  Node<T>* px = x.node().get();
  return record(std::move(shape), std::move(out), "reshape", {x.node()}, [px](Node<T>& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::gather_rows(std::span<const Tensor<T>> sources, std::span<const RowRef> index) {
  require(!sources.empty() && !index.empty(), "gather_rows: empty input");
  const std::size_t n = sources[0].cols();
  std::vector<NodePtr> parents;
  std::vector<Node<T>*> raw;
  for (const auto& s : sources) {
    require(s.cols() == n, "gather_rows: width mismatch " + shape_str(sources[0].shape()) + " vs " + shape_str(s.shape()));
    parents.push_back(s.node());
    raw.push_back(s.node().get());
  }
  std::vector<T> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const RowRef ref = index[i];
    require(ref.source < sources.size() && ref.row < sources[ref.source].rows(), "gather_rows: row reference out of range");
    std::copy_n(sources[ref.source].values().data() + ref.row * n, n, out.data() + i * n);
  }
  std::vector<RowRef> idx(index.begin(), index.end());
  return record({index.size(), n}, std::move(out), "gather_rows", std::move(parents),
                [raw, idx = std::move(idx), n](Node<T>& self) {
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    Node<T>* p = raw[idx[i].source];
                    if (!p->requires_grad) continue;
                    p->ensure_grad();
                    T* dst = p->grad.data() + idx[i].row * n;
                    const T* src = self.grad.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
                  }
                });
}

template <typename T>
Tensor<T> Tape<T>::sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  Node<T>* px = x.node().get();
  return record({1}, {total}, "sum", {x.node()}, [px](Node<T>& self) {
    px->ensure_grad();
    for (T& g : px->grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> Tape<T>::mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.size());
  T total = 0;
  for (T v : x.values()) total += v;
  Node<T>* px = x.node().get();
  return record({1}, {total * inv}, "mean", {x.node()}, [px, inv](Node<T>& self) {
    px->ensure_grad();
    for (T& g : px->grad) g += self.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> Tape<T>::mse(const Tensor<T>& pred, const Tensor<T>& target, std::span<const std::uint8_t> mask) {
  require_same(pred.shape(), target.shape(), "mse");
  require(mask.empty() || mask.size() == pred.size(), "mse: element mask size does not match " + shape_str(pred.shape()));
  std::size_t count = 0;
  T total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask.empty() && mask[i] == 0) continue;
    const T diff = pred.values()[i] - target.values()[i];
    total += diff * diff;
    ++count;
  }
  if (count == 0) throw std::domain_error("mse: element mask selects no entries");
  const T inv = T(1) / static_cast<T>(count);
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  Node<T>* pp = pred.node().get();
  Node<T>* pt = target.node().get();
  return record({1}, {total * inv}, "mse", {pred.node(), target.node()},
                [pp, pt, inv, keep = std::move(keep)](Node<T>& self) {
                  const T g = self.grad[0] * T(2) * inv;
                  if (pp->requires_grad) pp->ensure_grad();
                  if (pt->requires_grad) pt->ensure_grad();
                  for (std::size_t i = 0; i < pp->value.size(); ++i) {
                    if (!keep.empty() && keep[i] == 0) continue;
                    const T d = g * (pp->value[i] - pt->value[i]);
                    if (pp->requires_grad) pp->grad[i] += d;
                    if (pt->requires_grad) pt->grad[i] -= d;
                  }
                });
}

template <typename T>
Tensor<T> Tape<T>::rope(const Tensor<T>& x, std::span<const int> row_positions, std::size_t n_heads, double base) {
  const std::size_t rows = x.rows();
  const std::size_t n = x.cols();
  require(row_positions.size() == rows, "rope: need one position per row of " + shape_str(x.shape()));
  require(n_heads > 0 && n % n_heads == 0, "rope: width not divisible by head count");
  const std::size_t width = n / n_heads;
  require(width % 2 == 0, "rope: head width must be even");
  auto table = std::make_shared<RopeTable>(make_rope_table(row_positions, width, base));
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t h = 0; h < n_heads; ++h) rotate_with_table(out.data() + r * n + h * width, *table, r, false);
  }
  Node<T>* px = x.node().get();
  return record(x.shape(), std::move(out), "rope", {x.node()}, [px, table, rows, n, n_heads, width](Node<T>& self) {
    px->ensure_grad();
    std::vector<T> g(self.grad);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t h = 0; h < n_heads; ++h) rotate_with_table(g.data() + r * n + h * width, *table, r, true);
    }
    for (std::size_t i = 0; i < g.size(); ++i) px->grad[i] += g[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::l2_normalize_rows(const Tensor<T>& x, T eps) {
  const std::size_t rows = x.rows();
  const std::size_t n = x.cols();
  std::vector<T> out(x.size());
  std::vector<T> inv_norm(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.values().data() + r * n;
    T sq = 0;
    for (std::size_t j = 0; j < n; ++j) sq += row[j] * row[j];
    inv_norm[r] = T(1) / std::max(std::sqrt(sq), eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = row[j] * inv_norm[r];
  }
  Node<T>* px = x.node().get();
  return record(x.shape(), std::move(out), "l2_normalize_rows", {x.node()},
                [px, rows, n, inv_norm = std::move(inv_norm)](Node<T>& self) {
                  px->ensure_grad();
                  for (std::size_t r = 0; r < rows; ++r) {
                    const T* y = self.value.data() + r * n;
                    const T* g = self.grad.data() + r * n;
                    T inner = 0;
                    for (std::size_t j = 0; j < n; ++j) inner += y[j] * g[j];
                    for (std::size_t j = 0; j < n; ++j) px->grad[r * n + j] += inv_norm[r] * (g[j] - y[j] * inner);
                  }
                });
}

template <typename T>
Tensor<T> Tape<T>::info_nce(const Tensor<T>& logits, std::span<const ContrastiveRow> rows) {
  require_2d(logits.shape(), "info_nce");
  require(!rows.empty(), "info_nce: no rows");
  const std::size_t n = logits.cols();
  const auto lv = logits.values();
  // Softmax weights over each row's candidate set, saved for backward.
  std::vector<std::vector<T>> weights(rows.size());
  T total = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const ContrastiveRow& cr = rows[i];
    require(cr.row < logits.rows() && cr.positive < n, "info_nce: index out of range");
    const T* row = lv.data() + cr.row * n;
    T mx = row[cr.positive];
    for (std::size_t c : cr.negatives) {
      require(c < n, "info_nce: negative index out of range");
      mx = std::max(mx, row[c]);
    }
    std::vector<T>& w = weights[i];
    w.resize(1 + cr.negatives.size());
    w[0] = std::exp(row[cr.positive] - mx);
    T z = w[0];
    for (std::size_t q = 0; q < cr.negatives.size(); ++q) {
      w[q + 1] = std::exp(row[cr.negatives[q]] - mx);
      z += w[q + 1];
    }
    for (T& v : w) v /= z;
    total += -(row[cr.positive] - mx - std::log(z));
  }
  const T inv = T(1) / static_cast<T>(rows.size());
  std::vector<ContrastiveRow> saved(rows.begin(), rows.end());
  Node<T>* pl = logits.node().get();
  return record({1}, {total * inv}, "info_nce", {logits.node()},
                [pl, n, inv, saved = std::move(saved), weights = std::move(weights)](Node<T>& self) {
                  pl->ensure_grad();
                  const T g = self.grad[0] * inv;
                  for (std::size_t i = 0; i < saved.size(); ++i) {
                    T* grow = pl->grad.data() + saved[i].row * n;
                    grow[saved[i].positive] += g * (weights[i][0] - T(1));
                    for (std::size_t q = 0; q < saved[i].negatives.size(); ++q) {
                      grow[saved[i].negatives[q]] += g * weights[i][q + 1];
                    }
                  }
                });
}

template <typename T>
Tensor<T> Tape<T>::cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_2d(logits.shape(), "cross_entropy");
  const std::size_t rows = logits.rows();
  const std::size_t n = logits.cols();
  require(labels.size() == rows, "cross_entropy: one label per row required");
  std::vector<T> prob(logits.values().begin(), logits.values().end());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    require(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < n, "cross_entropy: label out of range");
    softmax_row(prob.data() + r * n, n);
    total -= std::log(std::max(prob[r * n + labels[r]], std::numeric_limits<T>::min()));
  }
  const T inv = T(1) / static_cast<T>(rows);
  std::vector<int> lab(labels.begin(), labels.end());
  Node<T>* pl = logits.node().get();
  return record({1}, {total * inv}, "cross_entropy", {logits.node()},
                [pl, rows, n, inv, prob = std::move(prob), lab = std::move(lab)](Node<T>& self) {
                  pl->ensure_grad();
                  const T g = self.grad[0] * inv;
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < n; ++j) {
                      const T y = (static_cast<int>(j) == lab[r]) ? T(1) : T(0);
                      pl->grad[r * n + j] += g * (prob[r * n + j] - y);
                    }
                  }
                });
}

template <typename T>
Tensor<T> Tape<T>::row_affine(const Tensor<T>& x, std::span<const T> row_scale, std::span<const T> row_shift) {
  const std::size_t rows = x.rows();
  const std::size_t n = x.cols();
  require(row_scale.size() == rows && row_shift.size() == rows, "row_affine: need one scale/shift per row");
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x.values()[r * n + j] * row_scale[r] + row_shift[r];
  }
  std::vector<T> sc(row_scale.begin(), row_scale.end());
  Node<T>* px = x.node().get();
  return record(x.shape(), std::move(out), "row_affine", {x.node()}, [px, rows, n, sc = std::move(sc)](Node<T>& self) {
    px->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < n; ++j) px->grad[r * n + j] += self.grad[r * n + j] * sc[r];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::dropout(const Tensor<T>& x, double p, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "dropout: probability must lie in [0, 1)");
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const T factor = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> multiplier(x.size());
  for (T& m : multiplier) m = keep(rng) ? factor : T(0);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * multiplier[i];
  Node<T>* px = x.node().get();
  return record(x.shape(), std::move(out), "dropout", {x.node()}, [px, multiplier = std::move(multiplier)](Node<T>& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * multiplier[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::attention(const Tensor<T>& qkv, const AttentionSpec<T>& spec) {
  require_2d(qkv.shape(), "attention");
  const std::size_t B = spec.batch, L = spec.seq_len, H = spec.n_heads;
  require(B > 0 && L > 0 && H > 0, "attention: empty batch, sequence, or head count");
  require(qkv.rows() == B * L, "attention: expected " + std::to_string(B * L) + " rows, got " + shape_str(qkv.shape()));
  require(qkv.cols() % 3 == 0, "attention: qkv width must be a multiple of 3");
  const std::size_t d = qkv.cols() / 3;
  require(d % H == 0, "attention: width not divisible by head count");
  const std::size_t dh = d / H;
  require(dh % 2 == 0, "attention: head width must be even for rotary encoding");
  require(spec.positions.size() == L, "attention: need one rotary position per token");
  require(spec.mask.empty() || spec.mask.size() == L * L, "attention: mask must be seq_len×seq_len");
  const T scale = spec.scale > 0 ? static_cast<T>(spec.scale) : T(1) / std::sqrt(static_cast<T>(dh));
  auto table = std::make_shared<RopeTable>(make_rope_table(spec.positions, dh, spec.rope_base));
  const std::size_t width = 3 * d;

  // Gathers one head's q, k, v for batch item b; q and k are rotated.
  auto load_head = [L, d, dh, width, table](const T* src, std::size_t b, std::size_t h, T* q, T* k, T* v) {
    for (std::size_t i = 0; i < L; ++i) {
      const T* row = src + (b * L + i) * width;
      std::copy_n(row + h * dh, dh, q + i * dh);
      std::copy_n(row + d + h * dh, dh, k + i * dh);
      std::copy_n(row + 2 * d + h * dh, dh, v + i * dh);
      rotate_with_table(q + i * dh, *table, i, false);
      rotate_with_table(k + i * dh, *table, i, false);
    }
  };

  auto probs = std::make_shared<std::vector<T>>(B * H * L * L);
  std::vector<T> out(B * L * d);
  std::vector<T> q(L * dh), k(L * dh), v(L * dh), o(L * dh);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      load_head(qkv.values().data(), b, h, q.data(), k.data(), v.data());
      T* a = probs->data() + (b * H + h) * L * L;
      simd::gemm_nt(q.data(), k.data(), a, L, dh, L, false);
      for (std::size_t i = 0; i < L * L; ++i) {
        a[i] *= scale;
        if (!spec.mask.empty()) a[i] += spec.mask[i];
      }
      for (std::size_t i = 0; i < L; ++i) softmax_row(a + i * L, L);
      simd::gemm_nn(a, v.data(), o.data(), L, L, dh, false);
      for (std::size_t i = 0; i < L; ++i) std::copy_n(o.data() + i * dh, dh, out.data() + (b * L + i) * d + h * dh);
    }
  }

  Node<T>* px = qkv.node().get();
  return record({B * L, d}, std::move(out), "attention", {qkv.node()},
                [px, probs, table, B, L, H, d, dh, width, scale, load_head](Node<T>& self) {
                  px->ensure_grad();
                  std::vector<T> q(L * dh), k(L * dh), v(L * dh), dout(L * dh), da(L * L);
                  std::vector<T> dq(L * dh), dk(L * dh), dv(L * dh);
                  for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t h = 0; h < H; ++h) {
                      load_head(px->value.data(), b, h, q.data(), k.data(), v.data());
                      const T* a = probs->data() + (b * H + h) * L * L;
                      for (std::size_t i = 0; i < L; ++i) {
                        std::copy_n(self.grad.data() + (b * L + i) * d + h * dh, dh, dout.data() + i * dh);
                      }
                      simd::gemm_nt(dout.data(), v.data(), da.data(), L, dh, L, false);
                      simd::gemm_tn(a, dout.data(), dv.data(), L, L, dh, false);
                      for (std::size_t i = 0; i < L; ++i) softmax_row_backward(a + i * L, da.data() + i * L, L);
                      for (T& x : da) x *= scale;
                      simd::gemm_nn(da.data(), k.data(), dq.data(), L, L, dh, false);
                      simd::gemm_tn(da.data(), q.data(), dk.data(), L, L, dh, false);
                      for (std::size_t i = 0; i < L; ++i) {
                        rotate_with_table(dq.data() + i * dh, *table, i, true);
                        rotate_with_table(dk.data() + i * dh, *table, i, true);
                        T* grow = px->grad.data() + (b * L + i) * width;
                        for (std::size_t j = 0; j < dh; ++j) {
                          grow[h * dh + j] += dq[i * dh + j];
                          grow[d + h * dh + j] += dk[i * dh + j];
                          grow[2 * d + h * dh + j] += dv[i * dh + j];
                        }
                      }
                    }
                  }
                });
}

template void rope_rotate_inplace<float>(std::span<float>, int, double, bool);
template void rope_rotate_inplace<double>(std::span<double>, int, double, bool);

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace trace::ad
