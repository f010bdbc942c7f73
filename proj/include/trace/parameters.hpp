#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trace/autodiff.hpp"
#include "trace/random.hpp"

namespace trace {

template <typename T>
struct NamedParameter {
  std::string name;
  ad::Tensor<T> tensor;
  bool decay = true;  // subject to AdamW weight decay
};

// Ordered, named collection of trainable leaf tensors.
template <typename T>
class ParameterStore {
 public:
  ad::Tensor<T> add(const std::string& name, ad::Shape shape, std::vector<T> values, bool decay = true);
  ad::Tensor<T> add_normal(const std::string& name, ad::Shape shape, double stddev, Rng& rng, bool decay = true);
  ad::Tensor<T> add_zeros(const std::string& name, ad::Shape shape, bool decay = false);
  ad::Tensor<T> add_ones(const std::string& name, ad::Shape shape);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  ad::Tensor<T> get(const std::string& name) const;
  std::span<const NamedParameter<T>> entries() const { return entries_; }
  std::vector<ad::Tensor<T>> tensors() const;

  std::size_t parameter_count() const;
  void zero_grad();
  void set_requires_grad(bool flag);
  // Copies values from another store with identical names and shapes.
  template <typename U>
  void assign_from(const ParameterStore<U>& other);
  // FNV-1a over names, shapes, and value bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<NamedParameter<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
template <typename U>
void ParameterStore<T>::assign_from(const ParameterStore<U>& other) {
  for (const auto& src : other.entries()) {
    ad::Tensor<T> dst = get(src.name);
    if (dst.shape() != src.tensor.shape()) {
      throw ad::ShapeError("assign_from: parameter '" + src.name + "' has shape " + ad::shape_str(src.tensor.shape()) +
                           ", expected " + ad::shape_str(dst.shape()));
    }
    auto out = dst.mutable_values();
    auto in = src.tensor.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(in[i]);
  }
  if (other.entries().size() != entries_.size()) {
    throw std::invalid_argument("assign_from: parameter sets differ in size");
  }
}

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;

}  // namespace trace
