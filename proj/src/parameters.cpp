#include "trace/parameters.hpp"

#include <cstring>

namespace trace {

template <typename T>
ad::Tensor<T> ParameterStore<T>::add(const std::string& name, ad::Shape shape, std::vector<T> values, bool decay) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  ad::Tensor<T> t = ad::Tensor<T>::parameter(std::move(shape), std::move(values));
  index_[name] = entries_.size();
  entries_.push_back({name, t, decay});
  return t;
}

template <typename T>
ad::Tensor<T> ParameterStore<T>::add_normal(const std::string& name, ad::Shape shape, double stddev, Rng& rng,
                                            bool decay) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<T> values(ad::numel(shape));
  for (T& v : values) v = static_cast<T>(normal(rng));
  return add(name, std::move(shape), std::move(values), decay);
}

template <typename T>
ad::Tensor<T> ParameterStore<T>::add_zeros(const std::string& name, ad::Shape shape, bool decay) {
  std::vector<T> values(ad::numel(shape), T(0));
  return add(name, std::move(shape), std::move(values), decay);
}

template <typename T>
ad::Tensor<T> ParameterStore<T>::add_ones(const std::string& name, ad::Shape shape) {
  std::vector<T> values(ad::numel(shape), T(1));
  return add(name, std::move(shape), std::move(values), false);
}

template <typename T>
ad::Tensor<T> ParameterStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return entries_[it->second].tensor;
}

template <typename T>
std::vector<ad::Tensor<T>> ParameterStore<T>::tensors() const {
  std::vector<ad::Tensor<T>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.tensor);
  return out;
}

template <typename T>
std::size_t ParameterStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename T>
void ParameterStore<T>::set_requires_grad(bool flag) {
  for (auto& e : entries_) e.tensor.set_requires_grad(flag);
}

template <typename T>
std::uint64_t ParameterStore<T>::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : entries_) {
    mix(e.name.data(), e.name.size());
    for (std::size_t extent : e.tensor.shape()) mix(&extent, sizeof(extent));
    mix(e.tensor.values().data(), e.tensor.size() * sizeof(T));
  }
  return h;
}

template class ParameterStore<float>;
template class ParameterStore<double>;

}  // namespace trace
