#pragma once

// Binary checkpoint: "TRCE", u32 version, u32-length config text, u32 tensor count, then per
// tensor a u32-length UTF-8 name, u32 rank, u64 dims and little-endian float32 values; a
// trailing CRC-32 covers every preceding byte.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "trace/parameters.hpp"

namespace trace::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  std::string config;  // the run configuration that produced the tensors
  std::vector<NamedTensor> tensors;

  // Appends every parameter of `store` as "<prefix><name>".
  template <typename T>
  void add_store(const std::string& prefix, const ParameterStore<T>& store);
  // Copies "<prefix><name>" tensors into `store`; every parameter must be present with its shape.
  template <typename T>
  void restore_store(const std::string& prefix, ParameterStore<T>& store) const;
  const NamedTensor* find(const std::string& name) const;

  bool operator==(const Checkpoint&) const = default;
};

std::vector<unsigned char> encode(const Checkpoint& ckpt);
// Throws CheckpointError on a bad magic, version mismatch, truncation or checksum failure.
Checkpoint decode(const std::vector<unsigned char>& bytes);

void save(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

}  // namespace trace::checkpoint
