#include "trace/checkpoint.hpp"

#include <bit>
#include <algorithm>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "trace/checksum.hpp"

namespace trace::checkpoint {

namespace {

static_assert(sizeof(float) == 4);

constexpr unsigned char kMagic[4] = {'T', 'R', 'C', 'E'};

template <typename U>
void put(std::vector<unsigned char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_string(std::vector<unsigned char>& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Cursor {
 public:
  Cursor(const std::vector<unsigned char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError(fmt::format("checkpoint truncated at byte {}", pos_));
  }
  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
void Checkpoint::add_store(const std::string& prefix, const ParameterStore<T>& store) {
  for (const auto& p : store.entries()) {
    NamedTensor t{prefix + p.name, {}, {}};
    t.shape.assign(p.tensor.shape().begin(), p.tensor.shape().end());
    for (T v : p.tensor.values()) t.values.push_back(static_cast<float>(v));
    tensors.push_back(std::move(t));
  }
}

template <typename T>
void Checkpoint::restore_store(const std::string& prefix, ParameterStore<T>& store) const {
  std::size_t matched = 0;
  for (const auto& t : tensors)
    if (t.name.starts_with(prefix)) ++matched;
  for (const auto& p : store.entries()) {
    const auto* t = find(prefix + p.name);
    if (!t) throw CheckpointError(fmt::format("checkpoint has no tensor '{}{}'", prefix, p.name));
    const std::vector<std::size_t> want(p.tensor.shape().begin(), p.tensor.shape().end());
    if (t->shape != want)
      throw CheckpointError(fmt::format("checkpoint tensor '{}' has shape [{}], expected [{}]", t->name, fmt::join(t->shape, ", "),
                                        fmt::join(want, ", ")));
    ad::Tensor<T> dst = p.tensor;
    auto out = dst.mutable_values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(t->values[i]);
  }
  if (matched != store.entries().size())
    throw CheckpointError(fmt::format("checkpoint holds {} tensors under '{}', the model expects {}", matched, prefix,
                                      store.entries().size()));
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<unsigned char> encode(const Checkpoint& ckpt) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kVersion);
  put_string(out, ckpt.config);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    std::size_t count = 1;
    for (auto d : t.shape) count *= d;
    if (count != t.values.size())
      throw CheckpointError(fmt::format("tensor '{}' has {} values for its shape", t.name, t.values.size()));
    put_string(out, t.name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put<std::uint64_t>(out, d);
    for (float v : t.values) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  put<std::uint32_t>(out, crc32(out));
  return out;
}

Checkpoint decode(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw CheckpointError("not a checkpoint (bad magic)");
  if (bytes.size() < 12) throw CheckpointError("checkpoint truncated");
  const std::size_t body = bytes.size() - 4;
  Cursor cur(bytes, body);
  cur.get<std::uint32_t>();
  const auto version = cur.get<std::uint32_t>();
  if (version != kVersion) throw CheckpointError(fmt::format("checkpoint version {} is not supported (expected {})", version, kVersion));

  std::uint32_t stored = 0;
  for (std::size_t i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  if (crc32(std::span<const unsigned char>(bytes.data(), body)) != stored)
    throw CheckpointError("checkpoint checksum mismatch (file corrupted or truncated)");

  Checkpoint ckpt;
  ckpt.config = cur.get_string();
  const auto n = cur.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < n; ++k) {
    NamedTensor t;
    t.name = cur.get_string();
    const auto rank = cur.get<std::uint32_t>();
    std::size_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(static_cast<std::size_t>(cur.get<std::uint64_t>()));
      count *= t.shape.back();
    }
    if (count > (body - cur.pos()) / 4) throw CheckpointError(fmt::format("checkpoint truncated inside tensor '{}'", t.name));
    t.values.resize(count);
    for (auto& v : t.values) v = std::bit_cast<float>(cur.get<std::uint32_t>());
    ckpt.tensors.push_back(std::move(t));
  }
  if (cur.pos() != body) throw CheckpointError("checkpoint has trailing bytes");
  return ckpt;
}

void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(fmt::format("cannot write checkpoint '{}'", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(fmt::format("failed writing checkpoint '{}'", path.string()));
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(fmt::format("checkpoint not found: '{}'", path.string()));
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

template void Checkpoint::add_store<float>(const std::string&, const ParameterStore<float>&);
template void Checkpoint::add_store<double>(const std::string&, const ParameterStore<double>&);
template void Checkpoint::restore_store<float>(const std::string&, ParameterStore<float>&) const;
template void Checkpoint::restore_store<double>(const std::string&, ParameterStore<double>&) const;

}  // namespace trace::checkpoint
