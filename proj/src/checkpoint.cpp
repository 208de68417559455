#include "mclfir/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mclfir {

namespace {
constexpr char kMagic[4] = {'M', 'C', 'L', 'F'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF64 = 0;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
}  // namespace

void StateDict::set(const std::string& name, Tensor t) {
  for (auto& [n, v] : entries) {
    if (n == name) {
      v = std::move(t);
      return;
    }
  }
  entries.emplace_back(name, std::move(t));
}

bool StateDict::has(const std::string& name) const { return find(name) != nullptr; }

const Tensor* StateDict::find(const std::string& name) const {
  for (const auto& [n, v] : entries)
    if (n == name) return &v;
  return nullptr;
}

const Tensor& StateDict::at(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw std::out_of_range("state dict: missing entry '" + name + "'");
  return *t;
}

std::vector<std::string> StateDict::names() const {
  std::vector<std::string> out;
  out.reserve(entries.size());
  for (const auto& [n, v] : entries) out.push_back(n);
  return out;
}

StateDict StateDict::scoped(const std::string& prefix) const {
  StateDict out;
  for (const auto& [n, v] : entries)
    if (n.rfind(prefix, 0) == 0) out.entries.emplace_back(n.substr(prefix.size()), v);
  return out;
}

void StateDict::merge(const std::string& prefix, const StateDict& other) {
  for (const auto& [n, v] : other.entries) set(prefix + n, v);
}

bool tensor_bytes_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

bool StateDict::bytes_equal(const StateDict& other) const {
  if (entries.size() != other.entries.size()) return false;
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != other.entries[i].first) return false;
    if (!tensor_bytes_equal(entries[i].second, other.entries[i].second)) return false;
  }
  return true;
}

void save_checkpoint(const StateDict& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<uint32_t>(state.entries.size()));
  for (const auto& [name, t] : state.entries) {
    write_pod(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(out, kDtypeF64);
    write_pod(out, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_pod(out, static_cast<uint64_t>(t.dim(i)));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

StateDict load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: '" + path + "' is not a checkpoint file");
  const auto version = read_pod<uint32_t>(in);
  if (version != kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
  const auto count = read_pod<uint32_t>(in);
  StateDict state;
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto dtype = read_pod<uint8_t>(in);
    if (dtype != kDtypeF64)
      throw std::runtime_error("load_checkpoint: unsupported dtype tag");
    const auto rank = read_pod<uint32_t>(in);
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) d = static_cast<int64_t>(read_pod<uint64_t>(in));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
    if (!in) throw std::runtime_error("load_checkpoint: truncated tensor data");
    state.entries.emplace_back(std::move(name), std::move(t));
  }
  return state;
}

}  // namespace mclfir
