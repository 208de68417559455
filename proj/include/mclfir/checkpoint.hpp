#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mclfir/tensor.hpp"

namespace mclfir {

/// Ordered named tensors: the unit of model snapshotting, EMA mirroring and
/// checkpoint serialization.
struct StateDict {
  std::vector<std::pair<std::string, Tensor>> entries;

  void set(const std::string& name, Tensor t);
  bool has(const std::string& name) const;
  const Tensor* find(const std::string& name) const;
  const Tensor& at(const std::string& name) const;  // throws on missing name
  std::vector<std::string> names() const;

  /// Entries whose name starts with `prefix`, with the prefix stripped.
  StateDict scoped(const std::string& prefix) const;
  /// Inserts every entry of `other` under `prefix`.
  void merge(const std::string& prefix, const StateDict& other);

  /// Same names in the same order with byte-identical payloads.
  bool bytes_equal(const StateDict& other) const;
};

bool tensor_bytes_equal(const Tensor& a, const Tensor& b);

/// Self-describing binary container: magic, version, then per entry the
/// name, dtype tag, shape and raw little-endian doubles.
void save_checkpoint(const StateDict& state, const std::string& path);
StateDict load_checkpoint(const std::string& path);

}  // namespace mclfir
