#pragma once

#include <map>
#include <string>
#include <vector>

#include "mclfir/tensor.hpp"

namespace mclfir::textemb {

struct TextEmbedding {
  Tensor vector;  // [dim]
  std::string attribute;
};

/// Frozen word-level text embedding source. The default provider derives a
/// unit-norm vector per word from a stable hash, so runs need no external
/// weights; precomputed vectors (e.g. dumped from a real text encoder) can
/// be imported from file and take precedence.
class Provider {
 public:
  explicit Provider(int dim = 512);

  int dim() const { return dim_; }

  /// Deterministic unit-norm vector for one word; imported vectors win.
  Tensor embed_word(const std::string& word) const;

  /// Splits on '-' and whitespace, embeds each word and sums the vectors.
  TextEmbedding embed_attribute(const std::string& attribute) const;

  /// Line format: "word v0 v1 ... v{dim-1}". Throws on dimension mismatch.
  void import_word_vectors(const std::string& path);

  static std::vector<std::string> split_words(const std::string& attribute);

 private:
  int dim_;
  std::map<std::string, Tensor> imported_;
};

}  // namespace mclfir::textemb
