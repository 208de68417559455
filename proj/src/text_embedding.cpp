#include "mclfir/text_embedding.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mclfir/rng.hpp"

namespace mclfir::textemb {

Provider::Provider(int dim) : dim_(dim) {
  if (dim < 1) throw std::invalid_argument("text provider: dimension must be positive");
}

Tensor Provider::embed_word(const std::string& word) const {
  if (word.empty()) throw std::invalid_argument("embed_word: empty word");
  const auto it = imported_.find(word);
  if (it != imported_.end()) return it->second;

  Rng rng(mix_seed(fnv1a64(word), 0x7465787421ULL));
  Tensor v({dim_});
  double sq = 0.0;
  for (int64_t i = 0; i < dim_; ++i) {
    v[i] = rng.normal();
    sq += v[i] * v[i];
  }
  const double norm = std::sqrt(sq);
  for (int64_t i = 0; i < dim_; ++i) v[i] /= norm;
  return v;
}

std::vector<std::string> Provider::split_words(const std::string& attribute) {
  std::vector<std::string> words;
  std::string current;
  for (char c : attribute) {
    if (c == '-' || c == ' ' || c == '\t') {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

TextEmbedding Provider::embed_attribute(const std::string& attribute) const {
  const auto words = split_words(attribute);
  if (words.empty())
    throw std::invalid_argument("embed_attribute: '" + attribute + "' contains no words");
  Tensor sum({dim_});
  for (const auto& w : words) {
    const Tensor v = embed_word(w);
    for (int64_t i = 0; i < dim_; ++i) sum[i] += v[i];
  }
  return {std::move(sum), attribute};
}

void Provider::import_word_vectors(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("import_word_vectors: cannot open '" + path + "'");
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    Tensor v({dim_});
    for (int64_t i = 0; i < dim_; ++i) {
      if (!(ss >> v[i]))
        throw std::runtime_error("import_word_vectors: line " + std::to_string(line_no) +
                                 ": expected " + std::to_string(dim_) + " values for '" + word +
                                 "'");
    }
    double extra;
    if (ss >> extra)
      throw std::runtime_error("import_word_vectors: line " + std::to_string(line_no) +
                               ": too many values for '" + word + "'");
    imported_[word] = std::move(v);
  }
}

}  // namespace mclfir::textemb
