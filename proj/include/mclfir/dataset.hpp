#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mclfir/image.hpp"

namespace mclfir::data {

/// One named visual factor and its discrete values. An attribute is one
/// continual-learning task; positives share the subclass.
struct AttributeSpec {
  std::string name;
  std::vector<std::string> subclasses;
};

struct Item {
  std::string id;
  Image image;
  std::map<std::string, std::string> labels;  // attribute -> subclass (partial)
};

struct Dataset {
  std::vector<AttributeSpec> attributes;
  std::vector<Item> items;

  const AttributeSpec* find_attribute(const std::string& name) const;
  int64_t item_index(const std::string& id) const;  // -1 if absent
  const Item& item(const std::string& id) const;    // throws if absent

  /// Checks all structural invariants (unique ids, declared labels, ...).
  void validate() const;
};

/// Positive pair: both items carry `attribute` with the same subclass.
struct Doublet {
  std::string first;
  std::string second;
  std::string attribute;
};

/// Anchor/positive share the subclass; negative differs in it.
struct Triplet {
  std::string anchor;
  std::string positive;
  std::string negative;
  std::string attribute;
};

struct Task {
  int index = 0;
  std::string attribute;
  std::vector<Doublet> doublets;
};

struct TaskSequence {
  std::vector<Task> tasks;
};

void validate_doublet(const Dataset& ds, const Doublet& d);
void validate_triplet(const Dataset& ds, const Triplet& t);

/// Item indices grouped by subclass label for one attribute.
std::map<std::string, std::vector<int64_t>> items_by_subclass(const Dataset& ds,
                                                              const std::string& attribute);

// ---------------------------------------------------------------------------
// Manifest: UTF-8 JSON lines. First record declares the attribute specs,
// every following record is one item with a relative PNG path.
// ---------------------------------------------------------------------------

Dataset load_manifest(const std::string& path);

/// Writes dir/manifest.jsonl plus dir/images/<id>.png.
void save_dataset(const Dataset& ds, const std::string& dir);

// ---------------------------------------------------------------------------
// Synthetic generator: each attribute drives one independent visual factor
// of a rendered rounded bar (fill height, stripe width, hue, corner radius,
// bar width, tone), plus mild translation jitter and pixel noise.
// ---------------------------------------------------------------------------

struct SynthAttribute {
  std::string name;
  int subclasses = 4;
};

struct SynthConfig {
  int image_size = 64;
  std::vector<SynthAttribute> attributes;  // empty -> desk_default() set
  int items_per_subclass = 50;
  double noise = 0.02;
  double max_translate = 0.06;  // fraction of image size, capped at 0.10

  static SynthConfig desk_default();
};

/// Pure function of (config, seed): identical calls produce identical
/// datasets down to every pixel.
Dataset generate_synthetic(const SynthConfig& config, uint64_t seed);

// ---------------------------------------------------------------------------
// Sampling (uniform over eligible pairs, with replacement across draws).
// ---------------------------------------------------------------------------

std::vector<Doublet> sample_doublets(const Dataset& ds, const std::string& attribute,
                                     int64_t n, uint64_t seed);
std::vector<Triplet> sample_triplets(const Dataset& ds, const std::string& attribute,
                                     int64_t n, uint64_t seed);

/// Tasks in the given attribute order, each with freshly sampled doublets.
/// Every named attribute must live in exactly one dataset.
TaskSequence build_task_sequence(const std::vector<Dataset>& datasets,
                                 const std::vector<std::string>& order,
                                 int64_t doublets_per_task, uint64_t seed);

/// Single item pool; rejects duplicate attribute names or item ids.
Dataset merge_datasets(const std::vector<Dataset>& datasets);

}  // namespace mclfir::data
