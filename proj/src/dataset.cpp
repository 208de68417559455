#include "mclfir/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "mclfir/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mclfir::data {

const AttributeSpec* Dataset::find_attribute(const std::string& name) const {
  for (const auto& a : attributes)
    if (a.name == name) return &a;
  return nullptr;
}

int64_t Dataset::item_index(const std::string& id) const {
  for (size_t i = 0; i < items.size(); ++i)
    if (items[i].id == id) return static_cast<int64_t>(i);
  return -1;
}

const Item& Dataset::item(const std::string& id) const {
  const int64_t i = item_index(id);
  if (i < 0) throw std::out_of_range("dataset: unknown item id '" + id + "'");
  return items[static_cast<size_t>(i)];
}

void Dataset::validate() const {
  std::unordered_set<std::string> attr_names;
  for (const auto& a : attributes) {
    if (a.name.empty()) throw std::invalid_argument("dataset: empty attribute name");
    if (!attr_names.insert(a.name).second)
      throw std::invalid_argument("dataset: duplicate attribute '" + a.name + "'");
    if (a.subclasses.size() < 2)
      throw std::invalid_argument("dataset: attribute '" + a.name + "' needs >= 2 subclasses");
    std::unordered_set<std::string> subs(a.subclasses.begin(), a.subclasses.end());
    if (subs.size() != a.subclasses.size())
      throw std::invalid_argument("dataset: duplicate subclass label under '" + a.name + "'");
  }
  std::unordered_set<std::string> ids;
  for (const auto& it : items) {
    if (!ids.insert(it.id).second)
      throw std::invalid_argument("dataset: duplicate item id '" + it.id + "'");
    for (const auto& [attr, sub] : it.labels) {
      const AttributeSpec* spec = find_attribute(attr);
      if (spec == nullptr)
        throw std::invalid_argument("dataset: item '" + it.id + "' labels unknown attribute '" +
                                    attr + "'");
      if (std::find(spec->subclasses.begin(), spec->subclasses.end(), sub) ==
          spec->subclasses.end())
        throw std::invalid_argument("dataset: item '" + it.id + "' labels unknown subclass '" +
                                    sub + "' under '" + attr + "'");
    }
  }
}

void validate_doublet(const Dataset& ds, const Doublet& d) {
  if (d.first == d.second) throw std::invalid_argument("doublet: identical items");
  const Item& a = ds.item(d.first);
  const Item& b = ds.item(d.second);
  const auto ia = a.labels.find(d.attribute);
  const auto ib = b.labels.find(d.attribute);
  if (ia == a.labels.end() || ib == b.labels.end())
    throw std::invalid_argument("doublet: item missing attribute '" + d.attribute + "'");
  if (ia->second != ib->second)
    throw std::invalid_argument("doublet: subclass mismatch under '" + d.attribute + "'");
}

void validate_triplet(const Dataset& ds, const Triplet& t) {
  validate_doublet(ds, Doublet{t.anchor, t.positive, t.attribute});
  const Item& a = ds.item(t.anchor);
  const Item& n = ds.item(t.negative);
  const auto in = n.labels.find(t.attribute);
  if (in == n.labels.end())
    throw std::invalid_argument("triplet: negative missing attribute '" + t.attribute + "'");
  if (in->second == a.labels.at(t.attribute))
    throw std::invalid_argument("triplet: negative shares the anchor subclass");
}

std::map<std::string, std::vector<int64_t>> items_by_subclass(const Dataset& ds,
                                                              const std::string& attribute) {
  if (ds.find_attribute(attribute) == nullptr)
    throw std::invalid_argument("items_by_subclass: unknown attribute '" + attribute + "'");
  std::map<std::string, std::vector<int64_t>> groups;
  for (size_t i = 0; i < ds.items.size(); ++i) {
    const auto it = ds.items[i].labels.find(attribute);
    if (it != ds.items[i].labels.end()) groups[it->second].push_back(static_cast<int64_t>(i));
  }
  return groups;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

Dataset load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open '" + path + "'");
  const fs::path base = fs::path(path).parent_path();

  Dataset ds;
  std::string line;
  int64_t line_no = 0;
  bool have_header = false;
  std::unordered_set<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("load_manifest: malformed record at line " +
                               std::to_string(line_no) + ": " + e.what());
    }
    const auto fail = [&](const std::string& msg) {
      throw std::runtime_error("load_manifest: line " + std::to_string(line_no) + ": " + msg);
    };
    if (!have_header) {
      if (!rec.contains("attributes") || !rec["attributes"].is_array())
        fail("first record must declare attributes");
      for (const auto& a : rec["attributes"]) {
        AttributeSpec spec;
        spec.name = a.value("name", "");
        if (!a.contains("subclasses")) fail("attribute without subclasses");
        for (const auto& s : a["subclasses"]) spec.subclasses.push_back(s.get<std::string>());
        ds.attributes.push_back(std::move(spec));
      }
      have_header = true;
      continue;
    }
    if (!rec.contains("id") || !rec.contains("image") || !rec.contains("labels"))
      fail("item record requires id, image and labels fields");
    Item item;
    item.id = rec["id"].get<std::string>();
    if (!ids.insert(item.id).second) fail("duplicate item id '" + item.id + "'");
    for (const auto& [attr, sub] : rec["labels"].items())
      item.labels[attr] = sub.get<std::string>();
    const fs::path img = base / rec["image"].get<std::string>();
    try {
      item.image = read_png(img.string());
    } catch (const std::exception& e) {
      fail("image reference unresolvable: " + std::string(e.what()));
    }
    ds.items.push_back(std::move(item));
  }
  if (!have_header) throw std::runtime_error("load_manifest: '" + path + "' has no header record");
  ds.validate();
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  ds.validate();
  const fs::path root(dir);
  fs::create_directories(root / "images");
  std::ofstream out(root / "manifest.jsonl");
  if (!out) throw std::runtime_error("save_dataset: cannot write under '" + dir + "'");

  json header;
  header["attributes"] = json::array();
  for (const auto& a : ds.attributes)
    header["attributes"].push_back({{"name", a.name}, {"subclasses", a.subclasses}});
  out << header.dump() << "\n";

  for (const auto& item : ds.items) {
    const std::string rel = "images/" + item.id + ".png";
    write_png((root / rel).string(), item.image);
    json rec;
    rec["id"] = item.id;
    rec["image"] = rel;
    rec["labels"] = item.labels;
    out << rec.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

namespace {

enum class Factor { length, pattern, color, shape, width, tone };
constexpr int kFactorCount = 6;

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - f * s);
  const double t = v * (1.0 - (1.0 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

struct RenderParams {
  double fill_frac = 1.0;
  double stripe_h = 0.0;  // 0: solid
  double hue = 0.58;
  double corner_frac = 0.15;
  double width_mult = 1.0;
  double tone = 1.0;
};

void set_factor(RenderParams& p, Factor f, int level, int levels, int image_size) {
  const double t = levels > 1 ? static_cast<double>(level) / (levels - 1) : 0.0;
  switch (f) {
    case Factor::length: p.fill_frac = 0.30 + 0.65 * t; break;
    case Factor::pattern:
      p.stripe_h = std::max(1.0, std::round(image_size / 64.0 * (2.0 + 2.0 * level)));
      break;
    case Factor::color: p.hue = (level + 0.5) / levels * 0.83; break;
    case Factor::shape: p.corner_frac = 0.45 * t; break;
    case Factor::width: p.width_mult = 0.55 + 0.45 * t; break;
    case Factor::tone: p.tone = 0.70 + 0.30 * t; break;
  }
}

void render_item(Image& img, const RenderParams& p, double dx, double dy, double noise,
                 Rng& rng) {
  const int s = img.height;
  const double w0 = 0.55 * s * p.width_mult;
  const double h0 = 0.72 * s;
  const double x0 = (s - w0) / 2.0 + dx;
  const double y0 = (s - h0) / 2.0 + dy;
  const double radius = p.corner_frac * std::min(w0, h0);
  const double fill_to = y0 + p.fill_frac * h0;

  double r, g, b;
  hsv_to_rgb(p.hue, 0.75, 0.95 * p.tone, r, g, b);

  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = px >= x0 && px < x0 + w0 && py >= y0 && py < y0 + h0;
      if (inside && radius > 0.0) {
        const double cx = std::clamp(px, x0 + radius, x0 + w0 - radius);
        const double cy = std::clamp(py, y0 + radius, y0 + h0 - radius);
        const double ddx = px - cx, ddy = py - cy;
        if (ddx * ddx + ddy * ddy > radius * radius) inside = false;
      }
      if (inside && py > fill_to) inside = false;

      double pr = 0.06, pg = 0.06, pb = 0.06;
      if (inside) {
        double mod = 1.0;
        if (p.stripe_h > 0.0) {
          const auto band = static_cast<int64_t>(std::floor((py - y0) / p.stripe_h));
          mod = (band % 2 == 0) ? 1.0 : 0.55;
        }
        pr = r * mod;
        pg = g * mod;
        pb = b * mod;
      }
      img.at(y, x, 0) = std::clamp(pr + noise * rng.normal(), 0.0, 1.0);
      img.at(y, x, 1) = std::clamp(pg + noise * rng.normal(), 0.0, 1.0);
      img.at(y, x, 2) = std::clamp(pb + noise * rng.normal(), 0.0, 1.0);
    }
  }
}

}  // namespace

SynthConfig SynthConfig::desk_default() {
  SynthConfig cfg;
  cfg.attributes = {{"body-length", 4}, {"stripe-pattern", 4}, {"base-color", 4},
                    {"corner-shape", 4}};
  return cfg;
}

Dataset generate_synthetic(const SynthConfig& config, uint64_t seed) {
  SynthConfig cfg = config;
  if (cfg.attributes.empty()) cfg.attributes = SynthConfig::desk_default().attributes;
  if (cfg.image_size < 16)
    throw std::invalid_argument("generate_synthetic: image too small to render factors");
  if (cfg.attributes.size() > kFactorCount)
    throw std::invalid_argument("generate_synthetic: more attributes than independent factors");
  if (cfg.items_per_subclass < 1)
    throw std::invalid_argument("generate_synthetic: items_per_subclass must be positive");
  if (cfg.max_translate < 0.0 || cfg.max_translate > 0.10)
    throw std::invalid_argument("generate_synthetic: max_translate must be in [0, 0.10]");
  for (const auto& a : cfg.attributes) {
    if (a.subclasses < 2)
      throw std::invalid_argument("generate_synthetic: attribute '" + a.name +
                                  "' needs >= 2 subclasses");
  }

  Dataset ds;
  for (const auto& a : cfg.attributes) {
    AttributeSpec spec;
    spec.name = a.name;
    for (int k = 0; k < a.subclasses; ++k) spec.subclasses.push_back("s" + std::to_string(k));
    ds.attributes.push_back(std::move(spec));
  }

  Rng rng(mix_seed(seed, fnv1a64("synthetic")));
  int64_t next_id = 0;
  const auto n_attrs = static_cast<int>(cfg.attributes.size());
  for (int ai = 0; ai < n_attrs; ++ai) {
    for (int k = 0; k < cfg.attributes[static_cast<size_t>(ai)].subclasses; ++k) {
      for (int rep = 0; rep < cfg.items_per_subclass; ++rep) {
        Item item;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "item-%05lld", static_cast<long long>(next_id++));
        item.id = buf;

        // Pin this attribute's subclass; draw the others uniformly.
        RenderParams params;
        for (int aj = 0; aj < n_attrs; ++aj) {
          const auto& attr = cfg.attributes[static_cast<size_t>(aj)];
          const int level = aj == ai ? k : static_cast<int>(rng.below(attr.subclasses));
          item.labels[attr.name] = "s" + std::to_string(level);
          set_factor(params, static_cast<Factor>(aj), level, attr.subclasses, cfg.image_size);
        }

        const double t = cfg.max_translate * cfg.image_size;
        const double dx = rng.uniform(-t, t);
        const double dy = rng.uniform(-t, t);
        item.image = Image(cfg.image_size, cfg.image_size);
        render_item(item.image, params, dx, dy, cfg.noise, rng);
        ds.items.push_back(std::move(item));
      }
    }
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

namespace {

struct PairPool {
  // Subclasses with >= 2 items, with cumulative unordered-pair counts.
  std::vector<std::vector<int64_t>> groups;
  std::vector<int64_t> cumulative;
  int64_t total = 0;
};

PairPool build_pair_pool(const Dataset& ds, const std::string& attribute) {
  PairPool pool;
  for (auto& [label, idx] : items_by_subclass(ds, attribute)) {
    if (idx.size() < 2) continue;
    const auto k = static_cast<int64_t>(idx.size());
    pool.total += k * (k - 1) / 2;
    pool.groups.push_back(idx);
    pool.cumulative.push_back(pool.total);
  }
  return pool;
}

// Uniform unordered pair within a group of size k, returned in draw order.
std::pair<int64_t, int64_t> draw_pair(const std::vector<int64_t>& group, Rng& rng) {
  const auto k = static_cast<int64_t>(group.size());
  const int64_t a = rng.below(k);
  int64_t b = rng.below(k - 1);
  if (b >= a) ++b;
  return {group[static_cast<size_t>(a)], group[static_cast<size_t>(b)]};
}

const std::vector<int64_t>& pick_group(const PairPool& pool, Rng& rng) {
  const int64_t r = rng.below(pool.total);
  const auto it = std::upper_bound(pool.cumulative.begin(), pool.cumulative.end(), r);
  return pool.groups[static_cast<size_t>(it - pool.cumulative.begin())];
}

}  // namespace

std::vector<Doublet> sample_doublets(const Dataset& ds, const std::string& attribute,
                                     int64_t n, uint64_t seed) {
  if (n < 0) throw std::invalid_argument("sample_doublets: negative count");
  const PairPool pool = build_pair_pool(ds, attribute);
  if (pool.total == 0 && n > 0)
    throw std::runtime_error("sample_doublets: no subclass of '" + attribute +
                             "' has an eligible pair");
  Rng rng(mix_seed(seed, fnv1a64("doublets")));
  std::vector<Doublet> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const auto& group = pick_group(pool, rng);
    const auto [a, b] = draw_pair(group, rng);
    out.push_back({ds.items[static_cast<size_t>(a)].id, ds.items[static_cast<size_t>(b)].id,
                   attribute});
  }
  return out;
}

std::vector<Triplet> sample_triplets(const Dataset& ds, const std::string& attribute,
                                     int64_t n, uint64_t seed) {
  if (n < 0) throw std::invalid_argument("sample_triplets: negative count");
  const auto groups = items_by_subclass(ds, attribute);
  const PairPool pool = build_pair_pool(ds, attribute);
  if (pool.total == 0 && n > 0)
    throw std::runtime_error("sample_triplets: no subclass of '" + attribute +
                             "' has an eligible pair");

  // Complement pools: all carriers outside each subclass.
  std::map<std::string, std::vector<int64_t>> complements;
  std::vector<int64_t> carriers;
  for (const auto& [label, idx] : groups)
    carriers.insert(carriers.end(), idx.begin(), idx.end());
  for (const auto& [label, idx] : groups) {
    std::vector<int64_t> others;
    for (int64_t c : carriers) {
      const auto& sub = ds.items[static_cast<size_t>(c)].labels.at(attribute);
      if (sub != label) others.push_back(c);
    }
    complements[label] = std::move(others);
  }

  Rng rng(mix_seed(seed, fnv1a64("triplets")));
  std::vector<Triplet> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const auto& group = pick_group(pool, rng);
    const auto [a, b] = draw_pair(group, rng);
    const std::string& label = ds.items[static_cast<size_t>(a)].labels.at(attribute);
    const auto& others = complements.at(label);
    if (others.empty())
      throw std::runtime_error("sample_triplets: no differing-subclass item for '" + label + "'");
    const int64_t neg = others[static_cast<size_t>(rng.below(static_cast<int64_t>(others.size())))];
    out.push_back({ds.items[static_cast<size_t>(a)].id, ds.items[static_cast<size_t>(b)].id,
                   ds.items[static_cast<size_t>(neg)].id, attribute});
  }
  return out;
}

TaskSequence build_task_sequence(const std::vector<Dataset>& datasets,
                                 const std::vector<std::string>& order,
                                 int64_t doublets_per_task, uint64_t seed) {
  if (doublets_per_task < 1)
    throw std::invalid_argument("build_task_sequence: doublets_per_task must be positive");
  std::set<std::string> seen_order(order.begin(), order.end());
  if (seen_order.size() != order.size())
    throw std::invalid_argument("build_task_sequence: duplicate attribute in order");

  // Each attribute must live in exactly one dataset.
  std::unordered_map<std::string, const Dataset*> owner;
  for (const auto& ds : datasets) {
    for (const auto& a : ds.attributes) {
      if (owner.count(a.name))
        throw std::invalid_argument("build_task_sequence: attribute '" + a.name +
                                    "' appears in multiple datasets");
      owner[a.name] = &ds;
    }
  }

  TaskSequence seq;
  int index = 0;
  for (const auto& name : order) {
    const auto it = owner.find(name);
    if (it == owner.end())
      throw std::invalid_argument("build_task_sequence: unknown attribute '" + name + "'");
    Task task;
    task.index = index++;
    task.attribute = name;
    task.doublets = sample_doublets(*it->second, name, doublets_per_task,
                                    mix_seed(seed, fnv1a64(name)));
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

Dataset merge_datasets(const std::vector<Dataset>& datasets) {
  Dataset merged;
  for (const auto& ds : datasets) {
    for (const auto& a : ds.attributes) {
      if (merged.find_attribute(a.name) != nullptr)
        throw std::invalid_argument("merge_datasets: duplicate attribute '" + a.name + "'");
      merged.attributes.push_back(a);
    }
    for (const auto& it : ds.items) merged.items.push_back(it);
  }
  merged.validate();
  return merged;
}

}  // namespace mclfir::data
