#include "mclfir/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mclfir/image.hpp"

namespace mclfir::eval {

double average_precision(const std::vector<int>& relevance) {
  if (relevance.empty()) throw std::invalid_argument("average_precision: empty ranking");
  int64_t hits = 0;
  double acc = 0.0;
  for (size_t k = 0; k < relevance.size(); ++k) {
    if (relevance[k]) {
      ++hits;
      acc += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  return hits == 0 ? 0.0 : acc / static_cast<double>(hits);
}

ModelSnapshot::ModelSnapshot(encoder::EncoderConfig cfg, const StateDict& state)
    : cfg_(std::move(cfg)) {
  enc_ = std::make_unique<encoder::Encoder>(cfg_, state.scoped("encoder/"), /*trainable=*/false);

  // Heads: names look like head/<attribute>/<field>.
  std::set<std::string> attrs;
  for (const auto& [name, t] : state.entries) {
    if (name.rfind("head/", 0) != 0) continue;
    const size_t sep = name.rfind('/');
    attrs.insert(name.substr(5, sep - 5));
  }
  for (const auto& attr : attrs) {
    const StateDict sub = state.scoped("head/" + attr + "/");
    attention::HeadConfig hc;
    const Tensor& conv_w = sub.at("conv_w");
    const Tensor& text_w = sub.at("text_w");
    const Tensor& mlp1_w = sub.at("mlp1_w");
    hc.d = static_cast<int>(conv_w.dim(0));
    hc.c_img = static_cast<int>(conv_w.dim(1));
    hc.d_text = static_cast<int>(text_w.dim(1));
    hc.d_hidden = static_cast<int>(mlp1_w.dim(0));
    heads_.add_existing(
        std::make_unique<attention::AttentionHead>(attr, hc, sub, /*trainable=*/false));
  }
}

ModelSnapshot ModelSnapshot::from_state(const StateDict& state) {
  encoder::EncoderConfig cfg;
  cfg.image_size = static_cast<int>(state.at("meta/image_size").scalar_value());
  cfg.stage_channels.clear();
  for (size_t i = 0;; ++i) {
    const Tensor* w = state.find("encoder/stage" + std::to_string(i) + "/conv_w");
    if (!w) break;
    cfg.stage_channels.push_back(static_cast<int>(w->dim(0)));
  }
  if (cfg.stage_channels.empty())
    throw std::runtime_error("model snapshot: no encoder stages in state");
  return ModelSnapshot(std::move(cfg), state);
}

Tensor ModelSnapshot::embed_batch(const std::vector<const Image*>& images,
                                  const std::string& attribute, const textemb::Provider& text,
                                  const std::string& head_override) {
  const std::string& head_name = head_override.empty() ? attribute : head_override;
  attention::AttentionHead& head = heads_.head(head_name);
  const Tensor attr_raw = text.embed_attribute(attribute).vector;

  const auto n = static_cast<int64_t>(images.size());
  Tensor out({n, head.config().d});
  constexpr int64_t kChunk = 32;
  for (int64_t start = 0; start < n; start += kChunk) {
    const int64_t stop = std::min(n, start + kChunk);
    std::vector<const Image*> chunk(images.begin() + start, images.begin() + stop);
    const ad::Var input = ad::constant(encoder::images_to_tensor(chunk, cfg_.image_size));
    const ad::Var maps = enc_->forward(input, Mode::eval);
    const ad::Var emb = head.forward(maps, ad::constant(attr_raw), Mode::eval).embedding;
    std::copy_n(emb->value.data(), emb->value.numel(), out.data() + start * head.config().d);
  }
  return out;
}

Tensor ModelSnapshot::embed(const Image& image, const std::string& attribute,
                            const textemb::Provider& text, const std::string& head_override) {
  Tensor rows = embed_batch({&image}, attribute, text, head_override);
  return rows.reshaped({rows.dim(1)});
}

Tensor ModelSnapshot::attention_map(const Image& image, const std::string& attribute,
                                    const textemb::Provider& text,
                                    const std::string& head_override) {
  const std::string& head_name = head_override.empty() ? attribute : head_override;
  attention::AttentionHead& head = heads_.head(head_name);
  const Tensor attr_raw = text.embed_attribute(attribute).vector;
  const ad::Var input = ad::constant(encoder::images_to_tensor({&image}, cfg_.image_size));
  const ad::Var maps = enc_->forward(input, Mode::eval);
  const auto fwd = head.forward(maps, ad::constant(attr_raw), Mode::eval);
  const int64_t h = maps->value.dim(2), w = maps->value.dim(3);
  return fwd.weights->value.reshaped({h, w});
}

std::vector<QueryResult> rank_from_embeddings(const std::vector<std::string>& ids,
                                              const Tensor& embeddings,
                                              const std::vector<std::string>& subclasses,
                                              const std::string& attribute) {
  const int64_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (static_cast<int64_t>(ids.size()) != n || static_cast<int64_t>(subclasses.size()) != n)
    throw std::invalid_argument("rank_from_embeddings: ids/subclasses/rows mismatch");
  if (n < 2) throw std::runtime_error("rank_from_embeddings: no eligible queries");

  // L2-normalize rows once; cosine similarity becomes a dot product.
  Tensor emb = embeddings;
  for (int64_t i = 0; i < n; ++i) {
    double sq = 0.0;
    double* row = emb.data() + i * d;
    for (int64_t j = 0; j < d; ++j) sq += row[j] * row[j];
    const double norm = std::sqrt(sq);
    if (norm == 0.0) throw std::domain_error("rank_from_embeddings: zero-norm embedding");
    for (int64_t j = 0; j < d; ++j) row[j] /= norm;
  }

  std::vector<QueryResult> results;
  results.reserve(static_cast<size_t>(n));
  for (int64_t q = 0; q < n; ++q) {
    std::vector<std::pair<double, int64_t>> scored;
    scored.reserve(static_cast<size_t>(n - 1));
    for (int64_t g = 0; g < n; ++g) {
      if (g == q) continue;  // the query never ranks itself
      double sim = 0.0;
      for (int64_t j = 0; j < d; ++j) sim += emb.at2(q, j) * emb.at2(g, j);
      scored.emplace_back(sim, g);
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return ids[static_cast<size_t>(a.second)] < ids[static_cast<size_t>(b.second)];
    });

    QueryResult r;
    r.query_id = ids[static_cast<size_t>(q)];
    r.attribute = attribute;
    for (const auto& [sim, g] : scored) {
      r.ranked.push_back(ids[static_cast<size_t>(g)]);
      r.relevance.push_back(
          subclasses[static_cast<size_t>(g)] == subclasses[static_cast<size_t>(q)] ? 1 : 0);
    }
    results.push_back(std::move(r));
  }
  return results;
}

double map_from_embeddings(const std::vector<std::string>& ids, const Tensor& embeddings,
                           const std::vector<std::string>& subclasses,
                           const std::string& attribute) {
  const auto queries = rank_from_embeddings(ids, embeddings, subclasses, attribute);
  double total = 0.0;
  for (const auto& q : queries) total += average_precision(q.relevance);
  return total / static_cast<double>(queries.size());
}

std::vector<QueryResult> rank_queries(ModelSnapshot& model, const data::Dataset& ds,
                                      const std::string& attribute,
                                      const textemb::Provider& text,
                                      const std::string& head_override) {
  const auto groups = data::items_by_subclass(ds, attribute);
  std::vector<int64_t> carriers;
  for (const auto& [label, idx] : groups) carriers.insert(carriers.end(), idx.begin(), idx.end());
  std::sort(carriers.begin(), carriers.end());
  if (carriers.size() < 2)
    throw std::runtime_error("rank_queries: no eligible queries for '" + attribute + "'");

  std::vector<const Image*> images;
  std::vector<std::string> ids;
  std::vector<std::string> subs;
  images.reserve(carriers.size());
  for (int64_t i : carriers) {
    const data::Item& item = ds.items[static_cast<size_t>(i)];
    images.push_back(&item.image);
    ids.push_back(item.id);
    subs.push_back(item.labels.at(attribute));
  }
  const Tensor emb = model.embed_batch(images, attribute, text, head_override);
  return rank_from_embeddings(ids, emb, subs, attribute);
}

double map_for_attribute(ModelSnapshot& model, const data::Dataset& ds,
                         const std::string& attribute, const textemb::Provider& text,
                         const std::string& head_override) {
  const auto queries = rank_queries(model, ds, attribute, text, head_override);
  double total = 0.0;
  for (const auto& q : queries) total += average_precision(q.relevance);
  return total / static_cast<double>(queries.size());
}

void RetrievalReport::recompute_summary() {
  overall_a = overall_b = mean_forgetting = 0.0;
  if (rows.empty()) return;
  for (const auto& r : rows) {
    overall_a += r.a_map;
    overall_b += r.b_map;
    mean_forgetting += r.b_map - r.a_map;
  }
  const auto n = static_cast<double>(rows.size());
  overall_a /= n;
  overall_b /= n;
  mean_forgetting /= n;
}

RetrievalReport forgetting_report(const trainer::TrainHistory& history,
                                  const data::Dataset& ds, const textemb::Provider& text) {
  if (history.tasks.empty())
    throw std::invalid_argument("forgetting_report: history has no task snapshots");
  const std::string override_name =
      history.method == trainer::Method::er ? trainer::kSharedHeadName : "";

  RetrievalReport report;
  ModelSnapshot final_model = ModelSnapshot::from_state(history.final_state());
  for (const auto& task : history.tasks) {
    ModelSnapshot own = ModelSnapshot::from_state(task.snapshot);
    AttributeReport row;
    row.attribute = task.attribute;
    row.b_map = 100.0 * map_for_attribute(own, ds, task.attribute, text, override_name);
    row.a_map = 100.0 * map_for_attribute(final_model, ds, task.attribute, text, override_name);
    report.rows.push_back(std::move(row));
  }
  report.recompute_summary();
  return report;
}

void write_report_csv(const RetrievalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_report_csv: cannot open '" + path + "'");
  out << "attribute,B,A,delta\n";
  char buf[256];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f\n", r.attribute.c_str(), r.b_map, r.a_map,
                  r.b_map - r.a_map);
    out << buf;
  }
}

RetrievalReport read_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_report_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("attribute,", 0) != 0)
    throw std::runtime_error("read_report_csv: '" + path + "' is not a report file");
  RetrievalReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    AttributeReport row;
    std::string field;
    if (!std::getline(ss, row.attribute, ',')) continue;
    std::getline(ss, field, ',');
    row.b_map = std::stod(field);
    std::getline(ss, field, ',');
    row.a_map = std::stod(field);
    report.rows.push_back(std::move(row));
  }
  report.recompute_summary();
  return report;
}

std::string render_report_table(const RetrievalReport& report) {
  std::ostringstream os;
  size_t width = 12;
  for (const auto& r : report.rows) width = std::max(width, r.attribute.size() + 2);
  os << "mAP per attribute, final,(just-after)\n";
  for (const auto& r : report.rows) {
    char cell[64];
    std::snprintf(cell, sizeof(cell), "%.2f,(%.2f)", r.a_map, r.b_map);
    os << "  " << r.attribute;
    for (size_t i = r.attribute.size(); i < width; ++i) os << ' ';
    os << cell << "\n";
  }
  char summary[128];
  std::snprintf(summary, sizeof(summary), "%.2f,(%.2f)  mean forgetting %.2f",
                report.overall_a, report.overall_b, report.mean_forgetting);
  os << "  overall";
  for (size_t i = 7; i < width; ++i) os << ' ';
  os << summary << "\n";
  return os.str();
}

void export_attention_map(ModelSnapshot& model, const Image& image,
                          const std::string& attribute, const textemb::Provider& text,
                          const std::string& path, const std::string& head_override) {
  const Tensor weights = model.attention_map(image, attribute, text, head_override);
  const int64_t h = weights.dim(0), w = weights.dim(1);

  std::ofstream txt(path + ".txt");
  if (!txt) throw std::runtime_error("export_attention_map: cannot open '" + path + ".txt'");
  txt << h << " " << w << "\n";
  char buf[48];
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      std::snprintf(buf, sizeof(buf), "%.17g", weights.at2(y, x));
      txt << buf << (x + 1 == w ? "\n" : " ");
    }
  }

  // Nearest-neighbor upsample; min -> black, max -> white.
  const double lo = weights.min_value(), hi = weights.max_value();
  const double span = hi > lo ? hi - lo : 1.0;
  const int out_h = image.height, out_w = image.width;
  std::vector<double> gray(static_cast<size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const int64_t sy = std::min<int64_t>(h - 1, y * h / out_h);
      const int64_t sx = std::min<int64_t>(w - 1, x * w / out_w);
      gray[static_cast<size_t>(y) * out_w + x] = (weights.at2(sy, sx) - lo) / span;
    }
  }
  write_png_gray(path, out_h, out_w, gray);
}

}  // namespace mclfir::eval
