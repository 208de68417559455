#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mclfir/attention.hpp"
#include "mclfir/checkpoint.hpp"
#include "mclfir/dataset.hpp"
#include "mclfir/encoder.hpp"
#include "mclfir/text_embedding.hpp"
#include "mclfir/trainer.hpp"

namespace mclfir::eval {

/// Non-interpolated average precision over ordered relevance flags.
/// Zero when nothing relevant appears; throws on an empty ranking.
double average_precision(const std::vector<int>& relevance);

struct QueryResult {
  std::string query_id;
  std::string attribute;
  std::vector<std::string> ranked;  // gallery ids, best first
  std::vector<int> relevance;       // same-subclass flags aligned with ranked
};

/// Eval-only model rebuilt from a training snapshot. Frozen parameters,
/// running-statistics normalization, no gradients anywhere.
class ModelSnapshot {
 public:
  static ModelSnapshot from_state(const StateDict& state);

  const encoder::EncoderConfig& encoder_config() const { return cfg_; }
  std::vector<std::string> head_attributes() const { return heads_.attributes(); }
  bool has_head(const std::string& attribute) const { return heads_.has(attribute); }

  /// Attribute-aware embeddings, rows aligned with the input order.
  /// `head_override` selects a different physical head than the attribute
  /// (the shared head of the replay baseline); empty means head==attribute.
  Tensor embed_batch(const std::vector<const Image*>& images, const std::string& attribute,
                     const textemb::Provider& text, const std::string& head_override = "");
  Tensor embed(const Image& image, const std::string& attribute, const textemb::Provider& text,
               const std::string& head_override = "");

  /// Spatial attention weights [h,w] for one image.
  Tensor attention_map(const Image& image, const std::string& attribute,
                       const textemb::Provider& text, const std::string& head_override = "");

 private:
  ModelSnapshot(encoder::EncoderConfig cfg, const StateDict& state);
  encoder::EncoderConfig cfg_;
  std::unique_ptr<encoder::Encoder> enc_;
  attention::HeadRegistry heads_;
};

/// Ranked galleries over precomputed embeddings [N,D]: each item serves once
/// as query against all others, ranked by descending cosine similarity with
/// ascending-id tie break. Relevance means sharing the subclass label.
std::vector<QueryResult> rank_from_embeddings(const std::vector<std::string>& ids,
                                              const Tensor& embeddings,
                                              const std::vector<std::string>& subclasses,
                                              const std::string& attribute);
double map_from_embeddings(const std::vector<std::string>& ids, const Tensor& embeddings,
                           const std::vector<std::string>& subclasses,
                           const std::string& attribute);

/// Same ranking over every item carrying the attribute, embedded by `model`.
std::vector<QueryResult> rank_queries(ModelSnapshot& model, const data::Dataset& ds,
                                      const std::string& attribute,
                                      const textemb::Provider& text,
                                      const std::string& head_override = "");

/// Mean average precision over those queries, in [0,1].
double map_for_attribute(ModelSnapshot& model, const data::Dataset& ds,
                         const std::string& attribute, const textemb::Provider& text,
                         const std::string& head_override = "");

struct AttributeReport {
  std::string attribute;
  double b_map = 0.0;  // mAP x100 just after the attribute's own task
  double a_map = 0.0;  // mAP x100 after the final task
};

struct RetrievalReport {
  std::vector<AttributeReport> rows;
  double overall_a = 0.0;          // unweighted mean over attributes
  double overall_b = 0.0;
  double mean_forgetting = 0.0;    // mean of (B - A)

  void recompute_summary();
};

/// B values from each task's own snapshot, A values from the final one.
RetrievalReport forgetting_report(const trainer::TrainHistory& history,
                                  const data::Dataset& ds, const textemb::Provider& text);

/// CSV rows "attribute,B,A,delta"; parse back with read_report_csv.
void write_report_csv(const RetrievalReport& report, const std::string& path);
RetrievalReport read_report_csv(const std::string& path);

/// Text table with one "A,(B)" cell per attribute, two decimals.
std::string render_report_table(const RetrievalReport& report);

/// Writes <path> as a grayscale PNG (weights upsampled to the image size,
/// min->black, max->white) and <path>.txt with the raw weights.
void export_attention_map(ModelSnapshot& model, const Image& image,
                          const std::string& attribute, const textemb::Provider& text,
                          const std::string& path, const std::string& head_override = "");

}  // namespace mclfir::eval
