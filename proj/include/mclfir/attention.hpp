#pragma once

#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mclfir/autodiff.hpp"
#include "mclfir/checkpoint.hpp"
#include "mclfir/encoder.hpp"
#include "mclfir/text_embedding.hpp"

namespace mclfir::attention {

struct HeadConfig {
  int c_img = 64;     // encoder feature channels
  int d = 128;        // reduced map / embedding dimension
  int d_text = 512;   // raw text embedding dimension
  int d_hidden = 128; // channel-gate MLP hidden width

  static HeadConfig paper() { return {1024, 128, 512, 128}; }
};

/// Trainable parameter total of one head under `cfg`:
/// conv + norm affine + text projection + the two gate layers.
int64_t head_param_count(const HeadConfig& cfg);

struct ReducedMap {
  Tensor tensor;  // [D,h,w], tanh range
};

struct AttrVector {
  Tensor vector;  // [D]
};

struct AttentionMap {
  Tensor weights;  // [h,w], sums to 1
};

struct Embedding {
  Tensor vector;  // [D]
  std::string attribute;
};

/// One attribute's text-guided attention head: 1x1 channel reduction with
/// normalization and tanh, text projection, softmax spatial attention and a
/// sigmoid channel gate.
class AttentionHead {
 public:
  AttentionHead(std::string attribute, const HeadConfig& cfg, uint64_t seed);
  AttentionHead(std::string attribute, const HeadConfig& cfg, const StateDict& state,
                bool trainable);

  const std::string& attribute() const { return attribute_; }
  const HeadConfig& config() const { return cfg_; }

  // Batched differentiable pipeline. fmaps: [N,C_img,h,w]; attr_raw: [D_text]
  // or [N,D_text]. In training mode the norm layer uses batch statistics and
  // updates the running buffers only when update_stats is set.
  ad::Var reduce(const ad::Var& fmaps, Mode mode, bool update_stats = true);
  ad::Var project(const ad::Var& attr_raw) const;
  ad::Var gate(const ad::Var& pooled, const ad::Var& attr) const;

  /// Softmax attention weights [N,P] for reduced [N,D,P] and a projected
  /// attribute vector; scores are scaled by 1/sqrt(D).
  static ad::Var attention_weights(const ad::Var& reduced, const ad::Var& attr);

  struct Forward {
    ad::Var reduced;    // [N,D,h,w]
    ad::Var weights;    // [N,h*w]
    ad::Var pooled;     // [N,D]
    ad::Var embedding;  // [N,D]
  };
  Forward forward(const ad::Var& fmaps, const ad::Var& attr_raw, Mode mode,
                  bool update_stats = true);

  std::vector<std::pair<std::string, ad::Var>> trainable_params() const;
  int64_t param_count() const;  // enumerated from the tensors above
  StateDict state() const;
  void load_state(const StateDict& state);

 private:
  std::string attribute_;
  HeadConfig cfg_;
  ad::Var conv_w_, conv_b_;          // [D,C_img,1,1], [D]
  ad::Var norm_gamma_, norm_beta_;   // [D], [D]
  ad::Var text_w_, text_b_;          // [D,D_text], [D]
  ad::Var mlp1_w_, mlp1_b_;          // [D_hidden,2D], [D_hidden]
  ad::Var mlp2_w_, mlp2_b_;          // [D,D_hidden], [D]
  ad::BatchNormState norm_state_;
};

/// Heads keyed by attribute; frozen heads are immutable.
class HeadRegistry {
 public:
  /// Registers a freshly initialized head; throws on duplicate attribute.
  void add_head(const std::string& attribute, const HeadConfig& cfg, uint64_t seed);
  void add_existing(std::unique_ptr<AttentionHead> head);

  bool has(const std::string& attribute) const;
  AttentionHead& head(const std::string& attribute);              // throws if unknown
  const AttentionHead& head(const std::string& attribute) const;  // throws if unknown

  void freeze(const std::string& attribute);
  bool frozen(const std::string& attribute) const;

  std::vector<std::string> attributes() const;  // insertion order
  size_t size() const { return heads_.size(); }

 private:
  std::vector<std::unique_ptr<AttentionHead>> heads_;
  std::set<std::string> frozen_;
};

// Single-sample operations (eval mode) mirroring the head pipeline.
ReducedMap reduce_features(AttentionHead& head, const encoder::FeatureMap& fmap);
AttrVector project_text(const AttentionHead& head, const textemb::TextEmbedding& t_raw);
std::pair<AttentionMap, Tensor> spatial_attention(const ReducedMap& reduced,
                                                  const AttrVector& attr);
Embedding channel_attention(const AttentionHead& head, const Tensor& pooled,
                            const AttrVector& attr);
Embedding forward_head(HeadRegistry& registry, const std::string& attribute,
                       const encoder::FeatureMap& fmap, const textemb::TextEmbedding& t_raw);

}  // namespace mclfir::attention
