#include "mclfir/attention.hpp"

#include <cmath>
#include <stdexcept>

#include "mclfir/rng.hpp"

namespace mclfir::attention {

namespace {

Tensor fan_in_uniform(const std::vector<int64_t>& shape, int64_t fan_in, Rng& rng) {
  Tensor t(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

int64_t head_param_count(const HeadConfig& cfg) {
  if (cfg.c_img < 1 || cfg.d < 1 || cfg.d_text < 1 || cfg.d_hidden < 1)
    throw std::invalid_argument("head_param_count: dimensions must be positive");
  const int64_t d = cfg.d, c = cfg.c_img, dt = cfg.d_text, dh = cfg.d_hidden;
  return (d * c + d) + 2 * d + (d * dt + d) + (dh * 2 * d + dh) + (d * dh + d);
}

AttentionHead::AttentionHead(std::string attribute, const HeadConfig& cfg, uint64_t seed)
    : attribute_(std::move(attribute)), cfg_(cfg) {
  if (attribute_.empty()) throw std::invalid_argument("attention head: empty attribute name");
  head_param_count(cfg);  // validates dimensions
  Rng rng(mix_seed(seed, fnv1a64("head-init:" + attribute_)));
  conv_w_ = ad::leaf(fan_in_uniform({cfg.d, cfg.c_img, 1, 1}, cfg.c_img, rng));
  conv_b_ = ad::leaf(Tensor::zeros({cfg.d}));
  norm_gamma_ = ad::leaf(Tensor::full({cfg.d}, 1.0));
  norm_beta_ = ad::leaf(Tensor::zeros({cfg.d}));
  text_w_ = ad::leaf(fan_in_uniform({cfg.d, cfg.d_text}, cfg.d_text, rng));
  text_b_ = ad::leaf(Tensor::zeros({cfg.d}));
  mlp1_w_ = ad::leaf(fan_in_uniform({cfg.d_hidden, 2 * cfg.d}, 2 * cfg.d, rng));
  mlp1_b_ = ad::leaf(Tensor::zeros({cfg.d_hidden}));
  mlp2_w_ = ad::leaf(fan_in_uniform({cfg.d, cfg.d_hidden}, cfg.d_hidden, rng));
  mlp2_b_ = ad::leaf(Tensor::zeros({cfg.d}));
  norm_state_.running_mean = Tensor::zeros({cfg.d});
  norm_state_.running_var = Tensor::full({cfg.d}, 1.0);
}

AttentionHead::AttentionHead(std::string attribute, const HeadConfig& cfg,
                             const StateDict& state, bool trainable)
    : attribute_(std::move(attribute)), cfg_(cfg) {
  auto wrap = [trainable](Tensor t) {
    return trainable ? ad::leaf(std::move(t)) : ad::constant(std::move(t));
  };
  conv_w_ = wrap(state.at("conv_w"));
  conv_b_ = wrap(state.at("conv_b"));
  norm_gamma_ = wrap(state.at("norm_gamma"));
  norm_beta_ = wrap(state.at("norm_beta"));
  text_w_ = wrap(state.at("text_w"));
  text_b_ = wrap(state.at("text_b"));
  mlp1_w_ = wrap(state.at("mlp1_w"));
  mlp1_b_ = wrap(state.at("mlp1_b"));
  mlp2_w_ = wrap(state.at("mlp2_w"));
  mlp2_b_ = wrap(state.at("mlp2_b"));
  norm_state_.running_mean = state.at("norm_rmean");
  norm_state_.running_var = state.at("norm_rvar");
}

ad::Var AttentionHead::reduce(const ad::Var& fmaps, Mode mode, bool update_stats) {
  if (fmaps->value.rank() != 4 || fmaps->value.dim(1) != cfg_.c_img)
    throw std::invalid_argument("attention reduce: expected [N," + std::to_string(cfg_.c_img) +
                                ",h,w] feature maps, got " + fmaps->value.shape_str());
  ad::Var x = ad::conv2d(fmaps, conv_w_, conv_b_, /*stride=*/1, /*pad=*/0);
  const bool training = mode == Mode::train;
  x = ad::batch_norm(x, norm_gamma_, norm_beta_,
                     training && !update_stats ? nullptr : &norm_state_, training);
  return ad::tanh_op(x);
}

ad::Var AttentionHead::project(const ad::Var& attr_raw) const {
  const bool vec = attr_raw->value.rank() == 1;
  if ((vec ? attr_raw->value.dim(0) : attr_raw->value.dim(1)) != cfg_.d_text)
    throw std::invalid_argument("attention project: text dimension mismatch, expected " +
                                std::to_string(cfg_.d_text));
  ad::Var rows = vec ? ad::reshape(attr_raw, {1, cfg_.d_text}) : attr_raw;
  ad::Var out = ad::linear(rows, text_w_, text_b_);
  return vec ? ad::reshape(out, {cfg_.d}) : out;
}

ad::Var AttentionHead::attention_weights(const ad::Var& reduced, const ad::Var& attr) {
  return ad::softmax_rows(ad::attn_scores(reduced, attr));
}

ad::Var AttentionHead::gate(const ad::Var& pooled, const ad::Var& attr) const {
  const int64_t n = pooled->value.dim(0);
  ad::Var attr_rows = attr->value.rank() == 1 ? ad::tile_rows(attr, n) : attr;
  ad::Var u = ad::concat_cols(pooled, attr_rows);
  ad::Var hidden = ad::relu(ad::linear(u, mlp1_w_, mlp1_b_));
  ad::Var g = ad::sigmoid(ad::linear(hidden, mlp2_w_, mlp2_b_));
  return ad::mul(pooled, g);
}

AttentionHead::Forward AttentionHead::forward(const ad::Var& fmaps, const ad::Var& attr_raw,
                                              Mode mode, bool update_stats) {
  Forward f;
  f.reduced = reduce(fmaps, mode, update_stats);
  const ad::Var attr = project(attr_raw);
  f.weights = attention_weights(f.reduced, attr);
  f.pooled = ad::attn_pool(f.reduced, f.weights);
  f.embedding = gate(f.pooled, attr);
  return f;
}

std::vector<std::pair<std::string, ad::Var>> AttentionHead::trainable_params() const {
  return {{"conv_w", conv_w_},       {"conv_b", conv_b_},   {"norm_gamma", norm_gamma_},
          {"norm_beta", norm_beta_}, {"text_w", text_w_},   {"text_b", text_b_},
          {"mlp1_w", mlp1_w_},       {"mlp1_b", mlp1_b_},   {"mlp2_w", mlp2_w_},
          {"mlp2_b", mlp2_b_}};
}

int64_t AttentionHead::param_count() const {
  int64_t total = 0;
  for (const auto& [name, var] : trainable_params()) total += var->value.numel();
  return total;
}

StateDict AttentionHead::state() const {
  StateDict s;
  for (const auto& [name, var] : trainable_params()) s.set(name, var->value);
  s.set("norm_rmean", norm_state_.running_mean);
  s.set("norm_rvar", norm_state_.running_var);
  return s;
}

void AttentionHead::load_state(const StateDict& state) {
  for (auto& [name, var] : trainable_params()) {
    const Tensor& t = state.at(name);
    if (!t.same_shape(var->value))
      throw std::invalid_argument("attention load_state: shape mismatch for " + name);
    var->value = t;
  }
  norm_state_.running_mean = state.at("norm_rmean");
  norm_state_.running_var = state.at("norm_rvar");
}

void HeadRegistry::add_head(const std::string& attribute, const HeadConfig& cfg, uint64_t seed) {
  if (has(attribute))
    throw std::invalid_argument("head registry: duplicate head for '" + attribute + "'");
  heads_.push_back(std::make_unique<AttentionHead>(attribute, cfg, seed));
}

void HeadRegistry::add_existing(std::unique_ptr<AttentionHead> head) {
  if (has(head->attribute()))
    throw std::invalid_argument("head registry: duplicate head for '" + head->attribute() + "'");
  heads_.push_back(std::move(head));
}

bool HeadRegistry::has(const std::string& attribute) const {
  for (const auto& h : heads_)
    if (h->attribute() == attribute) return true;
  return false;
}

AttentionHead& HeadRegistry::head(const std::string& attribute) {
  for (const auto& h : heads_)
    if (h->attribute() == attribute) return *h;
  throw std::out_of_range("head registry: no head for attribute '" + attribute + "'");
}

const AttentionHead& HeadRegistry::head(const std::string& attribute) const {
  for (const auto& h : heads_)
    if (h->attribute() == attribute) return *h;
  throw std::out_of_range("head registry: no head for attribute '" + attribute + "'");
}

void HeadRegistry::freeze(const std::string& attribute) {
  head(attribute);  // must exist
  frozen_.insert(attribute);
}

bool HeadRegistry::frozen(const std::string& attribute) const {
  return frozen_.count(attribute) > 0;
}

std::vector<std::string> HeadRegistry::attributes() const {
  std::vector<std::string> out;
  out.reserve(heads_.size());
  for (const auto& h : heads_) out.push_back(h->attribute());
  return out;
}

// ---------------------------------------------------------------------------
// single-sample wrappers
// ---------------------------------------------------------------------------

ReducedMap reduce_features(AttentionHead& head, const encoder::FeatureMap& fmap) {
  if (fmap.tensor.rank() != 3)
    throw std::invalid_argument("reduce_features: feature map must be [C,h,w]");
  const int64_t c = fmap.tensor.dim(0), h = fmap.tensor.dim(1), w = fmap.tensor.dim(2);
  const ad::Var batch = ad::constant(fmap.tensor.reshaped({1, c, h, w}));
  const ad::Var out = head.reduce(batch, Mode::eval);
  return {out->value.reshaped({head.config().d, h, w})};
}

AttrVector project_text(const AttentionHead& head, const textemb::TextEmbedding& t_raw) {
  const ad::Var out = head.project(ad::constant(t_raw.vector));
  return {out->value};
}

std::pair<AttentionMap, Tensor> spatial_attention(const ReducedMap& reduced,
                                                  const AttrVector& attr) {
  if (reduced.tensor.rank() != 3)
    throw std::invalid_argument("spatial_attention: reduced map must be [D,h,w]");
  const int64_t d = reduced.tensor.dim(0), h = reduced.tensor.dim(1), w = reduced.tensor.dim(2);
  if (attr.vector.numel() != d)
    throw std::invalid_argument("spatial_attention: attribute vector dimension mismatch");
  const ad::Var r = ad::constant(reduced.tensor.reshaped({1, d, h, w}));
  const ad::Var a = ad::constant(attr.vector);
  const ad::Var weights = AttentionHead::attention_weights(r, a);
  const ad::Var pooled = ad::attn_pool(r, weights);
  return {{weights->value.reshaped({h, w})}, pooled->value.reshaped({d})};
}

Embedding channel_attention(const AttentionHead& head, const Tensor& pooled,
                            const AttrVector& attr) {
  const int64_t d = head.config().d;
  if (pooled.numel() != d || attr.vector.numel() != d)
    throw std::invalid_argument("channel_attention: dimension mismatch");
  const ad::Var p = ad::constant(pooled.reshaped({1, d}));
  const ad::Var out = head.gate(p, ad::constant(attr.vector));
  return {out->value.reshaped({d}), head.attribute()};
}

Embedding forward_head(HeadRegistry& registry, const std::string& attribute,
                       const encoder::FeatureMap& fmap, const textemb::TextEmbedding& t_raw) {
  AttentionHead& head = registry.head(attribute);
  ReducedMap reduced = reduce_features(head, fmap);
  AttrVector attr = project_text(head, t_raw);
  auto [weights, pooled] = spatial_attention(reduced, attr);
  return channel_attention(head, pooled, attr);
}

}  // namespace mclfir::attention
