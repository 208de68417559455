#include "mclfir/encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "mclfir/rng.hpp"

namespace mclfir::encoder {

namespace {

Tensor fan_in_uniform(const std::vector<int64_t>& shape, int64_t fan_in, Rng& rng) {
  Tensor t(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

std::string stage_name(size_t i, const char* field) {
  return "stage" + std::to_string(i) + "/" + field;
}

}  // namespace

Encoder::Encoder(const EncoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
  if (cfg.stage_channels.empty()) throw std::invalid_argument("encoder: no stages configured");
  if (cfg.image_size < (1 << cfg.stage_channels.size()))
    throw std::invalid_argument("encoder: image too small for the configured stages");
  Rng rng(mix_seed(seed, fnv1a64("encoder-init")));
  int in_ch = 3;
  for (int out_ch : cfg.stage_channels) {
    Stage s;
    const int64_t fan_in = static_cast<int64_t>(in_ch) * 9;
    s.conv_w = ad::leaf(fan_in_uniform({out_ch, in_ch, 3, 3}, fan_in, rng));
    s.conv_b = ad::leaf(Tensor::zeros({out_ch}));
    s.bn_gamma = ad::leaf(Tensor::full({out_ch}, 1.0));
    s.bn_beta = ad::leaf(Tensor::zeros({out_ch}));
    s.bn.running_mean = Tensor::zeros({out_ch});
    s.bn.running_var = Tensor::full({out_ch}, 1.0);
    stages_.push_back(std::move(s));
    in_ch = out_ch;
  }
}

Encoder::Encoder(const EncoderConfig& cfg, const StateDict& state, bool trainable) : cfg_(cfg) {
  auto wrap = [trainable](Tensor t) {
    return trainable ? ad::leaf(std::move(t)) : ad::constant(std::move(t));
  };
  for (size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    Stage s;
    s.conv_w = wrap(state.at(stage_name(i, "conv_w")));
    s.conv_b = wrap(state.at(stage_name(i, "conv_b")));
    s.bn_gamma = wrap(state.at(stage_name(i, "bn_gamma")));
    s.bn_beta = wrap(state.at(stage_name(i, "bn_beta")));
    s.bn.running_mean = state.at(stage_name(i, "bn_rmean"));
    s.bn.running_var = state.at(stage_name(i, "bn_rvar"));
    stages_.push_back(std::move(s));
  }
}

ad::Var Encoder::forward(const ad::Var& images, Mode mode) {
  if (images->value.rank() != 4 || images->value.dim(1) != 3 ||
      images->value.dim(2) != cfg_.image_size || images->value.dim(3) != cfg_.image_size)
    throw std::invalid_argument("encoder: expected images of shape [N,3," +
                                std::to_string(cfg_.image_size) + "," +
                                std::to_string(cfg_.image_size) + "], got " +
                                images->value.shape_str());
  if (mode == Mode::train) images_encoded_ += images->value.dim(0);
  ad::Var x = images;
  for (auto& s : stages_) {
    x = ad::conv2d(x, s.conv_w, s.conv_b, /*stride=*/2, /*pad=*/1);
    x = ad::batch_norm(x, s.bn_gamma, s.bn_beta, &s.bn, mode == Mode::train);
    x = ad::relu(x);
  }
  return x;
}

FeatureMap Encoder::encode(const Image& img) {
  const Tensor batch = images_to_tensor({&img}, cfg_.image_size);
  const ad::Var out = forward(ad::constant(batch), Mode::eval);
  FeatureMap fm;
  fm.tensor = out->value.reshaped(
      {cfg_.out_channels(), cfg_.out_spatial(), cfg_.out_spatial()});
  fm.source = FeatureMap::Source::student;
  return fm;
}

std::vector<std::pair<std::string, ad::Var>> Encoder::trainable_params() const {
  std::vector<std::pair<std::string, ad::Var>> out;
  for (size_t i = 0; i < stages_.size(); ++i) {
    out.emplace_back(stage_name(i, "conv_w"), stages_[i].conv_w);
    out.emplace_back(stage_name(i, "conv_b"), stages_[i].conv_b);
    out.emplace_back(stage_name(i, "bn_gamma"), stages_[i].bn_gamma);
    out.emplace_back(stage_name(i, "bn_beta"), stages_[i].bn_beta);
  }
  return out;
}

StateDict Encoder::state() const {
  StateDict s;
  for (size_t i = 0; i < stages_.size(); ++i) {
    s.set(stage_name(i, "conv_w"), stages_[i].conv_w->value);
    s.set(stage_name(i, "conv_b"), stages_[i].conv_b->value);
    s.set(stage_name(i, "bn_gamma"), stages_[i].bn_gamma->value);
    s.set(stage_name(i, "bn_beta"), stages_[i].bn_beta->value);
    s.set(stage_name(i, "bn_rmean"), stages_[i].bn.running_mean);
    s.set(stage_name(i, "bn_rvar"), stages_[i].bn.running_var);
  }
  return s;
}

void Encoder::load_state(const StateDict& state) {
  for (size_t i = 0; i < stages_.size(); ++i) {
    Stage& s = stages_[i];
    auto assign = [&](ad::Var& var, const char* field) {
      const Tensor& t = state.at(stage_name(i, field));
      if (!t.same_shape(var->value))
        throw std::invalid_argument("encoder load_state: shape mismatch for " +
                                    stage_name(i, field));
      var->value = t;
    };
    assign(s.conv_w, "conv_w");
    assign(s.conv_b, "conv_b");
    assign(s.bn_gamma, "bn_gamma");
    assign(s.bn_beta, "bn_beta");
    s.bn.running_mean = state.at(stage_name(i, "bn_rmean"));
    s.bn.running_var = state.at(stage_name(i, "bn_rvar"));
  }
}

EmaTeacher::EmaTeacher(const Encoder& student, double beta)
    : cfg_(student.config()), state_(student.state()), beta_(beta) {
  if (beta < 0.0 || beta >= 1.0)
    throw std::invalid_argument("ema teacher: beta must be in [0,1)");
}

void EmaTeacher::update(const Encoder& student) {
  const StateDict s = student.state();
  if (s.entries.size() != state_.entries.size())
    throw std::invalid_argument("ema update: schema mismatch (entry count)");
  for (size_t i = 0; i < state_.entries.size(); ++i) {
    auto& [name, t] = state_.entries[i];
    const auto& [sname, st] = s.entries[i];
    if (name != sname || !t.same_shape(st))
      throw std::invalid_argument("ema update: schema mismatch at '" + name + "'");
    // Residual form of beta*t + (1-beta)*s: exact when teacher == student.
    for (int64_t j = 0; j < t.numel(); ++j) t[j] = st[j] + beta_ * (t[j] - st[j]);
  }
  ++step_;
}

ad::Var EmaTeacher::forward(const ad::Var& images) const {
  Encoder frozen(cfg_, state_, /*trainable=*/false);
  return frozen.forward(images, Mode::eval);
}

FeatureMap EmaTeacher::encode(const Image& img) const {
  Encoder frozen(cfg_, state_, /*trainable=*/false);
  FeatureMap fm = frozen.encode(img);
  fm.source = FeatureMap::Source::teacher;
  return fm;
}

Tensor images_to_tensor(const std::vector<const Image*>& batch, int image_size) {
  const auto n = static_cast<int64_t>(batch.size());
  if (n == 0) throw std::invalid_argument("images_to_tensor: empty batch");
  Tensor t({n, 3, image_size, image_size});
  for (int64_t i = 0; i < n; ++i) {
    const Image& img = *batch[static_cast<size_t>(i)];
    if (img.height != image_size || img.width != image_size)
      throw std::invalid_argument("images_to_tensor: image size mismatch");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x)
          t.at4(i, c, y, x) = img.at(y, x, c);
  }
  return t;
}

}  // namespace mclfir::encoder
