#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mclfir/autodiff.hpp"
#include "mclfir/checkpoint.hpp"
#include "mclfir/image.hpp"
#include "mclfir/tensor.hpp"

namespace mclfir {

enum class Mode { train, eval };

namespace encoder {

/// Small strided conv backbone: each stage halves the spatial size.
struct EncoderConfig {
  int image_size = 64;
  std::vector<int> stage_channels = {16, 32, 64};

  static EncoderConfig desk() { return {}; }
  /// Declares the 1024-channel feature-map contract used for parameter
  /// budget checks; not meant to be trained at desk scale.
  static EncoderConfig paper() { return {224, {256, 512, 1024}}; }

  int out_channels() const { return stage_channels.back(); }
  int out_spatial() const {
    int s = image_size;
    for (size_t i = 0; i < stage_channels.size(); ++i) s = (s + 1) / 2;  // ceil halving
    return s;
  }
};

struct FeatureMap {
  enum class Source { student, teacher };
  Tensor tensor;  // [C,h,w]
  Source source = Source::student;
};

/// Shared image encoder. Holds its parameters as autodiff leaves (or frozen
/// constants) plus the normalization running buffers.
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, uint64_t seed);
  Encoder(const EncoderConfig& cfg, const StateDict& state, bool trainable);

  const EncoderConfig& config() const { return cfg_; }

  /// Differentiable forward over [N,3,H,W]. Train mode uses batch statistics
  /// and updates the running buffers; eval mode uses the running statistics.
  ad::Var forward(const ad::Var& images, Mode mode);

  /// Eval-mode convenience for a single image.
  FeatureMap encode(const Image& img);

  std::vector<std::pair<std::string, ad::Var>> trainable_params() const;
  StateDict state() const;            // parameters and buffers
  void load_state(const StateDict&);  // schema (names and shapes) must match

  /// Images pushed through training-mode forwards; instrumentation for the
  /// per-step cost accounting.
  int64_t images_encoded() const { return images_encoded_; }
  void reset_image_counter() { images_encoded_ = 0; }

 private:
  struct Stage {
    ad::Var conv_w, conv_b, bn_gamma, bn_beta;
    ad::BatchNormState bn;
  };
  EncoderConfig cfg_;
  std::vector<Stage> stages_;
  int64_t images_encoded_ = 0;
};

/// Shadow copy of the encoder updated by momentum blending; never receives
/// gradients. Buffers are blended with the same momentum as parameters.
class EmaTeacher {
 public:
  EmaTeacher(const Encoder& student, double beta);  // beta in [0,1)

  /// theta_T <- beta * theta_T + (1 - beta) * theta_S, every entry.
  void update(const Encoder& student);

  ad::Var forward(const ad::Var& images) const;  // eval mode, gradient-free
  FeatureMap encode(const Image& img) const;

  const StateDict& state() const { return state_; }
  void load_state(const StateDict& s) { state_ = s; }
  double beta() const { return beta_; }
  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }

 private:
  EncoderConfig cfg_;
  StateDict state_;
  double beta_;
  int64_t step_ = 0;
};

/// Planar [N,3,H,W] batch from interleaved images; checks the configured size.
Tensor images_to_tensor(const std::vector<const Image*>& batch, int image_size);

}  // namespace encoder
}  // namespace mclfir
