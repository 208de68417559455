#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mclfir/attention.hpp"
#include "mclfir/augment.hpp"
#include "mclfir/checkpoint.hpp"
#include "mclfir/dataset.hpp"
#include "mclfir/encoder.hpp"
#include "mclfir/losses.hpp"
#include "mclfir/rng.hpp"
#include "mclfir/text_embedding.hpp"

namespace mclfir::trainer {

enum class Method { mclfir, er, multihead_triplet };

std::string method_name(Method m);
Method parse_method(const std::string& name);

/// Head used by the replay baseline: one text-conditioned head shared by
/// every attribute, so a single output space serves the whole stream.
inline constexpr const char* kSharedHeadName = "__shared__";

struct MethodConfig {
  Method method = Method::mclfir;
  losses::Hyperparams hyper;
  int epochs = 3;              // desk default; paper scale uses 50
  int replay_capacity = 2000;  // ER reservoir size (triplets)
  double learning_rate = 1e-4;
  augment::PerspectiveConfig distort;
  encoder::EncoderConfig encoder_cfg;
  int head_dim = 128;
  int head_hidden = 128;
  int text_dim = 512;

  attention::HeadConfig head_config() const;
  void validate() const;
};

struct LossRecord {
  int64_t step = 0;  // global optimizer step index
  int task = 0;
  double l_ins = 0.0;
  double l_kd = 0.0;
  double total = 0.0;
};

struct TaskRecord {
  int index = 0;
  std::string attribute;
  int64_t steps = 0;   // optimizer steps spent on this task
  StateDict snapshot;  // full model right after the task finished
};

struct TrainHistory {
  Method method = Method::mclfir;
  uint64_t seed = 0;
  std::vector<LossRecord> losses;
  std::vector<TaskRecord> tasks;
  int64_t student_images = 0;   // training-mode encoder forwards
  int64_t optimizer_steps = 0;

  const StateDict& final_state() const;  // snapshot of the last task
};

/// Fixed-capacity reservoir: after n insertions every seen element is
/// retained with probability capacity/n.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int64_t capacity);
  void insert(const data::Triplet& t, Rng& rng);
  const data::Triplet& sample(Rng& rng) const;
  int64_t size() const { return static_cast<int64_t>(items_.size()); }
  int64_t seen() const { return seen_; }

 private:
  int64_t capacity_;
  int64_t seen_ = 0;
  std::vector<data::Triplet> items_;
};

/// Per-parameter first and second moments plus the update count; lives in
/// TrainState so moments persist across tasks.
struct AdamSlot {
  Tensor m, v;
  int64_t t = 0;
};
using OptimizerState = std::map<std::string, AdamSlot>;

/// Adam over named parameter leaves, backed by externally owned slots.
/// Parameters untouched by the last backward pass step with zero gradient.
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, ad::Var>> params, OptimizerState& state, double lr,
       double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step();

 private:
  std::vector<std::pair<std::string, ad::Var>> params_;
  std::vector<AdamSlot*> slots_;
  double lr_, beta1_, beta2_, eps_;
};

struct TrainState {
  TrainState(const MethodConfig& config, uint64_t seed);

  MethodConfig config;
  uint64_t seed = 0;
  encoder::Encoder encoder;
  encoder::EmaTeacher teacher;
  attention::HeadRegistry registry;
  ReplayBuffer replay;
  OptimizerState optimizer;  // moments persist across tasks
  int task_cursor = 0;
  int64_t global_step = 0;

  /// Everything needed to evaluate or resume: encoder, teacher, heads, cursor.
  StateDict snapshot() const;
};

/// Trains one task in place and appends its loss trace to `history`.
/// Previously trained heads stay frozen; only the encoder, the task's own
/// head (or the shared head for the replay baseline) and optimizer state move.
void train_task(TrainState& state, const data::Dataset& dataset, const data::Task& task,
                const textemb::Provider& text, TrainHistory& history);

/// Sequential driver: fresh state, one task after another, a full snapshot
/// recorded after each. Deterministic in (dataset, sequence, config, seed).
TrainHistory train_sequence(const data::Dataset& dataset, const data::TaskSequence& sequence,
                            const MethodConfig& config, const textemb::Provider& text,
                            uint64_t seed);

/// Student forward images per optimizer step of fresh task data: 2B for the
/// doublet method, 3B for the triplet baselines.
int64_t count_images_per_step(const MethodConfig& config);

/// Loss trace as "step,task,l_ins,l_kd,total" CSV lines.
void write_loss_csv(const TrainHistory& history, const std::string& path);

}  // namespace mclfir::trainer
