#include "mclfir/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace mclfir::trainer {

std::string method_name(Method m) {
  switch (m) {
    case Method::mclfir: return "mclfir";
    case Method::er: return "er";
    case Method::multihead_triplet: return "multihead";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  if (name == "mclfir") return Method::mclfir;
  if (name == "er") return Method::er;
  if (name == "multihead" || name == "multihead_triplet") return Method::multihead_triplet;
  throw std::invalid_argument("unknown method '" + name + "' (mclfir|er|multihead)");
}

attention::HeadConfig MethodConfig::head_config() const {
  return {encoder_cfg.out_channels(), head_dim, text_dim, head_hidden};
}

void MethodConfig::validate() const {
  hyper.validate();
  if (epochs < 1) throw std::invalid_argument("config: epochs must be positive");
  if (learning_rate <= 0.0) throw std::invalid_argument("config: learning rate must be positive");
  if (method == Method::er && replay_capacity < 1)
    throw std::invalid_argument("config: replay capacity must be positive for er");
}

const StateDict& TrainHistory::final_state() const {
  if (tasks.empty()) throw std::logic_error("history: no task snapshots");
  return tasks.back().snapshot;
}

ReplayBuffer::ReplayBuffer(int64_t capacity) : capacity_(capacity) {
  if (capacity < 1) throw std::invalid_argument("replay buffer: capacity must be positive");
}

void ReplayBuffer::insert(const data::Triplet& t, Rng& rng) {
  ++seen_;
  if (size() < capacity_) {
    items_.push_back(t);
    return;
  }
  const int64_t slot = rng.below(seen_);
  if (slot < capacity_) items_[static_cast<size_t>(slot)] = t;
}

const data::Triplet& ReplayBuffer::sample(Rng& rng) const {
  if (items_.empty()) throw std::logic_error("replay buffer: sample from empty buffer");
  return items_[static_cast<size_t>(rng.below(size()))];
}

Adam::Adam(std::vector<std::pair<std::string, ad::Var>> params, OptimizerState& state, double lr,
           double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  slots_.reserve(params_.size());
  for (const auto& [name, p] : params_) {
    AdamSlot& slot = state[name];
    if (slot.m.empty()) {
      slot.m = Tensor::zeros(p->value.shape());
      slot.v = Tensor::zeros(p->value.shape());
      slot.t = 0;
    } else if (!slot.m.same_shape(p->value)) {
      throw std::invalid_argument("optimizer state: shape mismatch for '" + name + "'");
    }
    slots_.push_back(&slot);
  }
}

void Adam::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    ad::Var& p = params_[i].second;
    AdamSlot& slot = *slots_[i];
    ++slot.t;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(slot.t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(slot.t));
    const bool has_grad = p->has_grad();
    for (int64_t j = 0; j < p->value.numel(); ++j) {
      const double g = has_grad ? p->grad[j] : 0.0;
      slot.m[j] = beta1_ * slot.m[j] + (1.0 - beta1_) * g;
      slot.v[j] = beta2_ * slot.v[j] + (1.0 - beta2_) * g * g;
      p->value[j] -= lr_ * (slot.m[j] / bc1) / (std::sqrt(slot.v[j] / bc2) + eps_);
    }
  }
}

namespace {
const MethodConfig& validated(const MethodConfig& cfg) {
  cfg.validate();
  return cfg;
}
}  // namespace

TrainState::TrainState(const MethodConfig& cfg, uint64_t seed_in)
    : config(validated(cfg)),
      seed(seed_in),
      encoder(cfg.encoder_cfg, mix_seed(seed_in, fnv1a64("encoder"))),
      teacher(encoder, cfg.hyper.beta),
      replay(cfg.method == Method::er ? cfg.replay_capacity
                                      : std::max<int64_t>(1, cfg.replay_capacity)) {}

StateDict TrainState::snapshot() const {
  StateDict s;
  s.set("meta/version", Tensor::scalar(1.0));
  s.set("meta/image_size", Tensor::scalar(config.encoder_cfg.image_size));
  s.set("meta/task_cursor", Tensor::scalar(task_cursor));
  s.set("meta/teacher_step", Tensor::scalar(static_cast<double>(teacher.step())));
  s.merge("encoder/", encoder.state());
  s.merge("teacher/", teacher.state());
  for (const auto& attr : registry.attributes())
    s.merge("head/" + attr + "/", registry.head(attr).state());
  return s;
}

namespace {

class ItemIndex {
 public:
  explicit ItemIndex(const data::Dataset& ds) {
    for (const auto& item : ds.items) map_.emplace(item.id, &item);
  }
  const data::Item& at(const std::string& id) const {
    const auto it = map_.find(id);
    if (it == map_.end()) throw std::out_of_range("trainer: unknown item id '" + id + "'");
    return *it->second;
  }

 private:
  std::unordered_map<std::string, const data::Item*> map_;
};

std::vector<int64_t> shuffled_indices(int64_t n, Rng& rng) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(rng.below(i + 1))]);
  return idx;
}

Tensor text_rows(const textemb::Provider& text, const std::vector<std::string>& attrs, int dim) {
  Tensor rows({static_cast<int64_t>(attrs.size()), dim});
  for (size_t i = 0; i < attrs.size(); ++i) {
    const Tensor v = text.embed_attribute(attrs[i]).vector;
    std::copy_n(v.data(), dim, rows.data() + static_cast<int64_t>(i) * dim);
  }
  return rows;
}

struct StepLoss {
  double l_ins = 0.0, l_kd = 0.0, total = 0.0;
};

void record_step(TrainState& state, TrainHistory& history, const data::Task& task,
                 const StepLoss& loss) {
  ++state.global_step;
  ++history.optimizer_steps;
  history.losses.push_back({state.global_step, task.index, loss.l_ins, loss.l_kd, loss.total});
}

// One mini-batch of the contrastive + distillation objective.
StepLoss mclfir_step(TrainState& state, Adam& opt, attention::AttentionHead& head,
                     const ItemIndex& items, const std::vector<const data::Doublet*>& batch,
                     const Tensor& attr_raw, Rng& rng) {
  const auto b = static_cast<int64_t>(batch.size());
  const int image_size = state.config.encoder_cfg.image_size;
  std::vector<const Image*> originals;
  std::vector<Image> distorted;
  originals.reserve(static_cast<size_t>(2 * b));
  distorted.reserve(static_cast<size_t>(2 * b));
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto* d : batch) {
      const Image& img = items.at(pass == 0 ? d->first : d->second).image;
      originals.push_back(&img);
    }
  }
  for (const Image* img : originals)
    distorted.push_back(augment::random_perspective(*img, state.config.distort, rng.next()));
  std::vector<const Image*> distorted_ptrs;
  distorted_ptrs.reserve(distorted.size());
  for (const Image& img : distorted) distorted_ptrs.push_back(&img);

  const ad::Var student_in = ad::constant(encoder::images_to_tensor(originals, image_size));
  const ad::Var teacher_in = ad::constant(encoder::images_to_tensor(distorted_ptrs, image_size));

  const ad::Var student_maps = state.encoder.forward(student_in, Mode::train);
  const ad::Var teacher_maps = state.teacher.forward(teacher_in);

  const ad::Var attr = ad::constant(attr_raw);
  const ad::Var emb_orig = head.forward(student_maps, attr, Mode::train, true).embedding;
  const ad::Var emb_dist = head.forward(teacher_maps, attr, Mode::train, false).embedding;

  const double tau = state.config.hyper.tau;
  // Instance loss: both views, summed.
  const ad::Var l_ins = ad::add(losses::info_nce_stacked(emb_orig, tau),
                                losses::info_nce_stacked(emb_dist, tau));
  // Distillation on backbone maps, one pair per doublet side.
  const ad::Var l_kd = losses::distill_mse({
      {ad::slice_rows(student_maps, 0, b), ad::slice_rows(teacher_maps, 0, b)},
      {ad::slice_rows(student_maps, b, 2 * b), ad::slice_rows(teacher_maps, b, 2 * b)},
  });
  const ad::Var total = losses::total_loss(l_ins, l_kd, state.config.hyper.lambda_kd);

  ad::backward(total);
  opt.step();
  state.teacher.update(state.encoder);
  return {ad::value_of(l_ins), ad::value_of(l_kd), ad::value_of(total)};
}

// One mini-batch of the triplet hinge objective; attrs carries one attribute
// name per triplet (they differ under replay).
StepLoss triplet_step(TrainState& state, Adam& opt, attention::AttentionHead& head,
                      const ItemIndex& items, const std::vector<const data::Triplet*>& batch,
                      const textemb::Provider& text) {
  const auto n = static_cast<int64_t>(batch.size());
  const int image_size = state.config.encoder_cfg.image_size;
  std::vector<const Image*> images;
  images.reserve(static_cast<size_t>(3 * n));
  for (const auto* t : batch) images.push_back(&items.at(t->anchor).image);
  for (const auto* t : batch) images.push_back(&items.at(t->positive).image);
  for (const auto* t : batch) images.push_back(&items.at(t->negative).image);

  std::vector<std::string> attrs;
  attrs.reserve(static_cast<size_t>(n));
  for (const auto* t : batch) attrs.push_back(t->attribute);
  Tensor attr_block = text_rows(text, attrs, state.config.text_dim);
  Tensor attr_all({3 * n, state.config.text_dim});
  for (int role = 0; role < 3; ++role)
    std::copy_n(attr_block.data(), attr_block.numel(),
                attr_all.data() + role * attr_block.numel());

  const ad::Var input = ad::constant(encoder::images_to_tensor(images, image_size));
  const ad::Var maps = state.encoder.forward(input, Mode::train);
  const ad::Var emb = head.forward(maps, ad::constant(attr_all), Mode::train, true).embedding;

  const ad::Var loss = losses::triplet_loss_rows(
      ad::slice_rows(emb, 0, n), ad::slice_rows(emb, n, 2 * n),
      ad::slice_rows(emb, 2 * n, 3 * n), state.config.hyper.margin);

  ad::backward(loss);
  opt.step();
  const double v = ad::value_of(loss);
  return {v, 0.0, v};
}

std::vector<std::pair<std::string, ad::Var>> step_params(TrainState& state,
                                                         const std::string& head_name,
                                                         attention::AttentionHead& head) {
  std::vector<std::pair<std::string, ad::Var>> params;
  for (auto& [name, var] : state.encoder.trainable_params())
    params.emplace_back("encoder/" + name, var);
  for (auto& [name, var] : head.trainable_params())
    params.emplace_back("head/" + head_name + "/" + name, var);
  return params;
}

}  // namespace

void train_task(TrainState& state, const data::Dataset& dataset, const data::Task& task,
                const textemb::Provider& text, TrainHistory& history) {
  if (task.doublets.empty()) throw std::invalid_argument("train_task: empty task");
  const Method method = state.config.method;
  const std::string head_name =
      method == Method::er ? std::string(kSharedHeadName) : task.attribute;

  if (method == Method::er) {
    if (!state.registry.has(head_name))
      state.registry.add_head(head_name, state.config.head_config(),
                              mix_seed(state.seed, fnv1a64("shared-head")));
  } else {
    if (state.registry.has(task.attribute))
      throw std::invalid_argument("train_task: head for '" + task.attribute +
                                  "' already exists");
    state.registry.add_head(task.attribute, state.config.head_config(),
                            mix_seed(state.seed, mix_seed(fnv1a64("head"), task.index)));
  }
  attention::AttentionHead& head = state.registry.head(head_name);

  const ItemIndex items(dataset);
  Adam opt(step_params(state, head_name, head), state.optimizer, state.config.learning_rate);
  Rng rng(mix_seed(state.seed, mix_seed(fnv1a64("task"), task.index)));
  const int64_t batch_size = state.config.hyper.batch;

  if (method == Method::mclfir) {
    // A fresh teacher is obtained from the encoder at every task start, so
    // distillation anchors the student to the state all earlier heads saw.
    state.teacher = encoder::EmaTeacher(state.encoder, state.config.hyper.beta);
    const Tensor attr_raw = text.embed_attribute(task.attribute).vector;
    const auto n = static_cast<int64_t>(task.doublets.size());
    for (int epoch = 0; epoch < state.config.epochs; ++epoch) {
      const auto order = shuffled_indices(n, rng);
      for (int64_t start = 0; start < n; start += batch_size) {
        std::vector<const data::Doublet*> batch;
        for (int64_t i = start; i < std::min(n, start + batch_size); ++i)
          batch.push_back(&task.doublets[static_cast<size_t>(order[static_cast<size_t>(i)])]);
        const StepLoss loss = mclfir_step(state, opt, head, items, batch, attr_raw, rng);
        record_step(state, history, task, loss);
      }
    }
  } else {
    const auto triplets = data::sample_triplets(
        dataset, task.attribute, static_cast<int64_t>(task.doublets.size()),
        mix_seed(state.seed, mix_seed(fnv1a64("triplets"), task.index)));
    const auto n = static_cast<int64_t>(triplets.size());
    for (int epoch = 0; epoch < state.config.epochs; ++epoch) {
      const auto order = shuffled_indices(n, rng);
      for (int64_t start = 0; start < n; start += batch_size) {
        std::vector<const data::Triplet*> current;
        for (int64_t i = start; i < std::min(n, start + batch_size); ++i)
          current.push_back(&triplets[static_cast<size_t>(order[static_cast<size_t>(i)])]);

        std::vector<const data::Triplet*> batch = current;
        std::vector<data::Triplet> replayed;
        if (method == Method::er && state.replay.size() > 0) {
          const auto k = std::min<int64_t>(static_cast<int64_t>(current.size()),
                                           state.replay.size());
          replayed.reserve(static_cast<size_t>(k));
          for (int64_t i = 0; i < k; ++i) replayed.push_back(state.replay.sample(rng));
          for (const auto& t : replayed) batch.push_back(&t);
        }

        const StepLoss loss = triplet_step(state, opt, head, items, batch, text);
        record_step(state, history, task, loss);

        if (method == Method::er)
          for (const auto* t : current) state.replay.insert(*t, rng);
      }
    }
  }

  if (method != Method::er) state.registry.freeze(task.attribute);
  ++state.task_cursor;
  history.student_images = state.encoder.images_encoded();
}

TrainHistory train_sequence(const data::Dataset& dataset, const data::TaskSequence& sequence,
                            const MethodConfig& config, const textemb::Provider& text,
                            uint64_t seed) {
  config.validate();
  if (sequence.tasks.empty()) throw std::invalid_argument("train_sequence: no tasks");
  std::unordered_set<std::string> attrs;
  for (const auto& task : sequence.tasks)
    if (!attrs.insert(task.attribute).second)
      throw std::invalid_argument("train_sequence: duplicate attribute '" + task.attribute + "'");

  TrainState state(config, seed);
  TrainHistory history;
  history.method = config.method;
  history.seed = seed;
  for (const auto& task : sequence.tasks) {
    const int64_t steps_before = history.optimizer_steps;
    train_task(state, dataset, task, text, history);
    TaskRecord record;
    record.index = task.index;
    record.attribute = task.attribute;
    record.steps = history.optimizer_steps - steps_before;
    record.snapshot = state.snapshot();
    history.tasks.push_back(std::move(record));
  }
  history.student_images = state.encoder.images_encoded();
  return history;
}

int64_t count_images_per_step(const MethodConfig& config) {
  config.validate();
  const int64_t b = config.hyper.batch;
  return config.method == Method::mclfir ? 2 * b : 3 * b;
}

void write_loss_csv(const TrainHistory& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_loss_csv: cannot open '" + path + "'");
  out << "step,task,l_ins,l_kd,total\n";
  char buf[160];
  for (const auto& r : history.losses) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(r.step), r.task, r.l_ins, r.l_kd, r.total);
    out << buf;
  }
}

}  // namespace mclfir::trainer
