#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "heft/data.hpp"
#include "heft/lora.hpp"
#include "heft/model.hpp"
#include "heft/reft.hpp"
#include "heft/rng.hpp"
#include "heft/tensor.hpp"

namespace heft {

struct TrainConfig {
  double learning_rate = 2e-4;
  std::size_t epochs = 0;
  std::size_t batch_size = 1;
  std::size_t grad_accum = 1;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (learning_rate <= 0.0) throw std::invalid_argument("train config: learning rate must be positive");
    if (batch_size == 0 || grad_accum == 0) {
      throw std::invalid_argument("train config: batch_size and grad_accum must be at least 1");
    }
  }
};

struct AdamState {
  std::vector<double> m, v;
  std::size_t t = 0;
};

using GradMap = std::map<std::string, std::vector<double>>;
using AdamStates = std::map<std::string, AdamState>;

// Decoupled-weight-decay adaptive update with bias correction. A parameter
// missing from `grads` is treated as having a zero gradient.
inline void adamw_step(const std::vector<std::pair<std::string, Tensor*>>& params,
                       const GradMap& grads, AdamStates& states, const TrainConfig& cfg) {
  for (const auto& [name, tensor] : params) {
    const std::size_t n = tensor->size();
    AdamState& state = states[name];
    if (state.m.empty()) {
      state.m.assign(n, 0.0);
      state.v.assign(n, 0.0);
    }
    const auto it = grads.find(name);
    const double* g = it == grads.end() ? nullptr : it->second.data();
    if (g) {
      if (it->second.size() != n) {
        throw std::invalid_argument("adamw: gradient size mismatch for " + name);
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(g[i])) {
          throw std::runtime_error("adamw: non-finite gradient for parameter " + name);
        }
      }
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    double* p = tensor->data();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g ? g[i] : 0.0;
      state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * gi;
      state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mh = state.m[i] / bc1;
      const double vh = state.v[i] / bc2;
      p[i] -= cfg.learning_rate * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * p[i]);
    }
  }
}

// prompt ++ answer ++ EOS, the Stage-1 training text.
inline std::vector<int> training_sequence(const SupervisedRecord& rec, int eos_id) {
  std::vector<int> seq = rec.prompt_tokens;
  seq.push_back(rec.answer_token);
  seq.push_back(eos_id);
  return seq;
}

// Mean next-token cross-entropy over a whole sequence; also reports the
// number of supervised transitions so callers can renormalize sums.
inline std::pair<Tensor, std::size_t> sequence_nll(const WeightView& w, const ForwardOptions& opt,
                                                   std::span<const int> seq) {
  if (seq.size() < 2) throw std::invalid_argument("sequence_nll: need at least 2 tokens");
  ForwardTrace tr = forward(w, seq, opt);
  std::vector<int> targets(seq.begin() + 1, seq.end());
  Tensor rows = slice_rows(tr.logits, 0, seq.size() - 1);
  return {cross_entropy(rows, targets), seq.size() - 1};
}

inline Tensor loss_full_sequence(const ModelWeights& model, std::span<const int> seq) {
  return sequence_nll(WeightView(model), {}, seq).first;
}

// Cross-entropy of the answer token at the last prompt position, with the
// intervention active exactly there.
inline Tensor loss_last_position(const ReftModel& model, const SupervisedRecord& rec) {
  ForwardTrace tr = reft_forward(model, rec.prompt_tokens, rec.last_position);
  std::vector<int> target{rec.answer_token};
  return cross_entropy(slice_rows(tr.logits, rec.last_position, 1), target);
}

struct ExampleLoss {
  Tensor loss;             // mean over `count` supervised elements
  std::size_t count = 0;
  std::vector<std::pair<std::string, Tensor>> taped_params;
};

// Token index where the question line starts, or 0 when the prompt does not
// follow the standard template.
inline std::size_t question_start(std::span<const int> prompt_tokens) {
  static constexpr std::string_view marker = "\nQuestion:";
  if (prompt_tokens.size() < marker.size()) return 0;
  for (std::size_t t = prompt_tokens.size() - marker.size() + 1; t-- > 0;) {
    bool hit = true;
    for (std::size_t j = 0; j < marker.size(); ++j) {
      if (prompt_tokens[t + j] != static_cast<int>(static_cast<unsigned char>(marker[j]))) {
        hit = false;
        break;
      }
    }
    if (hit) return t;
  }
  return 0;
}

// Supervision span for full-parameter base training. full_sequence is the
// plain objective over every transition; answer_span restricts it to the
// question line and answer (passage bytes are world-random noise, so this is
// what lets desk-scale pretraining spend its gradient on reading); answer_only
// supervises nothing but the answer token.
enum class PretrainObjective { full_sequence, answer_span, answer_only };

// Full-parameter training of the base model.
class PretrainTarget {
 public:
  PretrainTarget(ModelWeights* model, int eos_id,
                 PretrainObjective objective = PretrainObjective::full_sequence)
      : model_(model), eos_id_(eos_id), objective_(objective) {}

  std::vector<std::pair<std::string, Tensor*>> trainable_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, tensor] : model_->entries()) out.emplace_back(name, &tensor);
    return out;
  }

  ExampleLoss example_loss(Tape& tape, const SupervisedRecord& rec, std::uint64_t) {
    WeightView view(*model_);
    ExampleLoss out;
    for (auto& [name, tensor] : model_->entries()) {
      Tensor watched = tape.watch(tensor);
      view.overlay(name, watched);
      out.taped_params.emplace_back(name, watched);
    }
    const std::vector<int> seq = training_sequence(rec, eos_id_);
    ForwardTrace tr = forward(view, seq);
    std::vector<int> targets(seq.begin() + 1, seq.end());
    if (objective_ == PretrainObjective::answer_span) {
      const std::size_t start = question_start(rec.prompt_tokens);
      for (std::size_t t = 0; t + 1 < start; ++t) targets[t] = -1;
    } else if (objective_ == PretrainObjective::answer_only) {
      for (std::size_t t = 0; t < targets.size(); ++t) {
        if (t != rec.last_position) targets[t] = -1;
      }
    }
    std::size_t count = 0;
    for (int t : targets) count += t >= 0 ? 1 : 0;
    out.loss = cross_entropy(slice_rows(tr.logits, 0, targets.size()), targets);
    out.count = count;
    return out;
  }

 private:
  ModelWeights* model_;
  int eos_id_;
  PretrainObjective objective_;
};

// Stage 1: adapters train on the full-sequence objective, base frozen.
class LoraTarget {
 public:
  LoraTarget(LoraModel* model, int eos_id) : model_(model), eos_id_(eos_id) {}

  std::vector<std::pair<std::string, Tensor*>> trainable_params() {
    return lora_trainable_parameters(*model_).tensors;
  }

  ExampleLoss example_loss(Tape& tape, const SupervisedRecord& rec, std::uint64_t step_seed) {
    Rng dropout_rng(step_seed);
    LoraLinear linear;
    linear.base = &model_->base;
    linear.alpha = model_->config.alpha;
    linear.r = model_->config.r;
    linear.dropout_p = model_->config.dropout_p;
    linear.train_mode = true;
    linear.rng = &dropout_rng;

    ExampleLoss out;
    for (const auto& layer : model_->layers) {
      LoraLayer taped = layer;
      taped.A = tape.watch(layer.A);
      taped.B = tape.watch(layer.B);
      out.taped_params.emplace_back("lora." + layer.target_name + ".A", taped.A);
      out.taped_params.emplace_back("lora." + layer.target_name + ".B", taped.B);
      linear.layers.push_back(std::move(taped));
    }
    ForwardOptions opt;
    opt.linear = std::move(linear);
    auto [loss, count] = sequence_nll(WeightView(model_->base), opt, training_sequence(rec, eos_id_));
    out.loss = std::move(loss);
    out.count = count;
    return out;
  }

 private:
  LoraModel* model_;
  int eos_id_;
};

// Stage 2: only R, W, b train, on the last-position objective over the
// frozen (merged) base.
class ReftTarget {
 public:
  explicit ReftTarget(ReftModel* model) : model_(model) {}

  std::vector<std::pair<std::string, Tensor*>> trainable_params() {
    return reft_trainable_parameters(*model_).tensors;
  }

  ExampleLoss example_loss(Tape& tape, const SupervisedRecord& rec, std::uint64_t) {
    LoreftParams taped;
    taped.R = tape.watch(model_->params.R);
    taped.W = tape.watch(model_->params.W);
    taped.b = tape.watch(model_->params.b);

    ForwardOptions opt;
    opt.hooks.push_back(loreft_hook(taped, model_->config.layer, rec.last_position));
    ForwardTrace tr = forward(model_->base, rec.prompt_tokens, opt);
    std::vector<int> target{rec.answer_token};

    ExampleLoss out;
    out.loss = cross_entropy(slice_rows(tr.logits, rec.last_position, 1), target);
    out.count = 1;
    out.taped_params = {{"reft.R", taped.R}, {"reft.W", taped.W}, {"reft.b", taped.b}};
    return out;
  }

 private:
  ReftModel* model_;
};

enum class StageKind { pretrain, lora, reft };

inline const char* to_string(StageKind kind) {
  switch (kind) {
    case StageKind::pretrain: return "pretrain";
    case StageKind::lora: return "lora";
    case StageKind::reft: return "reft";
  }
  return "?";
}

struct StageReport {
  StageKind stage = StageKind::lora;
  std::size_t epochs_run = 0;
  double final_mean_loss = 0.0;
  double wall_seconds = 0.0;
  std::size_t trainable_param_count = 0;
  std::size_t optimizer_steps = 0;
};

// Epochs of ceil(N / (batch_size * grad_accum)) optimizer steps. Per-example
// gradients of the loss sum accumulate over a group and are normalized by the
// group's total supervised elements, which makes (batch=1, accum=k) and
// (batch=k, accum=1) bit-identical. epochs = 0 performs no step at all.
template <class Target>
StageReport train_stage(Target& target, std::span<const SupervisedRecord> data,
                        const TrainConfig& cfg, StageKind kind) {
  cfg.validate();
  StageReport report;
  report.stage = kind;
  auto params = target.trainable_params();
  for (const auto& [name, tensor] : params) report.trainable_param_count += tensor->size();
  if (cfg.epochs == 0) return report;
  if (data.empty()) throw std::invalid_argument("train_stage: no training data");

  const auto start = std::chrono::steady_clock::now();
  AdamStates states;
  const std::size_t group_size = cfg.batch_size * cfg.grad_accum;
  double last_epoch_mean = 0.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(Rng::mix(cfg.seed, 0xE50C + epoch));
    const auto order = random_permutation(data.size(), shuffle_rng);
    double epoch_loss_sum = 0.0;
    std::size_t epoch_elements = 0;
    std::size_t pos = 0;
    while (pos < data.size()) {
      GradMap grads;
      std::size_t group_elements = 0;
      const std::size_t group_end = std::min(pos + group_size, data.size());
      for (; pos < group_end; ++pos) {
        const SupervisedRecord& rec = data[order[pos]];
        Tape tape;
        const std::uint64_t step_seed = Rng::mix(cfg.seed, (epoch << 24) ^ pos ^ 0xD60);
        ExampleLoss ex = target.example_loss(tape, rec, step_seed);
        const double value = ex.loss.item();
        if (!std::isfinite(value)) {
          throw std::runtime_error("train_stage: non-finite loss at optimizer step " +
                                   std::to_string(report.optimizer_steps));
        }
        tape.backward(ex.loss, static_cast<double>(ex.count));  // gradient of the loss sum
        for (const auto& [name, handle] : ex.taped_params) {
          Tensor g = tape.grad(handle);
          auto& acc = grads[name];
          if (acc.empty()) acc.assign(g.size(), 0.0);
          const double* gd = g.data();
          for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gd[i];
        }
        group_elements += ex.count;
        epoch_loss_sum += value * static_cast<double>(ex.count);
        epoch_elements += ex.count;
      }
      for (auto& [name, acc] : grads) {
        for (auto& v : acc) v /= static_cast<double>(group_elements);
      }
      adamw_step(params, grads, states, cfg);
      report.optimizer_steps += 1;
    }
    last_epoch_mean = epoch_loss_sum / static_cast<double>(epoch_elements);
  }

  report.epochs_run = cfg.epochs;
  report.final_mean_loss = last_epoch_mean;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

struct HeftPlan {
  std::size_t lora_epochs = 3;
  std::size_t reft_epochs = 3;
  LoraConfig lora;
  ReftConfig reft;
  TrainConfig lora_train;
  TrainConfig reft_train;
  std::uint64_t init_seed = 7;
};

struct HeftResult {
  ModelWeights merged;
  ReftConfig reft_config;
  LoreftParams reft_params;
  StageReport lora_report;
  StageReport reft_report;

  ReftModel reft_model() const { return attach_intervention(merged, reft_config, reft_params); }
};

// The two-stage pipeline: adapters trained on the full-sequence objective,
// merged exactly into the base, then the intervention trained on the
// last-position objective over the frozen merged model. Zero epochs in either
// stage degenerate to the single-method baselines.
inline HeftResult run_heft(const ModelWeights& base, const HeftPlan& plan,
                           std::span<const SupervisedRecord> data, int eos_id) {
  LoraModel lora = attach_lora(base, plan.lora, Rng::mix(plan.init_seed, 1));
  TrainConfig lora_cfg = plan.lora_train;
  lora_cfg.epochs = plan.lora_epochs;
  LoraTarget lora_target(&lora, eos_id);
  StageReport lora_report = train_stage(lora_target, data, lora_cfg, StageKind::lora);

  ModelWeights merged = merge_and_unload(lora);

  ReftModel reft = attach_intervention(
      merged, plan.reft,
      init_loreft(merged.config.d_model, plan.reft.low_rank_dimension, Rng::mix(plan.init_seed, 2)));
  TrainConfig reft_cfg = plan.reft_train;
  reft_cfg.epochs = plan.reft_epochs;
  ReftTarget reft_target(&reft);
  StageReport reft_report = train_stage(reft_target, data, reft_cfg, StageKind::reft);

  return HeftResult{std::move(merged), reft.config, std::move(reft.params), lora_report,
                    reft_report};
}

}  // namespace heft
