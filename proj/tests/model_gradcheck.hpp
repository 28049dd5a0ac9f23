#pragma once

// Finite-difference oracles for whole-model gradients, shared by the unit
// suite and the acceptance suite. Each check rebuilds the loss as a plain
// (tape-free) function of a single parameter tensor and compares backward
// against central differences, coordinate by coordinate.

#include <string>
#include <utility>
#include <vector>

#include "heft/lora.hpp"
#include "heft/reft.hpp"
#include "heft/train.hpp"
#include "test_util.hpp"

namespace heft_test {

struct GradCheckWorst {
  double rel = 0.0;
  std::string name;

  void fold(double err, const std::string& n) {
    if (err > rel) {
      rel = err;
      name = n;
    }
  }
};

// (a) full-sequence objective, every base weight trainable
inline GradCheckWorst gradcheck_pretrain(heft::ModelWeights& model,
                                         const heft::SupervisedRecord& rec, int eos_id,
                                         double step = 1e-5) {
  heft::PretrainTarget target(&model, eos_id);
  heft::Tape tape;
  heft::ExampleLoss ex = target.example_loss(tape, rec, 0);
  tape.backward(ex.loss);

  const auto seq = heft::training_sequence(rec, eos_id);
  GradCheckWorst worst;
  for (const auto& [name, handle] : ex.taped_params) {
    heft::Tensor grad = tape.grad(handle);
    heft::Tensor original = model.at(name);
    heft::Tensor fd = heft::fd_gradient(
        [&](const heft::Tensor& probe) {
          model.at(name) = probe;
          return heft::loss_full_sequence(model, seq).item();
        },
        original, step);
    model.at(name) = original;
    worst.fold(max_rel_err(grad, fd), name);
  }
  return worst;
}

// (b) full-sequence objective through the adapter path, A and B trainable
inline GradCheckWorst gradcheck_lora(heft::LoraModel& model, const heft::SupervisedRecord& rec,
                                     int eos_id, double step = 1e-5) {
  heft::LoraModel probe_model = model;  // shares base, copies adapter handles
  probe_model.config.dropout_p = 0.0;   // keep the FD loss a pure function

  heft::LoraTarget target(&probe_model, eos_id);
  heft::Tape tape;
  heft::ExampleLoss ex = target.example_loss(tape, rec, 0);
  tape.backward(ex.loss);

  const auto seq = heft::training_sequence(rec, eos_id);
  auto loss_value = [&]() {
    return heft::sequence_nll(heft::WeightView(probe_model.base),
                              heft::lora_eval_options(probe_model), seq)
        .first.item();
  };

  GradCheckWorst worst;
  std::size_t param_index = 0;
  for (auto& layer : probe_model.layers) {
    for (heft::Tensor* tensor : {&layer.A, &layer.B}) {
      const auto& [name, handle] = ex.taped_params[param_index++];
      heft::Tensor grad = tape.grad(handle);
      heft::Tensor original = *tensor;
      heft::Tensor fd = heft::fd_gradient(
          [&](const heft::Tensor& p) {
            *tensor = p;
            return loss_value();
          },
          original, step);
      *tensor = original;
      worst.fold(max_rel_err(grad, fd), name);
    }
  }
  return worst;
}

// (c) last-position objective, R/W/b trainable over the frozen base
inline GradCheckWorst gradcheck_reft(heft::ReftModel& model, const heft::SupervisedRecord& rec,
                                     double step = 1e-5) {
  heft::ReftTarget target(&model);
  heft::Tape tape;
  heft::ExampleLoss ex = target.example_loss(tape, rec, 0);
  tape.backward(ex.loss);

  GradCheckWorst worst;
  std::size_t param_index = 0;
  for (heft::Tensor* tensor : {&model.params.R, &model.params.W, &model.params.b}) {
    const auto& [name, handle] = ex.taped_params[param_index++];
    heft::Tensor grad = tape.grad(handle);
    heft::Tensor original = *tensor;
    heft::Tensor fd = heft::fd_gradient(
        [&](const heft::Tensor& p) {
          *tensor = p;
          return heft::loss_last_position(model, rec).item();
        },
        original, step);
    *tensor = original;
    worst.fold(max_rel_err(grad, fd), name);
  }
  return worst;
}

inline heft::SupervisedRecord toy_record(const heft::ModelConfig& cfg, std::size_t length,
                                         std::uint64_t seed, int answer_token) {
  heft::Rng rng(seed);
  heft::SupervisedRecord rec;
  for (std::size_t i = 0; i < length; ++i) {
    rec.prompt_tokens.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
  }
  rec.answer_token = answer_token;
  rec.last_position = length - 1;
  return rec;
}

}  // namespace heft_test
