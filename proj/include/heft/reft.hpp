#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "heft/model.hpp"
#include "heft/rng.hpp"
#include "heft/tensor.hpp"

namespace heft {

struct ReftConfig {
  std::size_t layer = 0;
  HookPoint::Component component = HookPoint::Component::block_output;
  std::size_t low_rank_dimension = 4;
  enum class PositionRule { last_prompt } position_rule = PositionRule::last_prompt;

  void validate(const ModelConfig& model) const {
    if (layer >= model.n_layers) {
      throw std::out_of_range("reft config: layer " + std::to_string(layer) + " out of range [0," +
                              std::to_string(model.n_layers) + ")");
    }
    if (low_rank_dimension == 0 || low_rank_dimension > model.d_model) {
      throw std::invalid_argument("reft config: rank " + std::to_string(low_rank_dimension) +
                                  " not in [1," + std::to_string(model.d_model) + "]");
    }
  }
};

// Projection R [r x d], subspace transform W [r x r] and bias b [r] of the
// intervention h + R^T((W(Rh)+b) - Rh).
struct LoreftParams {
  Tensor R;
  Tensor W;
  Tensor b;

  std::size_t rank() const { return R.shape()[0]; }
  std::size_t width() const { return R.shape()[1]; }
};

namespace detail {

// In-place Gram-Schmidt over the rows; rows are redrawn by the caller, so a
// degenerate draw is an error here.
inline void orthonormalize_rows(Tensor& m) {
  const std::size_t r = m.shape()[0], d = m.shape()[1];
  for (std::size_t i = 0; i < r; ++i) {
    double* row = m.data() + i * d;
    for (std::size_t k = 0; k < i; ++k) {
      const double* prev = m.data() + k * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += row[j] * prev[j];
      for (std::size_t j = 0; j < d; ++j) row[j] -= dot * prev[j];
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += row[j] * row[j];
    norm = std::sqrt(norm);
    if (norm < 1e-10) throw std::runtime_error("orthonormalize: degenerate row");
    for (std::size_t j = 0; j < d; ++j) row[j] /= norm;
  }
}

}  // namespace detail

// R drawn gaussian and orthonormalized, W = I, b = 0: the intervention starts
// as an exact identity, mirroring the adapter's zero-B initialization.
inline LoreftParams init_loreft(std::size_t d_model, std::size_t r, std::uint64_t seed) {
  if (r == 0 || r > d_model) {
    throw std::invalid_argument("init_loreft: rank " + std::to_string(r) + " not in [1," +
                                std::to_string(d_model) + "]");
  }
  LoreftParams p;
  Rng rng(seed);
  p.R = Tensor({r, d_model});
  for (std::size_t i = 0; i < p.R.size(); ++i) p.R.data()[i] = rng.gauss();
  detail::orthonormalize_rows(p.R);
  p.W = Tensor({r, r});
  for (std::size_t i = 0; i < r; ++i) p.W.set(i, i, 1.0);
  p.b = Tensor({r});
  return p;
}

// The intervention itself: h + R^T((W(Rh)+b) - Rh) on a single hidden row.
// Tape-recorded whenever h or the parameters are watched.
inline Tensor apply_loreft(const LoreftParams& params, const Tensor& h) {
  if (h.rank() != 1 || h.shape()[0] != params.width()) {
    throw std::invalid_argument("apply_loreft: h " + shape_str(h.shape()) + " does not match R " +
                                shape_str(params.R.shape()));
  }
  const std::size_t r = params.rank();
  Tensor col = reshape(h, {params.width(), 1});
  Tensor rh = matmul(params.R, col);
  Tensor edited = sub(add(matmul(params.W, rh), reshape(params.b, {r, 1})), rh);
  Tensor out = add(col, matmul(transpose(params.R), edited));
  return reshape(out, {params.width()});
}

// A frozen base plus one trainable intervention. The base is copied in, and
// nothing in the training path ever registers it on a tape.
struct ReftModel {
  ModelWeights base;
  ReftConfig config;
  LoreftParams params;
};

inline ReftModel attach_intervention(const ModelWeights& base, const ReftConfig& config,
                                     LoreftParams params) {
  config.validate(base.config);
  if (params.rank() != config.low_rank_dimension || params.width() != base.config.d_model ||
      params.W.shape() != Shape{params.rank(), params.rank()} ||
      params.b.shape() != Shape{params.rank()}) {
    throw std::invalid_argument("attach_intervention: parameter shapes do not match config");
  }
  ReftModel model;
  model.base = base.clone();
  model.config = config;
  model.params = std::move(params);
  return model;
}

// The paper-relative intervention depth: layer 15 of 32 at full scale.
inline std::size_t select_reft_layer(std::size_t n_layers) {
  if (n_layers == 0) throw std::invalid_argument("select_reft_layer: no layers");
  const std::size_t picked = n_layers * 15 / 32;
  return std::min(picked, n_layers - 1);
}

inline Hook loreft_hook(const LoreftParams& params, std::size_t layer, std::size_t position) {
  return Hook{HookPoint::block_output_at(layer, position),
              [params](const Tensor& row) { return apply_loreft(params, row); }};
}

inline ForwardOptions reft_options(const ReftModel& model, std::size_t last_prompt_position) {
  ForwardOptions opt;
  opt.hooks.push_back(loreft_hook(model.params, model.config.layer, last_prompt_position));
  return opt;
}

inline ForwardTrace reft_forward(const ReftModel& model, std::span<const int> tokens,
                                 std::size_t last_prompt_position) {
  return forward(model.base, tokens, reft_options(model, last_prompt_position));
}

// Greedy decoding with the intervention anchored at the last prompt position
// on every step.
inline std::vector<int> reft_generate(const ReftModel& model, std::span<const int> prompt,
                                      std::size_t max_new, int eos_id = -1) {
  if (prompt.empty()) throw std::invalid_argument("reft_generate: empty prompt");
  return generate_greedy(model.base, prompt, max_new, reft_options(model, prompt.size() - 1),
                         eos_id);
}

struct ReftNamedParams {
  std::vector<std::pair<std::string, Tensor*>> tensors;
  std::size_t total = 0;
};

inline ReftNamedParams reft_trainable_parameters(ReftModel& model) {
  ReftNamedParams out;
  out.tensors.emplace_back("reft.R", &model.params.R);
  out.tensors.emplace_back("reft.W", &model.params.W);
  out.tensors.emplace_back("reft.b", &model.params.b);
  out.total = model.params.R.size() + model.params.W.size() + model.params.b.size();
  return out;
}

}  // namespace heft
