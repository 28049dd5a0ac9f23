#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "heft/model.hpp"
#include "heft/rng.hpp"
#include "heft/tensor.hpp"

namespace heft {

struct LoraConfig {
  std::size_t r = 8;
  double alpha = 32.0;
  double dropout_p = 0.05;
  std::vector<std::string> targets = default_targets();

  static std::vector<std::string> default_targets() {
    return {"*.attn.wq", "*.attn.wk", "*.attn.wv", "*.attn.wo", "*.ffn.w_up", "*.ffn.w_down"};
  }

  void validate() const {
    if (r == 0) throw std::invalid_argument("lora config: rank must be at least 1");
    if (alpha <= 0.0) throw std::invalid_argument("lora config: alpha must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0) {
      throw std::invalid_argument("lora config: dropout must lie in [0,1)");
    }
  }
};

// Low-rank pair for one targeted weight. The base weight maps d_in -> d_out
// (stored [d_in x d_out]); A is [r x d_in] and B is [d_out x r], so the delta
// applied to an activation x is (alpha/r) * (x A^T) B^T and the merged update
// is (alpha/r) * A^T B^T.
struct LoraLayer {
  std::string target_name;
  Tensor A;
  Tensor B;
};

struct LoraModel {
  ModelWeights base;  // frozen; never receives gradients
  std::vector<LoraLayer> layers;
  LoraConfig config;

  const LoraLayer* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &layers[it->second];
  }

  void rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < layers.size(); ++i) index_.emplace(layers[i].target_name, i);
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

// Glob match supporting only '*'.
inline bool pattern_match(std::string_view pattern, std::string_view name) {
  if (pattern.empty()) return name.empty();
  if (pattern.front() == '*') {
    for (std::size_t i = 0; i <= name.size(); ++i) {
      if (pattern_match(pattern.substr(1), name.substr(i))) return true;
    }
    return false;
  }
  if (name.empty() || pattern.front() != name.front()) return false;
  return pattern_match(pattern.substr(1), name.substr(1));
}

inline std::vector<std::string> resolve_lora_targets(const ModelWeights& base,
                                                     const std::vector<std::string>& patterns) {
  std::vector<std::string> resolved;
  std::unordered_map<std::string, bool> seen;
  for (const auto& pattern : patterns) {
    bool matched = false;
    for (const auto& [name, tensor] : base.entries()) {
      if (!pattern_match(pattern, name)) continue;
      if (tensor.rank() != 2) {
        throw std::invalid_argument("lora target " + name + " is not a linear weight: " +
                                    shape_str(tensor.shape()));
      }
      matched = true;
      if (!seen[name]) {
        seen[name] = true;
        resolved.push_back(name);
      }
    }
    if (!matched) throw std::invalid_argument("lora target pattern matched nothing: " + pattern);
  }
  return resolved;
}

// Attaches adapters with A ~ N(0, 0.02) and B = 0, so the adapted model is an
// exact functional no-op until training moves B.
inline LoraModel attach_lora(const ModelWeights& base, const LoraConfig& config,
                             std::uint64_t seed) {
  config.validate();
  LoraModel model;
  model.base = base.clone();
  model.config = config;
  Rng rng(seed);
  for (const auto& name : resolve_lora_targets(base, config.targets)) {
    const Tensor& w = base.get(name);
    const std::size_t d_in = w.shape()[0], d_out = w.shape()[1];
    if (config.r > std::min(d_in, d_out)) {
      throw std::invalid_argument("lora rank " + std::to_string(config.r) + " exceeds " + name +
                                  " " + shape_str(w.shape()));
    }
    LoraLayer layer;
    layer.target_name = name;
    layer.A = Tensor({config.r, d_in});
    for (std::size_t i = 0; i < layer.A.size(); ++i) layer.A.data()[i] = rng.gauss(0.0, kInitStd);
    layer.B = Tensor({d_out, config.r});
    model.layers.push_back(std::move(layer));
  }
  model.rebuild_index();
  return model;
}

// (alpha/r) * B(A x~) for one activation batch, with inverted dropout on the
// adapter input path in training mode. Evaluation mode never touches the rng.
inline Tensor lora_forward_delta(const LoraLayer& layer, const Tensor& x, double alpha,
                                 std::size_t r, double dropout_p, bool train_mode, Rng* rng) {
  Tensor routed = x;
  if (train_mode && dropout_p > 0.0) {
    if (!rng) throw std::invalid_argument("lora_forward_delta: dropout requires an rng");
    Tensor mask(x.shape());
    const double keep = 1.0 - dropout_p;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      mask.data()[i] = rng->uniform01() < keep ? 1.0 / keep : 0.0;
    }
    routed = mul_elem(x, mask);
  }
  return scale(matmul(matmul(routed, transpose(layer.A)), transpose(layer.B)),
               alpha / static_cast<double>(r));
}

// Linear override routing targeted weights through base + adapter delta.
// Holds its own copies of the adapter tensors (cheap shared handles), which
// during training are the tape-watched ones.
struct LoraLinear {
  const ModelWeights* base = nullptr;
  std::vector<LoraLayer> layers;
  double alpha = 32.0;
  std::size_t r = 8;
  double dropout_p = 0.0;
  bool train_mode = false;
  Rng* rng = nullptr;

  Tensor operator()(const std::string& name, const Tensor& x) const {
    Tensor y = matmul(x, base->get(name));
    for (const auto& layer : layers) {
      if (layer.target_name == name) {
        return add(y, lora_forward_delta(layer, x, alpha, r, dropout_p, train_mode, rng));
      }
    }
    return y;
  }
};

inline ForwardOptions lora_eval_options(const LoraModel& model) {
  ForwardOptions opt;
  opt.linear = LoraLinear{&model.base, model.layers, model.config.alpha, model.config.r,
                          0.0,         false,        nullptr};
  return opt;
}

inline ForwardTrace lora_forward(const LoraModel& model, std::span<const int> tokens) {
  return forward(model.base, tokens, lora_eval_options(model));
}

// Folds every adapter into its base weight and drops the adapter structures.
inline ModelWeights merge_and_unload(const LoraModel& model) {
  ModelWeights merged = model.base.clone();
  const double s = model.config.alpha / static_cast<double>(model.config.r);
  for (const auto& layer : model.layers) {
    Tensor delta = scale(matmul(transpose(layer.A), transpose(layer.B)), s);
    Tensor& w = merged.at(layer.target_name);
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] += delta.data()[i];
  }
  return merged;
}

struct NamedParams {
  std::vector<std::pair<std::string, Tensor*>> tensors;
  std::size_t total = 0;
};

inline NamedParams lora_trainable_parameters(LoraModel& model) {
  NamedParams out;
  for (auto& layer : model.layers) {
    out.tensors.emplace_back("lora." + layer.target_name + ".A", &layer.A);
    out.tensors.emplace_back("lora." + layer.target_name + ".B", &layer.B);
    out.total += layer.A.size() + layer.B.size();
  }
  return out;
}

}  // namespace heft
