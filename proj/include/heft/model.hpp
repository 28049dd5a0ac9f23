#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "heft/rng.hpp"
#include "heft/tensor.hpp"

namespace heft {

inline constexpr double kRmsEps = 1e-5;
inline constexpr double kInitStd = 0.02;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 261;
  std::size_t max_seq = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0) {
      throw std::invalid_argument("model config: all sizes must be positive");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                  " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (max_seq < 2) throw std::invalid_argument("model config: max_seq must be at least 2");
  }

  std::size_t head_dim() const { return d_model / n_heads; }
};

// The full parameter set of the mini decoder, each weight addressable by a
// stable unique name. Insertion order is fixed by init_model, which makes
// seeded initialization, optimizer iteration and checkpoint layout all
// deterministic.
class ModelWeights {
 public:
  ModelConfig config;

  void add(std::string name, Tensor t) {
    if (index_.count(name)) throw std::invalid_argument("duplicate weight name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(t));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const { return entries_[find(name)].second; }
  Tensor& at(const std::string& name) { return entries_[find(name)].second; }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [n, t] : entries_) out.push_back(n);
    return out;
  }

  ModelWeights clone() const {
    ModelWeights w;
    w.config = config;
    for (const auto& [n, t] : entries_) w.add(n, t.clone());
    return w;
  }

 private:
  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown weight: " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline std::vector<std::string> layer_weight_names(std::size_t layer) {
  const std::string p = "layers." + std::to_string(layer) + ".";
  return {p + "attn_norm.gain", p + "attn.wq", p + "attn.wk",   p + "attn.wv", p + "attn.wo",
          p + "ffn_norm.gain",  p + "ffn.w_gate", p + "ffn.w_up", p + "ffn.w_down"};
}

// Learned position table, initialized with low-amplitude sinusoids instead of
// noise: the relative-offset structure they carry lets position-difference
// attention (and with it induction-style copying) form at desk scale, which
// gaussian-initialized tables were measured not to reach.
inline Tensor sinusoid_position_table(std::size_t max_seq, std::size_t d, double amplitude) {
  Tensor t({max_seq, d});
  for (std::size_t pos = 0; pos < max_seq; ++pos) {
    for (std::size_t i = 0; i + 1 < d; i += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      t.set(pos, i, amplitude * std::sin(angle));
      t.set(pos, i + 1, amplitude * std::cos(angle));
    }
  }
  return t;
}

inline ModelWeights init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  auto gauss = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.gauss(0.0, kInitStd);
    return t;
  };
  const std::size_t d = config.d_model, v = config.vocab_size, f = config.d_ff;
  ModelWeights w;
  w.config = config;
  w.add("token_embedding", gauss({v, d}));
  w.add("position_embedding", sinusoid_position_table(config.max_seq, d, 3.0 * kInitStd));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto names = layer_weight_names(l);
    w.add(names[0], Tensor::full({d}, 1.0));
    w.add(names[1], gauss({d, d}));
    w.add(names[2], gauss({d, d}));
    w.add(names[3], gauss({d, d}));
    w.add(names[4], gauss({d, d}));
    w.add(names[5], Tensor::full({d}, 1.0));
    w.add(names[6], gauss({d, f}));
    w.add(names[7], gauss({d, f}));
    w.add(names[8], gauss({f, d}));
  }
  w.add("unembedding", gauss({d, v}));
  return w;
}

// Read-only view over a weight set with an optional overlay. Training code
// overlays tape-watched copies of the tensors it updates; everything else is
// served from the frozen base.
class WeightView {
 public:
  explicit WeightView(const ModelWeights& base) : base_(&base) {}

  const ModelConfig& config() const { return base_->config; }

  void overlay(const std::string& name, Tensor t) {
    if (!base_->has(name)) throw std::out_of_range("overlay: unknown weight " + name);
    overlay_[name] = std::move(t);
  }

  const Tensor& get(const std::string& name) const {
    auto it = overlay_.find(name);
    if (it != overlay_.end()) return it->second;
    return base_->get(name);
  }

  const ModelWeights& base() const { return *base_; }

 private:
  const ModelWeights* base_;
  std::unordered_map<std::string, Tensor> overlay_;
};

struct HookPoint {
  enum class Component { block_output };

  std::size_t layer = 0;
  Component component = Component::block_output;
  std::vector<std::size_t> positions;  // ignored when all_positions is set
  bool all_positions = false;

  static HookPoint block_output_at(std::size_t layer, std::size_t position) {
    return HookPoint{layer, Component::block_output, {position}, false};
  }
  static HookPoint block_output_all(std::size_t layer) {
    return HookPoint{layer, Component::block_output, {}, true};
  }
};

// Transform applied to one block-output row (a length-d vector). When the
// closure holds tape-watched parameters the edit is recorded for backward.
struct Hook {
  HookPoint point;
  std::function<Tensor(const Tensor& row)> transform;
};

struct ForwardTrace {
  std::vector<Tensor> block_outputs;  // one per layer when tracing is on
  Tensor logits;                      // [seq x vocab]
};

// Replaces the plain x·W of a named weight; the LoRA adapter path hooks in
// here during Stage-1 training and unmerged evaluation.
using LinearFn = std::function<Tensor(const std::string& name, const Tensor& x)>;

struct ForwardOptions {
  std::vector<Hook> hooks;
  LinearFn linear;  // empty: y = matmul(x, w[name])
  bool capture_block_outputs = false;
};

namespace detail {

inline void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(id) + " out of range [0," +
                              std::to_string(cfg.vocab_size) + ")");
    }
  }
}

inline void check_hooks(const ModelConfig& cfg, const std::vector<Hook>& hooks,
                        std::size_t seq_len) {
  for (const auto& h : hooks) {
    if (h.point.layer >= cfg.n_layers) {
      throw std::out_of_range("hook: layer " + std::to_string(h.point.layer) + " out of range [0," +
                              std::to_string(cfg.n_layers) + ")");
    }
    if (!h.point.all_positions) {
      for (std::size_t p : h.point.positions) {
        if (p >= seq_len) {
          throw std::out_of_range("hook: position " + std::to_string(p) +
                                  " outside sequence of length " + std::to_string(seq_len));
        }
      }
    }
    if (!h.transform) throw std::invalid_argument("hook: missing transform");
  }
}

}  // namespace detail

// Causal decoder forward pass. Hook transforms run on the designated
// block-output rows right after the layer's second residual addition, before
// the next layer (or the unembedding) consumes them.
inline ForwardTrace forward(const WeightView& w, std::span<const int> tokens,
                            const ForwardOptions& opt = {}) {
  const ModelConfig& cfg = w.config();
  cfg.validate();
  detail::check_tokens(cfg, tokens);
  detail::check_hooks(cfg, opt.hooks, tokens.size());

  const std::size_t n = tokens.size();
  const std::size_t d = cfg.d_model;

  auto linear = [&](const std::string& name, const Tensor& x) {
    return opt.linear ? opt.linear(name, x) : matmul(x, w.get(name));
  };

  ForwardTrace trace;

  Tensor x = add(embedding_lookup(w.get("token_embedding"), tokens),
                 slice_rows(w.get("position_embedding"), 0, n));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto names = layer_weight_names(l);
    Tensor normed = rms_norm(x, w.get(names[0]), kRmsEps);
    Tensor q = linear(names[1], normed);
    Tensor k = linear(names[2], normed);
    Tensor v = linear(names[3], normed);
    Tensor attn = linear(names[4], causal_attention(q, k, v, cfg.n_heads));
    Tensor h1 = add(x, attn);

    Tensor f = rms_norm(h1, w.get(names[5]), kRmsEps);
    Tensor gated = mul_elem(silu(linear(names[6], f)), linear(names[7], f));
    x = add(h1, linear(names[8], gated));  // block output

    for (const auto& hook : opt.hooks) {
      if (hook.point.layer != l) continue;
      std::vector<std::size_t> positions = hook.point.positions;
      if (hook.point.all_positions) {
        positions.resize(n);
        for (std::size_t p = 0; p < n; ++p) positions[p] = p;
      }
      for (std::size_t p : positions) {
        Tensor row = reshape(slice_rows(x, p, 1), {d});
        Tensor edited = hook.transform(row);
        if (edited.shape() != Shape{d}) {
          throw std::invalid_argument("hook: transform returned " + shape_str(edited.shape()) +
                                      ", expected " + shape_str({d}));
        }
        x = replace_rows(x, p, reshape(edited, {1, d}));
      }
    }
    if (opt.capture_block_outputs) trace.block_outputs.push_back(x);
  }

  trace.logits = linear("unembedding", x);
  return trace;
}

inline ForwardTrace forward(const ModelWeights& weights, std::span<const int> tokens,
                            const ForwardOptions& opt = {}) {
  return forward(WeightView(weights), tokens, opt);
}

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.shape()[1];
  const double* data = logits.data() + row * v;
  std::size_t best = 0;
  for (std::size_t j = 1; j < v; ++j) {
    if (data[j] > data[best]) best = j;
  }
  return best;
}

// Greedy decoding. Hook positions are absolute indices into the growing
// sequence; anchored at prompt positions they stay active on every step.
// Returns the full sequence (prompt followed by generated tokens). Stops
// early when `eos_id` (if non-negative) is produced.
inline std::vector<int> generate_greedy(const WeightView& w, std::span<const int> prompt,
                                        std::size_t max_new, const ForwardOptions& opt = {},
                                        int eos_id = -1) {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  if (max_new == 0) throw std::invalid_argument("generate: max_new must be at least 1");
  if (prompt.size() + max_new > w.config().max_seq) {
    throw std::invalid_argument("generate: prompt of " + std::to_string(prompt.size()) + " plus " +
                                std::to_string(max_new) + " new tokens exceeds max_seq " +
                                std::to_string(w.config().max_seq));
  }
  std::vector<int> seq(prompt.begin(), prompt.end());
  for (std::size_t step = 0; step < max_new; ++step) {
    ForwardTrace tr = forward(w, seq, opt);
    const int next = static_cast<int>(argmax_row(tr.logits, seq.size() - 1));
    seq.push_back(next);
    if (eos_id >= 0 && next == eos_id) break;
  }
  return seq;
}

inline std::vector<int> generate_greedy(const ModelWeights& weights, std::span<const int> prompt,
                                        std::size_t max_new, const ForwardOptions& opt = {},
                                        int eos_id = -1) {
  return generate_greedy(WeightView(weights), prompt, max_new, opt, eos_id);
}

}  // namespace heft
