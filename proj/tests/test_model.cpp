#include <vector>

#include "doctest.h"
#include "heft/model.hpp"
#include "test_util.hpp"

using namespace heft;
using namespace heft_test;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.d_ff = 24;
  cfg.vocab_size = 40;
  cfg.max_seq = 16;
  cfg.seed = 7;
  return cfg;
}

std::vector<int> sample_tokens(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> tokens;
  for (std::size_t i = 0; i < n; ++i) {
    tokens.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
  }
  return tokens;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("init_model is deterministic per seed") {
  ModelConfig cfg = tiny_config();
  ModelWeights a = init_model(cfg);
  ModelWeights b = init_model(cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.entries()[i].first == b.entries()[i].first);
    CHECK(same_bits(a.entries()[i].second, b.entries()[i].second));
  }

  cfg.seed = 8;
  ModelWeights c = init_model(cfg);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!same_bits(a.entries()[i].second, c.entries()[i].second)) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("weight schema enumerates per-layer names plus embeddings and unembedding") {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.d_ff = 64;
  cfg.vocab_size = 64;
  cfg.max_seq = 16;
  ModelWeights w = init_model(cfg);
  CHECK(w.size() == layer_weight_names(0).size() * cfg.n_layers + 3);
  CHECK(w.has("token_embedding"));
  CHECK(w.has("position_embedding"));
  CHECK(w.has("unembedding"));
  CHECK(w.get("layers.1.attn.wq").shape() == Shape{32, 32});
  CHECK(w.get("layers.0.ffn.w_down").shape() == Shape{64, 32});
  CHECK(w.get("layers.0.attn_norm.gain").at(5) == 1.0);
}

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 3;  // does not divide 16
  CHECK_THROWS_AS(init_model(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.max_seq = 1;
  CHECK_THROWS_AS(init_model(cfg), std::invalid_argument);
}

TEST_CASE("forward rejects bad inputs") {
  ModelWeights w = init_model(tiny_config());
  std::vector<int> too_long(w.config.max_seq + 1, 1);
  CHECK_THROWS_AS(forward(w, too_long), std::invalid_argument);
  std::vector<int> oov{1, static_cast<int>(w.config.vocab_size)};
  CHECK_THROWS_AS(forward(w, oov), std::out_of_range);

  std::vector<int> ok{1, 2, 3};
  ForwardOptions opt;
  opt.hooks.push_back({HookPoint::block_output_at(w.config.n_layers, 0),
                       [](const Tensor& row) { return row; }});
  CHECK_THROWS_AS(forward(w, ok, opt), std::out_of_range);
}

TEST_CASE("identity hook and tracing change nothing") {
  ModelWeights w = init_model(tiny_config());
  std::vector<int> tokens = sample_tokens(w.config, 9, 3);

  ForwardTrace plain = forward(w, tokens);

  ForwardOptions opt;
  opt.hooks.push_back(
      {HookPoint::block_output_at(1, 4), [](const Tensor& row) { return row; }});
  ForwardTrace hooked = forward(w, tokens, opt);
  CHECK(same_bits(plain.logits, hooked.logits));

  ForwardOptions tracing;
  tracing.capture_block_outputs = true;
  ForwardTrace traced = forward(w, tokens, tracing);
  CHECK(same_bits(plain.logits, traced.logits));
  CHECK(traced.block_outputs.size() == w.config.n_layers);
  CHECK(plain.block_outputs.empty());
}

TEST_CASE("a hook edit propagates only to later positions") {
  ModelWeights w = init_model(tiny_config());
  std::vector<int> tokens = sample_tokens(w.config, 10, 5);
  const std::size_t p = 4;

  ForwardTrace plain = forward(w, tokens);
  ForwardOptions opt;
  opt.hooks.push_back({HookPoint::block_output_at(0, p), [&](const Tensor& row) {
                         return add(row, Tensor::full({w.config.d_model}, 0.25));
                       }});
  ForwardTrace edited = forward(w, tokens, opt);

  const std::size_t v = w.config.vocab_size;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    bool identical = true;
    for (std::size_t j = 0; j < v; ++j) {
      if (plain.logits.at(t, j) != edited.logits.at(t, j)) identical = false;
    }
    if (t < p) {
      CHECK(identical);
    } else if (t == p) {
      CHECK_FALSE(identical);
    }
  }
}

TEST_CASE("a hook can address every position at once") {
  ModelWeights w = init_model(tiny_config());
  std::vector<int> tokens = sample_tokens(w.config, 8, 15);

  ForwardOptions identity;
  identity.hooks.push_back(
      {HookPoint::block_output_all(1), [](const Tensor& row) { return row; }});
  CHECK(same_bits(forward(w, tokens).logits, forward(w, tokens, identity).logits));

  ForwardOptions shift;
  shift.hooks.push_back({HookPoint::block_output_all(0), [&](const Tensor& row) {
                           return add(row, Tensor::full({w.config.d_model}, 0.5));
                         }});
  ForwardTrace edited = forward(w, tokens, shift);
  ForwardTrace plain = forward(w, tokens);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    CHECK(plain.logits.at(t, 0) != edited.logits.at(t, 0));
  }
}

TEST_CASE("causality: permuting future tokens leaves earlier logits unchanged") {
  ModelWeights w = init_model(tiny_config());
  std::vector<int> tokens = sample_tokens(w.config, 12, 9);
  std::vector<int> permuted = tokens;
  std::swap(permuted[8], permuted[10]);
  REQUIRE(permuted != tokens);

  ForwardTrace a = forward(w, tokens);
  ForwardTrace b = forward(w, permuted);
  for (std::size_t t = 0; t < 8; ++t) {
    for (std::size_t j = 0; j < w.config.vocab_size; ++j) {
      REQUIRE(a.logits.at(t, j) == b.logits.at(t, j));
    }
  }
}

TEST_CASE("greedy generation") {
  ModelWeights w = init_model(tiny_config());
  std::vector<int> prompt = sample_tokens(w.config, 5, 21);

  ForwardTrace tr = forward(w, prompt);
  const int expected = static_cast<int>(argmax_row(tr.logits, prompt.size() - 1));

  std::vector<int> out = generate_greedy(w, prompt, 1);
  REQUIRE(out.size() == prompt.size() + 1);
  CHECK(out.back() == expected);

  std::vector<int> again = generate_greedy(w, prompt, 1);
  CHECK(out == again);

  std::vector<int> longer = generate_greedy(w, prompt, 4);
  CHECK(longer.size() <= prompt.size() + 4);

  CHECK_THROWS_AS(generate_greedy(w, std::vector<int>{}, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_greedy(w, prompt, 0), std::invalid_argument);
}

TEST_CASE("a steering vector fitted by gradient steps forces the next token") {
  ModelConfig cfg = tiny_config();
  cfg.seed = 13;
  ModelWeights w = init_model(cfg);
  std::vector<int> prompt = sample_tokens(cfg, 6, 33);
  const std::size_t last = prompt.size() - 1;
  const int target = 17;

  Tensor steer({cfg.d_model});
  for (int step = 0; step < 60; ++step) {
    Tape tape;
    Tensor ws = tape.watch(steer);
    ForwardOptions opt;
    opt.hooks.push_back({HookPoint::block_output_at(cfg.n_layers - 1, last),
                         [&](const Tensor& row) { return add(row, ws); }});
    ForwardTrace tr = forward(w, prompt, opt);
    std::vector<int> tgt{target};
    Tensor loss = cross_entropy(slice_rows(tr.logits, last, 1), tgt);
    tape.backward(loss);
    Tensor g = tape.grad(ws);
    for (std::size_t i = 0; i < steer.size(); ++i) steer.data()[i] -= 0.5 * g.data()[i];
  }

  ForwardOptions opt;
  opt.hooks.push_back({HookPoint::block_output_at(cfg.n_layers - 1, last),
                       [&](const Tensor& row) { return add(row, steer); }});
  std::vector<int> out = generate_greedy(w, prompt, 1, opt);
  CHECK(out.back() == target);
}

TEST_SUITE_END();
