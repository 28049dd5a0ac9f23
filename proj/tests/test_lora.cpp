#include <vector>

#include "doctest.h"
#include "heft/lora.hpp"
#include "test_util.hpp"

using namespace heft;
using namespace heft_test;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.d_ff = 24;
  cfg.vocab_size = 40;
  cfg.max_seq = 16;
  cfg.seed = 19;
  return cfg;
}

LoraLayer hand_layer() {
  LoraLayer layer;
  layer.target_name = "w";
  layer.A = Tensor({1, 2}, {1, 1});
  layer.B = Tensor({2, 1}, {1, 0});
  return layer;
}

}  // namespace

TEST_SUITE_BEGIN("lora");

TEST_CASE("attach_lora is an exact functional no-op") {
  ModelWeights base = init_model(small_config());
  LoraConfig cfg;
  cfg.r = 4;
  LoraModel model = attach_lora(base, cfg, 5);

  Rng rng(77);
  for (int trial = 0; trial < 4; ++trial) {
    std::vector<int> tokens;
    for (int i = 0; i < 10; ++i) tokens.push_back(static_cast<int>(rng.below(40)));
    ForwardTrace plain = forward(base, tokens);
    ForwardTrace adapted = lora_forward(model, tokens);
    CHECK(same_bits(plain.logits, adapted.logits));
  }
}

TEST_CASE("attach_lora seeding and errors") {
  ModelWeights base = init_model(small_config());
  LoraConfig cfg;
  cfg.r = 4;
  LoraModel a = attach_lora(base, cfg, 5);
  LoraModel b = attach_lora(base, cfg, 5);
  REQUIRE(a.layers.size() == b.layers.size());
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    CHECK(same_bits(a.layers[i].A, b.layers[i].A));
    bool all_zero = true;
    for (std::size_t k = 0; k < a.layers[i].B.size(); ++k) {
      all_zero = all_zero && a.layers[i].B.data()[k] == 0.0;
    }
    CHECK(all_zero);
  }

  LoraConfig missing;
  missing.targets = {"*.does_not_exist"};
  CHECK_THROWS_WITH_AS(attach_lora(base, missing, 1), doctest::Contains("matched nothing"),
                       std::invalid_argument);

  LoraConfig too_big;
  too_big.r = 64;  // exceeds the 16x16 attention weights
  CHECK_THROWS_WITH_AS(attach_lora(base, too_big, 1), doctest::Contains("rank"),
                       std::invalid_argument);

  LoraConfig not_linear;
  not_linear.targets = {"*.attn_norm.gain"};
  CHECK_THROWS_AS(attach_lora(base, not_linear, 1), std::invalid_argument);
}

TEST_CASE("trainable parameter count follows r*(d_in+d_out)") {
  ModelConfig cfg = small_config();
  cfg.d_model = 64;
  cfg.d_ff = 64;
  cfg.n_layers = 1;
  ModelWeights base = init_model(cfg);

  LoraConfig one;
  one.r = 8;
  one.targets = {"layers.0.attn.wq"};
  LoraModel m1 = attach_lora(base, one, 1);
  CHECK(lora_trainable_parameters(m1).total == 8 * (64 + 64));

  LoraConfig four;
  four.r = 8;
  four.targets = {"layers.0.attn.wq", "layers.0.attn.wk", "layers.0.attn.wv", "layers.0.attn.wo"};
  LoraModel m4 = attach_lora(base, four, 1);
  auto params = lora_trainable_parameters(m4);
  CHECK(params.total == 4096);
  CHECK(params.tensors.size() == 8);
  for (const auto& [name, tensor] : params.tensors) {
    CHECK(name.rfind("lora.", 0) == 0);
  }

  LoraConfig none;
  none.targets = {};
  LoraModel m0 = attach_lora(base, none, 1);
  CHECK(lora_trainable_parameters(m0).total == 0);
}

TEST_CASE("lora_forward_delta hand evaluation") {
  LoraLayer layer = hand_layer();
  Tensor x({1, 2}, {1, 2});

  Tensor delta = lora_forward_delta(layer, x, 2.0, 1, 0.0, false, nullptr);
  CHECK(delta.at(0, 0) == doctest::Approx(6.0));
  CHECK(delta.at(0, 1) == doctest::Approx(0.0));

  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor full = add(matmul(x, eye), delta);
  CHECK(full.at(0, 0) == doctest::Approx(7.0));
  CHECK(full.at(0, 1) == doctest::Approx(2.0));

  // B = 0 contributes exact zeros
  LoraLayer zero = layer;
  zero.B = Tensor({2, 1});
  Tensor nothing = lora_forward_delta(zero, x, 2.0, 1, 0.0, false, nullptr);
  CHECK(nothing.at(0, 0) == 0.0);
  CHECK(nothing.at(0, 1) == 0.0);

  // alpha == r reduces the scale factor to exactly 1
  Tensor unscaled = matmul(matmul(x, transpose(layer.A)), transpose(layer.B));
  Tensor unit = lora_forward_delta(layer, x, 3.0, 3, 0.0, false, nullptr);
  CHECK(same_bits(unscaled, unit));
}

TEST_CASE("doubling alpha exactly doubles the delta") {
  Rng rng(13);
  LoraLayer layer;
  layer.target_name = "w";
  layer.A = random_tensor({3, 8}, rng);
  layer.B = random_tensor({6, 3}, rng);
  Tensor x = random_tensor({4, 8}, rng);

  Tensor once = lora_forward_delta(layer, x, 16.0, 3, 0.0, false, nullptr);
  Tensor twice = lora_forward_delta(layer, x, 32.0, 3, 0.0, false, nullptr);
  Tensor doubled = scale(once, 2.0);
  CHECK(same_bits(twice, doubled));
}

TEST_CASE("dropout applies only in training mode and is seed-deterministic") {
  Rng rng(101);
  LoraLayer layer;
  layer.target_name = "w";
  layer.A = random_tensor({2, 6}, rng);
  layer.B = random_tensor({6, 2}, rng);
  Tensor x = random_tensor({8, 6}, rng);

  Tensor eval1 = lora_forward_delta(layer, x, 8.0, 2, 0.9, false, nullptr);
  Tensor eval2 = lora_forward_delta(layer, x, 8.0, 2, 0.0, false, nullptr);
  CHECK(same_bits(eval1, eval2));

  Rng d1(7), d2(7), d3(8);
  Tensor t1 = lora_forward_delta(layer, x, 8.0, 2, 0.5, true, &d1);
  Tensor t2 = lora_forward_delta(layer, x, 8.0, 2, 0.5, true, &d2);
  Tensor t3 = lora_forward_delta(layer, x, 8.0, 2, 0.5, true, &d3);
  CHECK(same_bits(t1, t2));
  CHECK_FALSE(same_bits(t1, t3));

  CHECK_THROWS_AS(lora_forward_delta(layer, x, 8.0, 2, 0.5, true, nullptr),
                  std::invalid_argument);
}

TEST_CASE("merge_and_unload") {
  ModelWeights base = init_model(small_config());

  LoraConfig cfg;
  cfg.r = 4;
  LoraModel pristine = attach_lora(base, cfg, 3);
  ModelWeights merged_zero = merge_and_unload(pristine);
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(same_bits(base.entries()[i].second, merged_zero.entries()[i].second));
  }

  // hand-checked 2x2 case: W0 = I, row-convention delta is 2 * A^T B^T
  ModelWeights tiny;
  tiny.config = small_config();
  tiny.add("w", Tensor({2, 2}, {1, 0, 0, 1}));
  LoraModel hand;
  hand.base = tiny.clone();
  hand.config.r = 1;
  hand.config.alpha = 2.0;
  hand.config.targets = {"w"};
  hand.layers.push_back(hand_layer());
  hand.rebuild_index();
  ModelWeights merged = merge_and_unload(hand);
  const Tensor& w = merged.get("w");
  CHECK(w.at(0, 0) == doctest::Approx(3.0));
  CHECK(w.at(0, 1) == doctest::Approx(0.0));
  CHECK(w.at(1, 0) == doctest::Approx(2.0));
  CHECK(w.at(1, 1) == doctest::Approx(1.0));
  Tensor x({1, 2}, {1, 2});
  Tensor y = matmul(x, w);
  CHECK(y.at(0, 0) == doctest::Approx(7.0));
  CHECK(y.at(0, 1) == doctest::Approx(2.0));
}

TEST_CASE("merged and unmerged paths agree after adapter updates") {
  ModelWeights base = init_model(small_config());
  LoraConfig cfg;
  cfg.r = 4;
  LoraModel model = attach_lora(base, cfg, 9);

  // stand-in for training: move every adapter tensor off its init point
  Rng rng(23);
  for (auto& layer : model.layers) {
    for (std::size_t i = 0; i < layer.A.size(); ++i) layer.A.data()[i] += 0.05 * rng.gauss();
    for (std::size_t i = 0; i < layer.B.size(); ++i) layer.B.data()[i] += 0.05 * rng.gauss();
  }
  ModelWeights merged = merge_and_unload(model);

  double worst = 0.0;
  for (int trial = 0; trial < 16; ++trial) {
    std::vector<int> tokens;
    for (int i = 0; i < 12; ++i) tokens.push_back(static_cast<int>(rng.below(40)));
    ForwardTrace unmerged = lora_forward(model, tokens);
    ForwardTrace folded = forward(merged, tokens);
    for (std::size_t i = 0; i < unmerged.logits.size(); ++i) {
      worst = std::max(worst, std::fabs(unmerged.logits.data()[i] - folded.logits.data()[i]));
    }
  }
  CHECK(worst <= 1e-9);

  // merging never leaves adapter structures behind
  for (const auto& [name, tensor] : merged.entries()) {
    CHECK(name.rfind("lora.", 0) == std::string::npos);
  }
}

TEST_CASE("base weights stay bit-identical under adapter gradient steps") {
  ModelWeights base = init_model(small_config());
  LoraConfig cfg;
  cfg.r = 2;
  cfg.dropout_p = 0.0;
  LoraModel model = attach_lora(base, cfg, 9);

  std::vector<std::uint64_t> before;
  for (const auto& [name, tensor] : model.base.entries()) before.push_back(bits_hash(tensor));

  std::vector<int> tokens{1, 2, 3, 4, 5, 6};
  for (int step = 0; step < 3; ++step) {
    Tape tape;
    LoraLinear linear;
    linear.base = &model.base;
    linear.alpha = cfg.alpha;
    linear.r = cfg.r;
    for (const auto& layer : model.layers) {
      LoraLayer taped = layer;
      taped.A = tape.watch(layer.A);
      taped.B = tape.watch(layer.B);
      linear.layers.push_back(taped);
    }
    ForwardOptions opt;
    opt.linear = linear;
    ForwardTrace tr = forward(model.base, tokens, opt);
    std::vector<int> targets{2, 3, 4, 5, 6, -1};
    Tensor loss = cross_entropy(tr.logits, targets);
    tape.backward(loss);
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      Tensor ga = tape.grad(linear.layers[i].A);
      Tensor gb = tape.grad(linear.layers[i].B);
      for (std::size_t k = 0; k < ga.size(); ++k) model.layers[i].A.data()[k] -= 0.1 * ga.data()[k];
      for (std::size_t k = 0; k < gb.size(); ++k) model.layers[i].B.data()[k] -= 0.1 * gb.data()[k];
    }
  }

  std::size_t idx = 0;
  for (const auto& [name, tensor] : model.base.entries()) {
    CHECK(bits_hash(tensor) == before[idx++]);
  }
  // and the adapters actually moved
  bool moved = false;
  for (const auto& layer : model.layers) {
    for (std::size_t k = 0; k < layer.B.size(); ++k) moved = moved || layer.B.data()[k] != 0.0;
  }
  CHECK(moved);
}

TEST_SUITE_END();
