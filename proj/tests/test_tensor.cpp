#include <cmath>
#include <vector>

#include "doctest.h"
#include "heft/tensor.hpp"
#include "test_util.hpp"

using namespace heft;
using namespace heft_test;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul basics") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  Tensor prod = matmul(eye, m);
  CHECK(same_bits(prod, m));

  Tensor a({1, 2}, {1, 1});
  Tensor b({2, 1}, {1, 0});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c.item() == doctest::Approx(1.0));

  CHECK_THROWS_WITH_AS(matmul(Tensor({2, 3}), Tensor({4, 5})),
                       doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("matmul gradient matches hand result and finite differences") {
  Tensor a({1, 2}, {1, 2});
  Tensor b({2, 1}, {3, 4});
  Tape tape;
  Tensor wa = tape.watch(a);
  Tensor loss = sum(matmul(wa, b));
  tape.backward(loss);
  Tensor g = tape.grad(wa);
  CHECK(g.at(0, 0) == doctest::Approx(3.0));
  CHECK(g.at(0, 1) == doctest::Approx(4.0));

  Rng rng(11);
  std::vector<Tensor> inputs{random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)};
  double err = grad_vs_fd([](const std::vector<Tensor>& xs) { return matmul(xs[0], xs[1]); },
                          inputs, 101);
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise ops") {
  Tensor v({2}, {2, 4});
  Tensor s = scale(v, 0.5);
  CHECK(s.at(0) == 1.0);
  CHECK(s.at(1) == 2.0);

  Tensor sum2 = add(Tensor({2}, {1, 2}), Tensor({2}, {0, 0}));
  CHECK(sum2.at(0) == 1.0);
  CHECK(sum2.at(1) == 2.0);

  Tensor prod = mul_elem(Tensor({2}, {2, 3}), Tensor({2}, {4, 5}));
  CHECK(prod.at(0) == 8.0);
  CHECK(prod.at(1) == 15.0);

  CHECK_THROWS_AS(add(Tensor({2}), Tensor({3})), std::invalid_argument);
  CHECK_THROWS_AS(mul_elem(Tensor({2, 2}), Tensor({4})), std::invalid_argument);
}

TEST_CASE("bias broadcast add over rows") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor bias({3}, {10, 20, 30});
  Tensor y = add(x, bias);
  CHECK(y.at(0, 0) == 11.0);
  CHECK(y.at(1, 2) == 36.0);
  // only trailing-vector-over-rows broadcasting is allowed
  CHECK_THROWS_AS(add(Tensor({3}), Tensor({2, 3})), std::invalid_argument);

  Rng rng(5);
  std::vector<Tensor> inputs{random_tensor({4, 3}, rng), random_tensor({3}, rng)};
  double err = grad_vs_fd([](const std::vector<Tensor>& xs) { return add(xs[0], xs[1]); },
                          inputs, 55);
  CHECK(err < 1e-6);
}

TEST_CASE("rms_norm hand values") {
  Tensor x({2}, {3, 4});
  Tensor gain({2}, {1, 1});
  Tensor y = rms_norm(x, gain, 0.0);
  CHECK(y.at(0) == doctest::Approx(3.0 / std::sqrt(12.5)));
  CHECK(y.at(1) == doctest::Approx(4.0 / std::sqrt(12.5)));

  Tensor c = rms_norm(Tensor({3}, {-2, -2, -2}), Tensor({3}, {1, 1, 1}), 0.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(c.at(i) == doctest::Approx(-1.0));
}

TEST_CASE("rms_norm gradient vs finite differences") {
  Rng rng(17);
  std::vector<Tensor> inputs{random_tensor({3, 5}, rng), random_tensor({5}, rng, 0.5, 1.5)};
  double err = grad_vs_fd(
      [](const std::vector<Tensor>& xs) { return rms_norm(xs[0], xs[1], 1e-5); }, inputs, 3);
  CHECK(err < 1e-6);
}

TEST_CASE("softmax rows") {
  Tensor p = softmax_rows(Tensor({2}, {0, 0}));
  CHECK(p.at(0) == doctest::Approx(0.5));
  CHECK(p.at(1) == doctest::Approx(0.5));

  Rng rng(23);
  Tensor x = random_tensor({6, 9}, rng, -30.0, 30.0);
  Tensor sm = softmax_rows(x);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) s += sm.at(r, j);
    CHECK(std::fabs(s - 1.0) <= 1e-12);
  }

  std::vector<Tensor> inputs{random_tensor({4, 7}, rng)};
  double err =
      grad_vs_fd([](const std::vector<Tensor>& xs) { return softmax_rows(xs[0]); }, inputs, 7);
  CHECK(err < 1e-6);
}

TEST_CASE("silu") {
  Tensor z = silu(Tensor({1}, {0.0}));
  CHECK(z.at(0) == 0.0);

  Rng rng(29);
  std::vector<Tensor> inputs{random_tensor({3, 3}, rng, -4.0, 4.0)};
  double err = grad_vs_fd([](const std::vector<Tensor>& xs) { return silu(xs[0]); }, inputs, 9);
  CHECK(err < 1e-6);
}

TEST_CASE("embedding lookup") {
  Tensor table({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  std::vector<int> ids{2, 0, 2};
  Tensor rows = embedding_lookup(table, ids);
  CHECK(rows.at(0, 0) == 4.0);
  CHECK(rows.at(1, 1) == 1.0);
  CHECK(rows.at(2, 1) == 5.0);

  std::vector<int> bad{4};
  CHECK_THROWS_AS(embedding_lookup(table, bad), std::out_of_range);

  // repeated ids must accumulate gradient into the same row
  Tape tape;
  Tensor wt = tape.watch(table);
  tape.backward(sum(embedding_lookup(wt, ids)));
  Tensor g = tape.grad(wt);
  CHECK(g.at(2, 0) == 2.0);
  CHECK(g.at(0, 0) == 1.0);
  CHECK(g.at(1, 0) == 0.0);
}

TEST_CASE("cross entropy") {
  // near-perfect logit row: gap of 50 on a 2-token vocabulary
  Tensor logits({1, 2}, {50.0, 0.0});
  std::vector<int> target{0};
  Tensor loss = cross_entropy(logits, target);
  CHECK(loss.item() < 1e-20);
  CHECK(loss.item() >= 0.0);

  // mean over supervised rows only
  Tensor two({2, 3}, {1, 2, 3, 1, 2, 3});
  std::vector<int> masked{-1, 1};
  Tensor l1 = cross_entropy(two, masked);
  std::vector<int> only{1};
  Tensor l2 = cross_entropy(slice_rows(two, 1, 1), only);
  CHECK(l1.item() == doctest::Approx(l2.item()));

  std::vector<int> oob{3, 0};
  CHECK_THROWS_AS(cross_entropy(two, oob), std::out_of_range);

  Rng rng(31);
  std::vector<Tensor> inputs{random_tensor({4, 5}, rng)};
  std::vector<int> ts{1, -1, 4, 0};
  double err = grad_vs_fd(
      [&](const std::vector<Tensor>& xs) { return cross_entropy(xs[0], ts); }, inputs, 13);
  CHECK(err < 1e-6);
}

TEST_CASE("cross entropy is non-negative on random logits") {
  Rng rng(37);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_tensor({5, 8}, rng, -3.0, 3.0);
    std::vector<int> ts;
    for (int r = 0; r < 5; ++r) ts.push_back(static_cast<int>(rng.below(8)));
    CHECK(cross_entropy(logits, ts).item() >= 0.0);
  }
}

TEST_CASE("backward basics") {
  Tensor x({3}, {1, 2, 3});
  Tape tape;
  Tensor wx = tape.watch(x);
  tape.backward(sum(wx));
  Tensor g = tape.grad(wx);
  for (std::size_t i = 0; i < 3; ++i) CHECK(g.at(i) == 1.0);

  Tensor y({2}, {1, 2});
  Tape tape2;
  Tensor wy = tape2.watch(y);
  tape2.backward(sum(mul_elem(wy, wy)));
  Tensor g2 = tape2.grad(wy);
  CHECK(g2.at(0) == doctest::Approx(2.0));
  CHECK(g2.at(1) == doctest::Approx(4.0));

  // untouched parameters report zero gradients
  Tape tape3;
  Tensor unused = tape3.watch(Tensor({2}, {5, 6}));
  Tensor used = tape3.watch(Tensor({2}, {1, 1}));
  tape3.backward(sum(used));
  CHECK_FALSE(tape3.has_grad(unused));
  Tensor gz = tape3.grad(unused);
  CHECK(gz.at(0) == 0.0);
  CHECK(gz.at(1) == 0.0);

  // non-scalar loss is rejected
  Tape tape4;
  Tensor wv = tape4.watch(Tensor({2}, {1, 2}));
  Tensor doubled = scale(wv, 2.0);
  CHECK_THROWS_AS(tape4.backward(doubled), std::invalid_argument);
}

TEST_CASE("a tensor belongs to exactly one tape") {
  Tape t1, t2;
  Tensor a = t1.watch(Tensor({2}, {1, 2}));
  Tensor b = t2.watch(Tensor({2}, {3, 4}));
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(t2.watch(a), std::invalid_argument);
  CHECK_THROWS_AS(t2.grad(a), std::invalid_argument);
}

TEST_CASE("structural ops gradients") {
  Rng rng(41);
  {
    std::vector<Tensor> inputs{random_tensor({5, 4}, rng)};
    CHECK(grad_vs_fd([](const std::vector<Tensor>& xs) { return slice_rows(xs[0], 1, 3); },
                     inputs, 1) < 1e-6);
    CHECK(grad_vs_fd([](const std::vector<Tensor>& xs) { return slice_cols(xs[0], 1, 2); },
                     inputs, 2) < 1e-6);
    CHECK(grad_vs_fd([](const std::vector<Tensor>& xs) { return transpose(xs[0]); }, inputs, 3) <
          1e-6);
    CHECK(grad_vs_fd([](const std::vector<Tensor>& xs) { return reshape(xs[0], {4, 5}); }, inputs,
                     4) < 1e-6);
  }
  {
    std::vector<Tensor> inputs{random_tensor({5, 4}, rng), random_tensor({2, 4}, rng)};
    CHECK(grad_vs_fd([](const std::vector<Tensor>& xs) { return replace_rows(xs[0], 2, xs[1]); },
                     inputs, 5) < 1e-6);
  }
  {
    std::vector<Tensor> inputs{random_tensor({3, 2}, rng), random_tensor({3, 3}, rng),
                               random_tensor({3, 1}, rng)};
    CHECK(grad_vs_fd(
              [](const std::vector<Tensor>& xs) {
                return concat_cols(std::span<const Tensor>(xs.data(), xs.size()));
              },
              inputs, 6) < 1e-6);
  }
  {
    std::vector<Tensor> inputs{random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)};
    CHECK(grad_vs_fd([](const std::vector<Tensor>& xs) { return sub(xs[0], xs[1]); }, inputs, 7) <
          1e-6);
  }
}

TEST_CASE("causal attention") {
  Rng rng(53);
  // single head, two positions: row 0 must be v[0] exactly
  Tensor q = random_tensor({2, 3}, rng);
  Tensor k = random_tensor({2, 3}, rng);
  Tensor v = random_tensor({2, 3}, rng);
  Tensor out = causal_attention(q, k, v, 1);
  for (std::size_t j = 0; j < 3; ++j) CHECK(out.at(0, j) == v.at(0, j));

  // row 1 matches a hand-computed two-way softmax mixture
  const double inv = 1.0 / std::sqrt(3.0);
  double s0 = 0.0, s1 = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    s0 += q.at(1, j) * k.at(0, j);
    s1 += q.at(1, j) * k.at(1, j);
  }
  s0 *= inv;
  s1 *= inv;
  const double m = std::max(s0, s1);
  const double w0 = std::exp(s0 - m), w1 = std::exp(s1 - m);
  for (std::size_t j = 0; j < 3; ++j) {
    const double want = (w0 * v.at(0, j) + w1 * v.at(1, j)) / (w0 + w1);
    CHECK(out.at(1, j) == doctest::Approx(want).epsilon(1e-12));
  }

  // never reads future positions: changing them cannot matter
  Tensor k2 = k.clone();
  Tensor v2 = v.clone();
  k2.set(1, 0, 99.0);
  v2.set(1, 2, -99.0);
  Tensor out2 = causal_attention(q, k2, v2, 1);
  for (std::size_t j = 0; j < 3; ++j) CHECK(out2.at(0, j) == out.at(0, j));

  CHECK_THROWS_AS(causal_attention(q, k, Tensor({3, 3}), 1), std::invalid_argument);
  CHECK_THROWS_AS(causal_attention(q, k, v, 2), std::invalid_argument);
}

TEST_CASE("causal attention gradients match finite differences") {
  Rng rng(59);
  std::vector<Tensor> inputs{random_tensor({5, 6}, rng), random_tensor({5, 6}, rng),
                             random_tensor({5, 6}, rng)};
  double err = grad_vs_fd(
      [](const std::vector<Tensor>& xs) { return causal_attention(xs[0], xs[1], xs[2], 2); },
      inputs, 61);
  CHECK(err < 1e-6);

  // constants among the operands still leave the watched one correct
  std::vector<Tensor> only_q{random_tensor({4, 4}, rng)};
  Tensor fixed_k = random_tensor({4, 4}, rng);
  Tensor fixed_v = random_tensor({4, 4}, rng);
  double err_q = grad_vs_fd(
      [&](const std::vector<Tensor>& xs) {
        return causal_attention(xs[0], fixed_k, fixed_v, 2);
      },
      only_q, 67);
  CHECK(err_q < 1e-6);
}

TEST_CASE("replace_rows keeps other rows intact and cuts their gradient") {
  Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor rep({1, 2}, {9, 9});
  Tape tape;
  Tensor wx = tape.watch(x);
  Tensor wr = tape.watch(rep);
  Tensor out = replace_rows(wx, 1, wr);
  CHECK(out.at(0, 0) == 1.0);
  CHECK(out.at(1, 0) == 9.0);
  CHECK(out.at(2, 1) == 6.0);
  tape.backward(sum(slice_rows(out, 1, 1)));
  Tensor gx = tape.grad(wx);
  for (std::size_t i = 0; i < gx.size(); ++i) CHECK(gx.data()[i] == 0.0);
  Tensor gr = tape.grad(wr);
  CHECK(gr.at(0, 0) == 1.0);
}

TEST_CASE("fd_gradient oracle") {
  Tensor x({3}, {0.3, -0.4, 0.9});
  Tensor ones = fd_gradient([](const Tensor& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += t.data()[i];
    return s;
  }, x, 1e-5);
  for (std::size_t i = 0; i < 3; ++i) CHECK(ones.at(i) == doctest::Approx(1.0).epsilon(1e-9));

  Tensor three({1}, {3.0});
  Tensor six = fd_gradient([](const Tensor& t) { return t.at(0) * t.at(0); }, three, 1e-5);
  CHECK(std::fabs(six.at(0) - 6.0) < 1e-9);

  CHECK_THROWS_AS(fd_gradient([](const Tensor&) { return 0.0; }, x, 0.0), std::invalid_argument);

  // agreement with backward on a random 5-parameter function
  Rng rng(43);
  Tensor p = random_tensor({5}, rng);
  auto f = [](const std::vector<Tensor>& xs) {
    Tensor a = slice_rows(reshape(xs[0], {5, 1}), 0, 2);
    Tensor b = slice_rows(reshape(xs[0], {5, 1}), 2, 3);
    return add(sum(silu(a)), sum(mul_elem(b, b)));
  };
  CHECK(grad_vs_fd(f, {p}, 99) < 1e-6);
}

TEST_CASE("tape replay is deterministic") {
  Rng rng(47);
  Tensor a = random_tensor({6, 6}, rng);
  Tensor b = random_tensor({6, 6}, rng);
  Tensor gain = random_tensor({6}, rng, 0.5, 1.5);

  auto run = [&]() {
    Tape tape;
    Tensor wa = tape.watch(a);
    Tensor wb = tape.watch(b);
    Tensor out = softmax_rows(rms_norm(matmul(wa, wb), gain, 1e-5));
    Tensor loss = sum(mul_elem(out, out));
    tape.backward(loss);
    return std::pair<std::uint64_t, std::uint64_t>(bits_hash(out),
                                                   bits_hash(tape.grad(wa)));
  };
  auto first = run();
  auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}

TEST_SUITE_END();
