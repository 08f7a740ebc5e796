#include "doctest.h"

#include "qlab/ops.hpp"
#include "qlab/tensor.hpp"

using namespace qlab;

TEST_CASE("tensor construction checks shape against data") {
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK(t[4] == 5.0f);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), ShapeError);
  CHECK_THROWS(t.item());
  CHECK(Tensor<double>::scalar(2.5).item() == 2.5);
}

TEST_CASE("clone owns storage, view and detach share it") {
  Tensor<float> t({4}, {1, 2, 3, 4});
  auto c = t.clone();
  auto v = t.view({2, 2});
  c.mutable_values()[0] = 9;
  CHECK(t[0] == 1.0f);
  CHECK(v.same_storage(t));
  CHECK(t.detach().same_storage(t));
  CHECK_THROWS_AS(t.view({3}), ShapeError);
}

TEST_CASE("backward of x^2 at 3 is 6") {
  Tape<double> tape;
  auto x = tape.watch(Tensor<double>::scalar(3.0));
  auto grads = tape.backward(ops::mul(x, x));
  CHECK(grads.of(x).item() == 6.0);
}

TEST_CASE("unreachable leaves get zero gradients of their own shape") {
  Tape<double> tape;
  auto x = tape.watch(Tensor<double>({3}, {1, 2, 3}));
  auto unused = tape.watch(Tensor<double>({2, 2}));
  auto grads = tape.backward(ops::sum(x));
  auto g = grads.of(unused);
  CHECK(g.shape() == Shape{2, 2});
  for (double v : g.values()) CHECK(v == 0.0);
}

TEST_CASE("backward rejects non-scalar, detached and foreign losses") {
  Tape<double> tape, other;
  auto x = tape.watch(Tensor<double>({3}, {1, 2, 3}));
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
  CHECK_THROWS(tape.backward(Tensor<double>::scalar(1.0)));
  auto y = other.watch(Tensor<double>::scalar(1.0));
  CHECK_THROWS(tape.backward(ops::mul_scalar(y, 2.0)));
}

TEST_CASE("mixing tapes in one op is an error") {
  Tape<double> a, b;
  auto x = a.watch(Tensor<double>::scalar(1.0));
  auto y = b.watch(Tensor<double>::scalar(2.0));
  CHECK_THROWS(ops::add(x, y));
}

TEST_CASE("a tensor used twice accumulates both contributions") {
  Tape<double> tape;
  auto x = tape.watch(Tensor<double>({2}, {1.5, -2.0}));
  auto loss = ops::sum(ops::add(ops::mul(x, x), ops::mul_scalar(x, 3.0)));
  auto g = tape.backward(loss).of(x);
  CHECK(g[0] == doctest::Approx(2 * 1.5 + 3));
  CHECK(g[1] == doctest::Approx(2 * -2.0 + 3));
}

TEST_CASE("replaying the same graph gives bit-identical values and gradients") {
  auto run = [] {
    Tape<float> tape;
    auto a = tape.watch(Tensor<float>({2, 3}, {0.1f, -0.4f, 0.7f, 1.2f, -0.9f, 0.3f}));
    auto b = tape.watch(Tensor<float>({3, 2}, {0.5f, 0.2f, -0.3f, 0.8f, 0.6f, -0.1f}));
    auto loss = ops::sum(ops::gelu(ops::matmul(a, b)));
    auto g = tape.backward(loss);
    std::vector<float> out{loss.item()};
    const auto ga = g.of(a), gb = g.of(b);
    for (float v : ga.values()) out.push_back(v);
    for (float v : gb.values()) out.push_back(v);
    return out;
  };
  CHECK(run() == run());
}
