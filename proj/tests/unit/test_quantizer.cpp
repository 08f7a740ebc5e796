#include "doctest.h"

#include <cmath>
#include <set>
#include <vector>

#include "gradcheck.hpp"
#include "qlab/quantizer.hpp"

using namespace qlab;
using testing::random_tensor;

namespace {

QuantConfig config(int bits, std::size_t group, QuantMode mode = QuantMode::zero_point) {
  QuantConfig c;
  c.bits = bits;
  c.group_size = group;
  c.mode = mode;
  return c;
}

Tensor<double> grid_tensor(std::size_t rows, std::size_t groups, double v) {
  return Tensor<double>::full({rows, groups}, v);
}

}  // namespace

TEST_CASE("scale and zero point") {
  const std::vector<double> g{-1.0, 0.3, 1.0};
  const auto sz = scale_and_zero<double>(g, 1.0, 1.0, 4, QuantMode::zero_point);
  CHECK(sz.scale == doctest::Approx(2.0 / 15));
  CHECK(sz.zero == 8.0);
  CHECK(scale_and_zero<double>(g, 0.5, 1.0, 4, QuantMode::zero_point).scale == doctest::Approx(0.1));
  CHECK(scale_and_zero<double>(g, 1.0, 1.0, 4, QuantMode::literal).zero == 0.0);

  const std::vector<double> zeros(5, 0.0);
  const auto z = scale_and_zero<double>(zeros, 1.0, 1.0, 4, QuantMode::zero_point);
  CHECK(z.scale == 1e-8);
  CHECK(z.zero == 0.0);

  CHECK_THROWS_AS(scale_and_zero<double>(std::vector<double>{}, 1.0, 1.0, 4, QuantMode::zero_point),
                  std::invalid_argument);
}

TEST_CASE("config validation and mode names") {
  CHECK_THROWS_AS(config(1, 32).validate(), std::invalid_argument);
  CHECK_THROWS_AS(config(9, 32).validate(), std::invalid_argument);
  CHECK_THROWS_AS(config(4, 0).validate(), std::invalid_argument);
  CHECK_NOTHROW(config(8, 1).validate());
  CHECK(parse_quant_mode(to_string(QuantMode::literal)) == QuantMode::literal);
  CHECK_THROWS_AS(parse_quant_mode("symmetric"), std::invalid_argument);
  CHECK(config(4, 32).groups(64) == 2);
  CHECK(config(4, 32).groups(65) == 3);
}

TEST_CASE("literal mode examples") {
  const auto c = config(4, 3, QuantMode::literal);
  Tensor<double> w({1, 3}, {0.0, 0.25, 1.0});
  const auto out = fake_quantize_on_grid(w, grid_tensor(1, 1, 0.1), grid_tensor(1, 1, 0.0), Tensor<double>({1, 3}), 3, c);
  CHECK(out.dequantized[0] == 0.0);
  CHECK(out.dequantized[1] == doctest::Approx(0.2));
  CHECK(out.dequantized[2] == doctest::Approx(1.0));

  Tensor<double> neg({1, 1}, {-0.3});
  const auto clipped =
      fake_quantize_on_grid(neg, grid_tensor(1, 1, 0.1), grid_tensor(1, 1, 0.0), Tensor<double>({1, 1}), 1, c);
  CHECK(clipped.dequantized[0] == 0.0);
}

TEST_CASE("zero-point example agrees with the oracle") {
  const auto c = config(4, 3);
  Tensor<double> w({1, 3}, {-1.0, 0.0, 1.0});
  const double s = 2.0 / 15;
  const auto out = fake_quantize_on_grid(w, grid_tensor(1, 1, s), grid_tensor(1, 1, 8.0), Tensor<double>({1, 3}), 3, c);
  CHECK(out.dequantized[0] == doctest::Approx(-1.0666667));
  CHECK(out.dequantized[1] == 0.0);
  CHECK(out.dequantized[2] == doctest::Approx(0.9333333));
  const auto ref = rtn_oracle<double>(w.values(), s, 8.0, 4);
  for (std::size_t i = 0; i < 3; ++i) CHECK(out.dequantized[i] == ref[i]);
}

TEST_CASE_TEMPLATE("init params reproduce the RTN oracle bit-exactly", T, float, double) {
  Rng rng(11);
  for (int bits : {2, 3, 4, 8}) {
    const auto c = config(bits, 16);
    for (int trial = 0; trial < 1000 / 4 / 4; ++trial) {
      // 4 rows x 4 groups per trial, with a short last group
      std::vector<T> v(4 * 60);
      const double spread = 0.01 + 3 * rng.uniform();
      const double shift = rng.normal() * 0.5;
      for (auto& x : v) x = static_cast<T>(shift + spread * rng.normal());
      Tensor<T> w({4, 60}, v);
      const auto params = init_quant_params(w, c);
      const auto fq = fake_quantize(w, params, c);
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t gi = 0; gi < 4; ++gi) {
          const std::size_t lo = gi * 16, hi = std::min<std::size_t>(lo + 16, 60);
          std::span<const T> group(v.data() + r * 60 + lo, hi - lo);
          const auto ref = rtn_oracle<T>(group, fq.scale[r * 4 + gi], fq.zero[r * 4 + gi], bits);
          for (std::size_t j = lo; j < hi; ++j) REQUIRE(fq.dequantized[r * 60 + j] == ref[j - lo]);
        }
    }
  }
}

TEST_CASE("oracle fixed points and endpoints") {
  const double s = 0.25, z = 3.0;
  std::vector<double> on_grid;
  for (int q = 0; q < 16; ++q) on_grid.push_back(s * (q - z));
  CHECK(rtn_oracle<double>(on_grid, s, z, 4) == on_grid);
  const std::vector<double> far{-100.0, 100.0};
  const auto ends = rtn_oracle<double>(far, s, z, 4);
  CHECK(ends[0] == s * (0 - z));
  CHECK(ends[1] == s * (15 - z));
  CHECK_THROWS_AS(rtn_oracle<double>(far, 0.0, z, 4), std::invalid_argument);
}

TEST_CASE("grid invariants") {
  const auto c = config(3, 8);
  const auto w = random_tensor({6, 20}, 3);
  auto params = init_quant_params(w, c);
  Rng rng(4);
  for (auto& v : params.rounding.mutable_values()) v = rng.uniform() - 0.5;
  for (auto& a : params.alpha.mutable_values()) a = 0.5 + 0.5 * rng.uniform();
  const auto fq = fake_quantize(w, params, c);
  const std::size_t groups = c.groups(20);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const double s = fq.scale[r * groups + gi], z = fq.zero[r * groups + gi];
      CHECK(s >= 1e-8);
      CHECK(z == std::round(z));
      std::set<double> distinct;
      for (std::size_t j = gi * 8; j < std::min<std::size_t>(gi * 8 + 8, 20); ++j) {
        const double q = fq.levels[r * 20 + j];
        CHECK(q == std::round(q));
        CHECK(q >= 0);
        CHECK(q <= 7);
        CHECK(fq.dequantized[r * 20 + j] == s * (q - z));
        distinct.insert(fq.dequantized[r * 20 + j]);
      }
      CHECK(distinct.size() <= 8);
      for (int q = 0; q < 7; ++q) CHECK(s * (q - z) < s * (q + 1 - z));
    }
}

TEST_CASE("quantizing a dequantized weight on the same grid is a no-op") {
  const auto c = config(4, 8);
  const auto w = random_tensor({5, 24}, 5);
  const auto params = init_quant_params(w, c);
  const auto first = fake_quantize(w, params, c);
  const auto second =
      fake_quantize_on_grid(first.dequantized, first.scale, first.zero, params.rounding, c.group_size, c);
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(second.dequantized[i] == first.dequantized[i]);
}

TEST_CASE("dequantize_levels rebuilds the fake-quantized weight") {
  const auto c = config(4, 8);
  const auto w = random_tensor({3, 20}, 6);
  const auto fq = fake_quantize(w, init_quant_params(w, c), c);
  std::vector<std::uint8_t> levels;
  for (double q : fq.levels.values()) levels.push_back(static_cast<std::uint8_t>(q));
  const auto back = dequantize_levels<double>(levels, fq.scale, fq.zero, 3, 20, 8);
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(back[i] == fq.dequantized[i]);
  levels.pop_back();
  CHECK_THROWS_AS(dequantize_levels<double>(levels, fq.scale, fq.zero, 3, 20, 8), ShapeError);
}

TEST_CASE("parameter shapes and clamping") {
  const auto c = config(4, 32);
  const auto w = random_tensor({4, 64}, 7);
  auto p = init_quant_params(w, c);
  CHECK(p.groups() == 2);
  CHECK(p.alpha.shape() == Shape{4, 2});
  CHECK(p.rounding.shape() == w.shape());
  const auto again = init_quant_params(w, c);
  for (std::size_t i = 0; i < p.alpha.size(); ++i) CHECK(again.alpha[i] == p.alpha[i]);

  p.alpha.mutable_values()[0] = 1.7;
  p.beta.mutable_values()[1] = -0.2;
  p.rounding.mutable_values()[2] = 0.9;
  p.rounding.mutable_values()[3] = -3.0;
  p.clamp();
  CHECK(p.alpha[0] == 1.0);
  CHECK(p.beta[1] == 0.0);
  CHECK(p.rounding[2] == 0.5);
  CHECK(p.rounding[3] == -0.5);

  auto bad = init_quant_params(w, c);
  CHECK_THROWS_AS(fake_quantize(random_tensor({4, 32}, 8), bad, c), ShapeError);
}

TEST_CASE("gradients reach alpha, beta and V") {
  const auto c = config(4, 8);
  const auto w = random_tensor({2, 16}, 9);
  const auto params = init_quant_params(w, c);
  Tape<double> tape;
  const auto bound = params.bind(tape);
  const auto out = quantize_dequantize(w, bound, c);
  const auto g = tape.backward(testing::project(out));
  double na = 0, nb = 0, nv = 0;
  const auto ga = g.of(bound.alpha), gb = g.of(bound.beta), gv = g.of(bound.rounding);
  for (double v : ga.values()) na += v * v;
  for (double v : gb.values()) nb += v * v;
  for (double v : gv.values()) nv += v * v;
  CHECK(na > 0);
  CHECK(nb > 0);
  CHECK(nv > 0);
}

TEST_CASE("the smooth surrogate matches finite differences") {
  auto c = config(4, 8);
  c.smooth_surrogate = true;
  const auto w = random_tensor({2, 16}, 10, 0.3);
  const auto p = init_quant_params(w, c);
  Rng rng(12);
  auto a = p.alpha.clone(), b = p.beta.clone(), v = p.rounding.clone();
  for (auto& x : a.mutable_values()) x = 0.7 + 0.2 * rng.uniform();
  for (auto& x : b.mutable_values()) x = 0.7 + 0.2 * rng.uniform();
  for (auto& x : v.mutable_values()) x = 0.4 * (rng.uniform() - 0.5);
  const auto err = testing::check_gradients(
      [&](const std::vector<Tensor<double>>& t) {
        QuantParams<double> q{t[0], t[1], t[2], c.group_size};
        return testing::project(quantize_dequantize(w, q, c));
      },
      {a, b, v});
  CHECK(err.worst() < 1e-5);
}

TEST_CASE("nibble packing") {
  const std::vector<std::uint8_t> q{0, 15, 8, 7};
  CHECK(pack_quantized(q) == std::vector<std::uint8_t>{0xF0, 0x78});
  const std::vector<std::uint8_t> odd{1, 2, 3};
  const auto packed = pack_quantized(odd);
  REQUIRE(packed.size() == 2);
  CHECK(packed[1] == 0x03);
  CHECK(unpack_quantized(packed, 3) == odd);

  Rng rng(13);
  std::vector<std::uint8_t> many(101);
  for (auto& x : many) x = static_cast<std::uint8_t>(rng.below(16));
  CHECK(unpack_quantized(pack_quantized(many), many.size()) == many);

  CHECK_THROWS_AS(pack_quantized(std::vector<std::uint8_t>{16}), std::out_of_range);
  CHECK_THROWS_AS(pack_quantized(q, 3), std::invalid_argument);
  CHECK_THROWS_AS(unpack_quantized(packed, 5), std::invalid_argument);
}
