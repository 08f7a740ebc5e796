#include "doctest.h"

#include <cmath>
#include <cstring>
#include <set>

#include "gradcheck.hpp"
#include "qlab/finetune.hpp"
#include "qlab/ops.hpp"

using namespace qlab;

namespace {

ModelConfig toy_config(std::size_t blocks, std::uint64_t seed = 3) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_blocks = blocks;
  c.d_ff = 32;
  c.max_seq_len = 8;
  c.seed = seed;
  return c;
}

QuantConfig quant(int bits = 3, std::size_t group = 8) {
  QuantConfig q;
  q.bits = bits;
  q.group_size = group;
  return q;
}

OptimConfig optim(std::size_t steps, std::uint64_t seed = 1) {
  OptimConfig o;
  o.lr0 = 5e-3;
  o.steps = steps;
  o.batch_size = 4;
  o.calib_samples = 12;
  o.seq_len = 8;
  o.seed = seed;
  return o;
}

template <typename T>
std::map<std::string, QuantParams<T>> init_all(const Model<T>& m, const QuantConfig& q) {
  std::map<std::string, QuantParams<T>> out;
  for (const auto& name : m.quantizable_layers()) out.emplace(name, init_quant_params(m.layer(name).weight, q));
  return out;
}

std::vector<Sample> calib(std::size_t count, std::uint64_t seed = 4) {
  static const auto stream = tokenize(synthesize_corpus(4000, 9));
  return sample_calibration(stream, count, 8, seed);
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
bool params_equal(const QuantParams<T>& a, const QuantParams<T>& b) {
  return bit_equal(a.alpha, b.alpha) && bit_equal(a.beta, b.beta) && bit_equal(a.rounding, b.rounding);
}

template <typename T>
double full_store_loss(const Window& w, const ActivationStore<T>& store, const Model<T>& m,
                       const std::map<std::string, QuantParams<T>>& p, const QuantConfig& q) {
  std::vector<std::size_t> all(store.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return static_cast<double>(window_loss(w, store.gather(all), m, p, q).item());
}

}  // namespace

TEST_CASE("schedules") {
  const auto mb = make_schedule(Strategy::mb, 3, 8);
  REQUIRE(mb.windows.size() == 3);
  CHECK(mb.windows[0] == Window{Strategy::mb, 1, 3, 3});
  CHECK(mb.windows[1] == Window{Strategy::mb, 4, 6, 6});
  CHECK(mb.windows[2] == Window{Strategy::mb, 7, 8, 8});

  const auto la = make_schedule(Strategy::la, 3, 8);
  REQUIRE(la.windows.size() == 8);
  CHECK(la.windows[0].target == 3);
  CHECK(la.windows[0].frozen() == std::vector<std::size_t>{2, 3});
  CHECK(la.windows[6].first_tuned == 7);
  CHECK(la.windows[6].target == 8);
  CHECK(la.windows[7].target == 8);
  CHECK(la.windows[7].frozen().empty());

  const auto sb = make_schedule(Strategy::sb, 1, 4);
  REQUIRE(sb.windows.size() == 4);
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(sb.windows[k].first_tuned == k + 1);
    CHECK(sb.windows[k].target == k + 1);
    CHECK(sb.windows[k].frozen().empty());
  }

  CHECK_THROWS_AS(make_schedule(Strategy::la, 0, 4), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(Strategy::mb, 2, 0), std::invalid_argument);
  CHECK(parse_strategy("LA") == Strategy::la);
  CHECK_THROWS_AS(parse_strategy("xx"), std::invalid_argument);
}

TEST_CASE("every schedule covers each block, MB without overlap") {
  for (std::size_t L = 1; L <= 9; ++L)
    for (std::size_t n = 1; n <= 4; ++n)
      for (auto kind : {Strategy::sb, Strategy::la, Strategy::mb}) {
        std::vector<int> tuned(L + 1, 0);
        for (const auto& w : make_schedule(kind, n, L).windows) {
          CHECK(w.target <= L);
          for (std::size_t b = w.first_tuned; b <= w.last_tuned; ++b) ++tuned[b];
        }
        for (std::size_t b = 1; b <= L; ++b) CHECK(tuned[b] == 1);
      }
}

TEST_CASE("learning rate decay") {
  CHECK(lr_at(0, 1000, 1e-3) == doctest::Approx(1e-3));
  CHECK(lr_at(500, 1000, 1e-3) == doctest::Approx(5e-4));
  CHECK(lr_at(999, 1000, 1e-3) == doctest::Approx(1e-6));
  CHECK_THROWS_AS(lr_at(1000, 1000, 1e-3), std::out_of_range);
}

TEST_CASE("signsgd") {
  std::vector<double> theta{1.0, -2.0};
  const std::vector<double> g{-0.5, 0.0};
  signsgd_update<double>(theta, g, 0.1);
  CHECK(theta[0] == doctest::Approx(1.1));
  CHECK(theta[1] == -2.0);

  std::vector<double> a{0.3, 0.3}, b{0.3, 0.3};
  signsgd_update<double>(a, std::vector<double>{2.0, -1e-3}, 0.05);
  signsgd_update<double>(b, std::vector<double>{2.0 * 1e6, -1e-3 * 1e6}, 0.05);
  CHECK(a == b);

  auto p = init_quant_params(testing::random_tensor({1, 4}, 1), quant(4, 4));
  p.alpha.mutable_values()[0] = 0.99;
  auto grads = p.clone();
  for (auto* t : {&grads.alpha, &grads.beta, &grads.rounding})
    for (auto& v : t->mutable_values()) v = 0;
  grads.alpha.mutable_values()[0] = -1;
  signsgd_step(p, grads, 0.05);
  CHECK(p.alpha[0] == 1.0);

  std::vector<double> short_theta{1.0};
  CHECK_THROWS_AS(signsgd_update<double>(short_theta, g, 0.1), ShapeError);
}

TEST_CASE("window loss equals a direct recomputation") {
  const auto m = build_model<double>(toy_config(2));
  const auto q = quant();
  auto params = init_all(m, q);
  Rng rng(5);
  for (auto& [name, p] : params)
    for (auto& v : p.rounding.mutable_values()) v = rng.uniform() - 0.5;
  const auto x = testing::random_tensor({3, 8, 16}, 6);
  for (const auto& w : {Window{Strategy::sb, 1, 1, 1}, Window{Strategy::la, 1, 1, 2}, Window{Strategy::mb, 1, 2, 2}}) {
    WeightOverride<double> over;
    for (std::size_t b = w.first_tuned; b <= w.last_tuned; ++b)
      for (auto kind : kLayerKinds) {
        const auto name = layer_name(b, kind);
        over.emplace(name, quantize_dequantize(m.layer(name).weight, params.at(name), q));
      }
    const auto ref = block_forward(m, w.span(), x);
    const auto cand = block_forward(m, w.span(), x, over);
    double sq = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) sq += (ref[i] - cand[i]) * (ref[i] - cand[i]);
    CHECK(window_loss(w, x, m, params, q).item() == doctest::Approx(sq / ref.size()).epsilon(1e-12));
    CHECK(window_loss(w, x, m, params, q, LossForm::frobenius).item() == doctest::Approx(std::sqrt(sq)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(window_loss(Window{}, testing::random_tensor({3, 8, 5}, 7), m, params, q), ShapeError);
}

TEST_CASE("window loss is zero when the grid represents the weights exactly") {
  auto m = build_model<double>(toy_config(1));
  for (auto kind : kLayerKinds) {
    auto w = m.blocks[0].layer(kind).weight.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.0625 * (static_cast<double>(i % 4) - 1.0);
  }
  const auto q = quant(2, 8);
  const auto params = init_all(m, q);
  const auto x = testing::random_tensor({2, 8, 16}, 8);
  CHECK(window_loss(Window{}, x, m, params, q).item() == 0.0);
}

TEST_CASE("SB gradients never reach other blocks") {
  const auto m = build_model<double>(toy_config(3));
  const auto q = quant();
  const auto params = init_all(m, q);
  const auto x = testing::random_tensor({2, 8, 16}, 9);
  Tape<double> tape;
  std::map<std::string, QuantParams<double>> bound;
  for (const auto& [name, p] : params) bound.emplace(name, p.bind(tape));
  const Window w{Strategy::sb, 2, 2, 2};
  const auto g = tape.backward(window_loss(w, x, m, bound, q));
  double own = 0;
  for (const auto& [name, p] : bound) {
    double norm = 0;
    for (const auto* t : {&p.alpha, &p.beta, &p.rounding}) {
      const auto grad = g.of(*t);
      for (double v : grad.values()) norm += std::abs(v);
    }
    if (block_of_layer(name) == 2)
      own += norm;
    else
      CHECK_MESSAGE(norm == 0.0, name);
  }
  CHECK(own > 0);
}

TEST_CASE("prefix activation stores") {
  const auto m = build_model<float>(toy_config(3));
  const auto q = quant();
  const auto samples = calib(10);
  const auto rtn = rtn_quantize(m, q);
  WeightOverride<float> prefix;
  for (const auto& name : m.quantizable_layers()) prefix.emplace(name, rtn.model.layer(name).weight);

  const auto s0 = cache_prefix_activations<float>(m, prefix, samples, 0);
  CHECK(s0.size() == 10);
  CHECK(s0.cached()[0].shape() == Shape{8, 16});
  const auto emb = embed(m, stack_inputs(samples));
  std::vector<std::size_t> all(10);
  for (std::size_t i = 0; i < 10; ++i) all[i] = i;
  CHECK(bit_equal(s0.gather(all), emb));

  const auto s3 = cache_prefix_activations<float>(m, prefix, samples, 3);
  CHECK(bit_equal(s3.gather(all), block_forward(m, {1, 3}, emb, prefix)));
  CHECK(bit_equal(s0.advance(m, prefix, 3).gather(all), s3.gather(all)));

  const auto lazy = ActivationStore<float>::lazy(2, m, prefix, samples);
  const auto eager = cache_prefix_activations<float>(m, prefix, samples, 2);
  const std::vector<std::size_t> pick{7, 1, 4};
  CHECK(bit_equal(lazy.gather(pick), eager.gather(pick)));

  // block 2's inputs see block 1's quantization error
  const auto fp1 = cache_prefix_activations<float>(m, {}, samples, 1);
  const auto q1 = cache_prefix_activations<float>(m, prefix, samples, 1);
  CHECK_FALSE(bit_equal(fp1.gather(all), q1.gather(all)));

  CHECK_THROWS_AS(cache_prefix_activations<float>(m, prefix, samples, 4), std::out_of_range);
  CHECK_THROWS_AS(s3.advance(m, prefix, 2), std::out_of_range);
}

TEST_CASE("fine-tuning one window") {
  const auto m = build_model<float>(toy_config(2));
  const auto q = quant();
  const auto params = init_all(m, q);
  const auto samples = calib(12);
  const auto store = cache_prefix_activations<float>(m, {}, samples, 0);
  const Window w{Strategy::la, 1, 1, 2};

  const auto a = finetune_window(w, store, m, params, q, optim(20));
  const auto b = finetune_window(w, store, m, params, q, optim(20));
  REQUIRE(a.log.steps.size() == 20);
  CHECK(a.log.first_block == 1);
  CHECK(a.tuned.size() == 6);
  for (const auto& [name, p] : a.tuned) {
    CHECK(block_of_layer(name) == 1);
    CHECK(params_equal(p, b.tuned.at(name)));
  }
  // inputs are untouched and frozen blocks have no entry
  for (const auto& [name, p] : params) {
    const auto fresh = init_quant_params(m.layer(name).weight, q);
    CHECK(params_equal(p, fresh));
  }

  SUBCASE("first recorded loss is the RTN loss on that batch") {
    // with batch_size >= samples every step sees the whole store
    auto o = optim(1);
    o.batch_size = 12;
    const auto one = finetune_window(w, store, m, params, q, o);
    CHECK(one.log.steps[0].loss == doctest::Approx(full_store_loss(w, store, m, params, q)).epsilon(1e-6));
  }

  SUBCASE("recompute mode matches the cache") {
    auto o = optim(20);
    o.cache_activations = false;
    const auto c = finetune_window(w, store, m, params, q, o);
    for (const auto& [name, p] : a.tuned) CHECK(params_equal(p, c.tuned.at(name)));
  }

  SUBCASE("errors") {
    CHECK_THROWS_AS(finetune_window(Window{Strategy::sb, 2, 2, 2}, store, m, params, q, optim(1)),
                    std::invalid_argument);
    CHECK_THROWS_AS(finetune_window(w, store, m, {}, q, optim(1)), std::invalid_argument);
    CHECK_THROWS_AS(finetune_window(w, ActivationStore<float>::eager(0, {}), m, params, q, optim(1)),
                    std::invalid_argument);
  }
}

TEST_CASE("fine-tuning lowers the reconstruction loss in most toy runs") {
  int improved = 0;
  const auto q = quant(3, 8);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = build_model<float>(toy_config(4, 100 + seed));
    const auto params = init_all(m, q);
    const auto store = cache_prefix_activations<float>(m, {}, calib(12, seed), 0);
    const Window w{Strategy::sb, 1, 1, 1};
    const auto r = finetune_window(w, store, m, params, q, optim(40, seed));
    if (full_store_loss(w, store, m, r.tuned, q) <= full_store_loss(w, store, m, params, q)) ++improved;
  }
  CHECK(improved >= 18);
}

TEST_CASE("pipelines") {
  const auto m = build_model<float>(toy_config(3));
  const auto corpus = tokenize(synthesize_corpus(4000, 2));
  const auto q = quant();
  const auto o = optim(6);

  const auto sb = run_pipeline(m, corpus, make_schedule(Strategy::sb, 1, 3), q, o);
  const auto la = run_pipeline(m, corpus, make_schedule(Strategy::la, 1, 3), q, o);
  const auto mb = run_pipeline(m, corpus, make_schedule(Strategy::mb, 1, 3), q, o);
  CHECK(sb.logs.size() == 3);
  CHECK(sb.calibration.size() == o.calib_samples);
  for (const auto& name : m.quantizable_layers()) {
    const auto& ref = sb.quantized.layers.at(name);
    for (const auto* other : {&la, &mb}) {
      const auto& l = other->quantized.layers.at(name);
      CHECK(params_equal(ref.params, l.params));
      CHECK(ref.levels == l.levels);
      CHECK(bit_equal(other->quantized.model.layer(name).weight, sb.quantized.model.layer(name).weight));
    }
  }

  const auto mb2 = run_pipeline(m, corpus, make_schedule(Strategy::mb, 2, 3), q, o);
  CHECK(mb2.logs.size() == 2);
  CHECK(mb2.logs[1].first_block == 3);

  // the source model is never modified
  const auto again = build_model<float>(toy_config(3));
  for (const auto& name : m.quantizable_layers()) CHECK(bit_equal(m.layer(name).weight, again.layer(name).weight));

  CHECK_THROWS_AS(run_pipeline(m, corpus, make_schedule(Strategy::sb, 1, 4), q, o), std::invalid_argument);
}

TEST_CASE("RTN quantization uses initial parameters") {
  const auto m = build_model<float>(toy_config(2));
  const auto q = quant(4, 8);
  const auto rtn = rtn_quantize(m, q);
  CHECK(rtn.info.at("strategy") == "rtn");
  for (const auto& name : m.quantizable_layers()) {
    const auto fq = fake_quantize(m.layer(name).weight, init_quant_params(m.layer(name).weight, q), q);
    CHECK(bit_equal(rtn.model.layer(name).weight, fq.dequantized));
  }
  CHECK(bit_equal(rtn.model.head, m.head));
}
