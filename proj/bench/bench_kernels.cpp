// Serial reference kernels against their OpenMP counterparts. Prints the best
// of several timed repetitions per kernel and size, and whether both variants
// produced identical bits.
#include <algorithm>
#include <chrono>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <vector>

#include "CLI11.hpp"
#include "qlab/kernels.hpp"
#include "qlab/rng.hpp"

namespace {

namespace k = qlab::kernels;
using Clock = std::chrono::steady_clock;

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
  qlab::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

// Best wall time of `reps` calls after one warm-up call.
double best_seconds(const std::function<void()>& fn, int reps) {
  fn();
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double>(Clock::now() - t0).count());
  }
  return best;
}

void report(const std::string& name, std::size_t size, double serial, double parallel, double flops, bool same) {
  std::cout << std::left << std::setw(12) << name << std::right << std::setw(6) << size << std::setw(12)
            << std::setprecision(4) << serial * 1e3 << std::setw(12) << parallel * 1e3 << std::setw(9)
            << serial / parallel;
  if (flops > 0) std::cout << std::setw(10) << flops / parallel * 1e-9;
  else std::cout << std::setw(10) << "-";
  std::cout << (same ? "   identical" : "   DIFFERENT") << "\n";
}

using Gemm = void (*)(std::size_t, std::size_t, std::size_t, const float*, const float*, float*, bool);

void bench_gemm(const std::string& name, Gemm serial, Gemm parallel, std::size_t n, int reps) {
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<float> c1(n * n), c2(n * n);
  const double ts = best_seconds([&] { serial(n, n, n, a.data(), b.data(), c1.data(), false); }, reps);
  const double tp = best_seconds([&] { parallel(n, n, n, a.data(), b.data(), c2.data(), false); }, reps);
  report(name, n, ts, tp, 2.0 * n * n * n, std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(float)) == 0);
}

void bench_softmax(std::size_t cols, int reps) {
  const std::size_t rows = 64 * cols;
  const auto x = random_values(rows * cols, 3);
  std::vector<float> y1(rows * cols), y2(rows * cols);
  const double ts = best_seconds([&] { k::serial::softmax_rows(rows, cols, true, x.data(), y1.data()); }, reps);
  const double tp = best_seconds([&] { k::parallel::softmax_rows(rows, cols, true, x.data(), y2.data()); }, reps);
  report("softmax", cols, ts, tp, 0, y1 == y2);
}

void bench_layernorm(std::size_t cols, int reps) {
  const std::size_t rows = 4096;
  const auto x = random_values(rows * cols, 4);
  std::vector<float> gain(cols, 1.0f), bias(cols, 0.0f), y1(rows * cols), y2(rows * cols), mean(rows), rstd(rows);
  const double ts = best_seconds(
      [&] {
        k::serial::layernorm_rows(rows, cols, 1e-5f, x.data(), gain.data(), bias.data(), y1.data(), mean.data(),
                                  rstd.data());
      },
      reps);
  const double tp = best_seconds(
      [&] {
        k::parallel::layernorm_rows(rows, cols, 1e-5f, x.data(), gain.data(), bias.data(), y2.data(), mean.data(),
                                    rstd.data());
      },
      reps);
  report("layernorm", cols, ts, tp, 0, y1 == y2);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Serial vs OpenMP kernel timings"};
  int reps = 10;
  app.add_option("--reps", reps, "Timed repetitions per kernel")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  std::cout << "threads: " << k::thread_count() << "\n";
  std::cout << "kernel        size   serial ms parallel ms  speedup  GFLOP/s\n";
  for (std::size_t n : {64, 256, 512}) {
    bench_gemm("gemm_nn", k::serial::gemm_nn<float>, k::parallel::gemm_nn<float>, n, reps);
    bench_gemm("gemm_tn", k::serial::gemm_tn<float>, k::parallel::gemm_tn<float>, n, reps);
    bench_gemm("gemm_nt", k::serial::gemm_nt<float>, k::parallel::gemm_nt<float>, n, reps);
  }
  for (std::size_t cols : {64, 128}) bench_softmax(cols, reps);
  for (std::size_t cols : {64, 256}) bench_layernorm(cols, reps);
  return 0;
}
