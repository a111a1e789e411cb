// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "mmsbr/kernels.hpp"

namespace k = mmsbr::kernels;

namespace {

std::vector<double> random_buffer(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// Catalog scoring shape: batch x d times (n x d)^T.
template <void (*Gemm)(const k::GemmShape&, const double*, const double*, double*)>
void bm_gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const k::GemmShape s{m, 4 * m, 64, false, true};
  const auto a = random_buffer(s.m * s.k, 1), b = random_buffer(s.n * s.k, 2);
  std::vector<double> c(s.m * s.n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    Gemm(s, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * s.m * s.n * s.k));
}

// Per-item attention shape: many small (tokens x d) blocks.
template <void (*Block)(const k::BlockShape&, const double*, const double*, double*)>
void bm_block_nt(benchmark::State& state) {
  const k::BlockShape s{static_cast<std::size_t>(state.range(0)), 10, 32, 10, 32};
  const auto a = random_buffer(s.blocks * s.a_rows * s.a_cols, 3), b = random_buffer(s.blocks * s.b_rows * s.a_cols, 4);
  std::vector<double> c(s.blocks * s.a_rows * s.b_rows);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    Block(s, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * s.blocks * s.a_rows * s.b_rows * s.a_cols));
}

}  // namespace

BENCHMARK(bm_gemm<k::serial::gemm>)->Name("gemm_nt/serial")->Arg(64)->Arg(256);
BENCHMARK(bm_gemm<k::parallel::gemm>)->Name("gemm_nt/parallel")->Arg(64)->Arg(256);
BENCHMARK(bm_block_nt<k::serial::block_gemm_nt>)->Name("block_nt/serial")->Arg(100)->Arg(2000);
BENCHMARK(bm_block_nt<k::parallel::block_gemm_nt>)->Name("block_nt/parallel")->Arg(100)->Arg(2000);

BENCHMARK_MAIN();
