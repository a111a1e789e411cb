#include "mmsbr/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mmsbr::kernels {

namespace {

std::atomic<bool> g_parallel{true};

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelThreshold = 1u << 15;

inline double a_at(const GemmShape& s, const double* a, std::size_t i, std::size_t p) {
  return s.trans_a ? a[p * s.m + i] : a[i * s.k + p];
}

inline void gemm_row(const GemmShape& s, const double* a, const double* b, double* c, std::size_t i) {
  double* crow = c + i * s.n;
  for (std::size_t p = 0; p < s.k; ++p) {
    const double av = a_at(s, a, i, p);
    if (av == 0.0) continue;
    if (s.trans_b) {
      for (std::size_t j = 0; j < s.n; ++j) crow[j] += av * b[j * s.k + p];
    } else {
      const double* brow = b + p * s.n;
      for (std::size_t j = 0; j < s.n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void nt_row(const BlockShape& s, const double* a, const double* b, double* c, std::size_t blk,
                   std::size_t i) {
  const double* arow = a + (blk * s.a_rows + i) * s.a_cols;
  double* crow = c + (blk * s.a_rows + i) * s.b_rows;
  for (std::size_t j = 0; j < s.b_rows; ++j) {
    const double* brow = b + (blk * s.b_rows + j) * s.a_cols;
    double acc = 0.0;
    for (std::size_t p = 0; p < s.a_cols; ++p) acc += arow[p] * brow[p];
    crow[j] += acc;
  }
}

inline void nn_row(const BlockShape& s, const double* a, const double* b, double* c, std::size_t blk,
                   std::size_t i) {
  const double* arow = a + (blk * s.a_rows + i) * s.a_cols;
  double* crow = c + (blk * s.a_rows + i) * s.b_cols;
  for (std::size_t p = 0; p < s.a_cols; ++p) {
    const double av = arow[p];
    if (av == 0.0) continue;
    const double* brow = b + (blk * s.a_cols + p) * s.b_cols;
    for (std::size_t j = 0; j < s.b_cols; ++j) crow[j] += av * brow[j];
  }
}

// Row i of C_b = A_b^T B_b; i indexes A's columns.
inline void tn_row(const BlockShape& s, const double* a, const double* b, double* c, std::size_t blk,
                   std::size_t i) {
  double* crow = c + (blk * s.a_cols + i) * s.b_cols;
  for (std::size_t p = 0; p < s.a_rows; ++p) {
    const double av = a[(blk * s.a_rows + p) * s.a_cols + i];
    if (av == 0.0) continue;
    const double* brow = b + (blk * s.a_rows + p) * s.b_cols;
    for (std::size_t j = 0; j < s.b_cols; ++j) crow[j] += av * brow[j];
  }
}

}  // namespace

namespace serial {

void gemm(const GemmShape& s, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < s.m; ++i) gemm_row(s, a, b, c, i);
}

void block_gemm_nt(const BlockShape& s, const double* a, const double* b, double* c) {
  for (std::size_t blk = 0; blk < s.blocks; ++blk)
    for (std::size_t i = 0; i < s.a_rows; ++i) nt_row(s, a, b, c, blk, i);
}

void block_gemm_nn(const BlockShape& s, const double* a, const double* b, double* c) {
  for (std::size_t blk = 0; blk < s.blocks; ++blk)
    for (std::size_t i = 0; i < s.a_rows; ++i) nn_row(s, a, b, c, blk, i);
}

void block_gemm_tn(const BlockShape& s, const double* a, const double* b, double* c) {
  for (std::size_t blk = 0; blk < s.blocks; ++blk)
    for (std::size_t i = 0; i < s.a_cols; ++i) tn_row(s, a, b, c, blk, i);
}

}  // namespace serial

namespace parallel {

void gemm(const GemmShape& s, const double* a, const double* b, double* c) {
  const auto m = static_cast<long long>(s.m);
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < m; ++i) gemm_row(s, a, b, c, static_cast<std::size_t>(i));
}

void block_gemm_nt(const BlockShape& s, const double* a, const double* b, double* c) {
  const auto total = static_cast<long long>(s.blocks * s.a_rows);
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < total; ++r) {
    const auto ur = static_cast<std::size_t>(r);
    nt_row(s, a, b, c, ur / s.a_rows, ur % s.a_rows);
  }
}

void block_gemm_nn(const BlockShape& s, const double* a, const double* b, double* c) {
  const auto total = static_cast<long long>(s.blocks * s.a_rows);
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < total; ++r) {
    const auto ur = static_cast<std::size_t>(r);
    nn_row(s, a, b, c, ur / s.a_rows, ur % s.a_rows);
  }
}

void block_gemm_tn(const BlockShape& s, const double* a, const double* b, double* c) {
  const auto total = static_cast<long long>(s.blocks * s.a_cols);
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < total; ++r) {
    const auto ur = static_cast<std::size_t>(r);
    tn_row(s, a, b, c, ur / s.a_cols, ur % s.a_cols);
  }
}

}  // namespace parallel

namespace {
bool use_parallel(std::size_t work) {
#ifdef _OPENMP
  return g_parallel.load(std::memory_order_relaxed) && work >= kParallelThreshold &&
         omp_get_max_threads() > 1;
#else
  (void)work;
  return false;
#endif
}
}  // namespace

void gemm(const GemmShape& s, const double* a, const double* b, double* c) {
  if (use_parallel(s.m * s.n * s.k)) parallel::gemm(s, a, b, c);
  else serial::gemm(s, a, b, c);
}

void block_gemm_nt(const BlockShape& s, const double* a, const double* b, double* c) {
  if (use_parallel(s.blocks * s.a_rows * s.b_rows * s.a_cols)) parallel::block_gemm_nt(s, a, b, c);
  else serial::block_gemm_nt(s, a, b, c);
}

void block_gemm_nn(const BlockShape& s, const double* a, const double* b, double* c) {
  if (use_parallel(s.blocks * s.a_rows * s.a_cols * s.b_cols)) parallel::block_gemm_nn(s, a, b, c);
  else serial::block_gemm_nn(s, a, b, c);
}

void block_gemm_tn(const BlockShape& s, const double* a, const double* b, double* c) {
  if (use_parallel(s.blocks * s.a_rows * s.a_cols * s.b_cols)) parallel::block_gemm_tn(s, a, b, c);
  else serial::block_gemm_tn(s, a, b, c);
}

void set_parallel_enabled(bool on) { g_parallel.store(on, std::memory_order_relaxed); }
bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

void configure_threads_from_env() {
#ifdef _OPENMP
  if (const char* env = std::getenv("MMSBR_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) omp_set_num_threads(n);
    } catch (const std::exception&) {
      // Unparseable values leave the OpenMP default in place.
    }
  }
#endif
}

}  // namespace mmsbr::kernels
