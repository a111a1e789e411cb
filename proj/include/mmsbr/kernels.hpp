#pragma once

// Dense kernels behind the tape ops. Each kernel has a serial reference in
// `serial::` and an OpenMP version in `parallel::`. The parallel versions
// partition work by output element and keep the serial summation order, so
// the two produce bit-identical results for any thread count.

#include <cstddef>

namespace mmsbr::kernels {

struct GemmShape {
  std::size_t m, n, k;  // C(m x n) += op(A)(m x k) * op(B)(k x n)
  bool trans_a = false;
  bool trans_b = false;
};

/// Blocked batch: nb independent products, block b reads rows
/// [b*a_rows, (b+1)*a_rows) of A and [b*b_rows, (b+1)*b_rows) of B.
struct BlockShape {
  std::size_t blocks;
  std::size_t a_rows, a_cols;
  std::size_t b_rows, b_cols;
};

namespace serial {
void gemm(const GemmShape& s, const double* a, const double* b, double* c);
// C_b += A_b * B_b^T  (A_b: a_rows x a_cols, B_b: b_rows x a_cols, C_b: a_rows x b_rows)
void block_gemm_nt(const BlockShape& s, const double* a, const double* b, double* c);
// C_b += A_b * B_b    (A_b: a_rows x a_cols, B_b: a_cols x b_cols, C_b: a_rows x b_cols)
void block_gemm_nn(const BlockShape& s, const double* a, const double* b, double* c);
// C_b += A_b^T * B_b  (A_b: a_rows x a_cols, B_b: a_rows x b_cols, C_b: a_cols x b_cols)
void block_gemm_tn(const BlockShape& s, const double* a, const double* b, double* c);
}  // namespace serial

namespace parallel {
void gemm(const GemmShape& s, const double* a, const double* b, double* c);
void block_gemm_nt(const BlockShape& s, const double* a, const double* b, double* c);
void block_gemm_nn(const BlockShape& s, const double* a, const double* b, double* c);
void block_gemm_tn(const BlockShape& s, const double* a, const double* b, double* c);
}  // namespace parallel

// Dispatchers used by the tape: parallel above a work threshold when OpenMP
// is available and enabled, serial otherwise.
void gemm(const GemmShape& s, const double* a, const double* b, double* c);
void block_gemm_nt(const BlockShape& s, const double* a, const double* b, double* c);
void block_gemm_nn(const BlockShape& s, const double* a, const double* b, double* c);
void block_gemm_tn(const BlockShape& s, const double* a, const double* b, double* c);

void set_parallel_enabled(bool on);
bool parallel_enabled();
/// Caps OpenMP workers from the MMSBR_THREADS environment variable, if set.
void configure_threads_from_env();

}  // namespace mmsbr::kernels
