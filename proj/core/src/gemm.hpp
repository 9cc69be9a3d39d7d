#pragma once

#include <cstddef>

namespace morphgrad::detail {

// Blocked f64 matrix products, row-major, accumulating into C. Fixed loop
// order keeps results bit-deterministic. Shapes:
//   gemm_nn: C[M x N] += A[M x K] * B[K x N]
//   gemm_nt: C[M x N] += A[M x K] * B[N x K]^T
//   gemm_tn: C[M x N] += A[K x M]^T * B[K x N]
void gemm_nn(const double* A, const double* B, double* C, std::size_t M,
             std::size_t N, std::size_t K);
void gemm_nt(const double* A, const double* B, double* C, std::size_t M,
             std::size_t N, std::size_t K);
void gemm_tn(const double* A, const double* B, double* C, std::size_t M,
             std::size_t N, std::size_t K);

}  // namespace morphgrad::detail
