#include "gemm.hpp"

#include <algorithm>

namespace morphgrad::detail {

namespace {
constexpr std::size_t kBlockM = 64;
constexpr std::size_t kBlockK = 128;
constexpr std::size_t kBlockN = 256;
}  // namespace

void gemm_nn(const double* A, const double* B, double* C, std::size_t M,
             std::size_t N, std::size_t K) {
  for (std::size_t i0 = 0; i0 < M; i0 += kBlockM)
    for (std::size_t k0 = 0; k0 < K; k0 += kBlockK)
      for (std::size_t j0 = 0; j0 < N; j0 += kBlockN) {
        const std::size_t i1 = std::min(i0 + kBlockM, M);
        const std::size_t k1 = std::min(k0 + kBlockK, K);
        const std::size_t j1 = std::min(j0 + kBlockN, N);
        for (std::size_t i = i0; i < i1; ++i) {
          double* Crow = C + i * N;
          for (std::size_t k = k0; k < k1; ++k) {
            const double a = A[i * K + k];
            const double* Brow = B + k * N;
            for (std::size_t j = j0; j < j1; ++j) Crow[j] += a * Brow[j];
          }
        }
      }
}

void gemm_nt(const double* A, const double* B, double* C, std::size_t M,
             std::size_t N, std::size_t K) {
  // Dot-product form: rows of A against rows of B, both contiguous.
  for (std::size_t i0 = 0; i0 < M; i0 += kBlockM)
    for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
      const std::size_t i1 = std::min(i0 + kBlockM, M);
      const std::size_t k1 = std::min(k0 + kBlockK, K);
      for (std::size_t i = i0; i < i1; ++i) {
        const double* Arow = A + i * K;
        double* Crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) {
          const double* Brow = B + j * K;
          double acc = 0.0;
          for (std::size_t k = k0; k < k1; ++k) acc += Arow[k] * Brow[k];
          Crow[j] += acc;
        }
      }
    }
}

void gemm_tn(const double* A, const double* B, double* C, std::size_t M,
             std::size_t N, std::size_t K) {
  for (std::size_t k0 = 0; k0 < K; k0 += kBlockK)
    for (std::size_t j0 = 0; j0 < N; j0 += kBlockN) {
      const std::size_t k1 = std::min(k0 + kBlockK, K);
      const std::size_t j1 = std::min(j0 + kBlockN, N);
      for (std::size_t k = k0; k < k1; ++k) {
        const double* Arow = A + k * M;
        const double* Brow = B + k * N;
        for (std::size_t i = 0; i < M; ++i) {
          const double a = Arow[i];
          double* Crow = C + i * N;
          for (std::size_t j = j0; j < j1; ++j) Crow[j] += a * Brow[j];
        }
      }
    }
}

}  // namespace morphgrad::detail
