#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cblas.h>

#include <cstddef>

// Row-major dense kernels on top of CBLAS. Leading dimensions are explicit so
// strided views (e.g. one attention head inside a [T, d] block) need no copy.
namespace sct::kernels {

// c[m x n] = alpha * op(a) * op(b) + beta * c, op(a) is [m x k], op(b) is [k x n].
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
                 std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
                 std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

// c[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  gemm(false, false, m, n, k, T{1}, a, k, b, n, accumulate ? T{1} : T{0}, c, n);
}

// c[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm(true, false, k, n, m, T{1}, a, k, b, n, T{1}, c, n);
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  gemm(false, true, m, n, k, T{1}, a, k, b, k, accumulate ? T{1} : T{0}, c, n);
}

// out[cols x rows] = in[rows x cols]^T
template <typename T>
void transpose_into(const T* in, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = in[i * cols + j];
}

// In-place elementwise Eigen expression over out[0..n) = in[0..n), staged
// through a 64-byte aligned buffer. Eigen peels scalar iterations up to the
// first aligned address and its scalar and packet exp/tanh differ in the last
// bit, so mapping heap memory directly makes results depend on malloc.
template <typename T, typename F>
void aligned_apply(const T* in, T* out, std::size_t n, F&& f) {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  constexpr std::size_t kChunk = 1024;
  alignas(64) T buf[kChunk];
  for (std::size_t s = 0; s < n; s += kChunk) {
    const std::size_t m = std::min(kChunk, n - s);
    std::copy(in + s, in + s + m, buf);
    Eigen::Map<Array, Eigen::Aligned64> v(buf, static_cast<Eigen::Index>(m));
    f(v);
    std::copy(buf, buf + m, out + s);
  }
}

}  // namespace sct::kernels
