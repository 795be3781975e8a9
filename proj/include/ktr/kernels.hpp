#pragma once

// Dense row-major kernels used by the autodiff tape.
//
// Every kernel exists twice: a serial reference in `ktr::kernels::serial` and
// an OpenMP version in `ktr::kernels::parallel`. The parallel versions split
// work over independent output rows only, so each output element is produced
// by the same instruction sequence as in the serial version and results are
// bit-identical regardless of thread count.

#include <cstddef>
#include <span>

namespace ktr::kernels {

namespace serial {

// c[m,n] = a[m,k] * b[k,n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);

// c[m,n] = a[m,k] * b[n,k]^T
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n);

// c[k,n] += a[m,k]^T * b[m,n]
void matmul_tn_accumulate(std::span<const double> a, std::span<const double> b,
                          std::span<double> c, std::size_t m, std::size_t k, std::size_t n);

// Row-wise log-softmax of a[m,n] with max subtraction.
void log_softmax_rows(std::span<const double> a, std::span<double> out, std::size_t m,
                      std::size_t n);

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_tn_accumulate(std::span<const double> a, std::span<const double> b,
                          std::span<double> c, std::size_t m, std::size_t k, std::size_t n);
void log_softmax_rows(std::span<const double> a, std::span<double> out, std::size_t m,
                      std::size_t n);

}  // namespace parallel

// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace ktr::kernels
