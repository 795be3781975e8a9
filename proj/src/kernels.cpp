#include "ktr/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ktr::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1U << 15;

inline void matmul_row(const double* a_row, const double* b, double* c_row, std::size_t k,
                       std::size_t n) {
    std::fill(c_row, c_row + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const double av = a_row[p];
        const double* b_row = b + p * n;
        for (std::size_t j = 0; j < n; ++j) {
            c_row[j] += av * b_row[j];
        }
    }
}

inline void matmul_nt_row(const double* a_row, const double* b, double* c_row, std::size_t k,
                          std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
        const double* b_row = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            acc += a_row[p] * b_row[p];
        }
        c_row[j] = acc;
    }
}

// Output row r of c[k,n] += a^T b accumulates over the m input rows in order.
inline void matmul_tn_row(const double* a, const double* b, double* c_row, std::size_t r,
                          std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double av = a[i * k + r];
        if (av == 0.0) {
            continue;
        }
        const double* b_row = b + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            c_row[j] += av * b_row[j];
        }
    }
}

inline void log_softmax_row(const double* in, double* out, std::size_t n) {
    double mx = in[0];
    for (std::size_t j = 1; j < n; ++j) {
        mx = std::max(mx, in[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        sum += std::exp(in[j] - mx);
    }
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = in[j] - lse;
    }
}

}  // namespace

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        matmul_row(a.data() + i * k, b.data(), c.data() + i * n, k, n);
    }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        matmul_nt_row(a.data() + i * k, b.data(), c.data() + i * n, k, n);
    }
}

void matmul_tn_accumulate(std::span<const double> a, std::span<const double> b,
                          std::span<double> c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t r = 0; r < k; ++r) {
        matmul_tn_row(a.data(), b.data(), c.data() + r * n, r, m, k, n);
    }
}

void log_softmax_rows(std::span<const double> a, std::span<double> out, std::size_t m,
                      std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        log_softmax_row(a.data() + i * n, out.data() + i * n, n);
    }
}

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
    const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
    for (std::int64_t i = 0; i < rows; ++i) {
        const auto r = static_cast<std::size_t>(i);
        matmul_row(a.data() + r * k, b.data(), c.data() + r * n, k, n);
    }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n) {
    const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
    for (std::int64_t i = 0; i < rows; ++i) {
        const auto r = static_cast<std::size_t>(i);
        matmul_nt_row(a.data() + r * k, b.data(), c.data() + r * n, k, n);
    }
}

void matmul_tn_accumulate(std::span<const double> a, std::span<const double> b,
                          std::span<double> c, std::size_t m, std::size_t k, std::size_t n) {
    const auto rows = static_cast<std::int64_t>(k);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
    for (std::int64_t i = 0; i < rows; ++i) {
        const auto r = static_cast<std::size_t>(i);
        matmul_tn_row(a.data(), b.data(), c.data() + r * n, r, m, k, n);
    }
}

void log_softmax_rows(std::span<const double> a, std::span<double> out, std::size_t m,
                      std::size_t n) {
    const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * n >= kParallelWork)
    for (std::int64_t i = 0; i < rows; ++i) {
        const auto r = static_cast<std::size_t>(i);
        log_softmax_row(a.data() + r * n, out.data() + r * n, n);
    }
}

}  // namespace parallel

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace ktr::kernels
