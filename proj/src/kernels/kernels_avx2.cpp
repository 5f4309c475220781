// Compiled with -mavx2 -mfma. Only reached after a cpuid check.

#include <immintrin.h>

#include <vector>

#include "solarfuse/kernels/kernels.hpp"

namespace solarfuse::kernels::avx2 {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    const __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot(const double* x, const double* y, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

double squared_l2(const double* x, const double* y, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256d d0 = _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
        const __m256d d1 = _mm256_sub_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4));
        acc0 = _mm256_fmadd_pd(d0, d0, acc0);
        acc1 = _mm256_fmadd_pd(d1, d1, acc1);
    }
    for (; i + 4 <= n; i += 4) {
        const __m256d d0 = _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
        acc0 = _mm256_fmadd_pd(d0, d0, acc0);
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) {
        const double d = x[i] - y[i];
        s += d * d;
    }
    return s;
}

std::size_t nearest_row(const double* z, const double* codes, std::size_t k, std::size_t d,
                        double* best_dist) {
    std::size_t best = 0;
    double best_d = squared_l2(z, codes, d);
    for (std::size_t j = 1; j < k; ++j) {
        const double dist = squared_l2(z, codes + j * d, d);
        if (dist < best_d) {
            best_d = dist;
            best = j;
        }
    }
    if (best_dist) *best_dist = best_d;
    return best;
}

// R rows of C at once; 8-wide column tiles keep 2*R accumulators in registers.
template <int R>
void row_block(std::size_t i, std::size_t n, std::size_t k, double alpha, const double* a,
               std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
        __m256d acc[R][2];
        for (int r = 0; r < R; ++r) acc[r][0] = acc[r][1] = _mm256_setzero_pd();
        for (std::size_t p = 0; p < k; ++p) {
            const __m256d b0 = _mm256_loadu_pd(b + p * ldb + j);
            const __m256d b1 = _mm256_loadu_pd(b + p * ldb + j + 4);
            for (int r = 0; r < R; ++r) {
                const __m256d av = _mm256_set1_pd(a[(i + r) * lda + p]);
                acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
                acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
            }
        }
        for (int r = 0; r < R; ++r) {
            double* out = c + (i + r) * ldc + j;
            _mm256_storeu_pd(out, _mm256_fmadd_pd(va, acc[r][0], _mm256_loadu_pd(out)));
            _mm256_storeu_pd(out + 4, _mm256_fmadd_pd(va, acc[r][1], _mm256_loadu_pd(out + 4)));
        }
    }
    for (; j + 4 <= n; j += 4) {
        __m256d acc[R];
        for (int r = 0; r < R; ++r) acc[r] = _mm256_setzero_pd();
        for (std::size_t p = 0; p < k; ++p) {
            const __m256d b0 = _mm256_loadu_pd(b + p * ldb + j);
            for (int r = 0; r < R; ++r)
                acc[r] = _mm256_fmadd_pd(_mm256_set1_pd(a[(i + r) * lda + p]), b0, acc[r]);
        }
        for (int r = 0; r < R; ++r) {
            double* out = c + (i + r) * ldc + j;
            _mm256_storeu_pd(out, _mm256_fmadd_pd(va, acc[r], _mm256_loadu_pd(out)));
        }
    }
    for (; j < n; ++j) {
        for (int r = 0; r < R; ++r) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a[(i + r) * lda + p] * b[p * ldb + j];
            c[(i + r) * ldc + j] += alpha * acc;
        }
    }
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        double* row = c + i * ldc;
        if (beta == 0.0) {
            for (std::size_t j = 0; j < n; ++j) row[j] = 0.0;
        } else if (beta != 1.0) {
            for (std::size_t j = 0; j < n; ++j) row[j] *= beta;
        }
    }
    if (m == 0 || n == 0 || k == 0 || alpha == 0.0) return;

    thread_local std::vector<double> packed_a;
    thread_local std::vector<double> packed_b;
    if (trans_a) {
        packed_a.resize(m * k);
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t i = 0; i < m; ++i) packed_a[i * k + p] = a[p * lda + i];
        a = packed_a.data();
        lda = k;
    }
    if (trans_b) {
        packed_b.resize(k * n);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) packed_b[p * n + j] = b[j * ldb + p];
        b = packed_b.data();
        ldb = n;
    }

    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) row_block<4>(i, n, k, alpha, a, lda, b, ldb, c, ldc);
    for (; i < m; ++i) row_block<1>(i, n, k, alpha, a, lda, b, ldb, c, ldc);
}

}  // namespace

const KernelTable table{&gemm, &dot, &axpy, &squared_l2, &nearest_row};

}  // namespace solarfuse::kernels::avx2
