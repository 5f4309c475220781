#include "solarfuse/kernels/kernels.hpp"

namespace solarfuse::kernels::scalar {
namespace {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = trans_a ? a[p * lda + i] : a[i * lda + p];
                const double bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
                acc += av * bv;
            }
            double& out = c[i * ldc + j];
            out = (beta == 0.0 ? 0.0 : beta * out) + alpha * acc;
        }
    }
}

double dot(const double* x, const double* y, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double squared_l2(const double* x, const double* y, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = x[i] - y[i];
        acc += d * d;
    }
    return acc;
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

}  // namespace

const KernelTable table{&gemm, &dot, &axpy, &squared_l2, &nearest_row};

}  // namespace solarfuse::kernels::scalar
