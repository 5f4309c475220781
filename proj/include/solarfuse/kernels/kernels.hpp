#pragma once

// Dense double-precision kernels used by the tensor layer.
//
// Every kernel has a portable scalar reference implementation and, on x86-64,
// an AVX2+FMA variant. The variant is chosen once at startup from cpuid and can
// be overridden (tests, SOLARFUSE_ISA=scalar) so both paths stay exercised.

#include <cstddef>
#include <string_view>

namespace solarfuse::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);
bool isa_supported(Isa isa);
Isa active_isa();
// Throws std::invalid_argument if the host cannot run `isa`.
void set_isa(Isa isa);

// C[m,n] = alpha * op(A) * op(B) + beta * C, all row-major.
// op(A) is [m,k]; with trans_a, A is stored [k,m]. Likewise for B.
// beta == 0 overwrites C without reading it.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double beta, double* c, std::size_t ldc);

double dot(const double* x, const double* y, std::size_t n);

// y += alpha * x
void axpy(std::size_t n, double alpha, const double* x, double* y);

double squared_l2(const double* x, const double* y, std::size_t n);

// Index of the row of `codes` ([k, d] row-major) nearest to `z` in squared L2.
// Ties resolve to the lowest index. Writes the winning distance to *best_dist.
std::size_t nearest_row(const double* z, const double* codes, std::size_t k, std::size_t d,
                        double* best_dist);

// Per-ISA entry points, exposed for equivalence tests.
struct KernelTable {
    void (*gemm)(bool, bool, std::size_t, std::size_t, std::size_t, double, const double*,
                 std::size_t, const double*, std::size_t, double, double*, std::size_t);
    double (*dot)(const double*, const double*, std::size_t);
    void (*axpy)(std::size_t, double, const double*, double*);
    double (*squared_l2)(const double*, const double*, std::size_t);
    std::size_t (*nearest_row)(const double*, const double*, std::size_t, std::size_t, double*);
};

const KernelTable& table_for(Isa isa);

namespace scalar {
extern const KernelTable table;
}
#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
extern const KernelTable table;
}
#endif

}  // namespace solarfuse::kernels
