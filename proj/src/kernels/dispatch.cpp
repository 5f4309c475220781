#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "solarfuse/kernels/kernels.hpp"

namespace solarfuse::kernels {
namespace {

bool cpu_has_avx2_fma() {
#if (defined(__x86_64__) || defined(_M_X64)) && (defined(__GNUC__) || defined(__clang__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Isa detect() {
    if (const char* forced = std::getenv("SOLARFUSE_ISA")) {
        if (std::string(forced) == "scalar") return Isa::scalar;
    }
    return cpu_has_avx2_fma() ? Isa::avx2 : Isa::scalar;
}

std::atomic<const KernelTable*>& current() {
    static std::atomic<const KernelTable*> table{&table_for(detect())};
    return table;
}

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool isa_supported(Isa isa) { return isa == Isa::scalar || cpu_has_avx2_fma(); }

const KernelTable& table_for(Isa isa) {
#if defined(__x86_64__) || defined(_M_X64)
    if (isa == Isa::avx2) return avx2::table;
#endif
    return scalar::table;
}

Isa active_isa() { return current().load() == &scalar::table ? Isa::scalar : Isa::avx2; }

void set_isa(Isa isa) {
    if (!isa_supported(isa))
        throw std::invalid_argument("kernel ISA not supported on this host: " + std::string(isa_name(isa)));
    current().store(&table_for(isa));
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc) {
    current().load(std::memory_order_relaxed)
        ->gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

double dot(const double* x, const double* y, std::size_t n) {
    return current().load(std::memory_order_relaxed)->dot(x, y, n);
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
    current().load(std::memory_order_relaxed)->axpy(n, alpha, x, y);
}

double squared_l2(const double* x, const double* y, std::size_t n) {
    return current().load(std::memory_order_relaxed)->squared_l2(x, y, n);
}

std::size_t nearest_row(const double* z, const double* codes, std::size_t k, std::size_t d,
                        double* best_dist) {
    return current().load(std::memory_order_relaxed)->nearest_row(z, codes, k, d, best_dist);
}

}  // namespace solarfuse::kernels
