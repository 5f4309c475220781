#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "solarfuse/kernels/kernels.hpp"
#include "solarfuse/rng.hpp"

using namespace solarfuse;
namespace k = solarfuse::kernels;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-2.0, 2.0);
    return v;
}

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::fabs(a[i] - b[i]) / std::max(1.0, std::fabs(a[i])));
    return worst;
}

}  // namespace

TEST_CASE("scalar gemm matches a hand-written triple loop for every transpose combination") {
    Rng rng(11);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t m = 1 + rng.below(9), n = 1 + rng.below(9), kk = 1 + rng.below(9);
        for (int ta = 0; ta < 2; ++ta)
            for (int tb = 0; tb < 2; ++tb) {
                auto a = random_vec(rng, m * kk), b = random_vec(rng, kk * n), c = random_vec(rng, m * n);
                std::vector<double> ref = c;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::size_t p = 0; p < kk; ++p)
                            acc += (ta ? a[p * m + i] : a[i * kk + p]) * (tb ? b[j * kk + p] : b[p * n + j]);
                        ref[i * n + j] = 0.5 * ref[i * n + j] + 1.5 * acc;
                    }
                k::scalar::table.gemm(ta, tb, m, n, kk, 1.5, a.data(), ta ? m : kk, b.data(), tb ? kk : n, 0.5,
                                      c.data(), n);
                CHECK(max_rel_diff(ref, c) == 0.0);
            }
    }
}

#if defined(__x86_64__) || defined(_M_X64)
TEST_CASE("avx2 kernels agree with the scalar reference") {
    if (!k::isa_supported(k::Isa::avx2)) {
        MESSAGE("host lacks AVX2+FMA; skipping SIMD equivalence");
        return;
    }
    const auto& s = k::table_for(k::Isa::scalar);
    const auto& v = k::table_for(k::Isa::avx2);
    Rng rng(3);

    SUBCASE("gemm, including ragged tails and beta = 0") {
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t m = 1 + rng.below(23), n = 1 + rng.below(37), kk = 1 + rng.below(19);
            const bool ta = rng.below(2), tb = rng.below(2);
            const double beta = trial % 3 == 0 ? 0.0 : rng.uniform(-1, 1);
            auto a = random_vec(rng, m * kk), b = random_vec(rng, kk * n), c0 = random_vec(rng, m * n);
            auto c1 = c0, c2 = c0;
            s.gemm(ta, tb, m, n, kk, 0.75, a.data(), ta ? m : kk, b.data(), tb ? kk : n, beta, c1.data(), n);
            v.gemm(ta, tb, m, n, kk, 0.75, a.data(), ta ? m : kk, b.data(), tb ? kk : n, beta, c2.data(), n);
            REQUIRE(max_rel_diff(c1, c2) < 1e-12);
        }
    }
    SUBCASE("reductions and axpy") {
        for (std::size_t n = 1; n < 70; ++n) {
            auto x = random_vec(rng, n), y = random_vec(rng, n);
            CHECK(std::fabs(s.dot(x.data(), y.data(), n) - v.dot(x.data(), y.data(), n)) < 1e-12 * n);
            CHECK(std::fabs(s.squared_l2(x.data(), y.data(), n) - v.squared_l2(x.data(), y.data(), n)) < 1e-12 * n);
            auto y1 = y, y2 = y;
            s.axpy(n, -0.3, x.data(), y1.data());
            v.axpy(n, -0.3, x.data(), y2.data());
            CHECK(max_rel_diff(y1, y2) < 1e-15);
        }
    }
    SUBCASE("nearest_row picks the same code") {
        for (int trial = 0; trial < 300; ++trial) {
            const std::size_t kk = 1 + rng.below(64), d = 1 + rng.below(16);
            auto codes = random_vec(rng, kk * d), z = random_vec(rng, d);
            double d1 = 0, d2 = 0;
            CHECK(s.nearest_row(z.data(), codes.data(), kk, d, &d1) == v.nearest_row(z.data(), codes.data(), kk, d, &d2));
            CHECK(std::fabs(d1 - d2) < 1e-12);
        }
    }
}
#endif

TEST_CASE("nearest_row breaks ties toward the lowest index") {
    const std::vector<double> codes{1, 0, -1, 0, 1, 0};
    const double z[2] = {0, 0};
    for (auto isa : {k::Isa::scalar, k::Isa::avx2}) {
        if (!k::isa_supported(isa)) continue;
        double dist = -1;
        CHECK(k::table_for(isa).nearest_row(z, codes.data(), 3, 2, &dist) == 0);
        CHECK(dist == 1.0);
    }
}

TEST_CASE("runtime ISA selection can be switched and restored") {
    const auto original = k::active_isa();
    k::set_isa(k::Isa::scalar);
    CHECK(k::active_isa() == k::Isa::scalar);
    if (k::isa_supported(k::Isa::avx2)) {
        k::set_isa(k::Isa::avx2);
        CHECK(k::active_isa() == k::Isa::avx2);
    } else {
        CHECK_THROWS_AS(k::set_isa(k::Isa::avx2), std::invalid_argument);
    }
    k::set_isa(original);
}
