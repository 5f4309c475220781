#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "solarfuse/vq.hpp"
#include "support/gradcheck.hpp"

using namespace solarfuse;
using namespace solarfuse::vq;
using solarfuse::testing::grad_check;
using solarfuse::testing::relative_error;
using solarfuse::testing::weighted_sum;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Codebook book(std::size_t k, std::size_t d, std::vector<double> codes, double decay = 0.99) {
    return Codebook::from_codes(Tensor::from({k, d}, std::move(codes)), decay, 1e-5);
}

std::size_t brute_nearest(const std::vector<double>& z, std::size_t r, const std::vector<double>& codes,
                          std::size_t k, std::size_t d) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t i = 0; i < k; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (z[r * d + j] - codes[i * d + j]) * (z[r * d + j] - codes[i * d + j]);
        if (s < best_d) {
            best_d = s;
            best = i;
        }
    }
    return best;
}

double dist(const std::vector<double>& a, const std::vector<double>& b, std::size_t r, std::size_t d) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (a[r * d + j] - b[r * d + j]) * (a[r * d + j] - b[r * d + j]);
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("quantize") {
    SUBCASE("nearest code and commitment") {
        auto cb = book(2, 2, {0, 0, 2, 2});
        auto r = quantize(cb, Tensor::from({1, 2}, {0.4, 0.6}));
        CHECK(r.indices == std::vector<std::size_t>{0});
        CHECK(values(r.z_q) == std::vector<double>{0, 0});
        CHECK(r.commit_loss.item() == doctest::Approx(0.52).epsilon(1e-14));
    }
    SUBCASE("exact code hit") {
        auto cb = book(2, 2, {0, 0, 2, 2});
        auto r = quantize(cb, Tensor::from({1, 2}, {2, 2}));
        CHECK(r.indices[0] == 1);
        CHECK(r.commit_loss.item() == 0.0);
    }
    SUBCASE("ties pick the lowest index") {
        auto cb = book(3, 1, {1, -1, 1});
        auto r = quantize(cb, Tensor::from({2, 1}, {0, 1}));
        CHECK(r.indices == std::vector<std::size_t>{0, 0});
    }
    SUBCASE("brute-force oracle") {
        Rng rng(17);
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t k = 1 + rng.below(64), d = 1 + rng.below(8), n = 1 + rng.below(32);
            Tensor codes = Tensor::randn({k, d}, rng, 1.0);
            Tensor z = Tensor::randn({n, d}, rng, 1.0);
            auto cb = Codebook::from_codes(codes, 0.99, 1e-5);
            auto r = quantize(cb, z);
            const auto zc = values(codes), zv = values(z);
            double commit = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t want = brute_nearest(zv, i, zc, k, d);
                CHECK(r.indices[i] == want);
                for (std::size_t j = 0; j < d; ++j) {
                    CHECK(r.z_q.data()[i * d + j] == zc[want * d + j]);
                    commit += (zv[i * d + j] - zc[want * d + j]) * (zv[i * d + j] - zc[want * d + j]);
                }
            }
            CHECK(r.commit_loss.item() == doctest::Approx(commit / static_cast<double>(n)).epsilon(1e-12));
        }
    }
    SUBCASE("commitment gradient stops at the code") {
        auto cb = book(2, 2, {0, 0, 2, 2});
        Tensor z = Tensor::from({1, 2}, {0.4, 0.6}, true);
        backward(quantize(cb, z).commit_loss);
        CHECK(values(Tensor::from({2}, {z.grad()[0], z.grad()[1]})) == std::vector<double>{0.8, 1.2});
    }
    SUBCASE("does not touch the codebook") {
        Rng rng(2);
        auto cb = Codebook::from_codes(Tensor::randn({8, 3}, rng, 1.0), 0.9, 1e-5);
        const auto before = values(cb.codes());
        const auto counts = cb.counts();
        quantize(cb, Tensor::randn({10, 3}, rng, 1.0));
        CHECK(values(cb.codes()) == before);
        CHECK(cb.counts() == counts);
    }
    SUBCASE("errors") {
        auto cb = book(2, 2, {0, 0, 2, 2});
        CHECK_THROWS_AS(quantize(cb, Tensor::zeros({3, 3})), ShapeError);
        CHECK_THROWS(quantize(Codebook(), Tensor::zeros({1, 2})));
    }
}

TEST_CASE("straight_through") {
    Rng rng(4);
    Tensor z_e = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor z_q = Tensor::randn({3, 4}, rng, 1.0);
    SUBCASE("forward equals z_q") {
        CHECK(values(straight_through(z_e, z_q)) == values(z_q));
    }
    SUBCASE("sum gives ones") {
        backward(sum_all(straight_through(z_e, z_q)));
        for (double g : z_e.grad()) CHECK(g == 1.0);
    }
    SUBCASE("twin network") {
        // f(u) = sum(gelu(u * W)) evaluated at u = z_q; the gradient reaching z_e
        // must equal df/du with quantization replaced by identity on the backward path.
        Tensor w = Tensor::randn({4, 5}, rng, 1.0);
        backward(sum_all(gelu(matmul(straight_through(z_e, z_q), w))));
        Tensor u = Tensor::from({3, 4}, values(z_q), true);
        backward(sum_all(gelu(matmul(u, w))));
        for (std::size_t i = 0; i < 12; ++i) CHECK(z_e.grad()[i] == u.grad()[i]);
    }
    SUBCASE("shape mismatch") { CHECK_THROWS_AS(straight_through(z_e, Tensor::zeros({4, 3})), ShapeError); }
}

TEST_CASE("ema update") {
    SUBCASE("unassigned code stays put") {
        auto cb = book(2, 2, {0, 0, 5, 5});
        cb.ema_update(Tensor::from({3, 2}, {0.1, 0.2, -0.1, 0.0, 0.3, 0.1}), {0, 0, 0});
        CHECK(cb.codes().data()[2] == doctest::Approx(5.0).epsilon(1e-4));
        CHECK(cb.codes().data()[3] == doctest::Approx(5.0).epsilon(1e-4));
    }
    SUBCASE("decay zero jumps to the batch mean") {
        auto cb = book(2, 2, {0, 0, 5, 5}, 0.0);
        cb.ema_update(Tensor::from({4, 2}, {1, 1, 2, 0, 4, 5, 6, 5}), {0, 0, 1, 1});
        CHECK(cb.codes().data()[0] == doctest::Approx(1.5).epsilon(1e-5));
        CHECK(cb.codes().data()[1] == doctest::Approx(0.5).epsilon(1e-5));
        CHECK(cb.codes().data()[2] == doctest::Approx(5.0).epsilon(1e-5));
        CHECK(cb.codes().data()[3] == doctest::Approx(5.0).epsilon(1e-5));
    }
    SUBCASE("formula") {
        auto cb = book(2, 1, {0, 4}, 0.9);
        cb.ema_update(Tensor::from({3, 1}, {1, 2, 5}), {0, 0, 1});
        const double n0 = 0.9 + 0.1 * 2, n1 = 0.9 + 0.1 * 1;
        const double m0 = 0.0 + 0.1 * 3, m1 = 0.9 * 4 + 0.1 * 5;
        const double tot = n0 + n1, eps = 1e-5;
        CHECK(cb.counts()[0] == doctest::Approx(n0).epsilon(1e-15));
        CHECK(cb.sums()[1] == doctest::Approx(m1).epsilon(1e-15));
        CHECK(cb.codes().data()[0] == doctest::Approx(m0 / ((n0 + eps) / (tot + 2 * eps) * tot)).epsilon(1e-14));
        CHECK(cb.codes().data()[1] == doctest::Approx(m1 / ((n1 + eps) / (tot + 2 * eps) * tot)).epsilon(1e-14));
    }
    SUBCASE("converges onto a constant cluster") {
        Rng rng(8);
        auto cb = Codebook::from_codes(Tensor::randn({4, 3}, rng, 1.0), 0.99, 1e-5);
        const std::vector<double> p{0.7, -1.2, 0.4};
        std::vector<double> rows;
        for (int i = 0; i < 16; ++i) rows.insert(rows.end(), p.begin(), p.end());
        Tensor z = Tensor::from({16, 3}, rows);
        for (int step = 0; step < 500; ++step) {
            auto r = quantize(cb, z);
            cb.ema_update(z, r.indices);
        }
        const std::size_t k = quantize(cb, z).indices[0];
        double err = 0.0;
        for (std::size_t j = 0; j < 3; ++j) err += std::pow(cb.codes().data()[k * 3 + j] - p[j], 2);
        CHECK(std::sqrt(err) < 1e-3);
    }
    SUBCASE("ignores gradients") {
        auto a = book(2, 1, {0, 4});
        auto b = book(2, 1, {0, 4});
        Tensor z1 = Tensor::from({2, 1}, {1, 3}, true);
        backward(sum_all(square(z1)));
        Tensor z2 = Tensor::from({2, 1}, {1, 3});
        a.ema_update(z1, {0, 1});
        b.ema_update(z2, {0, 1});
        CHECK(values(a.codes()) == values(b.codes()));
    }
    SUBCASE("dead codes are reseeded from the batch") {
        Rng rng(3);
        auto cb = book(3, 1, {0, 10, 20});
        Tensor z = Tensor::from({2, 1}, {0.5, 9.5});
        for (int i = 0; i < 4; ++i) cb.ema_update(z, {0, 1}, &rng, 5);
        CHECK(cb.idle()[2] == 4);
        cb.ema_update(z, {0, 1}, &rng, 5);
        CHECK(cb.idle()[2] == 0);
        const double c2 = cb.codes().data()[2];
        CHECK((c2 == 0.5 || c2 == 9.5));
        // without an rng the code only ages
        auto keep = book(3, 1, {0, 10, 20});
        for (int i = 0; i < 10; ++i) keep.ema_update(z, {0, 1}, nullptr, 5);
        CHECK(keep.codes().data()[2] == doctest::Approx(20.0).epsilon(1e-3));
    }
    SUBCASE("errors") {
        auto cb = book(2, 1, {0, 4});
        CHECK_THROWS_AS(cb.ema_update(Tensor::from({1, 1}, {1}), {2}), std::out_of_range);
        CHECK_THROWS_AS(cb.ema_update(Tensor::from({2, 1}, {1, 2}), {0}), ShapeError);
    }
    SUBCASE("lazy initialisation samples batch rows") {
        Rng rng(5);
        Codebook cb(4, 2, 0.99, 1e-5, rng);
        CHECK_FALSE(cb.initialized());
        Tensor z = Tensor::from({6, 2}, {0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5});
        cb.init_from(z, rng);
        CHECK(cb.initialized());
        std::vector<double> seen;
        for (std::size_t i = 0; i < 4; ++i) {
            const double v = cb.codes().data()[2 * i];
            CHECK(cb.codes().data()[2 * i + 1] == v);
            CHECK(std::find(seen.begin(), seen.end(), v) == seen.end());
            seen.push_back(v);
        }
    }
}

TEST_CASE("residual quantize") {
    SUBCASE("two-stage example") {
        ResidualVQ rvq({book(2, 2, {0, 0, 2, 2}), book(2, 2, {0, 0, 0.5, 0.5})});
        auto r = rvq.forward(Tensor::from({1, 2}, {2.4, 2.6}), false);
        CHECK(r.indices[0][0] == 1);
        CHECK(r.indices[1][0] == 1);
        CHECK(values(r.z_q) == std::vector<double>{2.5, 2.5});
        // 0.16+0.36 then (-0.1)^2 + 0.1^2
        CHECK(r.commit_loss.item() == doctest::Approx(0.52 + 0.02).epsilon(1e-12));
    }
    SUBCASE("single stage matches plain quantize") {
        Rng rng(6);
        auto cb = Codebook::from_codes(Tensor::randn({16, 4}, rng, 1.0), 0.99, 1e-5);
        ResidualVQ rvq({cb});
        Tensor z = Tensor::randn({9, 4}, rng, 1.0);
        auto a = rvq.forward(z, false);
        auto b = quantize(cb, z);
        CHECK(a.indices[0] == b.indices);
        CHECK(values(a.z_q) == values(b.z_q));
        CHECK(a.commit_loss.item() == b.commit_loss.item());
        CHECK(values(a.output) == values(b.z_q));
    }
    SUBCASE("more stages never reconstruct worse on average") {
        Rng rng(12);
        VqOptions opt;
        opt.codebook_size = 32;
        opt.stages = 3;
        opt.decay = 0.9;
        ResidualVQ rvq(4, opt, rng);
        for (int step = 0; step < 200; ++step) {
            Tensor z = Tensor::randn({128, 4}, rng, 1.0);
            auto r = rvq.forward(z, true, &rng);
            rvq.update(r, &rng, opt);
        }
        Tensor z = Tensor::randn({200, 4}, rng, 1.0);
        const auto zv = values(z);
        double prev = INFINITY;
        for (std::size_t q = 1; q <= 3; ++q) {
            std::vector<Codebook> sub;
            for (std::size_t s = 0; s < q; ++s) sub.push_back(rvq.stage(s));
            const auto zq = values(ResidualVQ(sub).forward(z, false).z_q);
            double mean = 0.0;
            for (std::size_t i = 0; i < 200; ++i) mean += dist(zv, zq, i, 4) / 200.0;
            CHECK(mean < prev);
            prev = mean;
        }
    }
    SUBCASE("per vector, a stage holding the zero code never hurts") {
        Rng rng(13);
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<Codebook> stages;
            for (std::size_t s = 0; s < 3; ++s) {
                Tensor codes = Tensor::randn({12, 3}, rng, 1.0 / static_cast<double>(1 + 2 * s));
                for (std::size_t j = 0; j < 3; ++j) codes.mutable_data()[j] = 0.0;
                stages.push_back(Codebook::from_codes(codes, 0.99, 1e-5));
            }
            Tensor z = Tensor::randn({20, 3}, rng, 1.0);
            const auto zv = values(z);
            std::vector<double> prev(20, INFINITY);
            for (std::size_t q = 1; q <= 3; ++q) {
                std::vector<Codebook> sub(stages.begin(), stages.begin() + static_cast<std::ptrdiff_t>(q));
                const auto zq = values(ResidualVQ(sub).forward(z, false).z_q);
                for (std::size_t i = 0; i < 20; ++i) {
                    const double e = dist(zv, zq, i, 3);
                    CHECK(e <= prev[i] + 1e-12);
                    prev[i] = e;
                }
            }
        }
    }
    SUBCASE("straight-through output and gradients") {
        Rng rng(7);
        VqOptions opt;
        opt.codebook_size = 8;
        ResidualVQ rvq(3, opt, rng);
        Tensor z = Tensor::randn({5, 3}, rng, 1.0, true);
        auto r = rvq.forward(z, true, &rng);
        CHECK(values(r.output) == values(r.z_q));
        backward(add(sum_all(r.output), r.commit_loss));
        // d/dz of sum(output) is 1; commitment adds 2/n * (r_s - q_s) per stage
        std::vector<double> want(15, 1.0);
        for (std::size_t s = 0; s < 2; ++s)
            for (std::size_t i = 0; i < 15; ++i) {
                const double q = rvq.stage(s).codes().data()[r.indices[s][i / 3] * 3 + i % 3];
                want[i] += 2.0 / 5.0 * (r.residuals[s].data()[i] - q);
            }
        for (std::size_t i = 0; i < 15; ++i) CHECK(z.grad()[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
    SUBCASE("replayed trace is smooth and matches the analytic gradient") {
        Rng rng(9);
        VqOptions opt;
        opt.codebook_size = 8;
        ResidualVQ rvq(3, opt, rng);
        Tensor z = Tensor::randn({4, 3}, rng, 1.0, true);
        z.set_name("z");
        rvq.forward(z.detach(), true, &rng);  // initialise codebooks
        VqTrace trace;
        auto rec = rvq.forward(z, false, nullptr, &trace, TraceMode::record);
        auto rep = rvq.forward(z, false, nullptr, &trace, TraceMode::replay);
        CHECK(relative_error(values(rec.output), values(rep.output)) < 1e-15);
        CHECK(rec.commit_loss.item() == doctest::Approx(rep.commit_loss.item()).epsilon(1e-14));
        Tensor w = Tensor::randn({3, 2}, rng, 1.0);
        auto loss = [&] {
            auto r = rvq.forward(z, false, nullptr, &trace, TraceMode::replay);
            return add(weighted_sum(gelu(matmul(r.output, w))), scale(r.commit_loss, 0.25));
        };
        auto fd = grad_check(loss, {z});
        CHECK(fd.worst_rel_error < 1e-4);
        // the replay gradient is the straight-through gradient
        z.zero_grad();
        backward(loss());
        std::vector<double> replay_grad(z.grad().begin(), z.grad().end());
        z.zero_grad();
        auto live = rvq.forward(z, false);
        backward(add(weighted_sum(gelu(matmul(live.output, w))), scale(live.commit_loss, 0.25)));
        CHECK(relative_error(values(Tensor::from({12}, replay_grad)),
                             std::vector<double>(z.grad().begin(), z.grad().end())) < 1e-12);
    }
    SUBCASE("lazy init only when training") {
        Rng rng(1);
        VqOptions opt;
        opt.codebook_size = 4;
        ResidualVQ rvq(2, opt, rng);
        rvq.forward(Tensor::randn({8, 2}, rng, 1.0), false);
        CHECK_FALSE(rvq.stage(0).initialized());
        rvq.forward(Tensor::randn({8, 2}, rng, 1.0), true, &rng);
        CHECK(rvq.stage(0).initialized());
        CHECK(rvq.stage(1).initialized());
    }
    SUBCASE("deterministic") {
        Rng a(30), b(30);
        VqOptions opt;
        opt.codebook_size = 16;
        ResidualVQ ra(4, opt, a), rb(4, opt, b);
        Tensor z = Tensor::randn({32, 4}, a, 1.0);
        Tensor z2 = Tensor::from({32, 4}, values(z));
        b.derive("skip");
        Rng ia(99), ib(99);
        auto x = ra.forward(z, true, &ia);
        auto y = rb.forward(z2, true, &ib);
        CHECK(x.indices == y.indices);
    }
    SUBCASE("errors") {
        CHECK_THROWS(ResidualVQ(std::vector<Codebook>{}));
        ResidualVQ rvq({book(2, 2, {0, 0, 1, 1})});
        CHECK_THROWS_AS(rvq.forward(Tensor::zeros({2, 3}), false), ShapeError);
    }
}

TEST_CASE("codebook serialisation") {
    Rng rng(10);
    VqOptions opt;
    opt.codebook_size = 5;
    ResidualVQ rvq(3, opt, rng);
    for (int i = 0; i < 3; ++i) {
        auto r = rvq.forward(Tensor::randn({12, 3}, rng, 1.0), true, &rng);
        rvq.update(r, &rng, opt);
    }
    auto records = rvq.state("");
    CHECK(records[0].name == "vq.stage0.codes");
    CHECK(records[1].name == "vq.stage0.counts");
    CHECK(records[5].name == "vq.stage1.sums");
    const auto path = std::filesystem::temp_directory_path() / "solarfuse_vq_test.fstn";
    save_tensors(path, records);
    Rng other(77);
    ResidualVQ back(3, opt, other);
    back.load_state(load_tensors(path), "");
    std::filesystem::remove(path);
    for (std::size_t s = 0; s < 2; ++s) {
        CHECK(values(back.stage(s).codes()) == values(rvq.stage(s).codes()));
        CHECK(back.stage(s).counts() == rvq.stage(s).counts());
        CHECK(back.stage(s).sums() == rvq.stage(s).sums());
    }
    CHECK_THROWS_AS(back.load_state({}, ""), FormatError);
}
