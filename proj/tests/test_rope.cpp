#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "solarfuse/rope.hpp"
#include "support/gradcheck.hpp"

using namespace solarfuse;
using namespace solarfuse::rope;
using solarfuse::testing::grad_check;
using solarfuse::testing::weighted_sum;

namespace {

Tensor positions_1d(std::vector<double> ps) {
    const std::size_t n = ps.size();
    return Tensor::from({n, 1}, std::move(ps));
}

Tensor random_positions(std::size_t n, std::size_t p, Rng& rng, double lo, double hi) {
    std::vector<double> v(n * p);
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from({n, p}, std::move(v));
}

double row_norm(std::span<const double> v, std::size_t row, std::size_t d) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += v[row * d + j] * v[row * d + j];
    return std::sqrt(s);
}

// Straightforward reference: loops over batch, head, query, key.
std::vector<double> naive_attention(const Tensor& xq, const Tensor& xkv, const AttentionParams& p,
                                    const RopeTables& tq, const RopeTables& tk) {
    const std::size_t B = xq.dim(0), NQ = xq.dim(1), NK = xkv.dim(1), DQ = xq.dim(2), DK = xkv.dim(2);
    const std::size_t H = p.heads, DH = p.dim_head, I = H * DH;
    auto wq = p.to_q.data(), wkv = p.to_kv.data(), wo = p.to_out.data(), bo = p.out_bias.data();
    auto X = xq.data(), Y = xkv.data();
    auto rot = [&](std::vector<double>& v, const RopeTables& t, std::size_t b, std::size_t n) {
        const std::size_t g = t.sin.rank() == 3 && t.sin.dim(0) > 1 ? b : 0;
        const std::size_t N = t.tokens();
        std::vector<double> out(v.size());
        for (std::size_t c = 0; c < DH; c += 2) {
            const double s0 = t.sin.data()[(g * N + n) * DH + c], c0 = t.cos.data()[(g * N + n) * DH + c];
            out[c] = v[c] * c0 - v[c + 1] * s0;
            out[c + 1] = v[c + 1] * c0 + v[c] * s0;
        }
        v = out;
    };
    std::vector<double> result(B * NQ * DQ, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> concat_heads(NQ * I, 0.0);
        for (std::size_t h = 0; h < H; ++h) {
            std::vector<std::vector<double>> q(NQ, std::vector<double>(DH)), k(NK, std::vector<double>(DH)),
                v(NK, std::vector<double>(DH));
            for (std::size_t i = 0; i < NQ; ++i) {
                for (std::size_t c = 0; c < DH; ++c) {
                    double acc = 0.0;
                    for (std::size_t a = 0; a < DQ; ++a) acc += X[(b * NQ + i) * DQ + a] * wq[a * I + h * DH + c];
                    q[i][c] = acc;
                }
                rot(q[i], tq, b, i);
            }
            for (std::size_t j = 0; j < NK; ++j) {
                for (std::size_t c = 0; c < DH; ++c) {
                    double ak = 0.0, av = 0.0;
                    for (std::size_t a = 0; a < DK; ++a) {
                        ak += Y[(b * NK + j) * DK + a] * wkv[a * 2 * I + h * DH + c];
                        av += Y[(b * NK + j) * DK + a] * wkv[a * 2 * I + I + h * DH + c];
                    }
                    k[j][c] = ak;
                    v[j][c] = av;
                }
                rot(k[j], tk, b, j);
            }
            for (std::size_t i = 0; i < NQ; ++i) {
                std::vector<double> score(NK);
                double mx = -1e300;
                for (std::size_t j = 0; j < NK; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < DH; ++c) s += q[i][c] * k[j][c];
                    score[j] = s / std::sqrt(static_cast<double>(DH));
                    mx = std::max(mx, score[j]);
                }
                double z = 0.0;
                for (double& s : score) z += (s = std::exp(s - mx));
                for (std::size_t j = 0; j < NK; ++j)
                    for (std::size_t c = 0; c < DH; ++c) concat_heads[i * I + h * DH + c] += score[j] / z * v[j][c];
            }
        }
        for (std::size_t i = 0; i < NQ; ++i)
            for (std::size_t o = 0; o < DQ; ++o) {
                double acc = bo[o];
                for (std::size_t a = 0; a < I; ++a) acc += concat_heads[i * I + a] * wo[a * DQ + o];
                result[(b * NQ + i) * DQ + o] = acc;
            }
    }
    return result;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("rope tables") {
    SUBCASE("zero position") {
        auto t = build_rope_tables(positions_1d({0.0}), 8, 128);
        for (double v : t.sin.data()) CHECK(v == 0.0);
        for (double v : t.cos.data()) CHECK(v == 1.0);
    }
    SUBCASE("unit frequency") {
        auto t = build_rope_tables(positions_1d({M_PI / 2}), 2, 128);
        CHECK(t.sin.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(t.sin.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::abs(t.cos.data()[0]) < 1e-12);
        CHECK(std::abs(t.cos.data()[1]) < 1e-12);
    }
    SUBCASE("temporal schedule and pair duplication") {
        auto t = build_rope_tables(positions_1d({3.0}), 8, 128);
        for (std::size_t i = 0; i < 4; ++i) {
            const double theta = std::pow(10000.0, -2.0 * static_cast<double>(i) / 8.0);
            CHECK(t.sin.data()[2 * i] == doctest::Approx(std::sin(3.0 * theta)).epsilon(1e-14));
            CHECK(t.sin.data()[2 * i] == t.sin.data()[2 * i + 1]);
            CHECK(t.cos.data()[2 * i] == t.cos.data()[2 * i + 1]);
        }
    }
    SUBCASE("spatial axis split") {
        Tensor pos = Tensor::from({1, 2}, {0.5, 0.0});
        auto t = build_rope_tables(pos, 8, 8);
        // axis 0 occupies the first 4 channels, frequencies linspace(1, 4, 2) * pi
        CHECK(t.sin.data()[0] == doctest::Approx(std::sin(0.5 * M_PI)));
        CHECK(t.sin.data()[2] == doctest::Approx(std::sin(0.5 * 4.0 * M_PI)).epsilon(1e-12));
        for (std::size_t j = 4; j < 8; ++j) CHECK(t.sin.data()[j] == 0.0);
    }
    SUBCASE("pythagorean identity") {
        Rng rng(3);
        for (std::size_t p : {1u, 2u, 3u}) {
            auto t = build_rope_tables(random_positions(17, p, rng, -30, 30), 12, 128);
            for (std::size_t i = 0; i < t.sin.numel(); ++i) {
                const double s = t.sin.data()[i], c = t.cos.data()[i];
                CHECK(std::abs(s * s + c * c - 1.0) < 1e-12);
            }
        }
    }
    SUBCASE("grouped positions") {
        Rng rng(4);
        Tensor pos = Tensor::from({3, 5, 2}, std::vector<double>(30, 0.25));
        auto t = build_rope_tables(pos, 8, 16);
        CHECK(t.sin.shape() == Shape{3, 5, 8});
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(build_rope_tables(positions_1d({1.0}), 7, 128), ShapeError);
        CHECK_THROWS_AS(build_rope_tables(Tensor::zeros({4, 2}), 6, 128), ShapeError);
        CHECK_THROWS_AS(build_rope_tables(Tensor::zeros({4, 3}), 8, 128), ShapeError);
    }
    SUBCASE("channel concat") {
        auto a = build_rope_tables(positions_1d({1, 2}), 4, 128);
        auto b = build_rope_tables(Tensor::zeros({2, 2}), 4, 128);
        auto c = concat_channels(a, b);
        CHECK(c.sin.shape() == Shape{2, 8});
        CHECK(c.sin.data()[8] == a.sin.data()[4]);
        CHECK(c.cos.data()[7] == 1.0);
    }
}

TEST_CASE("rotate_every_two") {
    Tensor x = Tensor::from({4}, {1, 2, 3, 4});
    Tensor r = rotate_every_two(x);
    CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{-2, 1, -4, 3});
    Tensor r2 = rotate_every_two(r);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r2.data()[i] == -x.data()[i]);
    Tensor r4 = rotate_every_two(rotate_every_two(r2));
    for (std::size_t i = 0; i < 4; ++i) CHECK(r4.data()[i] == x.data()[i]);
    CHECK_THROWS_AS(rotate_every_two(Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("apply_rope") {
    Rng rng(11);
    SUBCASE("identity at zero") {
        Tensor x = Tensor::randn({3, 6}, rng, 1.0);
        auto t = build_rope_tables(Tensor::zeros({3, 1}), 6, 128);
        Tensor y = apply_rope(x, t);
        CHECK(max_abs_diff(x.data(), y.data()) == 0.0);
    }
    SUBCASE("planar rotation") {
        auto t = build_rope_tables(positions_1d({M_PI / 2}), 2, 128);
        Tensor y = apply_rope(Tensor::from({1, 2}, {1, 0}), t);
        CHECK(std::abs(y.data()[0]) < 1e-12);
        CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("matches the formula") {
        Tensor x = Tensor::randn({5, 8}, rng, 1.0);
        auto t = build_rope_tables(random_positions(5, 1, rng, 0, 24), 8, 128);
        Tensor y = apply_rope(x, t);
        Tensor ref = add(mul(x, t.cos), mul(rotate_every_two(x), t.sin));
        CHECK(max_abs_diff(y.data(), ref.data()) < 1e-15);
    }
    SUBCASE("norm preserving, all layouts") {
        auto t2 = build_rope_tables(random_positions(7, 2, rng, -1, 1), 8, 128);
        Tensor x = Tensor::randn({3, 7, 4, 8}, rng, 2.0);
        Tensor y = apply_rope(x, t2);
        for (std::size_t r = 0; r < 3 * 7 * 4; ++r)
            CHECK(std::abs(row_norm(y.data(), r, 8) - row_norm(x.data(), r, 8)) < 1e-10);
        auto tg = build_rope_tables(Tensor::randn({3, 7, 1}, rng, 5.0), 8, 128);
        Tensor y3 = apply_rope(Tensor::randn({3, 7, 8}, rng, 1.0), tg);
        CHECK(y3.shape() == Shape{3, 7, 8});
    }
    SUBCASE("per-group tables select their own group") {
        Tensor pos = Tensor::from({2, 1, 1}, {0.0, 1.0});
        auto t = build_rope_tables(pos, 2, 128);
        Tensor x = Tensor::from({2, 1, 2}, {1, 0, 1, 0});
        Tensor y = apply_rope(x, t);
        CHECK(y.data()[0] == 1.0);
        CHECK(y.data()[2] == doctest::Approx(std::cos(1.0)));
        CHECK(y.data()[3] == doctest::Approx(std::sin(1.0)));
    }
    SUBCASE("shape errors") {
        auto t = build_rope_tables(Tensor::zeros({4, 1}), 8, 128);
        CHECK_THROWS_AS(apply_rope(Tensor::zeros({3, 8}), t), ShapeError);
        CHECK_THROWS_AS(apply_rope(Tensor::zeros({4, 6}), t), ShapeError);
        auto tg = build_rope_tables(Tensor::zeros({2, 4, 1}), 8, 128);
        CHECK_THROWS_AS(apply_rope(Tensor::zeros({3, 4, 8}), tg), ShapeError);
    }
    SUBCASE("gradients") {
        Tensor x = Tensor::randn({2, 3, 2, 4}, rng, 1.0, true);
        x.set_name("x");
        auto t = build_rope_tables(random_positions(3, 2, rng, -1, 1), 4, 16);
        auto res = grad_check([&] { return weighted_sum(apply_rope(x, t)); }, {x});
        CHECK(res.worst_rel_error < 1e-4);
        Tensor z = Tensor::randn({3, 6}, rng, 1.0, true);
        z.set_name("z");
        auto res2 = grad_check([&] { return weighted_sum(rotate_every_two(z)); }, {z});
        CHECK(res2.worst_rel_error < 1e-4);
    }
}

TEST_CASE("relative position property") {
    Rng rng(21);
    const std::size_t d = 16;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor q = Tensor::randn({1, d}, rng, 1.0);
        Tensor k = Tensor::randn({1, d}, rng, 1.0);
        const double m = rng.uniform(-50, 50), n = rng.uniform(-50, 50), s = rng.uniform(-100, 100);
        auto score = [&](double a, double b) {
            Tensor qa = apply_rope(q, build_rope_tables(positions_1d({a}), d, 128));
            Tensor kb = apply_rope(k, build_rope_tables(positions_1d({b}), d, 128));
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += qa.data()[j] * kb.data()[j];
            return acc;
        };
        CHECK(std::abs(score(m, n) - score(m + s, n + s)) < 1e-8);
    }
}

TEST_CASE("self attention") {
    Rng rng(5);
    auto p = AttentionParams::init(8, 8, 2, 4, rng, "attn");
    SUBCASE("single token") {
        Tensor x = Tensor::randn({2, 1, 8}, rng, 1.0);
        auto t = build_rope_tables(positions_1d({4.0}), 4, 128);
        Tensor w;
        Tensor v;
        Tensor y = rope_self_attention(x, p, t, {.weights = &w, .values = &v});
        for (double a : w.data()) CHECK(a == 1.0);
        // out_proj(V): values re-laid out per token then projected
        Tensor vv = reshape(permute(v, {0, 2, 1, 3}), {2, 1, 8});
        Tensor ref = linear(vv, p.to_out, p.out_bias);
        CHECK(max_abs_diff(y.data(), ref.data()) < 1e-14);
    }
    SUBCASE("weights sum to one and shape preserved") {
        Tensor x = Tensor::randn({3, 6, 8}, rng, 1.0);
        auto t = build_rope_tables(random_positions(6, 1, rng, 0, 24), 4, 128);
        Tensor w;
        Tensor y = rope_self_attention(x, p, t, {.weights = &w});
        CHECK(y.shape() == x.shape());
        for (std::size_t r = 0; r < w.numel() / 6; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < 6; ++j) s += w.data()[r * 6 + j];
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
    SUBCASE("identical tokens with identical tables give identical rows") {
        std::vector<double> tok(8);
        for (double& v : tok) v = rng.normal();
        std::vector<double> data;
        for (int i = 0; i < 4; ++i) data.insert(data.end(), tok.begin(), tok.end());
        Tensor x = Tensor::from({1, 4, 8}, data);
        auto t = build_rope_tables(positions_1d({2, 2, 2, 2}), 4, 128);
        Tensor y = rope_self_attention(x, p, t);
        for (std::size_t i = 1; i < 4; ++i)
            for (std::size_t c = 0; c < 8; ++c) CHECK(y.data()[i * 8 + c] == y.data()[c]);
    }
    SUBCASE("trivial tables equal vanilla attention") {
        Tensor x = Tensor::randn({2, 5, 8}, rng, 1.0);
        RopeTables ident{Tensor::zeros({5, 4}), Tensor::full({5, 4}, 1.0)};
        Tensor y = rope_self_attention(x, p, ident);
        // vanilla: no rotation at all in the oracle
        std::vector<double> ref = naive_attention(x, x, p, ident, ident);
        CHECK(max_abs_diff(y.data(), ref) < 1e-12);
    }
    SUBCASE("token count mismatch") {
        auto t = build_rope_tables(positions_1d({0, 1, 2}), 4, 128);
        CHECK_THROWS_AS(rope_self_attention(Tensor::zeros({1, 4, 8}), p, t), ShapeError);
    }
    SUBCASE("dropout needs rng in training only") {
        Tensor x = Tensor::randn({1, 3, 8}, rng, 1.0);
        auto t = build_rope_tables(positions_1d({0, 1, 2}), 4, 128);
        CHECK_THROWS(rope_self_attention(x, p, t, {.dropout = 0.5, .training = true}));
        Tensor a = rope_self_attention(x, p, t, {.dropout = 0.5, .training = false});
        Tensor b = rope_self_attention(x, p, t);
        CHECK(max_abs_diff(a.data(), b.data()) == 0.0);
    }
    SUBCASE("gradients through every parameter") {
        Tensor x = Tensor::randn({2, 3, 8}, rng, 1.0, true);
        x.set_name("x");
        auto t = build_rope_tables(random_positions(3, 1, rng, 0, 24), 4, 128);
        auto params = p.parameters();
        params.push_back(x);
        auto res = grad_check([&] { return weighted_sum(rope_self_attention(x, p, t)); }, params);
        CHECK(res.worst_rel_error < 1e-4);
    }
}

TEST_CASE("cross attention") {
    Rng rng(9);
    auto p = AttentionParams::init(8, 12, 2, 4, rng, "cross");
    SUBCASE("single kv token") {
        Tensor q = Tensor::randn({2, 5, 8}, rng, 1.0);
        Tensor kv = Tensor::randn({2, 1, 12}, rng, 1.0);
        auto tq = build_rope_tables(random_positions(5, 2, rng, -1, 1), 4, 16);
        auto tk = build_rope_tables(Tensor::zeros({1, 2}), 4, 16);
        Tensor v;
        Tensor y = cross_attention(q, kv, p, tq, tk, {.values = &v});
        CHECK(y.shape() == Shape{2, 5, 8});
        Tensor vv = linear(reshape(permute(v, {0, 2, 1, 3}), {2, 1, 8}), p.to_out, p.out_bias);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t c = 0; c < 8; ++c)
                    CHECK(std::abs(y.data()[(b * 5 + i) * 8 + c] - vv.data()[b * 8 + c]) < 1e-14);
    }
    SUBCASE("duplicate keys") {
        Tensor q = Tensor::randn({1, 3, 8}, rng, 1.0);
        Tensor one = Tensor::randn({1, 1, 12}, rng, 1.0);
        Tensor two = concat({one, one}, 1);
        auto tq = build_rope_tables(random_positions(3, 2, rng, -1, 1), 4, 16);
        auto t1 = build_rope_tables(Tensor::from({1, 2}, {0.3, -0.2}), 4, 16);
        auto t2 = build_rope_tables(Tensor::from({2, 2}, {0.3, -0.2, 0.3, -0.2}), 4, 16);
        Tensor a = cross_attention(q, one, p, tq, t1);
        Tensor b = cross_attention(q, two, p, tq, t2);
        CHECK(max_abs_diff(a.data(), b.data()) < 1e-14);
    }
    SUBCASE("brute-force oracle with per-batch tables") {
        Tensor q = Tensor::randn({3, 4, 8}, rng, 1.0);
        Tensor kv = Tensor::randn({3, 6, 12}, rng, 1.0);
        auto tq = build_rope_tables(random_positions(4, 2, rng, -1, 1), 4, 16);
        auto tk = build_rope_tables(Tensor::randn({3, 6, 1}, rng, 10.0), 4, 128);
        Tensor y = cross_attention(q, kv, p, tq, tk);
        CHECK(max_abs_diff(y.data(), naive_attention(q, kv, p, tq, tk)) < 1e-10);
    }
    SUBCASE("outputs are convex combinations of values") {
        Tensor q = Tensor::randn({1, 4, 8}, rng, 1.0);
        Tensor kv = Tensor::randn({1, 5, 12}, rng, 1.0);
        auto tq = build_rope_tables(random_positions(4, 2, rng, -1, 1), 4, 16);
        auto tk = build_rope_tables(random_positions(5, 2, rng, -1, 1), 4, 16);
        Tensor w, v;
        cross_attention(q, kv, p, tq, tk, {.weights = &w, .values = &v});
        for (double a : w.data()) CHECK(a >= 0.0);
        for (std::size_t r = 0; r < w.numel() / 5; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < 5; ++j) s += w.data()[r * 5 + j];
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
    SUBCASE("incompatible dims") {
        auto tq = build_rope_tables(Tensor::zeros({2, 2}), 4, 16);
        CHECK_THROWS_AS(cross_attention(Tensor::zeros({1, 2, 7}), Tensor::zeros({1, 2, 12}), p, tq, tq), ShapeError);
        CHECK_THROWS_AS(cross_attention(Tensor::zeros({1, 2, 8}), Tensor::zeros({2, 2, 12}), p, tq, tq), ShapeError);
    }
    SUBCASE("gradients") {
        Tensor q = Tensor::randn({2, 3, 8}, rng, 1.0, true);
        Tensor kv = Tensor::randn({2, 4, 12}, rng, 1.0, true);
        q.set_name("q");
        kv.set_name("kv");
        auto tq = build_rope_tables(random_positions(3, 2, rng, -1, 1), 4, 16);
        auto tk = build_rope_tables(random_positions(4, 2, rng, -1, 1), 4, 16);
        auto params = p.parameters();
        params.push_back(q);
        params.push_back(kv);
        auto res = grad_check([&] { return weighted_sum(cross_attention(q, kv, p, tq, tk)); }, params);
        CHECK(res.worst_rel_error < 1e-4);
    }
}
