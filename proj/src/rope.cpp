#include "solarfuse/rope.hpp"

#include <cmath>

namespace solarfuse::rope {
namespace {

std::vector<double> frequencies(std::size_t dim, double max_freq, FreqScheme scheme) {
    const std::size_t half = dim / 2;
    std::vector<double> f(half);
    for (std::size_t i = 0; i < half; ++i) {
        if (scheme == FreqScheme::temporal) {
            f[i] = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
        } else {
            const double hi = max_freq / 2.0;
            const double t = half == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(half - 1);
            f[i] = (1.0 + t * (hi - 1.0)) * M_PI;
        }
    }
    return f;
}

}  // namespace

RopeTables build_rope_tables(const Tensor& positions, std::size_t dim, double max_freq, FreqScheme scheme) {
    if (positions.rank() < 2)
        throw ShapeError("build_rope_tables: positions must be [..., N, p_dims], got " + shape_str(positions.shape()));
    const std::size_t p_dims = positions.dim(positions.rank() - 1);
    if (dim == 0 || dim % 2 != 0) throw ShapeError("build_rope_tables: dim must be even, got " + std::to_string(dim));
    if (dim % (2 * p_dims) != 0)
        throw ShapeError("build_rope_tables: dim " + std::to_string(dim) + " not divisible by 2*p_dims = " +
                         std::to_string(2 * p_dims));
    const std::size_t per_axis = dim / p_dims;
    const auto freqs = frequencies(per_axis, max_freq, scheme);
    const std::size_t rows = positions.numel() / p_dims;
    std::vector<double> s(rows * dim), c(rows * dim);
    const double* pos = positions.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t a = 0; a < p_dims; ++a) {
            const double m = pos[r * p_dims + a];
            for (std::size_t i = 0; i < freqs.size(); ++i) {
                const double angle = m * freqs[i];
                const double sv = std::sin(angle), cv = std::cos(angle);
                const std::size_t at = r * dim + a * per_axis + 2 * i;
                s[at] = s[at + 1] = sv;
                c[at] = c[at + 1] = cv;
            }
        }
    }
    Shape shape(positions.shape().begin(), positions.shape().end() - 1);
    shape.push_back(dim);
    return {Tensor::from(shape, std::move(s)), Tensor::from(shape, std::move(c))};
}

RopeTables build_rope_tables(const Tensor& positions, std::size_t dim, double max_freq) {
    const std::size_t p_dims = positions.dim(positions.rank() - 1);
    return build_rope_tables(positions, dim, max_freq, p_dims == 1 ? FreqScheme::temporal : FreqScheme::spatial);
}

RopeTables concat_channels(const RopeTables& a, const RopeTables& b) {
    const std::size_t axis = a.sin.rank() - 1;
    NoGradGuard ng;
    return {concat({a.sin, b.sin}, axis), concat({a.cos, b.cos}, axis)};
}

Tensor rotate_every_two(const Tensor& x) {
    const std::size_t d = x.dim(x.rank() - 1);
    if (d % 2 != 0) throw ShapeError("rotate_every_two: last dim must be even, got " + shape_str(x.shape()));
    auto src = x.data();
    std::vector<double> out(src.size());
    for (std::size_t i = 0; i < src.size(); i += 2) {
        out[i] = -src[i + 1];
        out[i + 1] = src[i];
    }
    return make_result("rotate_every_two", x.shape(), std::move(out), {x}, [x](const Tensor& o) {
        if (!x.requires_grad()) return;
        Tensor t = x;
        double* dst = t.mutable_grad().data();
        const double* g = o.grad().data();
        for (std::size_t i = 0; i < o.numel(); i += 2) {
            dst[i] += g[i + 1];
            dst[i + 1] -= g[i];
        }
    });
}

Tensor apply_rope(const Tensor& x, const RopeTables& tables) {
    const Shape& xs = x.shape();
    const Shape& ts = tables.sin.shape();
    if (tables.cos.shape() != ts) throw ShapeError("apply_rope: sin/cos tables differ in shape");
    if (xs.size() < 2 || xs.size() > 4 || ts.size() < 2 || ts.size() > 3)
        throw ShapeError("apply_rope: unsupported ranks x " + shape_str(xs) + " tables " + shape_str(ts));
    // Normalise x to [G, N, H, d] and tables to [Gt, N, d].
    std::size_t g = 1, n = 0, h = 1;
    const std::size_t d = xs.back();
    if (xs.size() == 2) {
        n = xs[0];
    } else {
        g = xs[0];
        n = xs[1];
        if (xs.size() == 4) h = xs[2];
    }
    const std::size_t gt = ts.size() == 3 ? ts[0] : 1;
    const std::size_t tn = ts[ts.size() - 2], td = ts.back();
    if (d % 2 != 0) throw ShapeError("apply_rope: last dim must be even, got " + shape_str(xs));
    if (tn != n || td != d || !(gt == 1 || gt == g))
        throw ShapeError("apply_rope: x " + shape_str(xs) + " does not align with tables " + shape_str(ts));

    const double* S = tables.sin.data().data();
    const double* C = tables.cos.data().data();
    const double* X = x.data().data();
    std::vector<double> out(x.numel());
    for (std::size_t gi = 0; gi < g; ++gi) {
        const std::size_t tg = gt == 1 ? 0 : gi;
        for (std::size_t ni = 0; ni < n; ++ni) {
            const double* s = S + (tg * n + ni) * d;
            const double* c = C + (tg * n + ni) * d;
            for (std::size_t hi = 0; hi < h; ++hi) {
                const std::size_t base = ((gi * n + ni) * h + hi) * d;
                for (std::size_t j = 0; j < d; j += 2) {
                    const double x1 = X[base + j], x2 = X[base + j + 1];
                    out[base + j] = x1 * c[j] - x2 * s[j];
                    out[base + j + 1] = x2 * c[j + 1] + x1 * s[j + 1];
                }
            }
        }
    }
    Tensor sin_t = tables.sin, cos_t = tables.cos;
    return make_result("apply_rope", xs, std::move(out), {x}, [x, sin_t, cos_t, g, n, h, d, gt](const Tensor& o) {
        if (!x.requires_grad()) return;
        Tensor t = x;
        double* dst = t.mutable_grad().data();
        const double* G = o.grad().data();
        const double* S = sin_t.data().data();
        const double* C = cos_t.data().data();
        for (std::size_t gi = 0; gi < g; ++gi) {
            const std::size_t tg = gt == 1 ? 0 : gi;
            for (std::size_t ni = 0; ni < n; ++ni) {
                const double* s = S + (tg * n + ni) * d;
                const double* c = C + (tg * n + ni) * d;
                for (std::size_t hi = 0; hi < h; ++hi) {
                    const std::size_t base = ((gi * n + ni) * h + hi) * d;
                    for (std::size_t j = 0; j < d; j += 2) {
                        const double g1 = G[base + j], g2 = G[base + j + 1];
                        dst[base + j] += g1 * c[j] + g2 * s[j + 1];
                        dst[base + j + 1] += g2 * c[j + 1] - g1 * s[j];
                    }
                }
            }
        }
    });
}

AttentionParams AttentionParams::init(std::size_t dim_q, std::size_t dim_kv, std::size_t heads, std::size_t dim_head,
                                      Rng& rng, const std::string& prefix) {
    AttentionParams p;
    p.heads = heads;
    p.dim_head = dim_head;
    const std::size_t inner = heads * dim_head;
    auto xavier = [&](std::size_t fan_in, std::size_t fan_out, const std::string& name) {
        Tensor t = Tensor::randn({fan_in, fan_out}, rng, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)), true);
        t.set_name(prefix + "." + name);
        return t;
    };
    p.to_q = xavier(dim_q, inner, "to_q");
    p.to_kv = xavier(dim_kv, 2 * inner, "to_kv");
    p.to_out = xavier(inner, dim_q, "to_out");
    p.out_bias = Tensor::zeros({dim_q}, true);
    p.out_bias.set_name(prefix + ".out_bias");
    return p;
}

std::vector<Tensor> AttentionParams::parameters() const { return {to_q, to_kv, to_out, out_bias}; }

namespace {

Tensor attend(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& p, const RopeTables& tq,
              const RopeTables& tk, const AttentionOptions& opt) {
    if (q_src.rank() != 3 || kv_src.rank() != 3 || q_src.dim(0) != kv_src.dim(0))
        throw ShapeError("attention: expected [B, N, d] inputs with equal B, got " + shape_str(q_src.shape()) +
                         " and " + shape_str(kv_src.shape()));
    if (q_src.dim(2) != p.to_q.dim(0) || kv_src.dim(2) != p.to_kv.dim(0))
        throw ShapeError("attention: token dims " + shape_str(q_src.shape()) + " / " + shape_str(kv_src.shape()) +
                         " incompatible with projections " + shape_str(p.to_q.shape()) + " / " +
                         shape_str(p.to_kv.shape()));
    if (tq.tokens() != q_src.dim(1) || tk.tokens() != kv_src.dim(1))
        throw ShapeError("attention: token count does not match RoPE tables (" + std::to_string(q_src.dim(1)) +
                         " vs " + std::to_string(tq.tokens()) + ", " + std::to_string(kv_src.dim(1)) + " vs " +
                         std::to_string(tk.tokens()) + ")");
    const std::size_t b = q_src.dim(0), nq = q_src.dim(1), nk = kv_src.dim(1);
    const std::size_t h = p.heads, dh = p.dim_head, inner = h * dh;

    Tensor q = reshape(linear(q_src, p.to_q, Tensor()), {b, nq, h, dh});
    Tensor kv = linear(kv_src, p.to_kv, Tensor());
    Tensor k = reshape(slice(kv, 2, 0, inner), {b, nk, h, dh});
    Tensor v = reshape(slice(kv, 2, inner, inner), {b, nk, h, dh});
    q = permute(apply_rope(q, tq), {0, 2, 1, 3});
    k = permute(apply_rope(k, tk), {0, 2, 1, 3});
    v = permute(v, {0, 2, 1, 3});

    Tensor dots = scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax(dots, 3);
    if (opt.weights) *opt.weights = attn;
    if (opt.values) *opt.values = v;
    if (opt.training && opt.dropout > 0.0) {
        if (!opt.rng) throw std::invalid_argument("attention: dropout during training needs an rng");
        attn = dropout(attn, opt.dropout, true, *opt.rng);
    }
    Tensor out = permute(bmm(attn, v), {0, 2, 1, 3});
    return linear(reshape(out, {b, nq, inner}), p.to_out, p.out_bias);
}

}  // namespace

Tensor rope_self_attention(const Tensor& x, const AttentionParams& params, const RopeTables& tables,
                           const AttentionOptions& options) {
    return attend(x, x, params, tables, tables, options);
}

Tensor cross_attention(const Tensor& q_tokens, const Tensor& kv_tokens, const AttentionParams& params,
                       const RopeTables& tables_q, const RopeTables& tables_kv, const AttentionOptions& options) {
    return attend(q_tokens, kv_tokens, params, tables_q, tables_kv, options);
}

}  // namespace solarfuse::rope
