#include <algorithm>
#include <cmath>
#include <numeric>

#include "solarfuse/kernels/kernels.hpp"
#include "solarfuse/tensor.hpp"

namespace solarfuse {
namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void accumulate(Tensor t, std::span<const double> g) {
    if (!t.requires_grad()) return;
    auto dst = t.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// Moves src (shape `in`) into dst permuted by `axes`.
void permute_into(const double* src, const Shape& in, const std::vector<std::size_t>& axes, double* dst) {
    const std::size_t rank = in.size();
    std::vector<std::size_t> in_stride(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
    Shape out_shape(rank);
    std::vector<std::size_t> step(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = in[axes[i]];
        step[i] = in_stride[axes[i]];
    }
    const std::size_t n = shape_numel(in);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t src_off = 0;
    const std::size_t last = rank - 1;
    for (std::size_t o = 0; o < n;) {
        // Innermost axis as a strided run.
        const std::size_t run = out_shape[last];
        const std::size_t st = step[last];
        for (std::size_t j = 0; j < run; ++j) dst[o + j] = src[src_off + j * st];
        o += run;
        for (std::size_t ax = last; ax-- > 0;) {
            src_off += step[ax];
            if (++counter[ax] < out_shape[ax]) break;
            src_off -= step[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return make_result("add", a.shape(), std::move(out), {a, b}, [a, b](const Tensor& o) {
        accumulate(a, o.grad());
        accumulate(b, o.grad());
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return make_result("sub", a.shape(), std::move(out), {a, b}, [a, b](const Tensor& o) {
        accumulate(a, o.grad());
        if (b.requires_grad()) {
            Tensor bb = b;
            auto dst = bb.mutable_grad();
            auto g = o.grad();
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](const Tensor& o) {
        auto g = o.grad();
        if (a.requires_grad()) {
            Tensor t = a;
            auto dst = t.mutable_grad();
            auto y = b.data();
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * y[i];
        }
        if (b.requires_grad()) {
            Tensor t = b;
            auto dst = t.mutable_grad();
            auto x = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * x[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    return make_result("scale", a.shape(), std::move(out), {a}, [a, s](const Tensor& o) {
        Tensor t = a;
        kernels::axpy(o.numel(), s, o.grad().data(), t.mutable_grad().data());
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
    return make_result("add_scalar", a.shape(), std::move(out), {a},
                       [a](const Tensor& o) { accumulate(a, o.grad()); });
}

Tensor square(const Tensor& a) {
    auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
    return make_result("square", a.shape(), std::move(out), {a}, [a](const Tensor& o) {
        Tensor t = a;
        auto dst = t.mutable_grad();
        auto g = o.grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += 2.0 * x[i] * g[i];
    });
}

Tensor abs(const Tensor& a) {
    auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(x[i]);
    return make_result("abs", a.shape(), std::move(out), {a}, [a](const Tensor& o) {
        Tensor t = a;
        auto dst = t.mutable_grad();
        auto g = o.grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += (x[i] > 0) ? g[i] : (x[i] < 0 ? -g[i] : 0.0);
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    return bmm(a, b, false);
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b) {
    if (a.rank() < 2 || a.rank() != b.rank())
        throw ShapeError("bmm: incompatible ranks " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t r = a.rank();
    for (std::size_t i = 0; i + 2 < r; ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeError("bmm: batch dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
    const std::size_t bk = trans_b ? b.dim(r - 1) : b.dim(r - 2);
    const std::size_t n = trans_b ? b.dim(r - 2) : b.dim(r - 1);
    if (bk != k)
        throw ShapeError("bmm: inner dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                         (trans_b ? " (b transposed)" : ""));
    const std::size_t batch = a.numel() / (m * k);
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(batch * m * n);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t g = 0; g < batch; ++g)
        kernels::gemm(false, trans_b, m, n, k, 1.0, A + g * m * k, k, B + g * k * n, trans_b ? k : n, 0.0,
                      out.data() + g * m * n, n);
    return make_result("bmm", std::move(out_shape), std::move(out), {a, b},
                       [a, b, trans_b, batch, m, n, k](const Tensor& o) {
                           const double* G = o.grad().data();
                           if (a.requires_grad()) {
                               Tensor t = a;
                               double* dA = t.mutable_grad().data();
                               const double* B = b.data().data();
                               for (std::size_t g = 0; g < batch; ++g)
                                   kernels::gemm(false, !trans_b, m, k, n, 1.0, G + g * m * n, n, B + g * k * n,
                                                 trans_b ? k : n, 1.0, dA + g * m * k, k);
                           }
                           if (b.requires_grad()) {
                               Tensor t = b;
                               double* dB = t.mutable_grad().data();
                               const double* A = a.data().data();
                               for (std::size_t g = 0; g < batch; ++g) {
                                   if (trans_b)
                                       kernels::gemm(true, false, n, k, m, 1.0, G + g * m * n, n, A + g * m * k, k,
                                                     1.0, dB + g * k * n, k);
                                   else
                                       kernels::gemm(true, false, k, n, m, 1.0, A + g * m * k, k, G + g * m * n, n,
                                                     1.0, dB + g * k * n, n);
                               }
                           }
                       });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (w.rank() != 2 || x.rank() < 1 || x.dim(x.rank() - 1) != w.dim(0))
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    const std::size_t in = w.dim(0), outd = w.dim(1);
    if (bias.defined() && (bias.numel() != outd))
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(w.shape()));
    const std::size_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = outd;
    std::vector<double> out(rows * outd);
    kernels::gemm(false, false, rows, outd, in, 1.0, x.data().data(), in, w.data().data(), outd, 0.0, out.data(), outd);
    if (bias.defined()) {
        const double* bb = bias.data().data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < outd; ++j) out[r * outd + j] += bb[j];
    }
    std::vector<Tensor> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    return make_result("linear", std::move(out_shape), std::move(out), std::move(inputs),
                       [x, w, bias, rows, in, outd](const Tensor& o) {
                           const double* G = o.grad().data();
                           if (x.requires_grad()) {
                               Tensor t = x;
                               kernels::gemm(false, true, rows, in, outd, 1.0, G, outd, w.data().data(), outd, 1.0,
                                             t.mutable_grad().data(), in);
                           }
                           if (w.requires_grad()) {
                               Tensor t = w;
                               kernels::gemm(true, false, in, outd, rows, 1.0, x.data().data(), in, G, outd, 1.0,
                                             t.mutable_grad().data(), outd);
                           }
                           if (bias.defined() && bias.requires_grad()) {
                               Tensor t = bias;
                               double* db = t.mutable_grad().data();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < outd; ++j) db[j] += G[r * outd + j];
                           }
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result("reshape", std::move(shape), std::move(out), {a},
                       [a](const Tensor& o) { accumulate(a, o.grad()); });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    const std::size_t rank = a.rank();
    if (axes.size() != rank) throw ShapeError("permute: axes count does not match rank of " + shape_str(a.shape()));
    std::vector<bool> seen(rank, false);
    for (std::size_t ax : axes) {
        if (ax >= rank || seen[ax]) throw ShapeError("permute: invalid axis order for " + shape_str(a.shape()));
        seen[ax] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = a.dim(axes[i]);
    std::vector<double> out(a.numel());
    permute_into(a.data().data(), a.shape(), axes, out.data());
    return make_result("permute", out_shape, std::move(out), {a}, [a, axes, out_shape](const Tensor& o) {
        if (!a.requires_grad()) return;
        std::vector<std::size_t> inverse(axes.size());
        for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = i;
        std::vector<double> back(o.numel());
        permute_into(o.grad().data(), out_shape, inverse, back.data());
        accumulate(a, back);
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
        for (std::size_t i = 0; i < first.size(); ++i)
            if (i != axis && p.dim(i) != first[i])
                throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()) +
                                 " on axis " + std::to_string(i));
        out_shape[axis] += p.dim(axis);
    }
    const AxisSplit s = split_at(out_shape, axis);
    std::vector<double> out(shape_numel(out_shape));
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) widths.push_back(p.dim(axis) * s.inner);
    const std::size_t row = s.len * s.inner;
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const double* src = parts[pi].data().data();
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(src + o * widths[pi], widths[pi], out.data() + o * row + offset);
        offset += widths[pi];
    }
    return make_result("concat", out_shape, std::move(out), parts, [parts, widths, row, s](const Tensor& o) {
        const double* G = o.grad().data();
        std::size_t offset = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            if (parts[pi].requires_grad()) {
                Tensor t = parts[pi];
                double* dst = t.mutable_grad().data();
                for (std::size_t oi = 0; oi < s.outer; ++oi)
                    for (std::size_t j = 0; j < widths[pi]; ++j) dst[oi * widths[pi] + j] += G[oi * row + offset + j];
            }
            offset += widths[pi];
        }
    });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    const AxisSplit s = split_at(a.shape(), axis);
    if (length == 0 || start + length > s.len)
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    std::vector<double> out(shape_numel(out_shape));
    const double* src = a.data().data();
    const std::size_t w = length * s.inner, row = s.len * s.inner, off = start * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) std::copy_n(src + o * row + off, w, out.data() + o * w);
    return make_result("slice", std::move(out_shape), std::move(out), {a}, [a, s, w, row, off](const Tensor& o) {
        if (!a.requires_grad()) return;
        Tensor t = a;
        double* dst = t.mutable_grad().data();
        const double* G = o.grad().data();
        for (std::size_t oi = 0; oi < s.outer; ++oi)
            for (std::size_t j = 0; j < w; ++j) dst[oi * row + off + j] += G[oi * w + j];
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& index, std::size_t k) {
    if (x.rank() < 2) throw ShapeError("gather_rows: need rank >= 2, got " + shape_str(x.shape()));
    const std::size_t groups = x.dim(0), n = x.dim(1);
    const std::size_t inner = x.numel() / (groups * n);
    if (index.size() != groups * k)
        throw ShapeError("gather_rows: index length " + std::to_string(index.size()) + " != groups*k for " +
                         shape_str(x.shape()));
    for (std::size_t idx : index)
        if (idx >= n) throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of range " + std::to_string(n));
    Shape out_shape = x.shape();
    out_shape[1] = k;
    std::vector<double> out(groups * k * inner);
    const double* src = x.data().data();
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t j = 0; j < k; ++j)
            std::copy_n(src + (g * n + index[g * k + j]) * inner, inner, out.data() + (g * k + j) * inner);
    return make_result("gather_rows", std::move(out_shape), std::move(out), {x},
                       [x, index, groups, n, k, inner](const Tensor& o) {
                           if (!x.requires_grad()) return;
                           Tensor t = x;
                           double* dst = t.mutable_grad().data();
                           const double* G = o.grad().data();
                           for (std::size_t g = 0; g < groups; ++g)
                               for (std::size_t j = 0; j < k; ++j)
                                   kernels::axpy(inner, 1.0, G + (g * k + j) * inner,
                                                 dst + (g * n + index[g * k + j]) * inner);
                       });
}

Tensor sum(const Tensor& a, std::size_t axis) {
    const AxisSplit s = split_at(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape.push_back(1);
    std::vector<double> out(s.outer * s.inner, 0.0);
    const double* src = a.data().data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t l = 0; l < s.len; ++l)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += src[(o * s.len + l) * s.inner + i];
    return make_result("sum", std::move(out_shape), std::move(out), {a}, [a, s](const Tensor& o) {
        if (!a.requires_grad()) return;
        Tensor t = a;
        double* dst = t.mutable_grad().data();
        const double* G = o.grad().data();
        for (std::size_t oi = 0; oi < s.outer; ++oi)
            for (std::size_t l = 0; l < s.len; ++l)
                for (std::size_t i = 0; i < s.inner; ++i) dst[(oi * s.len + l) * s.inner + i] += G[oi * s.inner + i];
    });
}

Tensor mean(const Tensor& a, std::size_t axis) { return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis))); }

Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return make_result("sum_all", {1}, {acc}, {a}, [a](const Tensor& o) {
        if (!a.requires_grad()) return;
        Tensor t = a;
        const double g = o.grad()[0];
        for (double& d : t.mutable_grad()) d += g;
    });
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor softmax(const Tensor& x, std::size_t axis) {
    const AxisSplit s = split_at(x.shape(), axis);
    std::vector<double> out(x.numel());
    const double* src = x.data().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double mx = src[base];
            for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, src[base + l * s.inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) {
                const double e = std::exp(src[base + l * s.inner] - mx);
                out[base + l * s.inner] = e;
                z += e;
            }
            const double inv = 1.0 / z;
            for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] *= inv;
        }
    }
    return make_result("softmax", x.shape(), std::move(out), {x}, [x, s](const Tensor& o) {
        if (!x.requires_grad()) return;
        Tensor t = x;
        double* dst = t.mutable_grad().data();
        const double* G = o.grad().data();
        const double* Y = o.data().data();
        for (std::size_t oi = 0; oi < s.outer; ++oi) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = oi * s.len * s.inner + i;
                double dotp = 0.0;
                for (std::size_t l = 0; l < s.len; ++l) dotp += G[base + l * s.inner] * Y[base + l * s.inner];
                for (std::size_t l = 0; l < s.len; ++l) {
                    const std::size_t at = base + l * s.inner;
                    dst[at] += Y[at] * (G[at] - dotp);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::size_t d = x.dim(x.rank() - 1);
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    const double* src = x.data().data();
    const double* gm = gamma.data().data();
    const double* bt = beta.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = src + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = gm[j] * h + bt[j];
        }
    }
    return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](const Tensor& o) {
                           const double* G = o.grad().data();
                           const double* gm = gamma.data().data();
                           if (gamma.requires_grad() || beta.requires_grad()) {
                               Tensor tg = gamma, tb = beta;
                               double* dg = gamma.requires_grad() ? tg.mutable_grad().data() : nullptr;
                               double* db = beta.requires_grad() ? tb.mutable_grad().data() : nullptr;
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j) {
                                       if (dg) dg[j] += G[r * d + j] * xhat[r * d + j];
                                       if (db) db[j] += G[r * d + j];
                                   }
                           }
                           if (x.requires_grad()) {
                               Tensor tx = x;
                               double* dx = tx.mutable_grad().data();
                               const double inv_d = 1.0 / static_cast<double>(d);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   double m1 = 0.0, m2 = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double dh = G[r * d + j] * gm[j];
                                       m1 += dh;
                                       m2 += dh * xhat[r * d + j];
                                   }
                                   m1 *= inv_d;
                                   m2 *= inv_d;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double dh = G[r * d + j] * gm[j];
                                       dx[r * d + j] += inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
                                   }
                               }
                           }
                       });
}

Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    auto src = x.data();
    std::vector<double> out(src.size());
    std::vector<double> th;
    const bool keep = grad_enabled() && x.requires_grad();
    if (keep) th.resize(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double v = src[i];
        const double t = std::tanh(c * (v + k * v * v * v));
        if (keep) th[i] = t;
        out[i] = 0.5 * v * (1.0 + t);
    }
    return make_result("gelu", x.shape(), std::move(out), {x}, [x, th = std::move(th)](const Tensor& o) {
        if (!x.requires_grad()) return;
        Tensor t = x;
        double* dst = t.mutable_grad().data();
        const double* G = o.grad().data();
        auto src = x.data();
        for (std::size_t i = 0; i < src.size(); ++i) {
            const double v = src[i];
            const double dv = 0.5 * (1.0 + th[i]) + 0.5 * v * (1.0 - th[i] * th[i]) * c * (1.0 + 3.0 * k * v * v);
            dst[i] += G[i] * dv;
        }
    });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: probability must lie in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    // one draw from rng seeds a cheap counter stream for the mask
    const std::uint64_t base = rng.next_u64();
    const auto cut = static_cast<std::uint64_t>(p * 0x1.0p53);
    std::vector<double> mask(x.numel());
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = (splitmix64(base + i) >> 11) < cut ? 0.0 : keep_scale;
    auto src = x.data();
    std::vector<double> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = src[i] * mask[i];
    return make_result("dropout", x.shape(), std::move(out), {x}, [x, mask = std::move(mask)](const Tensor& o) {
        if (!x.requires_grad()) return;
        Tensor t = x;
        double* dst = t.mutable_grad().data();
        const double* G = o.grad().data();
        for (std::size_t i = 0; i < mask.size(); ++i) dst[i] += G[i] * mask[i];
    });
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "mse_loss");
    auto p = pred.data(), t = target.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
    const double n = static_cast<double>(p.size());
    return make_result("mse_loss", {1}, {acc / n}, {pred, target}, [pred, target, n](const Tensor& o) {
        const double g = o.grad()[0] * 2.0 / n;
        auto p = pred.data(), t = target.data();
        if (pred.requires_grad()) {
            Tensor x = pred;
            auto d = x.mutable_grad();
            for (std::size_t i = 0; i < p.size(); ++i) d[i] += g * (p[i] - t[i]);
        }
        if (target.requires_grad()) {
            Tensor x = target;
            auto d = x.mutable_grad();
            for (std::size_t i = 0; i < p.size(); ++i) d[i] -= g * (p[i] - t[i]);
        }
    });
}

Tensor mae_loss(const Tensor& pred, const Tensor& target) { return mean_all(abs(sub(pred, target))); }

}  // namespace solarfuse
