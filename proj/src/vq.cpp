#include "solarfuse/vq.hpp"

#include <algorithm>
#include <numeric>

#include "solarfuse/kernels/kernels.hpp"

namespace solarfuse::vq {

Codebook::Codebook(std::size_t size, std::size_t dim, double decay, double eps, Rng& rng)
    : size_(size), dim_(dim), decay_(decay), eps_(eps) {
    if (size == 0 || dim == 0) throw ShapeError("codebook needs K > 0 and D > 0");
    if (decay < 0.0 || decay >= 1.0) throw std::invalid_argument("codebook decay must lie in [0, 1)");
    if (eps <= 0.0) throw std::invalid_argument("codebook eps must be positive");
    codes_ = Tensor::randn({size, dim}, rng, 1e-2);
    counts_.assign(size, 1.0);
    sums_.assign(codes_.data().begin(), codes_.data().end());
    idle_.assign(size, 0);
}

Codebook Codebook::from_codes(const Tensor& codes, double decay, double eps) {
    if (codes.rank() != 2) throw ShapeError("codebook codes must be [K, D], got " + shape_str(codes.shape()));
    Rng unused(0);
    Codebook cb(codes.dim(0), codes.dim(1), decay, eps, unused);
    cb.codes_ = codes.detach();
    cb.sums_.assign(codes.data().begin(), codes.data().end());
    cb.initialized_ = true;
    return cb;
}

void Codebook::init_from(const Tensor& z, Rng& rng) {
    if (z.dim(z.rank() - 1) != dim_)
        throw ShapeError("codebook init: expected rows of width " + std::to_string(dim_) + ", got " +
                         shape_str(z.shape()));
    const std::size_t n = z.numel() / dim_;
    std::vector<std::size_t> pick(size_);
    if (n >= size_) {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), 0);
        for (std::size_t i = 0; i < size_; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
        std::copy_n(all.begin(), size_, pick.begin());
    } else {
        for (auto& p : pick) p = rng.below(n);
    }
    std::vector<double> codes(size_ * dim_);
    for (std::size_t i = 0; i < size_; ++i)
        std::copy_n(z.data().begin() + pick[i] * dim_, dim_, codes.begin() + i * dim_);
    codes_ = Tensor::from({size_, dim_}, codes);
    sums_ = std::move(codes);
    counts_.assign(size_, 1.0);
    idle_.assign(size_, 0);
    initialized_ = true;
}

void Codebook::refresh_codes() {
    const double total = std::accumulate(counts_.begin(), counts_.end(), 0.0);
    std::vector<double> codes(size_ * dim_);
    for (std::size_t i = 0; i < size_; ++i) {
        const double smoothed = (counts_[i] + eps_) / (total + static_cast<double>(size_) * eps_) * total;
        for (std::size_t j = 0; j < dim_; ++j) codes[i * dim_ + j] = sums_[i * dim_ + j] / smoothed;
    }
    codes_ = Tensor::from({size_, dim_}, std::move(codes));
}

void Codebook::ema_update(const Tensor& z_e, const std::vector<std::size_t>& indices, Rng* reseed,
                          std::size_t dead_after) {
    if (z_e.dim(z_e.rank() - 1) != dim_)
        throw ShapeError("ema_update: expected rows of width " + std::to_string(dim_) + ", got " +
                         shape_str(z_e.shape()));
    const std::size_t n = z_e.numel() / dim_;
    if (indices.size() != n)
        throw ShapeError("ema_update: " + std::to_string(indices.size()) + " indices for " + std::to_string(n) +
                         " vectors");
    std::vector<double> count(size_, 0.0), batch_sum(size_ * dim_, 0.0);
    const double* z = z_e.data().data();
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t k = indices[r];
        if (k >= size_)
            throw std::out_of_range("ema_update: index " + std::to_string(k) + " out of range for K=" +
                                    std::to_string(size_));
        count[k] += 1.0;
        kernels::axpy(dim_, 1.0, z + r * dim_, batch_sum.data() + k * dim_);
    }
    const double g = decay_;
    for (std::size_t i = 0; i < size_; ++i) {
        counts_[i] = g * counts_[i] + (1.0 - g) * count[i];
        for (std::size_t j = 0; j < dim_; ++j)
            sums_[i * dim_ + j] = g * sums_[i * dim_ + j] + (1.0 - g) * batch_sum[i * dim_ + j];
        idle_[i] = count[i] > 0.0 ? 0 : idle_[i] + 1;
    }
    std::vector<std::size_t> dead;
    if (reseed) {
        for (std::size_t i = 0; i < size_; ++i)
            if (idle_[i] >= dead_after) dead.push_back(i);
        for (std::size_t i : dead) counts_[i] = 1.0;
    }
    refresh_codes();
    if (dead.empty()) return;
    const double total = std::accumulate(counts_.begin(), counts_.end(), 0.0);
    auto codes = codes_.mutable_data();
    for (std::size_t i : dead) {
        const std::size_t r = reseed->below(n);
        const double smoothed = (counts_[i] + eps_) / (total + static_cast<double>(size_) * eps_) * total;
        for (std::size_t j = 0; j < dim_; ++j) {
            codes[i * dim_ + j] = z[r * dim_ + j];
            sums_[i * dim_ + j] = z[r * dim_ + j] * smoothed;
        }
        idle_[i] = 0;
    }
}

std::vector<NamedTensor> Codebook::state(const std::string& prefix) const {
    return {{prefix + ".codes", codes_},
            {prefix + ".counts", Tensor::from({size_}, counts_)},
            {prefix + ".sums", Tensor::from({size_, dim_}, sums_)}};
}

void Codebook::load_state(const std::vector<NamedTensor>& records, const std::string& prefix) {
    auto find = [&](const std::string& name) -> const Tensor& {
        for (const auto& r : records)
            if (r.name == name) return r.tensor;
        throw FormatError("missing codebook record '" + name + "'");
    };
    const Tensor& codes = find(prefix + ".codes");
    const Tensor& counts = find(prefix + ".counts");
    const Tensor& sums = find(prefix + ".sums");
    if (codes.shape() != Shape{size_, dim_} || sums.shape() != Shape{size_, dim_} || counts.shape() != Shape{size_})
        throw FormatError("codebook record '" + prefix + "' has shape " + shape_str(codes.shape()) +
                          ", expected " + shape_str({size_, dim_}));
    codes_ = codes.detach();
    counts_.assign(counts.data().begin(), counts.data().end());
    sums_.assign(sums.data().begin(), sums.data().end());
    idle_.assign(size_, 0);
    initialized_ = true;
}

QuantizeResult quantize(const Codebook& cb, const Tensor& z_e) {
    if (cb.size() == 0) throw std::invalid_argument("quantize: empty codebook");
    const std::size_t d = cb.dim();
    if (z_e.rank() == 0 || z_e.dim(z_e.rank() - 1) != d)
        throw ShapeError("quantize: input " + shape_str(z_e.shape()) + " does not match code width " +
                         std::to_string(d));
    const std::size_t n = z_e.numel() / d;
    QuantizeResult res;
    res.indices.resize(n);
    std::vector<double> zq(n * d);
    const double* z = z_e.data().data();
    const double* codes = cb.codes().data().data();
    for (std::size_t r = 0; r < n; ++r) {
        double dist;
        const std::size_t k = kernels::nearest_row(z + r * d, codes, cb.size(), d, &dist);
        res.indices[r] = k;
        std::copy_n(codes + k * d, d, zq.begin() + r * d);
    }
    res.z_q = Tensor::from(z_e.shape(), std::move(zq));
    res.commit_loss = scale(sum_all(square(sub(z_e, res.z_q))), 1.0 / static_cast<double>(n));
    return res;
}

Tensor straight_through(const Tensor& z_e, const Tensor& z_q) {
    if (z_e.shape() != z_q.shape())
        throw ShapeError("straight_through: " + shape_str(z_e.shape()) + " vs " + shape_str(z_q.shape()));
    std::vector<double> out(z_q.data().begin(), z_q.data().end());
    return make_result("straight_through", z_e.shape(), std::move(out), {z_e}, [z_e](const Tensor& o) {
        if (!z_e.requires_grad()) return;
        Tensor t = z_e;
        kernels::axpy(o.numel(), 1.0, o.grad().data(), t.mutable_grad().data());
    });
}

ResidualVQ::ResidualVQ(std::size_t dim, const VqOptions& options, Rng& rng) : commitment_(options.commitment) {
    if (options.stages == 0) throw std::invalid_argument("residual VQ needs at least one stage");
    for (std::size_t s = 0; s < options.stages; ++s)
        stages_.emplace_back(options.codebook_size, dim, options.decay, options.eps, rng);
}

ResidualVQ::ResidualVQ(std::vector<Codebook> stages, double commitment)
    : stages_(std::move(stages)), commitment_(commitment) {
    if (stages_.empty()) throw std::invalid_argument("residual VQ needs at least one stage");
    for (const auto& s : stages_)
        if (s.dim() != stages_.front().dim()) throw ShapeError("residual VQ stages must share D");
}

bool ResidualVQ::initialized() const {
    return std::all_of(stages_.begin(), stages_.end(), [](const Codebook& c) { return c.initialized(); });
}

namespace {
void check_input(const Tensor& z_e, std::size_t d) {
    if (z_e.rank() == 0 || z_e.dim(z_e.rank() - 1) != d)
        throw ShapeError("residual VQ: input " + shape_str(z_e.shape()) + " does not match code width " +
                         std::to_string(d));
}
}  // namespace

void ResidualVQ::initialize(const Tensor& z_e, Rng& rng) {
    if (stages_.empty()) throw std::invalid_argument("residual VQ needs at least one stage");
    check_input(z_e, dim());
    NoGradGuard ng;
    Tensor residual = z_e.detach();
    for (auto& cb : stages_) {
        if (!cb.initialized()) cb.init_from(residual, rng);
        residual = sub(residual, quantize(cb, residual).z_q);
    }
}

ResidualResult ResidualVQ::forward(const Tensor& z_e, bool training, Rng* rng, VqTrace* trace, TraceMode mode) {
    if (training && mode != TraceMode::replay && !initialized()) {
        if (!rng) throw std::invalid_argument("residual VQ: codebook initialisation needs an rng");
        initialize(z_e, *rng);
    }
    return apply(z_e, trace, mode);
}

ResidualResult ResidualVQ::apply(const Tensor& z_e, VqTrace* trace, TraceMode mode) const {
    if (stages_.empty()) throw std::invalid_argument("residual VQ needs at least one stage");
    const std::size_t d = dim();
    check_input(z_e, d);
    if (mode != TraceMode::off && !trace) throw std::invalid_argument("residual VQ: trace mode without a trace");
    if (mode == TraceMode::replay && trace->indices.size() != stages_.size())
        throw std::invalid_argument("residual VQ: replay trace has the wrong stage count");
    const std::size_t n = z_e.numel() / d;

    ResidualResult res;
    std::vector<double> total(z_e.numel(), 0.0);
    Tensor commit;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        // r_s = z_e - sum of earlier (constant) codes
        Tensor residual = s == 0 ? z_e : sub(z_e, Tensor::from(z_e.shape(), total));
        const Codebook& cb = stages_[s];
        Tensor stage_q;
        std::vector<std::size_t> idx;
        Tensor stage_commit;
        if (mode == TraceMode::replay) {
            idx = trace->indices[s];
            if (idx.size() != n) throw std::invalid_argument("residual VQ: replay trace has the wrong size");
            std::vector<double> q(n * d);
            const double* codes = cb.codes().data().data();
            for (std::size_t r = 0; r < n; ++r) std::copy_n(codes + idx[r] * d, d, q.begin() + r * d);
            stage_q = Tensor::from(z_e.shape(), std::move(q));
            stage_commit = scale(sum_all(square(sub(residual, stage_q))), 1.0 / static_cast<double>(n));
        } else {
            auto qr = quantize(cb, residual);
            stage_q = qr.z_q;
            idx = std::move(qr.indices);
            stage_commit = qr.commit_loss;
        }
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += stage_q.data()[i];
        commit = s == 0 ? stage_commit : add(commit, stage_commit);
        res.residuals.push_back(residual.detach());
        res.indices.push_back(std::move(idx));
    }
    res.z_q = Tensor::from(z_e.shape(), total);
    res.commit_loss = commit;
    if (mode == TraceMode::replay) {
        if (trace->offset.size() != total.size())
            throw std::invalid_argument("residual VQ: replay offset has the wrong size");
        res.output = add(z_e, Tensor::from(z_e.shape(), trace->offset));
    } else {
        res.output = straight_through(z_e, res.z_q);
    }
    if (mode == TraceMode::record) {
        trace->indices = res.indices;
        trace->offset.resize(total.size());
        for (std::size_t i = 0; i < total.size(); ++i) trace->offset[i] = total[i] - z_e.data()[i];
    }
    return res;
}

void ResidualVQ::update(const ResidualResult& result, Rng* rng, const VqOptions& options) {
    if (result.residuals.size() != stages_.size())
        throw std::invalid_argument("residual VQ update: result has the wrong stage count");
    for (std::size_t s = 0; s < stages_.size(); ++s)
        stages_[s].ema_update(result.residuals[s], result.indices[s], options.reseed_dead_codes ? rng : nullptr,
                              options.dead_code_threshold);
}

std::vector<NamedTensor> ResidualVQ::state(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        auto part = stages_[s].state(prefix + "vq.stage" + std::to_string(s));
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

void ResidualVQ::load_state(const std::vector<NamedTensor>& records, const std::string& prefix) {
    for (std::size_t s = 0; s < stages_.size(); ++s)
        stages_[s].load_state(records, prefix + "vq.stage" + std::to_string(s));
}

}  // namespace solarfuse::vq
