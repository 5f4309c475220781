#include "solarfuse/optim.hpp"

#include <cmath>
#include <unordered_set>

namespace solarfuse {

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
    if (!(options_.lr > 0.0)) throw std::invalid_argument("AdamW: learning rate must be positive");
    std::unordered_set<const TensorImpl*> seen;
    for (const Tensor& p : params_) {
        if (!seen.insert(p.impl()).second)
            throw std::invalid_argument("AdamW: parameter '" + p.name() + "' registered twice");
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void AdamW::set_lr(double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("AdamW: learning rate must be positive");
    options_.lr = lr;
}

void AdamW::step() {
    ++step_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    const double decay = 1.0 - options_.lr * options_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        auto w = p.mutable_data();
        if (p.has_grad() && p.grad().size() != w.size())
            throw ShapeError("AdamW: gradient size mismatch for '" + p.name() + "'");
        auto g = p.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j];
            w[j] *= decay;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            w[j] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
        }
        check_finite(w, "AdamW update of '" + p.name() + "'");
    }
}

void AdamW::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

void AdamW::load_state(std::uint64_t step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    if (m.size() != params_.size() || v.size() != params_.size())
        throw ShapeError("AdamW::load_state: parameter count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (m[i].size() != params_[i].numel() || v[i].size() != params_[i].numel())
            throw ShapeError("AdamW::load_state: moment shape mismatch for '" + params_[i].name() + "'");
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
}

}  // namespace solarfuse
