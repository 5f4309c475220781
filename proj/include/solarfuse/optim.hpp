#pragma once

#include <cstdint>
#include <vector>

#include "solarfuse/tensor.hpp"

namespace solarfuse {

struct AdamWOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

// AdamW with decoupled weight decay. Moments are kept per registered parameter.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWOptions options);

    // One update from the gradients currently stored on the parameters.
    // Parameters without a gradient are treated as having a zero gradient.
    void step();
    void zero_grad();

    std::uint64_t step_count() const { return step_; }
    const AdamWOptions& options() const { return options_; }
    void set_lr(double lr);
    const std::vector<Tensor>& params() const { return params_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    // Restores state saved from another run; shapes must match.
    void load_state(std::uint64_t step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

private:
    std::vector<Tensor> params_;
    AdamWOptions options_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::uint64_t step_ = 0;
};

}  // namespace solarfuse
