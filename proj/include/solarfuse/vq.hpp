#pragma once

// Vector quantization with EMA-learned codebooks and residual stages.

#include <cstddef>
#include <vector>

#include "solarfuse/container.hpp"
#include "solarfuse/rng.hpp"
#include "solarfuse/tensor.hpp"

namespace solarfuse::vq {

struct VqOptions {
    std::size_t codebook_size = 128;
    std::size_t stages = 2;
    double decay = 0.99;
    double eps = 1e-5;
    double commitment = 0.25;
    // A code unassigned for this many consecutive updates is reseeded.
    std::size_t dead_code_threshold = 100;
    bool reseed_dead_codes = true;
};

class Codebook {
public:
    Codebook() = default;
    // Codes start as small Gaussian noise until init_from() sees real data.
    Codebook(std::size_t size, std::size_t dim, double decay, double eps, Rng& rng);
    // Explicit codes; counts start at 1 and sums equal the codes.
    static Codebook from_codes(const Tensor& codes, double decay, double eps);

    std::size_t size() const { return size_; }
    std::size_t dim() const { return dim_; }
    double decay() const { return decay_; }
    double eps() const { return eps_; }
    bool initialized() const { return initialized_; }

    const Tensor& codes() const { return codes_; }
    const std::vector<double>& counts() const { return counts_; }
    const std::vector<double>& sums() const { return sums_; }
    const std::vector<std::size_t>& idle() const { return idle_; }

    // Rows sampled from z [n, D] (without replacement when n >= K).
    void init_from(const Tensor& z, Rng& rng);
    // With reseed set, codes idle for `dead_after` updates take a random row of z_e.
    void ema_update(const Tensor& z_e, const std::vector<std::size_t>& indices, Rng* reseed = nullptr,
                    std::size_t dead_after = 100);

    std::vector<NamedTensor> state(const std::string& prefix) const;
    // Accepts the records produced by state(); throws FormatError when any is missing.
    void load_state(const std::vector<NamedTensor>& records, const std::string& prefix);

private:
    void refresh_codes();

    std::size_t size_ = 0;
    std::size_t dim_ = 0;
    double decay_ = 0.99;
    double eps_ = 1e-5;
    bool initialized_ = false;
    Tensor codes_;
    std::vector<double> counts_;
    std::vector<double> sums_;
    std::vector<std::size_t> idle_;
};

struct QuantizeResult {
    Tensor z_q;                         // selected codes, no history
    std::vector<std::size_t> indices;
    Tensor commit_loss;                 // mean_i ||z_e_i - sg(e_{k_i})||^2
};

QuantizeResult quantize(const Codebook& cb, const Tensor& z_e);

// Forward value z_q, identity Jacobian to z_e.
Tensor straight_through(const Tensor& z_e, const Tensor& z_q);

inline void ema_update(Codebook& cb, const Tensor& z_e, const std::vector<std::size_t>& indices) {
    cb.ema_update(z_e, indices);
}

// Records quantization choices at one point and reuses them, so the
// quantizer is piecewise smooth for finite-difference checks.
struct VqTrace {
    std::vector<std::vector<std::size_t>> indices;
    std::vector<double> offset;  // z_q_total - z_e at the recording point
};
enum class TraceMode { off, record, replay };

struct ResidualResult {
    Tensor output;                 // straight-through z_q_total
    Tensor z_q;                    // z_q_total, no history
    std::vector<std::vector<std::size_t>> indices;
    Tensor commit_loss;            // sum over stages, unweighted
    std::vector<Tensor> residuals; // stage inputs, no history (for EMA)
};

class ResidualVQ {
public:
    ResidualVQ() = default;
    ResidualVQ(std::size_t dim, const VqOptions& options, Rng& rng);
    explicit ResidualVQ(std::vector<Codebook> stages, double commitment = 0.25);

    std::size_t stages() const { return stages_.size(); }
    std::size_t dim() const { return stages_.empty() ? 0 : stages_.front().dim(); }
    double commitment() const { return commitment_; }
    Codebook& stage(std::size_t s) { return stages_.at(s); }
    const Codebook& stage(std::size_t s) const { return stages_.at(s); }

    bool initialized() const;
    // Seeds every unseen stage from the residuals of z_e [..., D].
    void initialize(const Tensor& z_e, Rng& rng);
    // Pure quantization; never touches the codebooks.
    ResidualResult apply(const Tensor& z_e, VqTrace* trace = nullptr, TraceMode mode = TraceMode::off) const;
    // apply(), after initialize() when training.
    ResidualResult forward(const Tensor& z_e, bool training, Rng* rng = nullptr, VqTrace* trace = nullptr,
                           TraceMode mode = TraceMode::off);
    void update(const ResidualResult& result, Rng* rng, const VqOptions& options);

    std::vector<NamedTensor> state(const std::string& prefix) const;
    void load_state(const std::vector<NamedTensor>& records, const std::string& prefix);

private:
    std::vector<Codebook> stages_;
    double commitment_ = 0.25;
};

}  // namespace solarfuse::vq
