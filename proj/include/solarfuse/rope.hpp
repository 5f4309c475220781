#pragma once

// Rotary positional encoding and the attention layers that use it.

#include <vector>

#include "solarfuse/rng.hpp"
#include "solarfuse/tensor.hpp"

namespace solarfuse::rope {

enum class FreqScheme {
    // theta_i = 10000^(-2(i-1)/d), for integer positions (hours).
    temporal,
    // linspace(1, max_freq / 2, d / 2) * pi, for continuous coordinates in [-1, 1].
    spatial,
};

// Channel-duplicated sin/cos tables, shape [..., N, dim] (constant, no grad).
struct RopeTables {
    Tensor sin;
    Tensor cos;
    std::size_t tokens() const { return sin.dim(sin.rank() - 2); }
    std::size_t dim() const { return sin.dim(sin.rank() - 1); }
};

// positions: [..., N, p_dims]. With p_dims > 1 the channels are split evenly,
// first block rotating by axis 0, next by axis 1, and so on.
RopeTables build_rope_tables(const Tensor& positions, std::size_t dim, double max_freq, FreqScheme scheme);
// Convenience: p_dims == 1 uses the temporal schedule, otherwise spatial.
RopeTables build_rope_tables(const Tensor& positions, std::size_t dim, double max_freq);

// Stacks two tables on the channel axis; leading shapes must match.
RopeTables concat_channels(const RopeTables& a, const RopeTables& b);

// (x1, x2, x3, x4, ...) -> (-x2, x1, -x4, x3, ...)
Tensor rotate_every_two(const Tensor& x);

// x * cos + rotate_every_two(x) * sin.
// x is [N, d], [G, N, d] or [G, N, H, d]; tables are [N, d] or [G', N, d] with G' in {1, G}.
Tensor apply_rope(const Tensor& x, const RopeTables& tables);

struct AttentionParams {
    Tensor to_q;      // [dim_q, heads * dim_head]
    Tensor to_kv;     // [dim_kv, 2 * heads * dim_head]
    Tensor to_out;    // [heads * dim_head, dim_q]
    Tensor out_bias;  // [dim_q]
    std::size_t heads = 1;
    std::size_t dim_head = 1;

    static AttentionParams init(std::size_t dim_q, std::size_t dim_kv, std::size_t heads, std::size_t dim_head,
                                Rng& rng, const std::string& prefix);
    std::vector<Tensor> parameters() const;
};

struct AttentionOptions {
    double dropout = 0.0;
    bool training = false;
    Rng* rng = nullptr;          // required when training with dropout > 0
    Tensor* weights = nullptr;   // receives softmax weights [B, H, Nq, Nk] if set
    Tensor* values = nullptr;    // receives projected values [B, H, Nk, dh] if set
};

// x: [B, N, d]. Queries and keys are rotated with the same tables.
Tensor rope_self_attention(const Tensor& x, const AttentionParams& params, const RopeTables& tables,
                           const AttentionOptions& options = {});

// q_tokens [B, Nq, dq] attend over kv_tokens [B, Nk, dkv].
Tensor cross_attention(const Tensor& q_tokens, const Tensor& kv_tokens, const AttentionParams& params,
                       const RopeTables& tables_q, const RopeTables& tables_kv, const AttentionOptions& options = {});

}  // namespace solarfuse::rope
