#pragma once

// The fusion forecaster: patch/MLP embeddings, residual VQ, RoPE encoders,
// cross-attention fusion and a temporal decoder.

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "solarfuse/container.hpp"
#include "solarfuse/data.hpp"
#include "solarfuse/rope.hpp"
#include "solarfuse/vq.hpp"

namespace solarfuse::model {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
    std::array<std::size_t, 2> patch_size{8, 8};
    std::array<std::size_t, 2> image_size{64, 64};
    std::size_t ctx_channels = 1;
    std::size_t ts_channels = 1;
    std::string pe_type = "rope";
    bool use_glu = true;
    std::string freq_type = "lucidrains";
    double max_freq = 128.0;
    double ctx_masking_ratio = 0.99;
    double ts_masking_ratio = 0.0;
    std::size_t dim = 64;
    std::size_t depth = 12;
    std::size_t heads = 8;
    std::size_t mlp_ratio = 4;
    std::size_t dim_head = 64;
    double dropout = 0.4;
    std::size_t num_mlp_heads = 1;
    std::size_t decoder_dim = 128;
    std::size_t decoder_depth = 4;
    std::size_t decoder_heads = 6;
    std::size_t decoder_dim_head = 128;
    bool vq_in_ts = true;
    bool vq_in_ctx = true;
    bool vq_in_guide = false;

    std::size_t t_in = 24;
    std::size_t t_out = 24;
    std::size_t aux_channels = data::kNwpFeatures.size();

    std::size_t vq_codebook_size = 128;
    std::size_t vq_stages = 2;
    double vq_decay = 0.99;
    double vq_eps = 1e-5;
    double vq_commitment = 0.25;
    std::size_t vq_dead_code_threshold = 100;
    bool vq_reseed_dead_codes = true;
    double commit_weight_ctx = 1.0;
    double commit_weight_ts = 1.0;

    // Modalities; use_ctx=false decodes the concatenated TS/NWP latents directly.
    bool use_ts = true;
    bool use_ctx = true;
    bool use_aux = true;

    std::size_t num_patches() const;
    std::size_t patch_len() const;
    std::size_t cat_dim() const;
    vq::VqOptions vq_options() const;
    // Throws ConfigError naming the first offending key.
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

// ---- layers -------------------------------------------------------------------

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out] or undefined
    static Linear init(std::size_t in, std::size_t out, Rng& rng, const std::string& name, bool bias = true);
    Tensor forward(const Tensor& x) const;
    void collect(std::vector<Tensor>& out) const;
};

struct LayerNorm {
    Tensor gamma, beta;
    static LayerNorm init(std::size_t d, const std::string& name);
    Tensor forward(const Tensor& x) const;
    void collect(std::vector<Tensor>& out) const;
};

struct Mode {
    bool training = false;
    double dropout = 0.0;
    Rng* rng = nullptr;
};

// Linear -> GELU (or GEGLU) -> dropout -> Linear -> dropout
struct FeedForward {
    Linear in, out;
    bool glu = false;
    static FeedForward init(std::size_t d, std::size_t hidden, bool glu, Rng& rng, const std::string& name);
    Tensor forward(const Tensor& x, const Mode& mode) const;
    void collect(std::vector<Tensor>& out) const;
};

// Linear -> GELU -> Linear
struct Mlp {
    Linear a, b;
    static Mlp init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, const std::string& name);
    Tensor forward(const Tensor& x) const;
    void collect(std::vector<Tensor>& out) const;
};

// Pre-norm self-attention block with RoPE.
struct Block {
    LayerNorm ln1, ln2;
    rope::AttentionParams attn;
    FeedForward ff;
    static Block init(std::size_t d, std::size_t heads, std::size_t dim_head, std::size_t hidden, bool glu, Rng& rng,
                      const std::string& name);
    Tensor forward(const Tensor& x, const rope::RopeTables& tables, const Mode& mode) const;
    void collect(std::vector<Tensor>& out) const;
};

struct Encoder {
    std::vector<Block> blocks;
    LayerNorm norm;
    static Encoder init(std::size_t d, std::size_t depth, std::size_t heads, std::size_t dim_head, std::size_t hidden,
                        bool glu, Rng& rng, const std::string& name);
    Tensor forward(const Tensor& x, const rope::RopeTables& tables, const Mode& mode) const;
    void collect(std::vector<Tensor>& out) const;
};

// q + CrossAttention(LN(q), LN(kv)), then a pre-norm feed-forward.
struct CrossBlock {
    LayerNorm ln_q, ln_kv, ln_ff;
    rope::AttentionParams attn;
    FeedForward ff;
    static CrossBlock init(std::size_t dq, std::size_t dkv, std::size_t heads, std::size_t dim_head,
                           std::size_t hidden, bool glu, Rng& rng, const std::string& name);
    Tensor forward(const Tensor& q, const Tensor& kv, const rope::RopeTables& tq, const rope::RopeTables& tk,
                   const Mode& mode) const;
    void collect(std::vector<Tensor>& out) const;
};

// ---- tensor plumbing -----------------------------------------------------------

// [B, T, C, H, W] -> [B*T, N_p, C*ph*pw], patches in row-major grid order.
Tensor patchify(const Tensor& x, const std::array<std::size_t, 2>& patch);
Tensor unpatchify(const Tensor& p, std::size_t batch, std::size_t channels, const std::array<std::size_t, 2>& image,
                  const std::array<std::size_t, 2>& patch);
// Patch centres [N_p, 2] as (x, y) in [-1, 1], y up.
Tensor patch_positions(const std::array<std::size_t, 2>& image, const std::array<std::size_t, 2>& patch);

struct MaskResult {
    Tensor tokens;                 // [G, K, L]
    Tensor positions;              // [N, p] when nothing was dropped, else [G, K, p]
    std::vector<std::size_t> keep; // [G * K], ascending per row
    std::size_t kept = 0;
};

// Training: r ~ U(0, max_ratio), floor(r N) tokens dropped per call, a fresh
// random subset per row. Inference or max_ratio 0 keeps everything.
MaskResult random_mask(const Tensor& tokens, const Tensor& positions, double max_ratio, Rng* rng, bool training);

struct Batch {
    Tensor x_ts;      // [B, T, C_ts]
    Tensor x_ctx;     // [B, T, C_ctx, H, W]
    Tensor x_aux;     // [B, T, C_aux]
    Tensor y;         // [B, T, C_ts]
    Tensor plant_xy;  // [B, 2] normalised (lon, lat)
    std::size_t size() const { return y.dim(0); }
};

Batch make_batch(std::span<const data::SampleWindow> windows, const ModelConfig& cfg);

// ---- network --------------------------------------------------------------------

enum class Branch { ctx, ts, aux };

// Frozen VQ decisions for finite-difference checks (inference forwards only).
struct ModelTrace {
    vq::VqTrace ctx, ts, aux;
};

struct ForwardOptions {
    bool training = false;
    Rng* rng = nullptr;  // dropout and masking; required when training
    vq::TraceMode trace_mode = vq::TraceMode::off;
    ModelTrace* trace = nullptr;
};

struct ForwardOutput {
    Tensor y_hat;      // [B, T_out, C_ts], unclamped
    Tensor commit;     // weighted commitment sum (no beta), scalar; zero when no VQ runs
    Tensor ctx_latent; // [B*T, K, d]
    Tensor ts_latent;  // [B, T, d]
    Tensor aux_latent; // [B, T, d]
    Tensor cat_latent; // [B, T, d_cat]
    Tensor mixed;      // [B, T*K, d]
    std::optional<vq::ResidualResult> ctx_vq, ts_vq, aux_vq;
};

class FusionModel {
public:
    FusionModel(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    // Every trainable tensor exactly once, in a fixed order.
    std::vector<Tensor> parameters() const;
    std::size_t parameter_count() const;

    ForwardOutput forward(const Batch& batch, const ForwardOptions& options) const;
    // Clamped to [0, 1], no gradients, no masking.
    std::vector<Tensor> predict(std::span<const data::SampleWindow> windows, std::size_t batch_size = 64) const;

    bool codebooks_ready() const;
    // Seeds any uninitialised codebook from this batch's embeddings.
    void init_codebooks(const Batch& batch, Rng& rng);
    // EMA step from a training forward.
    void update_codebooks(const ForwardOutput& out, Rng* reseed);

    const vq::ResidualVQ* vq(Branch b) const;

    std::vector<NamedTensor> param_state() const;
    std::vector<NamedTensor> vq_state() const;
    void load_state(const std::vector<NamedTensor>& params, const std::vector<NamedTensor>& vq);

private:
    using PreVqHook = std::function<void(Branch, const Tensor&)>;
    ForwardOutput run(const Batch& batch, const ForwardOptions& options, const PreVqHook& hook) const;
    Tensor quantize(Branch b, const Tensor& emb, const ForwardOptions& options, const PreVqHook& hook,
                    ForwardOutput& out, Tensor& commit) const;

    ModelConfig cfg_;
    Mlp ctx_embed_, ts_embed_, aux_embed_;
    Encoder vit_, ts_enc_, aux_enc_;
    CrossBlock fuse_;
    Mlp dec_in_;
    Encoder decoder_;
    Linear head_;
    std::optional<vq::ResidualVQ> ctx_vq_, ts_vq_, aux_vq_;
};

}  // namespace solarfuse::model
