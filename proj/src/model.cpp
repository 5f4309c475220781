#include "solarfuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace solarfuse::model {

using json = nlohmann::json;

// ---- config -----------------------------------------------------------------------

std::size_t ModelConfig::num_patches() const {
    return (image_size[0] / patch_size[0]) * (image_size[1] / patch_size[1]);
}

std::size_t ModelConfig::patch_len() const { return ctx_channels * patch_size[0] * patch_size[1]; }

std::size_t ModelConfig::cat_dim() const { return dim * ((use_ts ? 1 : 0) + (use_aux ? 1 : 0)); }

vq::VqOptions ModelConfig::vq_options() const {
    vq::VqOptions o;
    o.codebook_size = vq_codebook_size;
    o.stages = vq_stages;
    o.decay = vq_decay;
    o.eps = vq_eps;
    o.commitment = vq_commitment;
    o.dead_code_threshold = vq_dead_code_threshold;
    o.reseed_dead_codes = vq_reseed_dead_codes;
    return o;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
    for (int a = 0; a < 2; ++a) {
        if (patch_size[a] == 0) fail("patch_size", "must be positive");
        if (image_size[a] == 0) fail("image_size", "must be positive");
        if (image_size[a] % patch_size[a] != 0) fail("image_size", "not divisible by patch_size");
    }
    if (ctx_channels == 0) fail("ctx_channels", "must be positive");
    if (ts_channels == 0) fail("ts_channels", "must be positive");
    if (pe_type != "rope") fail("pe_type", "only 'rope' is supported");
    if (freq_type != "lucidrains") fail("freq_type", "only 'lucidrains' is supported");
    if (!(max_freq > 0.0)) fail("max_freq", "must be positive");
    if (!(ctx_masking_ratio >= 0.0 && ctx_masking_ratio < 1.0)) fail("ctx_masking_ratio", "must be in [0, 1)");
    if (!(ts_masking_ratio >= 0.0 && ts_masking_ratio < 1.0)) fail("ts_masking_ratio", "must be in [0, 1)");
    if (dim == 0 || dim % 2 != 0) fail("dim", "must be even and positive");
    if (depth == 0) fail("depth", "must be positive");
    if (heads == 0) fail("heads", "must be positive");
    if (mlp_ratio == 0) fail("mlp_ratio", "must be positive");
    // spatial RoPE splits channels over two axes; the fusion tables split once more by time
    if (dim_head == 0 || dim_head % 4 != 0) fail("dim_head", "must be a positive multiple of 4");
    if (use_ctx && dim_head % 8 != 0) fail("dim_head", "must be a multiple of 8 when context fusion is on");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout", "must be in [0, 1)");
    if (num_mlp_heads != 1) fail("num_mlp_heads", "only a single head is supported");
    if (decoder_dim == 0) fail("decoder_dim", "must be positive");
    if (decoder_depth == 0) fail("decoder_depth", "must be positive");
    if (decoder_heads == 0) fail("decoder_heads", "must be positive");
    if (decoder_dim_head == 0 || decoder_dim_head % 2 != 0) fail("decoder_dim_head", "must be even and positive");
    if (t_in == 0) fail("t_in", "must be positive");
    if (t_in != t_out) fail("t_out", "must equal t_in so the modalities align hour by hour");
    if (use_aux && aux_channels == 0) fail("aux_channels", "must be positive");
    if (!use_ts && !use_aux) fail("use_ts", "at least one of use_ts and use_aux is required");
    if (vq_codebook_size == 0) fail("vq_codebook_size", "must be positive");
    if (vq_stages == 0) fail("vq_stages", "must be positive");
    if (!(vq_decay >= 0.0 && vq_decay < 1.0)) fail("vq_decay", "must be in [0, 1)");
    if (!(vq_eps > 0.0)) fail("vq_eps", "must be positive");
    if (!(vq_commitment >= 0.0)) fail("vq_commitment", "must be non-negative");
    if (!(commit_weight_ctx >= 0.0)) fail("commit_weight_ctx", "must be non-negative");
    if (!(commit_weight_ts >= 0.0)) fail("commit_weight_ts", "must be non-negative");
}

json ModelConfig::to_json() const {
    return {{"patch_size", patch_size},
            {"image_size", image_size},
            {"ctx_channels", ctx_channels},
            {"ts_channels", ts_channels},
            {"pe_type", pe_type},
            {"use_glu", use_glu},
            {"freq_type", freq_type},
            {"max_freq", max_freq},
            {"ctx_masking_ratio", ctx_masking_ratio},
            {"ts_masking_ratio", ts_masking_ratio},
            {"dim", dim},
            {"depth", depth},
            {"heads", heads},
            {"mlp_ratio", mlp_ratio},
            {"dim_head", dim_head},
            {"dropout", dropout},
            {"num_mlp_heads", num_mlp_heads},
            {"decoder_dim", decoder_dim},
            {"decoder_depth", decoder_depth},
            {"decoder_heads", decoder_heads},
            {"decoder_dim_head", decoder_dim_head},
            {"vq_in_ts", vq_in_ts},
            {"vq_in_ctx", vq_in_ctx},
            {"vq_in_guide", vq_in_guide},
            {"t_in", t_in},
            {"t_out", t_out},
            {"aux_channels", aux_channels},
            {"vq_codebook_size", vq_codebook_size},
            {"vq_stages", vq_stages},
            {"vq_decay", vq_decay},
            {"vq_eps", vq_eps},
            {"vq_commitment", vq_commitment},
            {"vq_dead_code_threshold", vq_dead_code_threshold},
            {"vq_reseed_dead_codes", vq_reseed_dead_codes},
            {"commit_weight_ctx", commit_weight_ctx},
            {"commit_weight_ts", commit_weight_ts},
            {"use_ts", use_ts},
            {"use_ctx", use_ctx},
            {"use_aux", use_aux}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    const json ref = c.to_json();
    for (const auto& [k, v] : j.items())
        if (!ref.contains(k)) throw ConfigError(k + ": unknown model config key");
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const json::exception& e) {
            throw ConfigError(std::string(key) + ": " + e.what());
        }
    };
    get("patch_size", c.patch_size);
    get("image_size", c.image_size);
    get("ctx_channels", c.ctx_channels);
    get("ts_channels", c.ts_channels);
    get("pe_type", c.pe_type);
    get("use_glu", c.use_glu);
    get("freq_type", c.freq_type);
    get("max_freq", c.max_freq);
    get("ctx_masking_ratio", c.ctx_masking_ratio);
    get("ts_masking_ratio", c.ts_masking_ratio);
    get("dim", c.dim);
    get("depth", c.depth);
    get("heads", c.heads);
    get("mlp_ratio", c.mlp_ratio);
    get("dim_head", c.dim_head);
    get("dropout", c.dropout);
    get("num_mlp_heads", c.num_mlp_heads);
    get("decoder_dim", c.decoder_dim);
    get("decoder_depth", c.decoder_depth);
    get("decoder_heads", c.decoder_heads);
    get("decoder_dim_head", c.decoder_dim_head);
    get("vq_in_ts", c.vq_in_ts);
    get("vq_in_ctx", c.vq_in_ctx);
    get("vq_in_guide", c.vq_in_guide);
    get("t_in", c.t_in);
    get("t_out", c.t_out);
    get("aux_channels", c.aux_channels);
    get("vq_codebook_size", c.vq_codebook_size);
    get("vq_stages", c.vq_stages);
    get("vq_decay", c.vq_decay);
    get("vq_eps", c.vq_eps);
    get("vq_commitment", c.vq_commitment);
    get("vq_dead_code_threshold", c.vq_dead_code_threshold);
    get("vq_reseed_dead_codes", c.vq_reseed_dead_codes);
    get("commit_weight_ctx", c.commit_weight_ctx);
    get("commit_weight_ts", c.commit_weight_ts);
    get("use_ts", c.use_ts);
    get("use_ctx", c.use_ctx);
    get("use_aux", c.use_aux);
    return c;
}

// ---- layers -----------------------------------------------------------------------

namespace {

Tensor param(Tensor t, const std::string& name) {
    t.set_requires_grad(true);
    t.set_name(name);
    return t;
}

}  // namespace

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng, const std::string& name, bool bias) {
    Linear l;
    const double sd = std::sqrt(2.0 / static_cast<double>(in + out));
    l.w = param(Tensor::randn({in, out}, rng, sd), name + ".w");
    if (bias) l.b = param(Tensor::zeros({out}), name + ".b");
    return l;
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, w, b); }

void Linear::collect(std::vector<Tensor>& out) const {
    out.push_back(w);
    if (b.defined()) out.push_back(b);
}

LayerNorm LayerNorm::init(std::size_t d, const std::string& name) {
    return {param(Tensor::full({d}, 1.0), name + ".gamma"), param(Tensor::zeros({d}), name + ".beta")};
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void LayerNorm::collect(std::vector<Tensor>& out) const {
    out.push_back(gamma);
    out.push_back(beta);
}

namespace {
Tensor maybe_dropout(const Tensor& x, const Mode& m) {
    if (!m.training || m.dropout <= 0.0) return x;
    if (!m.rng) throw std::invalid_argument("dropout in training needs an rng");
    return dropout(x, m.dropout, true, *m.rng);
}
}  // namespace

FeedForward FeedForward::init(std::size_t d, std::size_t hidden, bool glu, Rng& rng, const std::string& name) {
    FeedForward f;
    f.glu = glu;
    f.in = Linear::init(d, glu ? 2 * hidden : hidden, rng, name + ".in");
    f.out = Linear::init(hidden, d, rng, name + ".out");
    return f;
}

Tensor FeedForward::forward(const Tensor& x, const Mode& mode) const {
    Tensor h = in.forward(x);
    if (glu) {
        const std::size_t axis = h.rank() - 1, hidden = h.dim(axis) / 2;
        h = mul(slice(h, axis, 0, hidden), gelu(slice(h, axis, hidden, hidden)));
    } else {
        h = gelu(h);
    }
    return maybe_dropout(out.forward(maybe_dropout(h, mode)), mode);
}

void FeedForward::collect(std::vector<Tensor>& o) const {
    in.collect(o);
    out.collect(o);
}

Mlp Mlp::init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, const std::string& name) {
    return {Linear::init(in, hidden, rng, name + ".0"), Linear::init(hidden, out, rng, name + ".1")};
}

Tensor Mlp::forward(const Tensor& x) const { return b.forward(gelu(a.forward(x))); }

void Mlp::collect(std::vector<Tensor>& o) const {
    a.collect(o);
    b.collect(o);
}

Block Block::init(std::size_t d, std::size_t heads, std::size_t dim_head, std::size_t hidden, bool glu, Rng& rng,
                  const std::string& name) {
    Block b;
    b.ln1 = LayerNorm::init(d, name + ".ln1");
    b.attn = rope::AttentionParams::init(d, d, heads, dim_head, rng, name + ".attn");
    b.ln2 = LayerNorm::init(d, name + ".ln2");
    b.ff = FeedForward::init(d, hidden, glu, rng, name + ".ff");
    return b;
}

Tensor Block::forward(const Tensor& x, const rope::RopeTables& tables, const Mode& mode) const {
    rope::AttentionOptions ao;
    ao.dropout = mode.dropout;
    ao.training = mode.training;
    ao.rng = mode.rng;
    Tensor h = add(x, rope::rope_self_attention(ln1.forward(x), attn, tables, ao));
    return add(h, ff.forward(ln2.forward(h), mode));
}

void Block::collect(std::vector<Tensor>& o) const {
    ln1.collect(o);
    for (const auto& p : attn.parameters()) o.push_back(p);
    ln2.collect(o);
    ff.collect(o);
}

Encoder Encoder::init(std::size_t d, std::size_t depth, std::size_t heads, std::size_t dim_head, std::size_t hidden,
                      bool glu, Rng& rng, const std::string& name) {
    Encoder e;
    for (std::size_t i = 0; i < depth; ++i)
        e.blocks.push_back(Block::init(d, heads, dim_head, hidden, glu, rng, name + ".blocks." + std::to_string(i)));
    e.norm = LayerNorm::init(d, name + ".norm");
    return e;
}

Tensor Encoder::forward(const Tensor& x, const rope::RopeTables& tables, const Mode& mode) const {
    Tensor h = x;
    for (const auto& b : blocks) h = b.forward(h, tables, mode);
    return norm.forward(h);
}

void Encoder::collect(std::vector<Tensor>& o) const {
    for (const auto& b : blocks) b.collect(o);
    norm.collect(o);
}

CrossBlock CrossBlock::init(std::size_t dq, std::size_t dkv, std::size_t heads, std::size_t dim_head,
                            std::size_t hidden, bool glu, Rng& rng, const std::string& name) {
    CrossBlock c;
    c.ln_q = LayerNorm::init(dq, name + ".ln_q");
    c.ln_kv = LayerNorm::init(dkv, name + ".ln_kv");
    c.attn = rope::AttentionParams::init(dq, dkv, heads, dim_head, rng, name + ".attn");
    c.ln_ff = LayerNorm::init(dq, name + ".ln_ff");
    c.ff = FeedForward::init(dq, hidden, glu, rng, name + ".ff");
    return c;
}

Tensor CrossBlock::forward(const Tensor& q, const Tensor& kv, const rope::RopeTables& tq, const rope::RopeTables& tk,
                           const Mode& mode) const {
    rope::AttentionOptions ao;
    ao.dropout = mode.dropout;
    ao.training = mode.training;
    ao.rng = mode.rng;
    Tensor h = add(q, rope::cross_attention(ln_q.forward(q), ln_kv.forward(kv), attn, tq, tk, ao));
    return add(h, ff.forward(ln_ff.forward(h), mode));
}

void CrossBlock::collect(std::vector<Tensor>& o) const {
    ln_q.collect(o);
    ln_kv.collect(o);
    for (const auto& p : attn.parameters()) o.push_back(p);
    ln_ff.collect(o);
    ff.collect(o);
}

// ---- plumbing -------------------------------------------------------------------------

Tensor patchify(const Tensor& x, const std::array<std::size_t, 2>& patch) {
    if (x.rank() != 5) throw ShapeError("patchify: expected [B, T, C, H, W], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), H = x.dim(3), W = x.dim(4);
    const auto [ph, pw] = patch;
    if (ph == 0 || pw == 0 || H % ph != 0 || W % pw != 0)
        throw ShapeError("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                         " is not divisible by patch " + std::to_string(ph) + "x" + std::to_string(pw));
    const std::size_t nh = H / ph, nw = W / pw;
    Tensor r = reshape(x, {B * T, C, nh, ph, nw, pw});
    r = permute(r, {0, 2, 4, 1, 3, 5});
    return reshape(r, {B * T, nh * nw, C * ph * pw});
}

Tensor unpatchify(const Tensor& p, std::size_t batch, std::size_t channels, const std::array<std::size_t, 2>& image,
                  const std::array<std::size_t, 2>& patch) {
    const auto [H, W] = image;
    const auto [ph, pw] = patch;
    if (p.rank() != 3 || batch == 0 || p.dim(0) % batch != 0 || H % ph != 0 || W % pw != 0 ||
        p.dim(1) != (H / ph) * (W / pw) || p.dim(2) != channels * ph * pw)
        throw ShapeError("unpatchify: tokens " + shape_str(p.shape()) + " do not fit the image layout");
    const std::size_t G = p.dim(0), nh = H / ph, nw = W / pw;
    Tensor r = reshape(p, {G, nh, nw, channels, ph, pw});
    r = permute(r, {0, 3, 1, 4, 2, 5});
    return reshape(r, {batch, G / batch, channels, H, W});
}

Tensor patch_positions(const std::array<std::size_t, 2>& image, const std::array<std::size_t, 2>& patch) {
    const std::size_t nh = image[0] / patch[0], nw = image[1] / patch[1];
    std::vector<double> pos;
    pos.reserve(nh * nw * 2);
    for (std::size_t i = 0; i < nh; ++i)
        for (std::size_t j = 0; j < nw; ++j) {
            pos.push_back(-1.0 + (2.0 * static_cast<double>(j) + 1.0) / static_cast<double>(nw));
            pos.push_back(1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(nh));
        }
    return Tensor::from({nh * nw, 2}, std::move(pos));
}

MaskResult random_mask(const Tensor& tokens, const Tensor& positions, double max_ratio, Rng* rng, bool training) {
    if (!(max_ratio >= 0.0 && max_ratio < 1.0)) throw std::invalid_argument("random_mask: max_ratio must be in [0, 1)");
    if (tokens.rank() != 3) throw ShapeError("random_mask: tokens must be [G, N, L], got " + shape_str(tokens.shape()));
    const std::size_t G = tokens.dim(0), N = tokens.dim(1);
    if (positions.rank() != 2 || positions.dim(0) != N)
        throw ShapeError("random_mask: positions " + shape_str(positions.shape()) + " do not match " +
                         std::to_string(N) + " tokens");
    MaskResult m;
    std::size_t drop = 0;
    if (training && max_ratio > 0.0) {
        if (!rng) throw std::invalid_argument("random_mask: training needs an rng");
        const double r = rng->uniform(0.0, max_ratio);
        drop = static_cast<std::size_t>(std::floor(r * static_cast<double>(N)));
    }
    m.kept = N - drop;
    if (drop == 0) {
        m.tokens = tokens;
        m.positions = positions;
        m.keep.resize(G * N);
        for (std::size_t g = 0; g < G; ++g) std::iota(m.keep.begin() + g * N, m.keep.begin() + (g + 1) * N, 0);
        return m;
    }
    const std::size_t p = positions.dim(1);
    std::vector<std::size_t> perm(N);
    std::vector<double> pos(G * m.kept * p);
    m.keep.reserve(G * m.kept);
    for (std::size_t g = 0; g < G; ++g) {
        std::iota(perm.begin(), perm.end(), 0);
        // partial Fisher-Yates: the first `kept` entries are a uniform subset
        for (std::size_t i = 0; i < m.kept; ++i) std::swap(perm[i], perm[i + rng->below(N - i)]);
        std::sort(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m.kept));
        for (std::size_t i = 0; i < m.kept; ++i) {
            m.keep.push_back(perm[i]);
            for (std::size_t a = 0; a < p; ++a) pos[(g * m.kept + i) * p + a] = positions.data()[perm[i] * p + a];
        }
    }
    m.tokens = gather_rows(tokens, m.keep, m.kept);
    m.positions = Tensor::from({G, m.kept, p}, std::move(pos));
    return m;
}

Batch make_batch(std::span<const data::SampleWindow> windows, const ModelConfig& cfg) {
    if (windows.empty()) throw std::invalid_argument("make_batch: no windows");
    const std::size_t B = windows.size(), T = cfg.t_in, C = cfg.ts_channels, A = cfg.aux_channels;
    const std::size_t Cc = cfg.ctx_channels, H = cfg.image_size[0], W = cfg.image_size[1];
    const Shape ts{T, C}, aux{cfg.t_out, A}, ctx{T, Cc, H, W}, y{cfg.t_out, C};
    std::vector<double> xs, xa, xc, ys, xy;
    xs.reserve(B * T * C);
    ys.reserve(B * T * C);
    if (cfg.use_aux) xa.reserve(B * T * A);
    if (cfg.use_ctx) xc.reserve(B * T * Cc * H * W);
    for (const auto& w : windows) {
        auto check = [&](const Tensor& t, const Shape& s, const char* what) {
            if (!t.defined() || t.shape() != s)
                throw ShapeError(std::string("make_batch: ") + what + " is " +
                                 (t.defined() ? shape_str(t.shape()) : "missing") + ", config expects " + shape_str(s));
        };
        check(w.x_ts, ts, "x_ts");
        check(w.y, y, "y");
        xs.insert(xs.end(), w.x_ts.data().begin(), w.x_ts.data().end());
        ys.insert(ys.end(), w.y.data().begin(), w.y.data().end());
        if (cfg.use_aux) {
            check(w.x_aux, aux, "x_aux");
            xa.insert(xa.end(), w.x_aux.data().begin(), w.x_aux.data().end());
        }
        if (cfg.use_ctx) {
            check(w.x_ctx, ctx, "x_ctx");
            xc.insert(xc.end(), w.x_ctx.data().begin(), w.x_ctx.data().end());
        }
        xy.push_back(w.plant.lon);
        xy.push_back(w.plant.lat);
    }
    Batch b;
    b.x_ts = Tensor::from({B, T, C}, std::move(xs));
    b.y = Tensor::from({B, cfg.t_out, C}, std::move(ys));
    if (cfg.use_aux) b.x_aux = Tensor::from({B, cfg.t_out, A}, std::move(xa));
    if (cfg.use_ctx) b.x_ctx = Tensor::from({B, T, Cc, H, W}, std::move(xc));
    b.plant_xy = Tensor::from({B, 2}, std::move(xy));
    return b;
}

// ---- network ----------------------------------------------------------------------------

namespace {

Tensor hours(std::size_t T) {
    std::vector<double> h(T);
    std::iota(h.begin(), h.end(), 0.0);
    return Tensor::from({T, 1}, std::move(h));
}

// [N, c] -> [B, N, c]
Tensor tile(const Tensor& t, std::size_t B) {
    std::vector<double> out;
    out.reserve(B * t.numel());
    for (std::size_t b = 0; b < B; ++b) out.insert(out.end(), t.data().begin(), t.data().end());
    Shape s{B};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return Tensor::from(std::move(s), std::move(out));
}

rope::RopeTables tile(const rope::RopeTables& t, std::size_t B) { return {tile(t.sin, B), tile(t.cos, B)}; }

// Zeroes floor(r T) random time steps per sample, r ~ U(0, max_ratio).
Tensor mask_steps(const Tensor& x, double max_ratio, Rng& rng) {
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
    std::vector<double> keep(x.numel(), 1.0);
    const auto drop = static_cast<std::size_t>(std::floor(rng.uniform(0.0, max_ratio) * static_cast<double>(T)));
    std::vector<std::size_t> perm(T);
    for (std::size_t b = 0; b < B; ++b) {
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = 0; i < drop; ++i) {
            std::swap(perm[i], perm[i + rng.below(T - i)]);
            std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>((b * T + perm[i]) * C), C, 0.0);
        }
    }
    return mul(x, Tensor::from(x.shape(), std::move(keep)));
}

}  // namespace

FusionModel::FusionModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const Rng root(seed);
    const std::size_t d = cfg_.dim, hidden = d * cfg_.mlp_ratio;
    auto rng = [&](const char* label) { return root.derive(label); };
    if (cfg_.use_ctx) {
        Rng r = rng("ctx_embed");
        ctx_embed_ = Mlp::init(cfg_.patch_len(), d, d, r, "ctx_embed");
        r = rng("vit");
        vit_ = Encoder::init(d, cfg_.depth, cfg_.heads, cfg_.dim_head, hidden, cfg_.use_glu, r, "vit");
        r = rng("fuse");
        fuse_ = CrossBlock::init(d, cfg_.cat_dim(), cfg_.heads, cfg_.dim_head, hidden, cfg_.use_glu, r, "fuse");
        if (cfg_.vq_in_ctx) {
            r = rng("ctx_vq");
            ctx_vq_.emplace(d, cfg_.vq_options(), r);
        }
    }
    if (cfg_.use_ts) {
        Rng r = rng("ts_embed");
        ts_embed_ = Mlp::init(cfg_.ts_channels, d, d, r, "ts_embed");
        r = rng("ts_enc");
        ts_enc_ = Encoder::init(d, cfg_.depth, cfg_.heads, cfg_.dim_head, hidden, cfg_.use_glu, r, "ts_enc");
        if (cfg_.vq_in_ts) {
            r = rng("ts_vq");
            ts_vq_.emplace(d, cfg_.vq_options(), r);
        }
    }
    if (cfg_.use_aux) {
        Rng r = rng("aux_embed");
        aux_embed_ = Mlp::init(cfg_.aux_channels, d, d, r, "aux_embed");
        r = rng("aux_enc");
        aux_enc_ = Encoder::init(d, cfg_.depth, cfg_.heads, cfg_.dim_head, hidden, cfg_.use_glu, r, "aux_enc");
        if (cfg_.vq_in_guide) {
            r = rng("aux_vq");
            aux_vq_.emplace(d, cfg_.vq_options(), r);
        }
    }
    const std::size_t dec_in = cfg_.use_ctx ? d : cfg_.cat_dim(), dd = cfg_.decoder_dim;
    Rng r = rng("dec_in");
    dec_in_ = Mlp::init(dec_in, dd, dd, r, "dec_in");
    r = rng("decoder");
    decoder_ = Encoder::init(dd, cfg_.decoder_depth, cfg_.decoder_heads, cfg_.decoder_dim_head, dd * cfg_.mlp_ratio,
                             cfg_.use_glu, r, "decoder");
    r = rng("head");
    head_ = Linear::init(dd, cfg_.ts_channels, r, "head");
}

std::vector<Tensor> FusionModel::parameters() const {
    std::vector<Tensor> p;
    if (cfg_.use_ctx) {
        ctx_embed_.collect(p);
        vit_.collect(p);
    }
    if (cfg_.use_ts) {
        ts_embed_.collect(p);
        ts_enc_.collect(p);
    }
    if (cfg_.use_aux) {
        aux_embed_.collect(p);
        aux_enc_.collect(p);
    }
    if (cfg_.use_ctx) fuse_.collect(p);
    dec_in_.collect(p);
    decoder_.collect(p);
    head_.collect(p);
    return p;
}

std::size_t FusionModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.numel();
    return n;
}

const vq::ResidualVQ* FusionModel::vq(Branch b) const {
    const auto& o = b == Branch::ctx ? ctx_vq_ : b == Branch::ts ? ts_vq_ : aux_vq_;
    return o ? &*o : nullptr;
}

Tensor FusionModel::quantize(Branch b, const Tensor& emb, const ForwardOptions& options, const PreVqHook& hook,
                             ForwardOutput& out, Tensor& commit) const {
    const vq::ResidualVQ* q = vq(b);
    if (!q) return emb;
    const std::size_t d = cfg_.dim;
    Tensor rows = reshape(emb, {emb.numel() / d, d});
    if (hook) hook(b, rows);
    vq::VqTrace* trace = nullptr;
    if (options.trace_mode != vq::TraceMode::off) {
        if (!options.trace) throw std::invalid_argument("forward: trace mode without a trace");
        trace = b == Branch::ctx ? &options.trace->ctx : b == Branch::ts ? &options.trace->ts : &options.trace->aux;
    }
    auto res = q->apply(rows, trace, options.trace_mode);
    const double w = b == Branch::ctx ? cfg_.commit_weight_ctx : cfg_.commit_weight_ts;
    Tensor c = scale(res.commit_loss, w);
    commit = commit.defined() ? add(commit, c) : c;
    Tensor z = reshape(res.output, emb.shape());
    (b == Branch::ctx ? out.ctx_vq : b == Branch::ts ? out.ts_vq : out.aux_vq) = std::move(res);
    return z;
}

ForwardOutput FusionModel::run(const Batch& batch, const ForwardOptions& opt, const PreVqHook& hook) const {
    if (opt.training && !opt.rng) throw std::invalid_argument("forward: training needs an rng");
    if (opt.training && opt.trace_mode == vq::TraceMode::replay)
        throw std::invalid_argument("forward: trace replay is for inference forwards only");
    const std::size_t B = batch.size(), T = cfg_.t_in, d = cfg_.dim;
    const Mode mode{opt.training, cfg_.dropout, opt.rng};
    ForwardOutput out;
    Tensor commit;
    const auto hour_tables = rope::build_rope_tables(hours(T), cfg_.dim_head, cfg_.max_freq, rope::FreqScheme::temporal);

    auto series = [&](Branch b, const Tensor& x, const Mlp& embed, const Encoder& enc, double mask_ratio) {
        if (!x.defined() || x.rank() != 3 || x.dim(0) != B || x.dim(1) != T)
            throw ShapeError("forward: series input must be [B, T, C]");
        Tensor in = opt.training && mask_ratio > 0.0 ? mask_steps(x, mask_ratio, *opt.rng) : x;
        Tensor e = embed.forward(in);  // [B, T, d], one token per step
        return enc.forward(quantize(b, e, opt, hook, out, commit), hour_tables, mode);
    };
    std::vector<Tensor> cat;
    if (cfg_.use_ts) {
        out.ts_latent = series(Branch::ts, batch.x_ts, ts_embed_, ts_enc_, cfg_.ts_masking_ratio);
        cat.push_back(out.ts_latent);
    }
    if (cfg_.use_aux) {
        out.aux_latent = series(Branch::aux, batch.x_aux, aux_embed_, aux_enc_, 0.0);
        cat.push_back(out.aux_latent);
    }
    out.cat_latent = cat.size() == 1 ? cat.front() : concat(cat, 2);

    Tensor dec;
    if (cfg_.use_ctx) {
        if (!batch.x_ctx.defined() || batch.x_ctx.dim(0) != B || batch.x_ctx.dim(1) != T)
            throw ShapeError("forward: context input must be [B, T, C, H, W]");
        auto m = random_mask(patchify(batch.x_ctx, cfg_.patch_size), patch_positions(cfg_.image_size, cfg_.patch_size),
                             cfg_.ctx_masking_ratio, opt.rng, opt.training);
        const std::size_t K = m.kept;
        Tensor e = quantize(Branch::ctx, ctx_embed_.forward(m.tokens), opt, hook, out, commit);
        out.ctx_latent = vit_.forward(e, rope::build_rope_tables(m.positions, cfg_.dim_head, cfg_.max_freq), mode);

        // queries: every kept patch of every hour; half the channels rotate by hour, half by patch position
        const std::size_t half = cfg_.dim_head / 2;
        std::vector<double> qh(T * K);
        for (std::size_t t = 0; t < T; ++t) std::fill_n(qh.begin() + static_cast<std::ptrdiff_t>(t * K), K, double(t));
        auto q_time = tile(rope::build_rope_tables(Tensor::from({T * K, 1}, std::move(qh)), half, cfg_.max_freq,
                                                   rope::FreqScheme::temporal), B);
        Tensor q_pos = m.positions.rank() == 2 ? tile(tile(m.positions, T), B) : m.positions;
        q_pos = reshape(q_pos, {B, T * K, 2});
        auto tq = rope::concat_channels(q_time, rope::build_rope_tables(q_pos, half, cfg_.max_freq));
        // keys: one token per hour at the plant's location
        auto k_time = tile(rope::build_rope_tables(hours(T), half, cfg_.max_freq, rope::FreqScheme::temporal), B);
        std::vector<double> kp;
        kp.reserve(B * T * 2);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t) {
                kp.push_back(batch.plant_xy.data()[2 * b]);
                kp.push_back(batch.plant_xy.data()[2 * b + 1]);
            }
        auto tk = rope::concat_channels(k_time, rope::build_rope_tables(Tensor::from({B, T, 2}, std::move(kp)), half,
                                                                        cfg_.max_freq));
        out.mixed = fuse_.forward(reshape(out.ctx_latent, {B, T * K, d}), out.cat_latent, tq, tk, mode);
        dec = mean(reshape(out.mixed, {B, T, K, d}), 2);
    } else {
        dec = out.cat_latent;
    }
    const auto dec_tables =
        rope::build_rope_tables(hours(T), cfg_.decoder_dim_head, cfg_.max_freq, rope::FreqScheme::temporal);
    Tensor h = decoder_.forward(dec_in_.forward(dec), dec_tables, mode);
    out.y_hat = head_.forward(h);
    out.commit = commit.defined() ? commit : Tensor::scalar(0.0);
    return out;
}

ForwardOutput FusionModel::forward(const Batch& batch, const ForwardOptions& options) const {
    return run(batch, options, {});
}

std::vector<Tensor> FusionModel::predict(std::span<const data::SampleWindow> windows, std::size_t batch_size) const {
    if (batch_size == 0) throw std::invalid_argument("predict: batch size must be positive");
    NoGradGuard ng;
    std::vector<Tensor> preds;
    preds.reserve(windows.size());
    const std::size_t T = cfg_.t_out, C = cfg_.ts_channels;
    for (std::size_t lo = 0; lo < windows.size(); lo += batch_size) {
        const std::size_t n = std::min(batch_size, windows.size() - lo);
        auto out = forward(make_batch(windows.subspan(lo, n), cfg_), {});
        auto y = out.y_hat.data();
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> v(y.begin() + static_cast<std::ptrdiff_t>(i * T * C),
                                  y.begin() + static_cast<std::ptrdiff_t>((i + 1) * T * C));
            for (double& x : v) x = std::clamp(x, 0.0, 1.0);
            preds.push_back(Tensor::from({T, C}, std::move(v)));
        }
    }
    return preds;
}

bool FusionModel::codebooks_ready() const {
    for (const auto* q : {vq(Branch::ctx), vq(Branch::ts), vq(Branch::aux)})
        if (q && !q->initialized()) return false;
    return true;
}

void FusionModel::init_codebooks(const Batch& batch, Rng& rng) {
    NoGradGuard ng;
    Rng fwd = rng.derive("codebook_init_forward");
    ForwardOptions o;
    o.training = true;
    o.rng = &fwd;
    run(batch, o, [&](Branch b, const Tensor& rows) {
        auto& q = b == Branch::ctx ? ctx_vq_ : b == Branch::ts ? ts_vq_ : aux_vq_;
        if (q && !q->initialized()) q->initialize(rows, rng);
    });
}

void FusionModel::update_codebooks(const ForwardOutput& out, Rng* reseed) {
    const auto opts = cfg_.vq_options();
    if (ctx_vq_ && out.ctx_vq) ctx_vq_->update(*out.ctx_vq, reseed, opts);
    if (ts_vq_ && out.ts_vq) ts_vq_->update(*out.ts_vq, reseed, opts);
    if (aux_vq_ && out.aux_vq) aux_vq_->update(*out.aux_vq, reseed, opts);
}

std::vector<NamedTensor> FusionModel::param_state() const {
    std::vector<NamedTensor> s;
    for (const auto& p : parameters()) s.push_back({p.name(), p.detach()});
    return s;
}

std::vector<NamedTensor> FusionModel::vq_state() const {
    std::vector<NamedTensor> s;
    auto add_vq = [&](const std::optional<vq::ResidualVQ>& q, const char* prefix) {
        if (!q) return;
        auto st = q->state(prefix);
        s.insert(s.end(), st.begin(), st.end());
    };
    add_vq(ctx_vq_, "ctx.");
    add_vq(ts_vq_, "ts.");
    add_vq(aux_vq_, "aux.");
    return s;
}

void FusionModel::load_state(const std::vector<NamedTensor>& params, const std::vector<NamedTensor>& vq_records) {
    std::map<std::string, const Tensor*> by;
    for (const auto& r : params)
        if (!by.emplace(r.name, &r.tensor).second) throw FormatError("checkpoint: duplicate tensor " + r.name);
    auto ps = parameters();
    if (by.size() != ps.size())
        throw FormatError("checkpoint: holds " + std::to_string(by.size()) + " parameter tensors, model has " +
                          std::to_string(ps.size()));
    for (const auto& p : ps) {
        auto it = by.find(p.name());
        if (it == by.end()) throw FormatError("checkpoint: missing parameter " + p.name());
        if (it->second->shape() != p.shape())
            throw FormatError("checkpoint: parameter " + p.name() + " has shape " + shape_str(it->second->shape()) +
                              ", expected " + shape_str(p.shape()));
    }
    for (auto& p : ps) {
        auto src = by.at(p.name())->data();
        std::copy(src.begin(), src.end(), p.mutable_data().begin());
    }
    if (ctx_vq_) ctx_vq_->load_state(vq_records, "ctx.");
    if (ts_vq_) ts_vq_->load_state(vq_records, "ts.");
    if (aux_vq_) aux_vq_->load_state(vq_records, "aux.");
}

}  // namespace solarfuse::model
