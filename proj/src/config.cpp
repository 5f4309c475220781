#include "solarfuse/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace solarfuse::config {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& want) {
    throw ConfigError(key + ": expected " + want + ", got '" + value + "'");
}

// ---- scalar codecs ----

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "True" || v == "true") return true;
    if (v == "False" || v == "false") return false;
    bad(key, v, "True or False");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (v.empty() || ec != std::errc() || p != v.data() + v.size()) bad(key, v, "a non-negative integer");
    return x;
}

double to_double(const std::string& key, const std::string& v) {
    double x = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (v.empty() || ec != std::errc() || p != v.data() + v.size() || !std::isfinite(x)) bad(key, v, "a number");
    return x;
}

std::string to_string(const std::string& key, const std::string& v) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    if (v.find_first_of("\"[]") != std::string::npos) bad(key, v, "a string");
    return v;
}

std::vector<std::string> to_list(const std::string& key, const std::string& v) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']') bad(key, v, "a [a, b, ...] list");
    std::vector<std::string> out;
    const std::string body = trim(std::string_view(v).substr(1, v.size() - 2));
    if (body.empty()) return out;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) bad(key, v, "a list without empty items");
        out.push_back(item);
    }
    return out;
}

std::string fmt_bool(bool b) { return b ? "True" : "False"; }

std::string fmt_double(double x) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, p);
}

std::string fmt_string(const std::string& s) {
    if (s.empty() || s.find_first_of(" \t#,[]:\"") != std::string::npos) return '"' + s + '"';
    return s;
}

std::string fmt_list(const std::vector<std::string>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
    return s + "]";
}

// ---- key table ----

struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class Ref>
Field boolean(std::string key, Ref ref) {
    return {key, [=](RunConfig& c, const std::string& v) { ref(c) = to_bool(key, v); },
            [=](const RunConfig& c) { return fmt_bool(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
Field integer(std::string key, Ref ref) {
    return {key,
            [=](RunConfig& c, const std::string& v) {
                ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(to_u64(key, v));
            },
            [=](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
Field real(std::string key, Ref ref) {
    return {key, [=](RunConfig& c, const std::string& v) { ref(c) = to_double(key, v); },
            [=](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
Field text(std::string key, Ref ref) {
    return {key, [=](RunConfig& c, const std::string& v) { ref(c) = to_string(key, v); },
            [=](const RunConfig& c) { return fmt_string(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
Field pair(std::string key, Ref ref) {
    return {key,
            [=](RunConfig& c, const std::string& v) {
                auto items = to_list(key, v);
                if (items.size() != 2) bad(key, v, "a two-element list");
                ref(c) = {to_u64(key, items[0]), to_u64(key, items[1])};
            },
            [=](const RunConfig& c) {
                const auto& p = ref(const_cast<RunConfig&>(c));
                return "[" + std::to_string(p[0]) + ", " + std::to_string(p[1]) + "]";
            }};
}

#define M(name) [](RunConfig& c) -> auto& { return c.model.name; }
#define R(name) [](RunConfig& c) -> auto& { return c.name; }

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        pair("patch_size", M(patch_size)),
        pair("image_size", M(image_size)),
        integer("ctx_channels", M(ctx_channels)),
        integer("ts_channels", M(ts_channels)),
        text("pe_type", M(pe_type)),
        boolean("use_glu", M(use_glu)),
        text("freq_type", M(freq_type)),
        real("max_freq", M(max_freq)),
        real("ctx_masking_ratio", M(ctx_masking_ratio)),
        real("ts_masking_ratio", M(ts_masking_ratio)),
        integer("dim", M(dim)),
        integer("depth", M(depth)),
        integer("heads", M(heads)),
        integer("mlp_ratio", M(mlp_ratio)),
        integer("dim_head", M(dim_head)),
        real("dropout", M(dropout)),
        integer("num_mlp_heads", M(num_mlp_heads)),
        integer("decoder_dim", M(decoder_dim)),
        integer("decoder_depth", M(decoder_depth)),
        integer("decoder_heads", M(decoder_heads)),
        integer("decoder_dim_head", M(decoder_dim_head)),
        boolean("vq_in_ts", M(vq_in_ts)),
        boolean("vq_in_ctx", M(vq_in_ctx)),
        boolean("vq_in_guide", M(vq_in_guide)),
        integer("t_in", M(t_in)),
        integer("t_out", M(t_out)),
        integer("aux_channels", M(aux_channels)),
        integer("vq_codebook_size", M(vq_codebook_size)),
        integer("vq_stages", M(vq_stages)),
        real("vq_decay", M(vq_decay)),
        real("vq_eps", M(vq_eps)),
        real("vq_commitment", M(vq_commitment)),
        integer("vq_dead_code_threshold", M(vq_dead_code_threshold)),
        boolean("vq_reseed_dead_codes", M(vq_reseed_dead_codes)),
        real("commit_weight_ctx", M(commit_weight_ctx)),
        real("commit_weight_ts", M(commit_weight_ts)),
        boolean("use_ts", M(use_ts)),
        boolean("use_ctx", M(use_ctx)),
        boolean("use_aux", M(use_aux)),
        text("data_dir", R(data_dir)),
        text("out_dir", R(out_dir)),
        integer("seed", R(seed)),
        integer("epochs", R(epochs)),
        integer("batch_size", R(batch_size)),
        real("lr", R(lr)),
        real("weight_decay", R(weight_decay)),
        integer("eval_every", R(eval_every)),
        text("split", R(split)),
        {"test_plants", [](RunConfig& c, const std::string& v) { c.test_plants = to_list("test_plants", v); },
         [](const RunConfig& c) { return fmt_list(c.test_plants); }},
        real("val_fraction", R(val_fraction)),
        boolean("masking", R(masking)),
    };
    return f;
}

#undef M
#undef R

const Field& field(const std::string& key) {
    for (const auto& f : fields())
        if (f.key == key) return f;
    throw ConfigError(key + ": unknown config key");
}

// Drops a '#' comment outside double quotes.
std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

}  // namespace

model::ModelConfig RunConfig::effective_model() const {
    model::ModelConfig m = model;
    if (!masking) m.ctx_masking_ratio = m.ts_masking_ratio = 0.0;
    return m;
}

void RunConfig::validate() const {
    model.validate();
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
    if (data_dir.empty()) fail("data_dir", "must not be empty");
    if (out_dir.empty()) fail("out_dir", "must not be empty");
    if (epochs == 0) fail("epochs", "must be positive");
    if (batch_size == 0) fail("batch_size", "must be positive");
    if (!(lr > 0.0)) fail("lr", "must be positive");
    if (!(weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
    if (eval_every == 0) fail("eval_every", "must be positive");
    if (split != "chronological" && split != "by-plant") fail("split", "must be chronological or by-plant");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("val_fraction", "must be in (0, 1)");
}

const std::vector<std::string>& keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& f : fields()) out.push_back(f.key);
        return out;
    }();
    return k;
}

void set(RunConfig& cfg, const std::string& key, const std::string& value) {
    std::string v = trim(value);
    if (!v.empty() && v.back() == ',') v = trim(std::string_view(v).substr(0, v.size() - 1));
    if (v.empty()) throw ConfigError(key + ": missing value");
    field(key).set(cfg, v);
}

RunConfig parse(std::string_view text, RunConfig base) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::set<std::string> seen;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
        const std::string body = trim(strip_comment(line));
        if (body.empty()) continue;
        const auto colon = body.find(':');
        if (colon == std::string::npos)
            throw ConfigError("line " + std::to_string(no) + ": expected 'key: value', got '" + body + "'");
        const std::string key = trim(std::string_view(body).substr(0, colon));
        if (!seen.insert(key).second) throw ConfigError(key + ": set twice (line " + std::to_string(no) + ")");
        try {
            set(base, key, body.substr(colon + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(e.what()) + " (line " + std::to_string(no) + ")");
        }
    }
    return base;
}

RunConfig load(const std::filesystem::path& path, RunConfig base) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot read " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    try {
        return parse(ss.str(), std::move(base));
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string serialize(const RunConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += f.key + ": " + f.get(cfg) + "\n";
    return out;
}

}  // namespace solarfuse::config
