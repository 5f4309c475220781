#include "solarfuse/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace solarfuse::model {

namespace fs = std::filesystem;
using json = nlohmann::json;

StepResult training_step(FusionModel& model, AdamW& opt, const Batch& batch, Rng& rng) {
    if (!model.codebooks_ready()) model.init_codebooks(batch, rng);
    ForwardOptions fo;
    fo.training = true;
    fo.rng = &rng;
    ForwardOutput out;
    Tensor mse, loss;
    try {
        out = model.forward(batch, fo);
        mse = mse_loss(out.y_hat, batch.y);
        loss = add(mse, scale(out.commit, model.config().vq_commitment));
    } catch (const NumericError& e) {
        throw NumericError(std::string("training step aborted, forward pass: ") + e.what());
    }
    StepResult r;
    r.mse = mse.item();
    r.commit = out.commit.item();
    r.loss = loss.item();
    {
        double s = 0.0;
        auto a = out.y_hat.data(), b = batch.y.data();
        for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
        r.mae = s / static_cast<double>(a.size());
    }
    opt.zero_grad();
    backward(loss);
    for (const auto& p : opt.params()) {
        if (!p.has_grad()) continue;
        for (double g : p.grad())
            if (!std::isfinite(g)) {
                opt.zero_grad();
                throw NumericError("training step aborted: non-finite gradient in " + p.name() +
                                   " (loss " + std::to_string(r.loss) + ")");
            }
    }
    opt.step();
    opt.zero_grad();
    model.update_codebooks(out, model.config().vq_reseed_dead_codes ? &rng : nullptr);
    return r;
}

AdamW make_optimizer(const FusionModel& model, const TrainOptions& options) {
    AdamWOptions ao;
    ao.lr = options.lr;
    ao.weight_decay = options.weight_decay;
    return AdamW(model.parameters(), ao);
}

namespace {

double val_mae(const FusionModel& model, const std::vector<data::SampleWindow>& val) {
    auto preds = model.predict(val);
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < val.size(); ++i) {
        auto a = preds[i].data(), b = val[i].y.data();
        for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
        n += a.size();
    }
    return s / static_cast<double>(n);
}

std::vector<NamedTensor> deep_copy(const std::vector<NamedTensor>& v) {
    std::vector<NamedTensor> out;
    out.reserve(v.size());
    for (const auto& r : v) out.push_back({r.name, r.tensor.detach()});
    return out;
}

}  // namespace

TrainResult train(FusionModel& model, AdamW& opt, const std::vector<data::SampleWindow>& train_windows,
                  const std::vector<data::SampleWindow>& val_windows, const TrainOptions& options) {
    if (train_windows.empty()) throw std::invalid_argument("train: no training windows");
    if (options.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
    if (options.eval_every == 0) throw std::invalid_argument("train: eval_every must be positive");
    const Rng root(options.seed);
    Rng shuffle = root.derive("shuffle");
    Rng step_rng = root.derive("train");
    const auto& cfg = model.config();

    TrainResult res;
    std::vector<NamedTensor> best_params, best_vq;
    std::vector<std::size_t> order(train_windows.size());
    std::vector<data::SampleWindow> batch_windows;
    for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        EpochLog log;
        log.epoch = epoch;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += options.batch_size) {
            const std::size_t hi = std::min(order.size(), lo + options.batch_size);
            batch_windows.clear();
            for (std::size_t i = lo; i < hi; ++i) batch_windows.push_back(train_windows[order[i]]);
            StepResult s;
            try {
                s = training_step(model, opt, make_batch(batch_windows, cfg), step_rng);
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + ", step " + std::to_string(res.steps + 1) +
                                   ": " + e.what());
            }
            ++res.steps;
            ++batches;
            log.loss += s.loss;
            log.mse += s.mse;
            log.mae += s.mae;
            log.commit += s.commit;
        }
        const auto nb = static_cast<double>(batches);
        log.loss /= nb;
        log.mse /= nb;
        log.mae /= nb;
        log.commit /= nb;
        log.steps = res.steps;
        if (!val_windows.empty() && (epoch % options.eval_every == 0 || epoch == options.epochs)) {
            log.val_mae = val_mae(model, val_windows);
            if (!(log.val_mae >= res.best_val_mae)) {
                res.best_val_mae = log.val_mae;
                res.best_epoch = epoch;
                best_params = deep_copy(model.param_state());
                best_vq = deep_copy(model.vq_state());
            }
        }
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.log.push_back(log);
        if (options.on_epoch) options.on_epoch(log);
    }
    if (!best_params.empty()) model.load_state(best_params, best_vq);
    else res.best_epoch = options.epochs;
    return res;
}

// ---- checkpoints -------------------------------------------------------------------

void save_checkpoint(const fs::path& dir, const FusionModel& model, std::uint64_t seed, const AdamW* opt,
                     const json& extra) {
    fs::create_directories(dir);
    save_tensors(dir / "params.fstn", model.param_state());
    save_tensors(dir / "vq.fstn", model.vq_state());
    std::uint64_t step = 0;
    if (opt) {
        std::vector<NamedTensor> st;
        st.push_back({"step", Tensor::scalar(static_cast<double>(opt->step_count()))});
        const auto& ps = opt->params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            st.push_back({"m." + ps[i].name(), Tensor::from(ps[i].shape(), opt->first_moments()[i])});
            st.push_back({"v." + ps[i].name(), Tensor::from(ps[i].shape(), opt->second_moments()[i])});
        }
        save_tensors(dir / "optim.fstn", st);
        step = opt->step_count();
    }
    json m{{"format", kCheckpointFormat},
           {"config", model.config().to_json()},
           {"seed", seed},
           {"step", step},
           {"extra", extra}};
    std::ofstream os(dir / "manifest.json");
    if (!os) throw FormatError("cannot write " + (dir / "manifest.json").string());
    os << m.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    std::ifstream is(mpath);
    if (!is) throw FormatError("checkpoint manifest not found: " + mpath.string());
    json m;
    try {
        is >> m;
    } catch (const json::exception& e) {
        throw FormatError(mpath.string() + ": " + e.what());
    }
    if (m.value("format", "") != kCheckpointFormat) throw FormatError(mpath.string() + ": unknown checkpoint format");
    Checkpoint c;
    try {
        c.seed = m.at("seed").get<std::uint64_t>();
        c.step = m.at("step").get<std::uint64_t>();
        c.extra = m.value("extra", json::object());
        c.model = std::make_unique<FusionModel>(ModelConfig::from_json(m.at("config")), c.seed);
    } catch (const json::exception& e) {
        throw FormatError(mpath.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(mpath.string() + ": " + e.what());
    }
    c.model->load_state(load_tensors(dir / "params.fstn"), load_tensors(dir / "vq.fstn"));
    return c;
}

void load_optimizer(const fs::path& dir, AdamW& opt) {
    auto recs = load_tensors(dir / "optim.fstn");
    std::map<std::string, const Tensor*> by;
    for (const auto& r : recs) by[r.name] = &r.tensor;
    auto find = [&](const std::string& name) -> const Tensor& {
        auto it = by.find(name);
        if (it == by.end()) throw FormatError("optimizer state: missing record " + name);
        return *it->second;
    };
    const auto step = static_cast<std::uint64_t>(find("step").item());
    std::vector<std::vector<double>> m, v;
    for (const auto& p : opt.params()) {
        const auto& a = find("m." + p.name());
        const auto& b = find("v." + p.name());
        m.emplace_back(a.data().begin(), a.data().end());
        v.emplace_back(b.data().begin(), b.data().end());
    }
    opt.load_state(step, std::move(m), std::move(v));
}

// ---- forecaster ----------------------------------------------------------------------

ModelForecaster::ModelForecaster(std::shared_ptr<const FusionModel> model, std::optional<data::NwpStats> stats,
                                 std::string name)
    : model_(std::move(model)), stats_(std::move(stats)), name_(std::move(name)) {
    if (!model_) throw std::invalid_argument("ModelForecaster: no model");
}

std::vector<Tensor> ModelForecaster::predict(std::span<const data::SampleWindow> windows) const {
    if (!stats_ || !model_->config().use_aux) return model_->predict(windows);
    std::vector<data::SampleWindow> copy(windows.begin(), windows.end());
    return model_->predict(data::apply_nwp_stats(copy, *stats_));
}

// ---- latents ---------------------------------------------------------------------------

Latents collect_latents(const FusionModel& model, std::span<const data::SampleWindow> windows, std::size_t batch_size) {
    const auto& cfg = model.config();
    if (!cfg.use_ctx || !cfg.use_ts) throw std::invalid_argument("collect_latents: model needs ctx and ts branches");
    if (batch_size == 0) throw std::invalid_argument("collect_latents: batch size must be positive");
    NoGradGuard ng;
    Latents l;
    for (std::size_t lo = 0; lo < windows.size(); lo += batch_size) {
        const std::size_t n = std::min(batch_size, windows.size() - lo);
        auto out = model.forward(make_batch(windows.subspan(lo, n), cfg), {});
        l.ctx.insert(l.ctx.end(), out.ctx_latent.data().begin(), out.ctx_latent.data().end());
        l.ts.insert(l.ts.end(), out.ts_latent.data().begin(), out.ts_latent.data().end());
    }
    return l;
}

eval::LatentDiagnostics diagnose_latents(const FusionModel& model, std::span<const data::SampleWindow> windows,
                                         std::size_t bins, double smoothing) {
    auto l = collect_latents(model, windows);
    const bool vq_on = model.config().vq_in_ctx || model.config().vq_in_ts;
    return eval::latent_kl(l.ctx, l.ts, vq_on, bins, smoothing);
}

}  // namespace solarfuse::model
