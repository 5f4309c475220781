#include "solarfuse/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "solarfuse/parallel.hpp"

namespace solarfuse::eval {

using data::SampleWindow;
using json = nlohmann::json;

std::pair<double, double> mae_rmse(const Tensor& y_hat, const Tensor& y) {
    if (!y_hat.defined() || !y.defined()) throw std::invalid_argument("mae_rmse: undefined tensor");
    if (y_hat.shape() != y.shape())
        throw ShapeError("mae_rmse: " + shape_str(y_hat.shape()) + " vs " + shape_str(y.shape()));
    auto a = y_hat.data();
    auto b = y.data();
    double sa = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        sa += std::abs(d);
        sq += d * d;
    }
    const auto n = static_cast<double>(a.size());
    return {sa / n, std::sqrt(sq / n)};
}

const char* to_string(Difficulty d) { return d == Difficulty::easy ? "easy" : "hard"; }

double difficulty_ratio(double area, double area_prev) {
    if (area < 0.0 || area_prev < 0.0 || !std::isfinite(area) || !std::isfinite(area_prev))
        throw std::invalid_argument("difficulty: areas must be finite and non-negative");
    if (area == 0.0 && area_prev == 0.0) return 0.0;
    if (area == 0.0 || area_prev == 0.0) return std::numeric_limits<double>::infinity();
    return std::abs(std::log(area / area_prev));
}

Difficulty classify(double r) { return r < kDifficultyThreshold ? Difficulty::easy : Difficulty::hard; }

namespace {
double area_of(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += std::max(v, 0.0);
    return s;
}
}  // namespace

double difficulty_ratio(const SampleWindow& w) {
    if (w.x_ts.shape() != w.y.shape())
        throw ShapeError("difficulty: history " + shape_str(w.x_ts.shape()) + " and target " +
                         shape_str(w.y.shape()) + " differ");
    return difficulty_ratio(area_of(w.y), area_of(w.x_ts));
}

Difficulty difficulty(const SampleWindow& w) { return classify(difficulty_ratio(w)); }

// ---- reports ------------------------------------------------------------------

namespace {

struct Acc {
    std::size_t windows = 0, values = 0;
    double abs = 0.0, sq = 0.0;
    void add(const std::vector<double>& diff) {
        ++windows;
        values += diff.size();
        for (double d : diff) {
            abs += std::abs(d);
            sq += d * d;
        }
    }
    SubsetMetrics done() const {
        SubsetMetrics m;
        m.count = windows;
        if (values) {
            m.mae = abs / static_cast<double>(values);
            m.rmse = std::sqrt(sq / static_cast<double>(values));
        }
        return m;
    }
};

json metrics_json(const SubsetMetrics& m) { return {{"count", m.count}, {"mae", m.mae}, {"rmse", m.rmse}}; }

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.5f", v);
    return buf;
}

}  // namespace

json EvalReport::to_json() const {
    json plants = json::object();
    for (const auto& [id, m] : per_plant) plants[id] = metrics_json(m);
    return {{"model", model},          {"scenario", scenario},          {"all", metrics_json(all)},
            {"easy", metrics_json(easy)}, {"hard", metrics_json(hard)}, {"per_plant", plants},
            {"failures", failures}};
}

std::string format_table(const std::vector<EvalReport>& reports) {
    std::size_t w = 5;
    for (const auto& r : reports) w = std::max(w, r.model.size());
    auto pad = [](std::string s, std::size_t n) {
        s.resize(std::max(n, s.size()), ' ');
        return s;
    };
    std::ostringstream os;
    auto head = [&](const char* name, std::size_t n) { return pad(std::string(name) + " (" + std::to_string(n) + ")", 19); };
    const EvalReport* first = reports.empty() ? nullptr : &reports.front();
    os << pad("Model", w) << " | " << head("All", first ? first->all.count : 0) << " | "
       << head("Easy", first ? first->easy.count : 0) << " | " << head("Hard", first ? first->hard.count : 0) << '\n';
    os << pad("", w) << " | " << pad("MAE     RMSE", 19) << " | " << pad("MAE     RMSE", 19) << " | "
       << pad("MAE     RMSE", 19) << '\n';
    for (const auto& r : reports) {
        auto cell = [&](const SubsetMetrics& m) { return pad(num(m.mae) + " " + num(m.rmse), 19); };
        os << pad(r.model, w) << " | " << cell(r.all) << " | " << cell(r.easy) << " | " << cell(r.hard) << '\n';
    }
    return os.str();
}

std::string EvalReport::table() const { return format_table({*this}); }

EvalReport evaluate(const Forecaster& model, std::span<const SampleWindow> windows, const EvalOptions& options,
                    std::vector<WindowResult>* per_window) {
    if (windows.empty()) throw std::invalid_argument("evaluate: no windows");
    if (options.chunk == 0) throw std::invalid_argument("evaluate: chunk size must be positive");
    const std::size_t n = windows.size();
    std::vector<WindowResult> res(n);
    std::vector<std::vector<double>> diffs(n);

    auto score = [&](std::size_t i, const Tensor& pred) {
        const auto& w = windows[i];
        if (pred.shape() != w.y.shape())
            throw ShapeError("prediction " + shape_str(pred.shape()) + " for target " + shape_str(w.y.shape()));
        auto a = pred.data();
        auto b = w.y.data();
        std::vector<double> diff(a.size());
        double sa = 0.0, sq = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) {
            diff[k] = a[k] - b[k];
            if (!std::isfinite(diff[k])) throw NumericError("non-finite prediction");
            sa += std::abs(diff[k]);
            sq += diff[k] * diff[k];
        }
        diffs[i] = std::move(diff);
        res[i].mae = sa / static_cast<double>(a.size());
        res[i].rmse = std::sqrt(sq / static_cast<double>(a.size()));
    };

    const std::size_t chunks = (n + options.chunk - 1) / options.chunk;
    parallel_for(chunks, options.threads, [&](std::size_t c) {
        const std::size_t lo = c * options.chunk, hi = std::min(n, lo + options.chunk);
        try {
            auto preds = model.predict(windows.subspan(lo, hi - lo));
            if (preds.size() != hi - lo) throw std::runtime_error("forecaster returned the wrong number of predictions");
            for (std::size_t i = lo; i < hi; ++i) score(i, preds[i - lo]);
            return;
        } catch (const std::exception&) {
        }
        for (std::size_t i = lo; i < hi; ++i) {
            try {
                auto p = model.predict(windows.subspan(i, 1));
                if (p.size() != 1) throw std::runtime_error("forecaster returned the wrong number of predictions");
                score(i, p.front());
            } catch (const std::exception& e) {
                res[i].failed = true;
                res[i].error = e.what();
            }
        }
    });

    EvalReport rep;
    rep.model = model.name();
    rep.scenario = options.scenario;
    Acc all, easy, hard;
    std::map<std::string, Acc> plants;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& w = windows[i];
        if (res[i].failed) {
            rep.failures.push_back(w.plant.id + " " + data::format_utc(w.t0) + ": " + res[i].error);
            continue;
        }
        res[i].ratio = difficulty_ratio(w);
        res[i].difficulty = classify(res[i].ratio);
        // in window order, so the result does not depend on the thread count
        all.add(diffs[i]);
        (res[i].difficulty == Difficulty::easy ? easy : hard).add(diffs[i]);
        plants[w.plant.id].add(diffs[i]);
    }
    rep.all = all.done();
    rep.easy = easy.done();
    rep.hard = hard.done();
    for (const auto& [id, a] : plants) rep.per_plant[id] = a.done();
    if (per_window) *per_window = std::move(res);
    return rep;
}

void write_window_csv(const std::filesystem::path& path, std::span<const SampleWindow> windows,
                      const std::vector<WindowResult>& results) {
    if (windows.size() != results.size()) throw std::invalid_argument("write_window_csv: size mismatch");
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "plant_id,t0,day,difficulty,ratio,mae,rmse,error\n";
    char buf[128];
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const auto& r = results[i];
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", r.ratio, r.mae, r.rmse);
        os << windows[i].plant.id << ',' << data::format_utc(windows[i].t0) << ',' << windows[i].day << ','
           << (r.failed ? "failed" : to_string(r.difficulty)) << ',' << buf << ',' << err << '\n';
    }
}

// ---- zero-shot ------------------------------------------------------------------

std::vector<SampleWindow> LoggedProvider::windows_for(const std::set<std::string>& plants, Phase phase) {
    for (const auto& id : plants) log_.emplace_back(phase, id);
    std::vector<SampleWindow> out;
    for (const auto& w : windows_)
        if (plants.count(w.plant.id)) out.push_back(w);
    return out;
}

std::pair<std::vector<SampleWindow>, std::vector<SampleWindow>> split_train_val(const std::vector<SampleWindow>& windows,
                                                                                double val_fraction) {
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw std::invalid_argument("split_train_val: bad val fraction");
    std::map<std::string, std::vector<const SampleWindow*>> by;
    for (const auto& w : windows) by[w.plant.id].push_back(&w);
    std::pair<std::vector<SampleWindow>, std::vector<SampleWindow>> out;
    for (auto& [id, v] : by) {
        std::stable_sort(v.begin(), v.end(), [](auto* a, auto* b) { return a->t0 < b->t0; });
        const auto nva = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(v.size())));
        if (nva >= v.size()) throw std::invalid_argument("split_train_val: too few windows for " + id);
        for (std::size_t i = 0; i < v.size(); ++i) (i < v.size() - nva ? out.first : out.second).push_back(*v[i]);
    }
    return out;
}

std::string plant_set_label(const std::set<std::string>& plants) {
    std::string s = "{";
    for (const auto& id : plants) s += (s.size() > 1 ? "," : "") + id;
    return s + "}";
}

EvalReport zero_shot_eval(const std::set<std::string>& train_plants, const std::set<std::string>& test_plants,
                          WindowProvider& provider, const TrainFn& train, const ZeroShotOptions& options) {
    if (train_plants.empty() || test_plants.empty()) throw std::invalid_argument("zero-shot: empty plant set");
    for (const auto& id : train_plants)
        if (test_plants.count(id))
            throw std::invalid_argument("zero-shot: plant " + id + " is in both the train and test sets");

    auto pool = provider.windows_for(train_plants, Phase::training);
    for (const auto& w : pool)
        if (!train_plants.count(w.plant.id))
            throw std::logic_error("zero-shot: provider returned plant " + w.plant.id + " during training");
    if (pool.empty()) throw std::invalid_argument("zero-shot: no training windows");
    auto [tr, va] = split_train_val(pool, options.val_fraction);
    auto model = train(tr, va);
    if (!model) throw std::logic_error("zero-shot: trainer returned no model");

    auto test = provider.windows_for(test_plants, Phase::testing);
    if (test.empty()) throw std::invalid_argument("zero-shot: no test windows");
    EvalOptions eo = options.eval;
    eo.scenario = "train=" + plant_set_label(train_plants) + " test=" + plant_set_label(test_plants);
    return evaluate(*model, test, eo);
}

// ---- latent diagnostic ----------------------------------------------------------

json LatentDiagnostics::to_json() const {
    return {{"vq_on", vq_on}, {"lo", lo}, {"hi", hi}, {"bins", hist_ctx.size()}, {"kl", kl},
            {"hist_ctx", hist_ctx}, {"hist_ts", hist_ts}};
}

LatentDiagnostics latent_kl(std::span<const double> ctx, std::span<const double> ts, bool vq_on, std::size_t bins,
                            double smoothing) {
    if (ctx.empty() || ts.empty()) throw std::invalid_argument("latent_kl: empty latent set");
    if (bins == 0 || !(smoothing > 0.0)) throw std::invalid_argument("latent_kl: bins and smoothing must be positive");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (auto s : {ctx, ts})
        for (double v : s) {
            if (!std::isfinite(v)) throw std::invalid_argument("latent_kl: non-finite latent value");
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (!(hi > lo)) throw std::invalid_argument("latent_kl: all latent values are equal; bins are degenerate");

    auto hist = [&](std::span<const double> v) {
        std::vector<double> h(bins, 0.0);
        for (double x : v) {
            auto b = static_cast<std::size_t>((x - lo) / (hi - lo) * static_cast<double>(bins));
            h[std::min(b, bins - 1)] += 1.0;
        }
        const double norm = 1.0 + smoothing * static_cast<double>(bins);
        for (double& c : h) c = (c / static_cast<double>(v.size()) + smoothing) / norm;
        return h;
    };
    LatentDiagnostics d;
    d.vq_on = vq_on;
    d.lo = lo;
    d.hi = hi;
    d.hist_ctx = hist(ctx);
    d.hist_ts = hist(ts);
    for (std::size_t b = 0; b < bins; ++b) d.kl += d.hist_ctx[b] * std::log(d.hist_ctx[b] / d.hist_ts[b]);
    d.kl = std::max(d.kl, 0.0);
    return d;
}

}  // namespace solarfuse::eval
