#include "solarfuse/experiment.hpp"

#include <algorithm>
#include <chrono>

namespace solarfuse::experiment {

std::set<std::string> default_test_plants(const data::Dataset& ds) {
    std::vector<std::string> ids;
    for (const auto& p : ds.plants) ids.push_back(p.id);
    std::sort(ids.begin(), ids.end());
    if (ids.size() < 3) throw data::DataError("by-plant split needs at least three plants, dataset has " +
                                              std::to_string(ids.size()));
    return {ids.end() - 2, ids.end()};
}

void check_layout(const model::ModelConfig& m, const data::Dataset& ds) {
    auto fail = [](const std::string& key, const std::string& why) { throw config::ConfigError(key + ": " + why); };
    if (m.use_ctx && (m.image_size[0] != ds.grid_h || m.image_size[1] != ds.grid_w))
        fail("image_size", "config has [" + std::to_string(m.image_size[0]) + ", " + std::to_string(m.image_size[1]) +
                               "] but the dataset grid is [" + std::to_string(ds.grid_h) + ", " +
                               std::to_string(ds.grid_w) + "]");
    if (m.use_ctx && m.ctx_channels != ds.ctx_channels)
        fail("ctx_channels", "dataset has " + std::to_string(ds.ctx_channels));
    if (m.use_aux && m.aux_channels != ds.nwp_channels)
        fail("aux_channels", "dataset has " + std::to_string(ds.nwp_channels) + " NWP channels");
    if (m.ts_channels != 1) fail("ts_channels", "datasets carry a single power channel");
}

Prepared prepare_windows(const std::vector<data::SampleWindow>& train, const std::vector<data::SampleWindow>& val,
                         const std::vector<data::SampleWindow>& test) {
    if (train.empty()) throw data::DataError("no training windows");
    Prepared p;
    p.raw = {train, val, test};
    p.stats = data::fit_nwp_stats(train, &p.warnings);
    p.input.train = data::apply_nwp_stats(train, p.stats);
    p.input.val = data::apply_nwp_stats(val, p.stats);
    p.input.test = data::apply_nwp_stats(test, p.stats);
    return p;
}

Prepared prepare(const data::Dataset& ds, const config::RunConfig& cfg) {
    const auto m = cfg.effective_model();
    check_layout(m, ds);
    auto ws = data::build_windows(ds, m.t_in, m.t_out);
    if (ws.windows.empty()) throw data::DataError("dataset yields no complete windows");
    if (cfg.split == "chronological") {
        auto s = data::split_chronological(ws.windows);
        auto p = prepare_windows(s.train, s.val, s.test);
        p.warnings.insert(p.warnings.begin(), ws.skipped.begin(), ws.skipped.end());
        return p;
    }
    std::set<std::string> test(cfg.test_plants.begin(), cfg.test_plants.end());
    if (test.empty()) test = default_test_plants(ds);
    std::set<std::string> train;
    for (const auto& pl : ds.plants) {
        if (!test.count(pl.id)) train.insert(pl.id);
    }
    for (const auto& id : test) {
        bool known = false;
        for (const auto& pl : ds.plants) known = known || pl.id == id;
        if (!known) throw config::ConfigError("test_plants: no plant '" + id + "' in the dataset");
    }
    auto s = data::split_by_plant(ws.windows, train, test, cfg.val_fraction);
    auto p = prepare_windows(s.train, s.val, s.test);
    p.warnings.insert(p.warnings.begin(), ws.skipped.begin(), ws.skipped.end());
    p.train_plants = std::move(train);
    p.test_plants = std::move(test);
    return p;
}

model::TrainOptions train_options(const config::RunConfig& cfg) {
    model::TrainOptions o;
    o.epochs = cfg.epochs;
    o.batch_size = cfg.batch_size;
    o.lr = cfg.lr;
    o.weight_decay = cfg.weight_decay;
    o.seed = cfg.seed;
    o.eval_every = cfg.eval_every;
    return o;
}

Trained train_model(const Prepared& p, const config::RunConfig& cfg,
                    std::function<void(const model::EpochLog&)> on_epoch) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    Trained t;
    t.model = std::make_shared<model::FusionModel>(cfg.effective_model(), cfg.seed);
    auto opts = train_options(cfg);
    opts.on_epoch = std::move(on_epoch);
    auto opt = model::make_optimizer(*t.model, opts);
    t.result = model::train(*t.model, opt, p.input.train, p.input.val, opts);
    t.stats = p.stats;
    t.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return t;
}

std::unique_ptr<model::ModelForecaster> forecaster(const Trained& t, std::string name) {
    return std::make_unique<model::ModelForecaster>(t.model, t.stats, std::move(name));
}

}  // namespace solarfuse::experiment
