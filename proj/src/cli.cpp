#include "solarfuse/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>

#include <CLI11.hpp>

#include "solarfuse/baseline.hpp"
#include "solarfuse/experiment.hpp"

namespace solarfuse::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string data_dir, out_dir;
    std::size_t threads = 1;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
};

void add_common(CLI::App* c, Common& o) {
    c->add_option("-c,--config", o.config, "flat key: value config file");
    c->add_option("-s,--set", o.sets, "override one key, key=value (repeatable)");
    c->add_option("--data", o.data_dir, "dataset directory (overrides config and $" + std::string(kDataDirEnv) + ")");
    c->add_option("--out", o.out_dir, "output directory");
    c->add_option("--seed", o.seed, "run seed");
    c->add_option("--epochs", o.epochs, "training epochs");
    c->add_option("--threads", o.threads, "evaluation threads")->check(CLI::PositiveNumber);
}

// default < config file < environment (data_dir only) < --set < flags
config::RunConfig resolve(const Common& o) {
    config::RunConfig c;
    if (!o.config.empty()) c = config::load(o.config);
    if (const char* env = std::getenv(kDataDirEnv); env && *env) c.data_dir = env;
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw config::ConfigError(kv + ": --set expects key=value");
        config::set(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!o.data_dir.empty()) c.data_dir = o.data_dir;
    if (!o.out_dir.empty()) c.out_dir = o.out_dir;
    if (o.seed) c.seed = *o.seed;
    if (o.epochs) c.epochs = *o.epochs;
    c.validate();
    return c;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw data::DataError("cannot write " + path.string());
    os << text;
    if (!os) throw data::DataError("write failed: " + path.string());
}

// Resolved config plus what is needed to replay the run.
void snapshot(const config::RunConfig& c, const std::string& command, const std::string& checksum) {
    write_text(fs::path(c.out_dir) / "config.cfg", config::serialize(c));
    json run{{"command", command}, {"seed", c.seed}, {"data_dir", c.data_dir}, {"dataset_checksum", checksum}};
    write_text(fs::path(c.out_dir) / "run.json", run.dump(2) + "\n");
}

struct Loaded {
    data::Dataset ds;
    std::string checksum;
};

Loaded load_data(const config::RunConfig& c, std::size_t threads) {
    if (!fs::is_directory(c.data_dir)) throw data::DataError("data_dir: no dataset at " + c.data_dir);
    return {data::load_dataset(c.data_dir, threads), data::dataset_checksum(c.data_dir)};
}

void write_report(const fs::path& dir, const std::string& stem, const eval::EvalReport& r,
                  std::span<const data::SampleWindow> windows, const std::vector<eval::WindowResult>& per_window) {
    write_text(dir / (stem + ".json"), r.to_json().dump(2) + "\n");
    eval::write_window_csv(dir / (stem + "_windows.csv"), windows, per_window);
}

std::string stem_of(const std::string& name) {
    std::string s;
    for (char ch : name) s += std::isalnum(static_cast<unsigned char>(ch)) ? static_cast<char>(std::tolower(ch)) : '_';
    return s;
}

std::unique_ptr<Forecaster> make_baseline(const std::string& name, const std::vector<data::SampleWindow>& train) {
    if (name == "persistence") return std::make_unique<baseline::Persistence>();
    if (name == "mean") return std::make_unique<baseline::MeanBaseline>(baseline::MeanBaseline::fit(train));
    if (name == "clearsky") return std::make_unique<baseline::ClearSky>(baseline::ClearSky::fit(train));
    throw config::ConfigError("baseline: unknown baseline '" + name + "' (persistence, mean, clearsky)");
}

// Baselines need neither images nor a matching model layout.
void baseline_layout(config::RunConfig& c, const data::Dataset& ds) {
    c.model.use_ctx = false;
    c.model.use_aux = true;
    c.model.aux_channels = ds.nwp_channels;
}

std::set<std::string> plant_list(const std::string& s) {
    std::set<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.insert(item);
    return out;
}

struct Opened {
    std::shared_ptr<model::FusionModel> model;
    data::NwpStats stats;
};

Opened open_checkpoint(const fs::path& dir) {
    auto ck = model::load_checkpoint(dir);
    Opened l;
    l.model = std::move(ck.model);
    try {
        l.stats = data::NwpStats::from_json(ck.extra.at("nwp_stats"));
    } catch (const json::exception& e) {
        throw FormatError(dir.string() + ": checkpoint lacks NWP statistics (" + e.what() + ")");
    }
    return l;
}

// ---- commands -----------------------------------------------------------------------

struct SynthArgs {
    std::uint64_t seed = 42;
    std::size_t plants = 10, days = 120, grid = 32;
    std::string out;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
    data::SynthConfig sc;
    sc.seed = a.seed;
    sc.n_plants = a.plants;
    sc.n_days = a.days;
    sc.grid_h = sc.grid_w = a.grid;
    std::string dir = a.out;
    if (dir.empty()) {
        const char* env = std::getenv(kDataDirEnv);
        dir = env && *env ? env : config::RunConfig{}.data_dir;
    }
    auto ds = data::synth_generate(sc);
    data::write_dataset(ds, dir);
    out << "wrote " << dir << " (" << a.plants << " plants, " << a.days << " days, " << a.grid << "x" << a.grid
        << ")\nchecksum " << data::dataset_checksum(dir) << "\n";
    return 0;
}

int cmd_train(const Common& o, std::ostream& out) {
    auto c = resolve(o);
    auto data = load_data(c, o.threads);
    auto p = experiment::prepare(data.ds, c);
    for (const auto& w : p.warnings) out << "warning: " << w << "\n";
    snapshot(c, "train", data.checksum);
    const fs::path dir(c.out_dir);
    std::ofstream loss(dir / "loss.csv");
    if (!loss) throw data::DataError("cannot write " + (dir / "loss.csv").string());
    loss << "epoch,steps,loss,mse,mae,commit,val_mae,seconds\n";
    loss << std::setprecision(17);
    out << "train " << p.input.train.size() << " windows, val " << p.input.val.size() << ", test "
        << p.input.test.size() << "\n";
    auto t = experiment::train_model(p, c, [&](const model::EpochLog& l) {
        loss << l.epoch << ',' << l.steps << ',' << l.loss << ',' << l.mse << ',' << l.mae << ',' << l.commit << ','
             << l.val_mae << ',' << l.seconds << '\n';
        loss.flush();
        char line[160];
        std::snprintf(line, sizeof line, "epoch %zu  loss %.5f  mae %.5f  val %.5f  %.1fs\n", l.epoch, l.loss, l.mae,
                      l.val_mae, l.seconds);
        out << line << std::flush;
    });
    json extra{{"nwp_stats", t.stats.to_json()},
               {"dataset_checksum", data.checksum},
               {"best_epoch", t.result.best_epoch},
               {"best_val_mae", t.result.best_val_mae}};
    model::save_checkpoint(dir / "checkpoint", *t.model, c.seed, nullptr, extra);

    eval::EvalOptions eo;
    eo.threads = o.threads;
    std::vector<eval::WindowResult> per;
    auto f = experiment::forecaster(t);
    auto r = eval::evaluate(*f, p.raw.test, eo, &per);
    write_report(dir, "test_report", r, p.raw.test, per);
    out << "best epoch " << t.result.best_epoch << ", " << std::fixed << std::setprecision(1) << t.seconds << "s\n"
        << r.table() << "checkpoint " << (dir / "checkpoint").string() << "\n";
    return 0;
}

int cmd_eval(const Common& o, const std::string& checkpoint, const std::string& which, std::ostream& out) {
    auto c = resolve(o);
    std::unique_ptr<Forecaster> f;
    std::optional<Opened> ck;
    if (which.empty()) {
        ck = open_checkpoint(checkpoint.empty() ? fs::path(c.out_dir) / "checkpoint" : fs::path(checkpoint));
        c.model = ck->model->config();
    }
    auto data = load_data(c, o.threads);
    if (!ck) baseline_layout(c, data.ds);
    auto p = experiment::prepare(data.ds, c);
    if (ck) f = std::make_unique<model::ModelForecaster>(ck->model, ck->stats);
    else f = make_baseline(which, p.raw.train);
    snapshot(c, "eval", data.checksum);
    eval::EvalOptions eo;
    eo.threads = o.threads;
    std::vector<eval::WindowResult> per;
    auto r = eval::evaluate(*f, p.raw.test, eo, &per);
    write_report(c.out_dir, "eval_" + stem_of(r.model), r, p.raw.test, per);
    out << r.table();
    for (const auto& fail : r.failures) out << "failed: " << fail << "\n";
    return 0;
}

int cmd_baseline(const Common& o, std::ostream& out) {
    auto c = resolve(o);
    auto data = load_data(c, o.threads);
    baseline_layout(c, data.ds);
    auto p = experiment::prepare(data.ds, c);
    snapshot(c, "baseline", data.checksum);
    eval::EvalOptions eo;
    eo.threads = o.threads;
    std::vector<eval::EvalReport> reports;
    json all = json::array();
    for (const char* name : {"persistence", "mean", "clearsky"}) {
        auto f = make_baseline(name, p.raw.train);
        std::vector<eval::WindowResult> per;
        reports.push_back(eval::evaluate(*f, p.raw.test, eo, &per));
        write_report(c.out_dir, "baseline_" + std::string(name), reports.back(), p.raw.test, per);
        all.push_back(reports.back().to_json());
    }
    write_text(fs::path(c.out_dir) / "baselines.json", all.dump(2) + "\n");
    out << eval::format_table(reports);
    return 0;
}

int cmd_zeroshot(const Common& o, const std::string& train_arg, const std::string& test_arg, std::ostream& out) {
    auto c = resolve(o);
    auto data = load_data(c, o.threads);
    experiment::check_layout(c.effective_model(), data.ds);
    std::set<std::string> test = test_arg.empty() ? std::set<std::string>(c.test_plants.begin(), c.test_plants.end())
                                                  : plant_list(test_arg);
    if (test.empty()) test = experiment::default_test_plants(data.ds);
    std::set<std::string> train = plant_list(train_arg);
    if (train.empty())
        for (const auto& pl : data.ds.plants)
            if (!test.count(pl.id)) train.insert(pl.id);
    for (const auto* set : {&train, &test})
        for (const auto& id : *set) {
            bool known = false;
            for (const auto& pl : data.ds.plants) known = known || pl.id == id;
            if (!known) throw config::ConfigError((set == &train ? "train-plants" : "test-plants") +
                                                  std::string(": no plant '") + id + "' in the dataset");
        }
    for (const auto& id : train)
        if (test.count(id)) throw config::ConfigError("train-plants: plant '" + id + "' is also a test plant");
    snapshot(c, "zeroshot", data.checksum);

    auto ws = data::build_windows(data.ds, c.model.t_in, c.model.t_out);
    eval::LoggedProvider provider(std::move(ws.windows));
    std::vector<eval::EvalReport> reports;
    eval::TrainFn fit = [&](const std::vector<data::SampleWindow>& tr, const std::vector<data::SampleWindow>& va) {
        auto p = experiment::prepare_windows(tr, va, {});
        out << "train " << tr.size() << " windows, val " << va.size() << "\n";
        auto t = experiment::train_model(p, c, [&](const model::EpochLog& l) {
            if (l.epoch % c.eval_every == 0 || l.epoch == c.epochs)
                out << "epoch " << l.epoch << "  loss " << l.loss << "  val " << l.val_mae << "\n" << std::flush;
        });
        return std::unique_ptr<Forecaster>(experiment::forecaster(t));
    };
    eval::ZeroShotOptions zo;
    zo.val_fraction = c.val_fraction;
    zo.eval.threads = o.threads;
    reports.push_back(eval::zero_shot_eval(train, test, provider, fit, zo));
    // the same protocol for the fitted baselines, for scale
    for (const char* name : {"persistence", "mean"}) {
        eval::TrainFn base = [&](const std::vector<data::SampleWindow>& tr, const std::vector<data::SampleWindow>&) {
            return make_baseline(name, tr);
        };
        reports.push_back(eval::zero_shot_eval(train, test, provider, base, zo));
    }
    json log = json::array();
    for (const auto& [phase, plant] : provider.log())
        log.push_back({{"phase", phase == eval::Phase::training ? "training" : "testing"}, {"plant", plant}});
    json j{{"scenario", reports.front().scenario},
           {"train_plants", train},
           {"test_plants", test},
           {"reports", json::array()},
           {"access_log", log}};
    for (const auto& r : reports) j["reports"].push_back(r.to_json());
    write_text(fs::path(c.out_dir) / "zeroshot.json", j.dump(2) + "\n");
    out << reports.front().scenario << "\n" << eval::format_table(reports);
    return 0;
}

int cmd_diagnose(const Common& o, const std::string& checkpoint, std::size_t bins, std::ostream& out) {
    auto c = resolve(o);
    auto ck = open_checkpoint(checkpoint.empty() ? fs::path(c.out_dir) / "checkpoint" : fs::path(checkpoint));
    c.model = ck.model->config();
    auto data = load_data(c, o.threads);
    auto p = experiment::prepare(data.ds, c);
    snapshot(c, "diagnose", data.checksum);
    auto d = model::diagnose_latents(*ck.model, data::apply_nwp_stats(p.raw.test, ck.stats), bins);
    write_text(fs::path(c.out_dir) / "diagnostics.json", d.to_json().dump(2) + "\n");
    out << "KL(ctx || ts) = " << std::setprecision(6) << d.kl << " (VQ " << (d.vq_on ? "on" : "off") << ", "
        << bins << " bins over [" << d.lo << ", " << d.hi << "])\n";
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"solarfuse: trimodal solar power forecasting"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--seed", sa.seed);
    synth->add_option("--plants", sa.plants)->check(CLI::PositiveNumber);
    synth->add_option("--days", sa.days)->check(CLI::PositiveNumber);
    synth->add_option("--grid", sa.grid, "image height and width")->check(CLI::PositiveNumber);
    synth->add_option("--out", sa.out, "dataset directory (default: $" + std::string(kDataDirEnv) + " or data)");

    Common train_o, eval_o, base_o, zs_o, diag_o;
    auto* train = app.add_subcommand("train", "train the fusion model; writes checkpoint, loss.csv, test report");
    add_common(train, train_o);

    std::string eval_ckpt, eval_baseline;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or one baseline on the test split");
    add_common(ev, eval_o);
    ev->add_option("--checkpoint", eval_ckpt, "checkpoint directory (default <out>/checkpoint)");
    ev->add_option("--baseline", eval_baseline, "persistence | mean | clearsky");

    auto* base = app.add_subcommand("baseline", "evaluate Persistence, Mean and Clear Sky");
    add_common(base, base_o);

    std::string zs_train, zs_test;
    auto* zs = app.add_subcommand("zeroshot", "train on some plants, test on others");
    add_common(zs, zs_o);
    zs->add_option("--train-plants", zs_train, "comma-separated plant ids (default: all others)");
    zs->add_option("--test-plants", zs_test, "comma-separated plant ids (default: test_plants or the last two)");

    std::string diag_ckpt;
    std::size_t bins = 64;
    auto* diag = app.add_subcommand("diagnose", "latent KL(ctx || ts) of a checkpoint on the test split");
    add_common(diag, diag_o);
    diag->add_option("--checkpoint", diag_ckpt, "checkpoint directory (default <out>/checkpoint)");
    diag->add_option("--bins", bins)->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }
    try {
        if (*synth) return cmd_synth(sa, out);
        if (*train) return cmd_train(train_o, out);
        if (*ev) return cmd_eval(eval_o, eval_ckpt, eval_baseline, out);
        if (*base) return cmd_baseline(base_o, out);
        if (*zs) return cmd_zeroshot(zs_o, zs_train, zs_test, out);
        if (*diag) return cmd_diagnose(diag_o, diag_ckpt, bins, out);
    } catch (const config::ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const data::DataError& e) {
        err << "data error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        err << "data error: " << e.what() << "\n";
        return 3;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace solarfuse::cli
