#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "solarfuse/cli.hpp"
#include "solarfuse/data.hpp"
#include "solarfuse/tensor.hpp"

using namespace solarfuse;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "solarfuse");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

const fs::path root = fs::temp_directory_path() / "solarfuse_cli_test";

// small model that fits an 8x8 grid
std::vector<std::string> tiny_model() {
    return {"--set", "image_size=[8, 8]", "--set", "patch_size=[4, 4]", "--set", "dim=8",
            "--set", "depth=1",          "--set", "heads=1",          "--set", "dim_head=8",
            "--set", "decoder_dim=8",    "--set", "decoder_depth=1",  "--set", "decoder_heads=1",
            "--set", "decoder_dim_head=8", "--set", "vq_codebook_size=16", "--epochs", "2"};
}

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

std::string drop_last_column(const std::string& csv) {
    std::istringstream is(csv);
    std::string line, out;
    while (std::getline(is, line)) out += line.substr(0, line.rfind(',')) + "\n";
    return out;
}

}  // namespace

TEST_CASE("synth is deterministic per seed") {
    fs::remove_all(root);
    auto a = run_cli({"synth", "--seed", "7", "--plants", "3", "--days", "12", "--grid", "8", "--out", (root / "a").string()});
    REQUIRE(a.code == 0);
    auto b = run_cli({"synth", "--seed", "7", "--plants", "3", "--days", "12", "--grid", "8", "--out", (root / "b").string()});
    auto c = run_cli({"synth", "--seed", "8", "--plants", "3", "--days", "12", "--grid", "8", "--out", (root / "c").string()});
    CHECK(data::dataset_checksum(root / "a") == data::dataset_checksum(root / "b"));
    CHECK(data::dataset_checksum(root / "a") != data::dataset_checksum(root / "c"));
    CHECK(a.out.find("checksum " + data::dataset_checksum(root / "a")) != std::string::npos);
}

TEST_CASE("usage and config errors exit 2") {
    CHECK(run_cli({}).code == 2);
    CHECK(run_cli({"frobnicate"}).code == 2);
    CHECK(run_cli({"--help"}).code == 0);
    auto r = run_cli({"train", "--set", "no_such_key=1"});
    CHECK(r.code == 2);
    CHECK(r.err.find("no_such_key") != std::string::npos);
    r = run_cli({"train", "--set", "dim=abc"});
    CHECK(r.code == 2);
    CHECK(r.err.find("dim") != std::string::npos);
    r = run_cli({"train", "--config", (root / "missing.cfg").string()});
    CHECK(r.code == 2);
}

TEST_CASE("data errors exit 3 and name the path") {
    auto r = run_cli({"baseline", "--data", (root / "nowhere").string(), "--out", (root / "o").string()});
    CHECK(r.code == 3);
    CHECK(r.err.find("nowhere") != std::string::npos);
    // grid mismatch against the default model is a config error naming the key
    REQUIRE(run_cli({"synth", "--plants", "3", "--days", "12", "--grid", "8", "--out", (root / "d").string()}).code == 0);
    r = run_cli({"train", "--data", (root / "d").string(), "--out", (root / "o").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("image_size") != std::string::npos);
    CHECK(run_cli({"eval", "--data", (root / "d").string(), "--checkpoint", (root / "no_ckpt").string(), "--out",
               (root / "o").string()})
              .code == 3);
}

TEST_CASE("environment variable overrides the data directory") {
    REQUIRE(run_cli({"synth", "--plants", "3", "--days", "12", "--grid", "8", "--out", (root / "env").string()}).code == 0);
    ::setenv(cli::kDataDirEnv, (root / "env").string().c_str(), 1);
    auto r = run_cli({"baseline", "--out", (root / "env_out").string()});
    ::unsetenv(cli::kDataDirEnv);
    CHECK(r.code == 0);
    CHECK(slurp(root / "env_out" / "config.cfg").find("data_dir: " + (root / "env").string()) != std::string::npos);
}

TEST_CASE("persistence scores zero when every day repeats") {
    data::SynthConfig sc;
    sc.n_plants = 3;
    sc.n_days = 12;
    sc.grid_h = sc.grid_w = 8;
    sc.cloud_amplitude = 0.0;
    sc.noise = 0.0;
    auto ds = data::synth_generate(sc);
    for (auto& p : ds.power)
        for (std::size_t h = 24; h < p.size(); ++h) p[h] = p[h % 24];
    data::write_dataset(ds, root / "repeat");
    auto r = run_cli({"eval", "--baseline", "persistence", "--data", (root / "repeat").string(), "--out",
                  (root / "repeat_out").string()});
    REQUIRE(r.code == 0);
    auto j = nlohmann::json::parse(slurp(root / "repeat_out" / "eval_persistence.json"));
    CHECK(j.at("all").at("mae").get<double>() == 0.0);
    CHECK(j.at("all").at("count").get<std::size_t>() > 0);
}

TEST_CASE("train, eval, diagnose and zeroshot") {
    const auto data = (root / "d").string();
    const auto out = (root / "run1").string();
    auto r = run_cli(std::vector<std::string>{"train", "--data", data, "--out", out} + tiny_model());
    INFO(r.err);
    REQUIRE(r.code == 0);
    for (const char* f : {"config.cfg", "run.json", "loss.csv", "test_report.json", "test_report_windows.csv",
                          "checkpoint/manifest.json", "checkpoint/params.fstn", "checkpoint/vq.fstn"})
        CHECK(fs::exists(fs::path(out) / f));
    const auto loss = slurp(fs::path(out) / "loss.csv");
    CHECK(std::count(loss.begin(), loss.end(), '\n') == 3);

    SUBCASE("replay from the snapshot reproduces the loss curve") {
        auto again = run_cli({"train", "--config", (fs::path(out) / "config.cfg").string(), "--out",
                          (root / "run2").string()});
        REQUIRE(again.code == 0);
        CHECK(drop_last_column(slurp(root / "run2" / "loss.csv")) == drop_last_column(loss));
        auto a = nlohmann::json::parse(slurp(fs::path(out) / "test_report.json"));
        auto b = nlohmann::json::parse(slurp(root / "run2" / "test_report.json"));
        CHECK(a == b);
    }
    SUBCASE("eval of the checkpoint matches the training report") {
        auto e = run_cli({"eval", "--data", data, "--out", out, "--threads", "3"});
        REQUIRE(e.code == 0);
        auto a = nlohmann::json::parse(slurp(fs::path(out) / "test_report.json"));
        auto b = nlohmann::json::parse(slurp(fs::path(out) / "eval_fusionsf.json"));
        CHECK(a.at("all") == b.at("all"));
    }
    SUBCASE("diagnose") {
        auto d = run_cli({"diagnose", "--data", data, "--out", out, "--bins", "16"});
        REQUIRE(d.code == 0);
        auto j = nlohmann::json::parse(slurp(fs::path(out) / "diagnostics.json"));
        CHECK(j.at("kl").get<double>() >= 0.0);
        CHECK(j.at("vq_on").get<bool>());
    }
    SUBCASE("zeroshot logs disjoint access") {
        auto z = run_cli(std::vector<std::string>{"zeroshot", "--data", data, "--out", (root / "zs").string(),
                                              "--train-plants", "plant_00,plant_01", "--test-plants", "plant_02"} +
                     tiny_model());
        INFO(z.err);
        REQUIRE(z.code == 0);
        auto j = nlohmann::json::parse(slurp(root / "zs" / "zeroshot.json"));
        CHECK(j.at("reports").size() == 3);
        for (const auto& e : j.at("access_log")) {
            if (e.at("phase") == "training") CHECK(e.at("plant") != "plant_02");
            else CHECK(e.at("plant") == "plant_02");
        }
        CHECK(run_cli({"zeroshot", "--data", data, "--train-plants", "plant_00,plant_02", "--test-plants", "plant_02"}).code == 2);
        CHECK(run_cli({"zeroshot", "--data", data, "--test-plants", "plant_99"}).code == 2);
    }
}

TEST_CASE("numeric failure exits 4") {
    auto r = run_cli(std::vector<std::string>{"train", "--data", (root / "d").string(), "--out", (root / "nan").string(),
                                          "--set", "lr=1e300"} +
                 tiny_model());
    INFO(r.err);
    CHECK(r.code == 4);
    CHECK(r.err.find("non-finite") != std::string::npos);
}

TEST_CASE("baseline table") {
    auto r = run_cli({"baseline", "--data", (root / "d").string(), "--out", (root / "b").string(), "--threads", "2"});
    REQUIRE(r.code == 0);
    for (const char* name : {"Persistence", "Mean", "Clear Sky"}) CHECK(r.out.find(name) != std::string::npos);
    CHECK(fs::exists(root / "b" / "baselines.json"));
}
