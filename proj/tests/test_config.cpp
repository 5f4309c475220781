#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "solarfuse/config.hpp"

using namespace solarfuse;
using namespace solarfuse::config;

#ifndef SOLARFUSE_SOURCE_DIR
#error "SOLARFUSE_SOURCE_DIR must point at the repository root"
#endif

TEST_CASE("shipped default config equals the built-in defaults") {
    auto c = load(std::filesystem::path(SOLARFUSE_SOURCE_DIR) / "configs" / "default.cfg");
    CHECK(c == RunConfig{});
    CHECK(c.model.patch_size == std::array<std::size_t, 2>{8, 8});
    CHECK(c.model.image_size == std::array<std::size_t, 2>{64, 64});
    CHECK(c.model.depth == 12);
    CHECK(c.model.decoder_heads == 6);
    CHECK(c.model.dropout == 0.4);
    CHECK(c.model.vq_in_guide == false);
    CHECK(c.batch_size == 16);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("syntax") {
    auto c = parse(R"(
  dim: 16      # comment
vq_in_ts: False,
image_size: [32,32]
out_dir: "runs/a b"
test_plants: [p08, p09]
max_freq: 64.5
)");
    CHECK(c.model.dim == 16);
    CHECK_FALSE(c.model.vq_in_ts);
    CHECK(c.model.image_size == std::array<std::size_t, 2>{32, 32});
    CHECK(c.out_dir == "runs/a b");
    CHECK(c.test_plants == std::vector<std::string>{"p08", "p09"});
    CHECK(c.model.max_freq == 64.5);
    CHECK(parse("vq_in_ctx: true").model.vq_in_ctx);
    CHECK(parse("test_plants: []").test_plants.empty());
}

TEST_CASE("errors name the key") {
    auto message = [](const std::string& text) {
        try {
            parse(text);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    CHECK(message("bogus: 1").rfind("bogus:", 0) == 0);
    CHECK(message("dim: -3").rfind("dim:", 0) == 0);
    CHECK(message("dim: 3.5").rfind("dim:", 0) == 0);
    CHECK(message("use_glu: yes").rfind("use_glu:", 0) == 0);
    CHECK(message("patch_size: [8]").rfind("patch_size:", 0) == 0);
    CHECK(message("lr: nan").rfind("lr:", 0) == 0);
    CHECK(message("dim: 16\ndim: 32").rfind("dim:", 0) == 0);
    CHECK(message("dim 16").find("line 1") != std::string::npos);
    CHECK(message("depth:").rfind("depth:", 0) == 0);
    CHECK(message("\n\nheads: x").find("line 3") != std::string::npos);
    CHECK_THROWS_AS(load("/nonexistent/solarfuse.cfg"), ConfigError);
}

TEST_CASE("round trip is the identity") {
    RunConfig c;
    CHECK(parse(serialize(c)) == c);
    c.model.dim = 16;
    c.model.vq_decay = 0.1 + 0.2;  // not exactly representable as a short decimal
    c.model.use_ctx = false;
    c.lr = 3e-4;
    c.out_dir = "out dir/x";
    c.test_plants = {"p01", "p07"};
    c.split = "by-plant";
    c.masking = false;
    const auto text = serialize(c);
    CHECK(parse(text) == c);
    CHECK(serialize(parse(text)) == text);
    // every key is written
    for (const auto& k : keys()) CHECK(("\n" + text).find("\n" + k + ": ") != std::string::npos);
}

TEST_CASE("overrides and validation") {
    RunConfig c;
    set(c, "epochs", "3");
    CHECK(c.epochs == 3);
    CHECK_THROWS_AS(set(c, "nope", "1"), ConfigError);
    c.split = "random";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = RunConfig{};
    c.model.dim_head = 6;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = RunConfig{};
    c.masking = false;
    CHECK(c.effective_model().ctx_masking_ratio == 0.0);
    CHECK(c.model.ctx_masking_ratio == 0.99);
}
