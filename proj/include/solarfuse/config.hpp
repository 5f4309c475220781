#pragma once

// Flat "key: value" run configuration, one key per line.
//
//   patch_size: [8, 8]
//   vq_in_ts: True,      # trailing commas and comments are accepted
//
// Every model hyperparameter keeps its listing name; run settings share the
// same namespace. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "solarfuse/model.hpp"

namespace solarfuse::config {

using model::ConfigError;

struct RunConfig {
    model::ModelConfig model;

    std::string data_dir = "data";
    std::string out_dir = "runs/latest";
    std::uint64_t seed = 42;
    std::size_t epochs = 200;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 0.05;
    std::size_t eval_every = 5;
    std::string split = "chronological";     // or "by-plant"
    std::vector<std::string> test_plants;    // by-plant split; empty = last two plants
    double val_fraction = 0.2;               // by-plant split
    bool masking = true;                     // false zeroes both masking ratios

    // The model config actually trained (masking switch applied).
    model::ModelConfig effective_model() const;
    void validate() const;
    bool operator==(const RunConfig&) const = default;
};

// Key names in serialisation order.
const std::vector<std::string>& keys();

// Throws ConfigError naming the key (and the line, where there is one).
RunConfig parse(std::string_view text, RunConfig base = {});
RunConfig load(const std::filesystem::path& path, RunConfig base = {});
// One override, same value syntax as a config line.
void set(RunConfig& cfg, const std::string& key, const std::string& value);
// Every key, in keys() order; parse(serialize(c)) == c.
std::string serialize(const RunConfig& cfg);

}  // namespace solarfuse::config
