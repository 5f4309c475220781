#pragma once

// Dataset -> splits -> trained model, shared by the CLI and the acceptance run.

#include <functional>
#include <memory>
#include <set>

#include "solarfuse/config.hpp"
#include "solarfuse/data.hpp"
#include "solarfuse/train.hpp"

namespace solarfuse::experiment {

struct Prepared {
    data::Split raw;    // as built from the dataset (baselines)
    data::Split input;  // NWP channels standardised with train statistics (model)
    data::NwpStats stats;
    std::vector<std::string> warnings;
    std::set<std::string> train_plants, test_plants;  // by-plant split only
};

// The last two plants by id when none are named.
std::set<std::string> default_test_plants(const data::Dataset& ds);

// Throws ConfigError when the model config does not fit the dataset layout.
void check_layout(const model::ModelConfig& m, const data::Dataset& ds);

Prepared prepare(const data::Dataset& ds, const config::RunConfig& cfg);
// Same, from windows already built (zero-shot provider output).
Prepared prepare_windows(const std::vector<data::SampleWindow>& train, const std::vector<data::SampleWindow>& val,
                         const std::vector<data::SampleWindow>& test);

struct Trained {
    std::shared_ptr<model::FusionModel> model;
    model::TrainResult result;
    data::NwpStats stats;
    double seconds = 0.0;
};

model::TrainOptions train_options(const config::RunConfig& cfg);

Trained train_model(const Prepared& p, const config::RunConfig& cfg,
                    std::function<void(const model::EpochLog&)> on_epoch = {});

// Raw (un-normalised) windows in, predictions out.
std::unique_ptr<model::ModelForecaster> forecaster(const Trained& t, std::string name = "FusionSF");

}  // namespace solarfuse::experiment
