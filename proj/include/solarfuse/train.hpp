#pragma once

// Training loop, checkpoints, the model-backed forecaster and latent capture.

#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>

#include "solarfuse/eval.hpp"
#include "solarfuse/forecaster.hpp"
#include "solarfuse/model.hpp"
#include "solarfuse/optim.hpp"

namespace solarfuse::model {

struct StepResult {
    double loss = 0.0;    // mse + beta * commit
    double mse = 0.0;
    double mae = 0.0;
    double commit = 0.0;  // weighted, before beta
};

// Forward (training mode), backward, AdamW step, EMA codebook update. Codebooks
// still uninitialised are seeded from this batch first. A non-finite loss
// throws NumericError before any parameter changes.
StepResult training_step(FusionModel& model, AdamW& opt, const Batch& batch, Rng& rng);

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    std::uint64_t steps = 0;
    double loss = 0.0;  // mean over the epoch's batches
    double mse = 0.0;
    double mae = 0.0;
    double commit = 0.0;
    double val_mae = std::numeric_limits<double>::quiet_NaN();
    double seconds = 0.0;
};

struct TrainOptions {
    std::size_t epochs = 200;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 0.05;
    std::uint64_t seed = 42;
    std::size_t eval_every = 5;  // validation cadence in epochs; the last epoch is always checked
    std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
    double best_val_mae = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t steps = 0;
};

// Shuffled mini-batches, AdamW. With a validation set the weights and codebooks
// of the epoch with the lowest validation MAE are restored at the end.
TrainResult train(FusionModel& model, AdamW& opt, const std::vector<data::SampleWindow>& train_windows,
                  const std::vector<data::SampleWindow>& val_windows, const TrainOptions& options);

AdamW make_optimizer(const FusionModel& model, const TrainOptions& options);

// ---- checkpoints -------------------------------------------------------------------
// dir/manifest.json  {"format", "config", "seed", "step", "extra"}
// dir/params.fstn, dir/vq.fstn, dir/optim.fstn (optional)

inline constexpr const char* kCheckpointFormat = "solarfuse-checkpoint-1";

void save_checkpoint(const std::filesystem::path& dir, const FusionModel& model, std::uint64_t seed,
                     const AdamW* opt = nullptr, const nlohmann::json& extra = nlohmann::json::object());

struct Checkpoint {
    std::unique_ptr<FusionModel> model;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    nlohmann::json extra;
};

// Throws FormatError for missing files or records that do not fit the config.
Checkpoint load_checkpoint(const std::filesystem::path& dir);
void load_optimizer(const std::filesystem::path& dir, AdamW& opt);

// ---- forecaster ----------------------------------------------------------------------

class ModelForecaster final : public Forecaster {
public:
    ModelForecaster(std::shared_ptr<const FusionModel> model, std::optional<data::NwpStats> stats,
                    std::string name = "FusionSF");
    std::string name() const override { return name_; }
    std::vector<Tensor> predict(std::span<const data::SampleWindow> windows) const override;
    const FusionModel& model() const { return *model_; }

private:
    std::shared_ptr<const FusionModel> model_;
    std::optional<data::NwpStats> stats_;
    std::string name_;
};

// ---- latent capture -------------------------------------------------------------------

struct Latents {
    std::vector<double> ctx;  // every value of the ViT output
    std::vector<double> ts;   // every value of the temporal encoder output
};

// Inference forwards over `windows` (already NWP-normalised).
Latents collect_latents(const FusionModel& model, std::span<const data::SampleWindow> windows,
                        std::size_t batch_size = 64);

eval::LatentDiagnostics diagnose_latents(const FusionModel& model, std::span<const data::SampleWindow> windows,
                                         std::size_t bins = 64, double smoothing = 1e-9);

}  // namespace solarfuse::model
