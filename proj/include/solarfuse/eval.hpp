#pragma once

// Metrics, the Easy/Hard split, zero-shot protocol and latent KL diagnostic.

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "solarfuse/forecaster.hpp"

namespace solarfuse::eval {

// |ln(2/3)|
inline const double kDifficultyThreshold = std::abs(std::log(2.0 / 3.0));

// (mean |y_hat - y|, sqrt(mean (y_hat - y)^2))
std::pair<double, double> mae_rmse(const Tensor& y_hat, const Tensor& y);

enum class Difficulty { easy, hard };
const char* to_string(Difficulty d);

// r = |ln(area / area_prev)|; 0 when both are zero, +inf when one is.
double difficulty_ratio(double area, double area_prev);
Difficulty classify(double r);
// Areas of the target day (y) and the day before (x_ts).
double difficulty_ratio(const data::SampleWindow& w);
Difficulty difficulty(const data::SampleWindow& w);

struct SubsetMetrics {
    std::size_t count = 0;  // windows
    double mae = 0.0;
    double rmse = 0.0;
};

struct EvalReport {
    std::string model;
    std::string scenario;
    SubsetMetrics all, easy, hard;
    std::map<std::string, SubsetMetrics> per_plant;
    std::vector<std::string> failures;  // "plant t0: message"

    nlohmann::json to_json() const;
    // Aligned columns: model | All MAE RMSE | Easy MAE RMSE | Hard MAE RMSE
    std::string table() const;
};

std::string format_table(const std::vector<EvalReport>& reports);

struct WindowResult {
    double ratio = 0.0;
    Difficulty difficulty = Difficulty::easy;
    double mae = 0.0;
    double rmse = 0.0;
    bool failed = false;
    std::string error;
};

struct EvalOptions {
    std::size_t threads = 1;
    std::size_t chunk = 64;  // windows per predict() call
    std::string scenario;
};

// Predictions that throw are retried one window at a time; the windows that
// still fail are listed in the report and left out of the metrics.
EvalReport evaluate(const Forecaster& model, std::span<const data::SampleWindow> windows,
                    const EvalOptions& options = {}, std::vector<WindowResult>* per_window = nullptr);

// plant_id,t0,day,difficulty,ratio,mae,rmse,error
void write_window_csv(const std::filesystem::path& path, std::span<const data::SampleWindow> windows,
                      const std::vector<WindowResult>& results);

// ---- zero-shot --------------------------------------------------------------

enum class Phase { training, testing };

class WindowProvider {
public:
    virtual ~WindowProvider() = default;
    virtual std::vector<data::SampleWindow> windows_for(const std::set<std::string>& plants, Phase phase) = 0;
};

// Serves windows from memory and records every plant it hands out.
class LoggedProvider final : public WindowProvider {
public:
    explicit LoggedProvider(std::vector<data::SampleWindow> windows) : windows_(std::move(windows)) {}
    std::vector<data::SampleWindow> windows_for(const std::set<std::string>& plants, Phase phase) override;
    const std::vector<std::pair<Phase, std::string>>& log() const { return log_; }

private:
    std::vector<data::SampleWindow> windows_;
    std::vector<std::pair<Phase, std::string>> log_;
};

using TrainFn = std::function<std::unique_ptr<Forecaster>(const std::vector<data::SampleWindow>& train,
                                                          const std::vector<data::SampleWindow>& val)>;

struct ZeroShotOptions {
    double val_fraction = 0.2;
    EvalOptions eval;
};

// Trains on train_plants only, then evaluates on test_plants.
// Throws std::invalid_argument for empty or overlapping plant sets.
EvalReport zero_shot_eval(const std::set<std::string>& train_plants, const std::set<std::string>& test_plants,
                          WindowProvider& provider, const TrainFn& train, const ZeroShotOptions& options = {});

// Last round(f n) windows of each plant go to validation.
std::pair<std::vector<data::SampleWindow>, std::vector<data::SampleWindow>> split_train_val(
    const std::vector<data::SampleWindow>& windows, double val_fraction);

std::string plant_set_label(const std::set<std::string>& plants);

// ---- latent diagnostic --------------------------------------------------------

struct LatentDiagnostics {
    bool vq_on = false;
    double lo = 0.0, hi = 0.0;
    std::vector<double> hist_ctx, hist_ts;  // probability mass per bin
    double kl = 0.0;                        // KL(ctx || ts)
    nlohmann::json to_json() const;
};

// Shared equal-width bins over the pooled range, additive smoothing, then
// KL(ctx || ts). Throws std::invalid_argument on empty input or a zero-width range.
LatentDiagnostics latent_kl(std::span<const double> ctx, std::span<const double> ts, bool vq_on,
                            std::size_t bins = 64, double smoothing = 1e-9);

}  // namespace solarfuse::eval
