#pragma once

// Persistence, hourly Mean and Clear Sky forecasters.

#include <filesystem>
#include <map>

#include "solarfuse/forecaster.hpp"
#include "solarfuse/solar_geometry.hpp"

namespace solarfuse::baseline {

// Yesterday's curve as today's forecast.
Tensor persistence(const data::SampleWindow& w);

class Persistence final : public Forecaster {
public:
    std::string name() const override { return "Persistence"; }
    std::vector<Tensor> predict(std::span<const data::SampleWindow> windows) const override;
};

// Mean target value per position in the day (windows start at local midnight).
class MeanBaseline final : public Forecaster {
public:
    static MeanBaseline fit(std::span<const data::SampleWindow> train);
    const Tensor& profile() const { return profile_; }  // [T_out, C_ts]
    Tensor predict_one(const data::SampleWindow& w) const;
    std::string name() const override { return "Mean"; }
    std::vector<Tensor> predict(std::span<const data::SampleWindow> windows) const override;

private:
    Tensor profile_;
};

struct ClearSkyModel {
    double lat_deg = 0.0;
    double lon_deg = 0.0;
    double scale = 0.0;  // normalised power per W/m^2
    // clip(scale * GHI(t), 0, 1) at each target hour
    Tensor predict(const data::SampleWindow& w) const;
};

// Least squares of target power on clear-sky GHI over daytime hours.
// Throws std::invalid_argument when no training hour has daylight.
ClearSkyModel fit_clearsky(std::span<const data::SampleWindow> train, const data::PlantMeta& plant);

// One fitted model per training plant; unseen plants use the mean scale.
class ClearSky final : public Forecaster {
public:
    static ClearSky fit(std::span<const data::SampleWindow> train);
    const std::map<std::string, ClearSkyModel>& models() const { return models_; }
    double fallback_scale() const { return fallback_; }
    std::string name() const override { return "Clear Sky"; }
    std::vector<Tensor> predict(std::span<const data::SampleWindow> windows) const override;

private:
    std::map<std::string, ClearSkyModel> models_;
    double fallback_ = 0.0;
};

// plant_id,t0,hour,y_hat with t0 as ISO-8601 UTC.
void write_predictions_csv(const std::filesystem::path& path, std::span<const data::SampleWindow> windows,
                           const std::vector<Tensor>& predictions);

}  // namespace solarfuse::baseline
