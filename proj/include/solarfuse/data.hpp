#pragma once

// Trimodal solar dataset: per-plant power series, regional context image
// stacks, per-plant NWP covariates. Synthetic generation, on-disk format,
// day-pair windows, splits and normalisation.
//
// Layout of a dataset directory:
//   manifest.json           metadata, feature names, file map
//   plants.csv              plant_id,lat,lon,lat_deg,lon_deg,capacity_kw
//   ts/{plant_id}.csv       timestamp (ISO-8601 UTC),power_kw
//   ctx/{YYYY-MM-DD}.fstn   [24, C_ctx, H, W] for each local day
//   nwp/{plant_id}.fstn     [n_days * 24, C_aux]

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "solarfuse/tensor.hpp"

namespace solarfuse::data {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::array<const char*, 15> kNwpFeatures = {
    "clear_sky_direct_solar_radiation", "direct_solar_radiation", "downward_uv_radiation",
    "surface_solar_radiation_downwards", "surface_net_solar_radiation", "surface_pressure",
    "sunshine_duration", "low_cloud_cover", "total_cloud_cover", "temperature_2m", "dewpoint_2m",
    "skin_temperature", "total_precipitation", "wind_u_100m", "wind_v_100m"};

struct PlantMeta {
    std::string id;
    double lat = 0.0;  // normalised to [-1, 1] over the region
    double lon = 0.0;
    double lat_deg = 0.0;
    double lon_deg = 0.0;
    double capacity = 1.0;  // kW
};

// A static cloud for constructed scenarios; full strength for the whole run.
struct ForcedBlob {
    double x = 0.0;  // normalised lon
    double y = 0.0;  // normalised lat
    double radius = 0.2;
    double amplitude = 1.0;
};

struct SynthConfig {
    std::uint64_t seed = 42;
    std::size_t n_plants = 10;
    std::size_t n_days = 120;
    std::size_t grid_h = 32;
    std::size_t grid_w = 32;
    std::size_t nwp_channels = kNwpFeatures.size();
    std::string start_date = "2021-01-01";  // local calendar date of day 0
    int utc_offset_hours = 8;
    double lat_min = 30.0, lat_max = 38.0;
    double lon_min = 110.0, lon_max = 120.0;
    double cloud_amplitude = 1.0;  // 0 disables random clouds
    double noise = 0.02;           // multiplicative power noise (std)
    double spawn_rate_scale = 1.0;
    std::optional<double> forced_thickness;
    std::vector<ForcedBlob> forced_blobs;
    // If set, the generator leaves these (plant, hour) samples out of the CSV.
    std::vector<std::pair<std::size_t, std::size_t>> drop_samples;

    nlohmann::json to_json() const;
};

struct Dataset {
    std::vector<PlantMeta> plants;
    std::size_t n_days = 0;
    std::string start_date;
    int utc_offset_hours = 0;
    std::int64_t start_hour = 0;  // UTC epoch hour of local midnight of day 0
    std::size_t grid_h = 0, grid_w = 0, ctx_channels = 1, nwp_channels = 0;
    std::vector<std::vector<double>> power;         // per plant, normalised by capacity
    std::vector<std::vector<std::uint8_t>> valid;   // per plant, 0 where the hour is missing
    std::vector<Tensor> ctx;                        // per day [24, C_ctx, H, W]; undefined if missing
    std::vector<Tensor> nwp;                        // per plant [n_days * 24, C_aux]
    nlohmann::json manifest;
};

// Calendar helpers (UTC).
std::int64_t days_from_civil(int y, unsigned m, unsigned d);
std::string format_utc(std::int64_t epoch_hour);
std::int64_t parse_utc(const std::string& stamp);  // throws DataError
std::string local_date(const Dataset& ds, std::size_t day);

Dataset synth_generate(const SynthConfig& cfg);
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir, std::size_t threads = 1);
// FNV-1a over relative paths and bytes of every file, as 16 hex digits.
std::string dataset_checksum(const std::filesystem::path& dir);

struct SampleWindow {
    Tensor x_ts;   // [T_in, C_ts]
    Tensor x_ctx;  // [T_in, C_ctx, H, W]; shares storage with the dataset's day block
    Tensor x_aux;  // [T_out, C_aux]
    Tensor y;      // [T_out, C_ts]
    std::size_t plant_index = 0;
    PlantMeta plant;
    std::int64_t t0 = 0;  // UTC epoch hour of the first target hour
    std::size_t day = 0;  // index of the target day
};

struct WindowSet {
    std::vector<SampleWindow> windows;
    std::vector<std::string> skipped;  // one line per skipped window
};

// Windows start at local midnight; the target is day d, history is the
// hours right before it. Windows touching a missing hour are skipped.
WindowSet build_windows(const Dataset& ds, std::size_t t_in = 24, std::size_t t_out = 24);

struct Split {
    std::vector<SampleWindow> train, val, test;
};

// Per plant, in date order: round(f0 n) train, round(f1 n) val, rest test.
Split split_chronological(const std::vector<SampleWindow>& windows,
                          const std::array<double, 3>& fractions = {0.6, 0.2, 0.2});
// Test = all windows of test plants. Train plants are split chronologically
// into train and val with `val_fraction`.
Split split_by_plant(const std::vector<SampleWindow>& windows, const std::set<std::string>& train_plants,
                     const std::set<std::string>& test_plants, double val_fraction = 0.2);

struct NwpStats {
    std::vector<double> mean;
    std::vector<double> std;  // 1 for channels that were constant on train

    nlohmann::json to_json() const;
    static NwpStats from_json(const nlohmann::json& j);
};

NwpStats fit_nwp_stats(const std::vector<SampleWindow>& train, std::vector<std::string>* warnings = nullptr);
std::vector<SampleWindow> apply_nwp_stats(const std::vector<SampleWindow>& windows, const NwpStats& stats);

}  // namespace solarfuse::data
