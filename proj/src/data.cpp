#include "solarfuse/data.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "solarfuse/container.hpp"
#include "solarfuse/parallel.hpp"
#include "solarfuse/rng.hpp"
#include "solarfuse/solar_geometry.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace solarfuse::data {

// ---- calendar -------------------------------------------------------------

std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2 ? 1 : 0;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

namespace {

struct Civil {
    int y;
    unsigned m, d;
};

Civil civil_from_days(std::int64_t z) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp < 10 ? mp + 3 : mp - 9;
    return {static_cast<int>(yoe + era * 400 + (m <= 2 ? 1 : 0)), m, d};
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) { return a / b - ((a % b != 0) && ((a < 0) != (b < 0))); }

std::string format_date(std::int64_t days) {
    const Civil c = civil_from_days(days);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", c.y, c.m, c.d);
    return buf;
}

std::int64_t parse_date(const std::string& s) {
    int y;
    unsigned m, d;
    char tail;
    if (std::sscanf(s.c_str(), "%d-%u-%u%c", &y, &m, &d, &tail) != 3 || m < 1 || m > 12 || d < 1 || d > 31)
        throw DataError("bad date '" + s + "', expected YYYY-MM-DD");
    return days_from_civil(y, m, d);
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, ',')) out.push_back(cur);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw DataError(where + ": cannot parse number '" + s + "'");
    }
}

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    os << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

std::string format_utc(std::int64_t epoch_hour) {
    const std::int64_t days = floor_div(epoch_hour, 24);
    const std::int64_t hour = epoch_hour - days * 24;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%sT%02" PRId64 ":00:00Z", format_date(days).c_str(), hour);
    return buf;
}

std::int64_t parse_utc(const std::string& stamp) {
    int y;
    unsigned mo, d, h, mi, s;
    char z, tail;
    if (std::sscanf(stamp.c_str(), "%d-%u-%uT%u:%u:%u%c%c", &y, &mo, &d, &h, &mi, &s, &z, &tail) != 7 || z != 'Z' ||
        mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23)
        throw DataError("bad timestamp '" + stamp + "', expected YYYY-MM-DDTHH:00:00Z");
    if (mi != 0 || s != 0) throw DataError("timestamp '" + stamp + "' is not on the hour");
    return days_from_civil(y, mo, d) * 24 + h;
}

std::string local_date(const Dataset& ds, std::size_t day) {
    return format_date(parse_date(ds.start_date) + static_cast<std::int64_t>(day));
}

json SynthConfig::to_json() const {
    json blobs = json::array();
    for (const auto& b : forced_blobs)
        blobs.push_back({{"x", b.x}, {"y", b.y}, {"radius", b.radius}, {"amplitude", b.amplitude}});
    json j = {{"seed", seed},
              {"n_plants", n_plants},
              {"n_days", n_days},
              {"grid", {grid_h, grid_w}},
              {"nwp_channels", nwp_channels},
              {"start_date", start_date},
              {"utc_offset_hours", utc_offset_hours},
              {"region", {{"lat_min", lat_min}, {"lat_max", lat_max}, {"lon_min", lon_min}, {"lon_max", lon_max}}},
              {"cloud_amplitude", cloud_amplitude},
              {"noise", noise},
              {"spawn_rate_scale", spawn_rate_scale},
              {"forced_blobs", blobs},
              {"dropped_samples", drop_samples.size()}};
    j["forced_thickness"] = forced_thickness ? json(*forced_thickness) : json(nullptr);
    return j;
}

// ---- generator ------------------------------------------------------------

namespace {

struct Blob {
    double x, y, vx, vy;
    double birth, life;  // hours
    double radius, amplitude;
};

std::size_t poisson(Rng& rng, double lambda) {
    const double limit = std::exp(-lambda);
    std::size_t k = 0;
    double p = rng.uniform();
    while (p > limit) {
        ++k;
        p *= rng.uniform();
    }
    return k;
}

struct ActiveBlob {
    double x, y, inv_two_var, strength, cutoff2;
};

// 1 - prod(1 - a_i g_i(p))
double cover_at(const std::vector<ActiveBlob>& blobs, double x, double y) {
    double clear = 1.0;
    for (const auto& b : blobs) {
        const double dx = x - b.x, dy = y - b.y;
        const double d2 = dx * dx + dy * dy;
        if (d2 > b.cutoff2) continue;
        clear *= 1.0 - b.strength * std::exp(-d2 * b.inv_two_var);
    }
    return 1.0 - clear;
}

}  // namespace

Dataset synth_generate(const SynthConfig& cfg) {
    if (cfg.n_plants < 1) throw DataError("synth: need at least one plant");
    if (cfg.n_days < 4) throw DataError("synth: need at least 4 days");
    if (cfg.grid_h == 0 || cfg.grid_w == 0) throw DataError("synth: empty grid");
    if (cfg.nwp_channels == 0) throw DataError("synth: need at least one NWP channel");
    if (cfg.lat_max <= cfg.lat_min || cfg.lon_max <= cfg.lon_min) throw DataError("synth: empty region");

    const Rng root(cfg.seed);
    Dataset ds;
    ds.n_days = cfg.n_days;
    ds.start_date = cfg.start_date;
    ds.utc_offset_hours = cfg.utc_offset_hours;
    ds.start_hour = parse_date(cfg.start_date) * 24 - cfg.utc_offset_hours;
    ds.grid_h = cfg.grid_h;
    ds.grid_w = cfg.grid_w;
    ds.ctx_channels = 1;
    ds.nwp_channels = cfg.nwp_channels;

    const double lat_mid = 0.5 * (cfg.lat_min + cfg.lat_max), lat_half = 0.5 * (cfg.lat_max - cfg.lat_min);
    const double lon_mid = 0.5 * (cfg.lon_min + cfg.lon_max), lon_half = 0.5 * (cfg.lon_max - cfg.lon_min);

    // plants
    Rng prng = root.derive("plants");
    std::vector<double> efficiency(cfg.n_plants);
    for (std::size_t i = 0; i < cfg.n_plants; ++i) {
        PlantMeta p;
        char id[32];
        std::snprintf(id, sizeof id, "plant_%02zu", i);
        p.id = id;
        p.lon = prng.uniform(-0.8, 0.8);
        p.lat = prng.uniform(-0.8, 0.8);
        p.lon_deg = lon_mid + p.lon * lon_half;
        p.lat_deg = lat_mid + p.lat * lat_half;
        p.capacity = std::round(prng.uniform(2000.0, 50000.0));
        efficiency[i] = prng.uniform(0.75, 0.95);
        ds.plants.push_back(p);
    }

    // daily regional weather: wind, cloud spawn regime, optical thickness
    Rng wrng = root.derive("weather");
    const std::size_t days = cfg.n_days;
    std::vector<double> wind_u(days), wind_v(days), spawn(days), thick(days + 1);
    {
        double u = 0.04, v = 0.0, t = 0.6;
        const double regimes[3] = {0.6, 3.0, 6.0};
        for (std::size_t d = 0; d <= days; ++d) {
            t = std::clamp(0.6 + 0.75 * (t - 0.6) + wrng.normal(0.0, 0.15), 0.2, 1.0);
            thick[d] = cfg.forced_thickness ? *cfg.forced_thickness : t;
            if (d == days) break;
            u = 0.7 * u + 0.3 * 0.04 + wrng.normal(0.0, 0.02);
            v = 0.7 * v + wrng.normal(0.0, 0.02);
            wind_u[d] = u;
            wind_v[d] = v;
            spawn[d] = regimes[wrng.below(3)] * cfg.spawn_rate_scale;
        }
    }

    const std::size_t hours = days * 24;
    const std::size_t H = cfg.grid_h, W = cfg.grid_w, P = cfg.n_plants;
    std::vector<double> px(W), py(H);
    for (std::size_t j = 0; j < W; ++j) px[j] = -1.0 + (2.0 * j + 1.0) / static_cast<double>(W);
    for (std::size_t i = 0; i < H; ++i) py[i] = 1.0 - (2.0 * i + 1.0) / static_cast<double>(H);

    std::vector<double> plant_cover(P * hours), tau_hour(hours);
    ds.ctx.resize(days);
    std::vector<std::vector<double>> ctx_days(days, std::vector<double>(24 * H * W, 0.0));
    {
        Rng crng = root.derive("clouds");
        std::vector<Blob> blobs;
        const int warmup = 24;
        for (int hh = -warmup; hh < static_cast<int>(hours); ++hh) {
            const std::size_t d = hh < 0 ? 0 : static_cast<std::size_t>(hh) / 24;
            const double now = hh;
            if (cfg.cloud_amplitude > 0.0) {
                const std::size_t births = poisson(crng, spawn[d]);
                for (std::size_t b = 0; b < births; ++b) {
                    Blob bl;
                    bl.x = crng.uniform(-1.6, 1.6);
                    bl.y = crng.uniform(-1.6, 1.6);
                    bl.vx = wind_u[d] + crng.normal(0.0, 0.01);
                    bl.vy = wind_v[d] + crng.normal(0.0, 0.01);
                    bl.birth = now;
                    bl.life = crng.uniform(6.0, 36.0);
                    bl.radius = crng.uniform(0.08, 0.35);
                    bl.amplitude = std::min(1.0, crng.uniform(0.4, 1.0) * cfg.cloud_amplitude);
                    blobs.push_back(bl);
                }
            }
            std::erase_if(blobs, [&](const Blob& b) { return now - b.birth >= b.life; });
            if (hh < 0) continue;
            const std::size_t h = static_cast<std::size_t>(hh);

            std::vector<ActiveBlob> active;
            for (const auto& b : blobs) {
                const double age = now - b.birth;
                const double env = std::sin(M_PI * age / b.life);
                if (env <= 0.0) continue;
                active.push_back({b.x + b.vx * age, b.y + b.vy * age, 1.0 / (2.0 * b.radius * b.radius),
                                  b.amplitude * env, 25.0 * b.radius * b.radius});
            }
            for (const auto& f : cfg.forced_blobs)
                active.push_back({f.x, f.y, 1.0 / (2.0 * f.radius * f.radius), std::clamp(f.amplitude, 0.0, 1.0),
                                  1e300});

            const std::size_t local = h % 24;
            const double tau = thick[d] + (thick[d + 1] - thick[d]) * static_cast<double>(local) / 24.0;
            tau_hour[h] = tau;
            const double epoch = static_cast<double>(ds.start_hour + static_cast<std::int64_t>(h));
            double* frame = ctx_days[d].data() + local * H * W;
            for (std::size_t i = 0; i < H; ++i) {
                const double lat_deg = lat_mid + py[i] * lat_half;
                for (std::size_t j = 0; j < W; ++j) {
                    const double lon_deg = lon_mid + px[j] * lon_half;
                    if (baseline::solar_zenith(lat_deg, lon_deg, epoch) >= 90.0) continue;
                    frame[i * W + j] = tau * cover_at(active, px[j], py[i]);
                }
            }
            for (std::size_t p = 0; p < P; ++p)
                plant_cover[p * hours + h] = cover_at(active, ds.plants[p].lon, ds.plants[p].lat);
        }
    }
    for (std::size_t d = 0; d < days; ++d)
        ds.ctx[d] = Tensor::from({24, 1, H, W}, std::move(ctx_days[d]));

    // power
    ds.power.assign(P, std::vector<double>(hours, 0.0));
    ds.valid.assign(P, std::vector<std::uint8_t>(hours, 1));
    for (std::size_t p = 0; p < P; ++p) {
        Rng nrng = root.derive("noise/" + ds.plants[p].id);
        for (std::size_t h = 0; h < hours; ++h) {
            const double epoch = static_cast<double>(ds.start_hour + static_cast<std::int64_t>(h));
            const double ghi = baseline::clearsky_ghi(baseline::solar_zenith(ds.plants[p].lat_deg, ds.plants[p].lon_deg, epoch));
            const double eps = nrng.normal();
            if (ghi <= 0.0) continue;
            double v = efficiency[p] * ghi / baseline::kZenithGhi * (1.0 - tau_hour[h] * plant_cover[p * hours + h]);
            v *= 1.0 + cfg.noise * eps;
            ds.power[p][h] = std::clamp(v, 0.0, 1.0);
        }
    }
    for (const auto& [p, h] : cfg.drop_samples) {
        if (p >= P || h >= hours) throw DataError("synth: dropped sample out of range");
        ds.valid[p][h] = 0;
        ds.power[p][h] = 0.0;
    }

    // NWP: forecasts know the smoothed, biased cloud cover but only a
    // climatological optical thickness.
    ds.nwp.resize(P);
    constexpr double kTauClim = 0.6;
    for (std::size_t p = 0; p < P; ++p) {
        Rng frng = root.derive("nwp/" + ds.plants[p].id);
        const PlantMeta& pl = ds.plants[p];
        std::vector<double> bias(days), press(days);
        for (std::size_t d = 0; d < days; ++d) {
            bias[d] = frng.normal(0.05, 0.05);
            press[d] = frng.normal(0.0, 4.0);
        }
        const std::size_t C = cfg.nwp_channels;
        std::vector<double> f(hours * C);
        for (std::size_t h = 0; h < hours; ++h) {
            const std::size_t d = h / 24;
            double smooth = 0.0;
            int cnt = 0;
            for (int k = -2; k <= 2; ++k) {
                const long t = static_cast<long>(h) + k;
                if (t < 0 || t >= static_cast<long>(hours)) continue;
                smooth += plant_cover[p * hours + static_cast<std::size_t>(t)];
                ++cnt;
            }
            const double chat = std::clamp(smooth / cnt + bias[d] + frng.normal(0.0, 0.08), 0.0, 1.0);
            const double epoch = static_cast<double>(ds.start_hour + static_cast<std::int64_t>(h));
            const double ghi_cs = baseline::clearsky_ghi(baseline::solar_zenith(pl.lat_deg, pl.lon_deg, epoch));
            const double ssrd = ghi_cs * (1.0 - kTauClim * chat);
            const double doy = std::fmod(epoch / 24.0 - static_cast<double>(days_from_civil(2021, 1, 1)), 365.25);
            const double temp = 15.0 - 12.0 * std::cos(2.0 * M_PI * (doy - 15.0) / 365.25) +
                                6.0 * ghi_cs / 1000.0 * (1.0 - 0.5 * chat) - 2.0 * pl.lat;
            const double feats[15] = {
                0.75 * ghi_cs,
                0.75 * ghi_cs * (1.0 - kTauClim * chat),
                0.045 * ssrd,
                ssrd,
                0.8 * ssrd,
                1010.0 + 5.0 * std::sin(2.0 * M_PI * doy / 365.25) + press[d] - 3.0 * chat - 8.0 * pl.lat,
                ghi_cs > 120.0 ? 3600.0 * (1.0 - chat) : 0.0,
                std::clamp(0.7 * chat + frng.normal(0.0, 0.05), 0.0, 1.0),
                chat,
                temp,
                temp - 3.0 - 6.0 * (1.0 - chat),
                temp + 0.008 * ssrd,
                std::max(0.0, chat - 0.75) * 4.0,
                wind_u[d] * 150.0 + frng.normal(0.0, 0.5),
                wind_v[d] * 150.0 + frng.normal(0.0, 0.5),
            };
            for (std::size_t c = 0; c < C; ++c) f[h * C + c] = c < 15 ? feats[c] : frng.normal();
        }
        ds.nwp[p] = Tensor::from({hours, C}, std::move(f));
    }

    // manifest
    const std::size_t n = days - 1;
    const std::size_t ntr = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
    const std::size_t nva = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
    json features = json::array();
    for (std::size_t c = 0; c < cfg.nwp_channels; ++c)
        features.push_back(c < kNwpFeatures.size() ? std::string(kNwpFeatures[c]) : "noise_" + std::to_string(c));
    ds.manifest = {
        {"format", "solarfuse-dataset"},
        {"version", 1},
        {"n_plants", P},
        {"n_days", days},
        {"start_date", cfg.start_date},
        {"utc_offset_hours", cfg.utc_offset_hours},
        {"start_utc", format_utc(ds.start_hour)},
        {"resolution_minutes", 60},
        {"grid", {H, W}},
        {"ctx_channels", 1},
        {"nwp_channels", cfg.nwp_channels},
        {"nwp_features", features},
        {"files",
         {{"plants", "plants.csv"}, {"ts", "ts/{plant_id}.csv"}, {"ctx", "ctx/{date}.fstn"}, {"nwp", "nwp/{plant_id}.fstn"}}},
        {"split",
         {{"mode", "chronological"},
          {"fractions", {0.6, 0.2, 0.2}},
          {"train_target_days", {local_date(ds, 1), local_date(ds, ntr)}},
          {"val_target_days", {local_date(ds, ntr + 1), local_date(ds, ntr + nva)}},
          {"test_target_days", {local_date(ds, ntr + nva + 1), local_date(ds, n)}}}},
        {"generator", cfg.to_json()},
    };
    return ds;
}

// ---- files ----------------------------------------------------------------

void write_dataset(const Dataset& ds, const fs::path& dir) {
    fs::create_directories(dir / "ts");
    fs::create_directories(dir / "ctx");
    fs::create_directories(dir / "nwp");
    write_text(dir / "manifest.json", ds.manifest.dump(2) + "\n");

    std::string plants = "plant_id,lat,lon,lat_deg,lon_deg,capacity_kw\n";
    for (const auto& p : ds.plants)
        plants += p.id + "," + fmt17(p.lat) + "," + fmt17(p.lon) + "," + fmt17(p.lat_deg) + "," + fmt17(p.lon_deg) +
                  "," + fmt17(p.capacity) + "\n";
    write_text(dir / "plants.csv", plants);

    for (std::size_t p = 0; p < ds.plants.size(); ++p) {
        std::string csv = "timestamp,power_kw\n";
        csv.reserve(ds.power[p].size() * 48);
        for (std::size_t h = 0; h < ds.power[p].size(); ++h) {
            if (!ds.valid[p][h]) continue;
            csv += format_utc(ds.start_hour + static_cast<std::int64_t>(h)) + "," +
                   fmt17(ds.power[p][h] * ds.plants[p].capacity) + "\n";
        }
        write_text(dir / "ts" / (ds.plants[p].id + ".csv"), csv);
        save_tensor(dir / "nwp" / (ds.plants[p].id + ".fstn"), ds.nwp[p], "nwp/" + ds.plants[p].id);
    }
    for (std::size_t d = 0; d < ds.ctx.size(); ++d) {
        if (!ds.ctx[d].defined()) continue;
        const std::string date = local_date(ds, d);
        save_tensor(dir / "ctx" / (date + ".fstn"), ds.ctx[d], "ctx/" + date);
    }
}

Dataset load_dataset(const fs::path& dir, std::size_t threads) {
    if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
    Dataset ds;
    try {
        ds.manifest = json::parse(read_text(dir / "manifest.json"));
        ds.n_days = ds.manifest.at("n_days").get<std::size_t>();
        ds.start_date = ds.manifest.at("start_date").get<std::string>();
        ds.utc_offset_hours = ds.manifest.at("utc_offset_hours").get<int>();
        ds.grid_h = ds.manifest.at("grid").at(0).get<std::size_t>();
        ds.grid_w = ds.manifest.at("grid").at(1).get<std::size_t>();
        ds.ctx_channels = ds.manifest.at("ctx_channels").get<std::size_t>();
        ds.nwp_channels = ds.manifest.at("nwp_channels").get<std::size_t>();
    } catch (const json::exception& e) {
        throw DataError((dir / "manifest.json").string() + ": " + e.what());
    }
    ds.start_hour = parse_date(ds.start_date) * 24 - ds.utc_offset_hours;
    const std::size_t hours = ds.n_days * 24;

    {
        std::istringstream is(read_text(dir / "plants.csv"));
        std::string line;
        std::getline(is, line);
        if (line.rfind("plant_id,lat,lon,lat_deg,lon_deg,capacity_kw", 0) != 0)
            throw DataError("plants.csv: unexpected header '" + line + "'");
        std::set<std::string> ids;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto f = split_csv(line);
            if (f.size() != 6) throw DataError("plants.csv: expected 6 fields in '" + line + "'");
            PlantMeta p;
            p.id = f[0];
            p.lat = parse_double(f[1], "plants.csv");
            p.lon = parse_double(f[2], "plants.csv");
            p.lat_deg = parse_double(f[3], "plants.csv");
            p.lon_deg = parse_double(f[4], "plants.csv");
            p.capacity = parse_double(f[5], "plants.csv");
            if (p.capacity <= 0.0) throw DataError("plants.csv: plant " + p.id + " has non-positive capacity");
            if (!ids.insert(p.id).second) throw DataError("plants.csv: duplicate plant id " + p.id);
            ds.plants.push_back(p);
        }
    }
    const std::size_t P = ds.plants.size();
    if (P == 0) throw DataError("plants.csv lists no plants");
    ds.power.assign(P, std::vector<double>(hours, 0.0));
    ds.valid.assign(P, std::vector<std::uint8_t>(hours, 0));
    ds.nwp.resize(P);

    parallel_for(P, threads, [&](std::size_t p) {
        const PlantMeta& pl = ds.plants[p];
        const fs::path ts_path = dir / "ts" / (pl.id + ".csv");
        std::istringstream is(read_text(ts_path));
        std::string line;
        std::getline(is, line);
        if (line != "timestamp,power_kw") throw DataError(ts_path.string() + ": unexpected header '" + line + "'");
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto f = split_csv(line);
            if (f.size() != 2) throw DataError(ts_path.string() + ": expected 2 fields in '" + line + "'");
            const std::int64_t rel = parse_utc(f[0]) - ds.start_hour;
            if (rel < 0 || rel >= static_cast<std::int64_t>(hours))
                throw DataError(ts_path.string() + ": timestamp " + f[0] + " outside the dataset range");
            const auto h = static_cast<std::size_t>(rel);
            if (ds.valid[p][h]) throw DataError(ts_path.string() + ": duplicate timestamp " + f[0]);
            const double kw = parse_double(f[1], ts_path.string());
            if (!std::isfinite(kw) || kw < 0.0) throw DataError(ts_path.string() + ": invalid power at " + f[0]);
            ds.power[p][h] = std::clamp(kw / pl.capacity, 0.0, 1.0);
            ds.valid[p][h] = 1;
        }
        const fs::path nwp_path = dir / "nwp" / (pl.id + ".fstn");
        if (!fs::exists(nwp_path)) throw DataError("missing NWP file " + nwp_path.string());
        Tensor nwp = load_tensor(nwp_path).tensor;
        if (nwp.shape() != Shape{hours, ds.nwp_channels})
            throw DataError(nwp_path.string() + ": shape " + shape_str(nwp.shape()) + ", expected " +
                            shape_str({hours, ds.nwp_channels}));
        ds.nwp[p] = nwp;
    });

    ds.ctx.resize(ds.n_days);
    parallel_for(ds.n_days, threads, [&](std::size_t d) {
        const fs::path path = dir / "ctx" / (local_date(ds, d) + ".fstn");
        if (!fs::exists(path)) return;  // treated as a gap
        Tensor t = load_tensor(path).tensor;
        const Shape want{24, ds.ctx_channels, ds.grid_h, ds.grid_w};
        if (t.shape() != want)
            throw DataError(path.string() + ": shape " + shape_str(t.shape()) + ", expected " + shape_str(want));
        ds.ctx[d] = t;
    });
    return ds;
}

std::string dataset_checksum(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
    std::sort(files.begin(), files.end());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& f : files) {
        h = fnv1a64(f.generic_string(), h);
        h = fnv1a64(std::string_view("\0", 1), h);
        h = fnv1a64(read_text(dir / f), h);
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

// ---- windows --------------------------------------------------------------

WindowSet build_windows(const Dataset& ds, std::size_t t_in, std::size_t t_out) {
    if (t_in == 0 || t_out == 0 || t_in > 24 * (ds.n_days - 1) || t_out > 24)
        throw std::invalid_argument("build_windows: need 0 < t_out <= 24 and history inside the dataset");
    WindowSet out;
    const std::size_t hours = ds.n_days * 24;
    const std::size_t hw = ds.grid_h * ds.grid_w * ds.ctx_channels;
    const std::size_t first_day = (t_in + 23) / 24;
    for (std::size_t p = 0; p < ds.plants.size(); ++p) {
        for (std::size_t d = first_day; d < ds.n_days; ++d) {
            const std::size_t start = d * 24;
            const std::size_t hist = start - t_in;
            std::string why;
            for (std::size_t h = hist; h < start + t_out && h < hours && why.empty(); ++h)
                if (!ds.valid[p][h]) why = "missing power at " + format_utc(ds.start_hour + static_cast<std::int64_t>(h));
            for (std::size_t dd = hist / 24; dd <= (start - 1) / 24 && why.empty(); ++dd)
                if (!ds.ctx[dd].defined()) why = "missing context for " + local_date(ds, dd);
            if (!why.empty()) {
                out.skipped.push_back(ds.plants[p].id + " " + local_date(ds, d) + ": " + why);
                continue;
            }
            SampleWindow w;
            w.plant_index = p;
            w.plant = ds.plants[p];
            w.day = d;
            w.t0 = ds.start_hour + static_cast<std::int64_t>(start);
            const auto& pw = ds.power[p];
            w.x_ts = Tensor::from({t_in, 1}, std::vector<double>(pw.begin() + hist, pw.begin() + start));
            w.y = Tensor::from({t_out, 1}, std::vector<double>(pw.begin() + start, pw.begin() + start + t_out));
            const std::size_t C = ds.nwp_channels;
            auto nwp = ds.nwp[p].data();
            w.x_aux = Tensor::from({t_out, C}, std::vector<double>(nwp.begin() + start * C, nwp.begin() + (start + t_out) * C));
            if (t_in == 24) {
                w.x_ctx = ds.ctx[d - 1];
            } else {
                std::vector<double> buf(t_in * hw);
                for (std::size_t k = 0; k < t_in; ++k) {
                    const std::size_t h = hist + k;
                    auto src = ds.ctx[h / 24].data();
                    std::copy_n(src.begin() + (h % 24) * hw, hw, buf.begin() + k * hw);
                }
                w.x_ctx = Tensor::from({t_in, ds.ctx_channels, ds.grid_h, ds.grid_w}, std::move(buf));
            }
            out.windows.push_back(std::move(w));
        }
    }
    return out;
}

namespace {

std::map<std::size_t, std::vector<const SampleWindow*>> by_plant(const std::vector<SampleWindow>& windows) {
    std::map<std::size_t, std::vector<const SampleWindow*>> m;
    for (const auto& w : windows) m[w.plant_index].push_back(&w);
    for (auto& [p, v] : m)
        std::stable_sort(v.begin(), v.end(), [](auto* a, auto* b) { return a->t0 < b->t0; });
    return m;
}

}  // namespace

Split split_chronological(const std::vector<SampleWindow>& windows, const std::array<double, 3>& fractions) {
    for (double f : fractions)
        if (!(f > 0.0)) throw std::invalid_argument("split: fractions must be positive");
    if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9)
        throw std::invalid_argument("split: fractions must sum to 1");
    Split s;
    for (const auto& [p, v] : by_plant(windows)) {
        const std::size_t n = v.size();
        const auto ntr = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
        const auto nva = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
        if (ntr == 0 || nva == 0 || ntr + nva >= n)
            throw std::invalid_argument("split: plant " + v.front()->plant.id + " has too few windows (" +
                                        std::to_string(n) + ") for three non-empty splits");
        for (std::size_t i = 0; i < n; ++i) (i < ntr ? s.train : i < ntr + nva ? s.val : s.test).push_back(*v[i]);
    }
    return s;
}

Split split_by_plant(const std::vector<SampleWindow>& windows, const std::set<std::string>& train_plants,
                     const std::set<std::string>& test_plants, double val_fraction) {
    for (const auto& id : train_plants)
        if (test_plants.count(id)) throw std::invalid_argument("split_by_plant: plant " + id + " is in both sets");
    if (train_plants.empty() || test_plants.empty()) throw std::invalid_argument("split_by_plant: empty plant set");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("split_by_plant: bad val fraction");
    Split s;
    for (const auto& [p, v] : by_plant(windows)) {
        const std::string& id = v.front()->plant.id;
        if (test_plants.count(id)) {
            for (auto* w : v) s.test.push_back(*w);
        } else if (train_plants.count(id)) {
            const std::size_t n = v.size();
            const auto nva = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
            if (nva == 0 || nva >= n) throw std::invalid_argument("split_by_plant: too few windows for " + id);
            for (std::size_t i = 0; i < n; ++i) (i < n - nva ? s.train : s.val).push_back(*v[i]);
        }
    }
    if (s.train.empty() || s.test.empty()) throw std::invalid_argument("split_by_plant: a plant set matched no windows");
    return s;
}

// ---- normalisation --------------------------------------------------------

json NwpStats::to_json() const { return {{"mean", mean}, {"std", std}}; }

NwpStats NwpStats::from_json(const json& j) {
    NwpStats s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    if (s.mean.size() != s.std.size()) throw DataError("NWP stats: mean/std length mismatch");
    return s;
}

NwpStats fit_nwp_stats(const std::vector<SampleWindow>& train, std::vector<std::string>* warnings) {
    if (train.empty()) throw std::invalid_argument("fit_nwp_stats: empty training set");
    const std::size_t C = train.front().x_aux.dim(1);
    std::vector<double> sum(C, 0.0), sq(C, 0.0);
    std::size_t rows = 0;
    for (const auto& w : train) {
        auto a = w.x_aux.data();
        for (std::size_t r = 0; r < w.x_aux.dim(0); ++r)
            for (std::size_t c = 0; c < C; ++c) sum[c] += a[r * C + c];
        rows += w.x_aux.dim(0);
    }
    NwpStats s;
    s.mean.resize(C);
    s.std.resize(C);
    for (std::size_t c = 0; c < C; ++c) s.mean[c] = sum[c] / static_cast<double>(rows);
    for (const auto& w : train) {
        auto a = w.x_aux.data();
        for (std::size_t r = 0; r < w.x_aux.dim(0); ++r)
            for (std::size_t c = 0; c < C; ++c) sq[c] += (a[r * C + c] - s.mean[c]) * (a[r * C + c] - s.mean[c]);
    }
    for (std::size_t c = 0; c < C; ++c) {
        const double sd = std::sqrt(sq[c] / static_cast<double>(rows));
        if (sd < 1e-12) {
            s.std[c] = 1.0;
            if (warnings) warnings->push_back("NWP channel " + std::to_string(c) + " is constant on train; centred only");
        } else {
            s.std[c] = sd;
        }
    }
    return s;
}

std::vector<SampleWindow> apply_nwp_stats(const std::vector<SampleWindow>& windows, const NwpStats& stats) {
    std::vector<SampleWindow> out = windows;
    for (auto& w : out) {
        const std::size_t C = w.x_aux.dim(1);
        if (C != stats.mean.size())
            throw DataError("NWP stats cover " + std::to_string(stats.mean.size()) + " channels, data has " +
                            std::to_string(C));
        std::vector<double> v(w.x_aux.data().begin(), w.x_aux.data().end());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - stats.mean[i % C]) / stats.std[i % C];
        w.x_aux = Tensor::from(w.x_aux.shape(), std::move(v));
    }
    return out;
}

}  // namespace solarfuse::data
