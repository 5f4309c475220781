#include "solarfuse/baseline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace solarfuse::baseline {

Tensor persistence(const data::SampleWindow& w) {
    if (w.x_ts.shape() != w.y.shape())
        throw ShapeError("persistence needs T_in == T_out, got history " + shape_str(w.x_ts.shape()) +
                         " and target " + shape_str(w.y.shape()));
    return w.x_ts.detach();
}

std::vector<Tensor> Persistence::predict(std::span<const data::SampleWindow> windows) const {
    std::vector<Tensor> out;
    out.reserve(windows.size());
    for (const auto& w : windows) out.push_back(persistence(w));
    return out;
}

MeanBaseline MeanBaseline::fit(std::span<const data::SampleWindow> train) {
    if (train.empty()) throw std::invalid_argument("mean baseline: empty training set");
    const Shape shape = train.front().y.shape();
    std::vector<double> sum(shape_numel(shape), 0.0);
    for (const auto& w : train) {
        if (w.y.shape() != shape) throw ShapeError("mean baseline: mixed target shapes");
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += w.y.data()[i];
    }
    for (double& v : sum) v /= static_cast<double>(train.size());
    MeanBaseline m;
    m.profile_ = Tensor::from(shape, std::move(sum));
    return m;
}

Tensor MeanBaseline::predict_one(const data::SampleWindow& w) const {
    if (w.y.shape() != profile_.shape())
        throw ShapeError("mean baseline: profile " + shape_str(profile_.shape()) + " vs target " +
                         shape_str(w.y.shape()));
    return profile_.detach();
}

std::vector<Tensor> MeanBaseline::predict(std::span<const data::SampleWindow> windows) const {
    std::vector<Tensor> out;
    for (const auto& w : windows) out.push_back(predict_one(w));
    return out;
}

namespace {
double ghi_at(double lat, double lon, std::int64_t epoch_hour) {
    return clearsky_ghi(solar_zenith(lat, lon, static_cast<double>(epoch_hour)));
}
}  // namespace

Tensor ClearSkyModel::predict(const data::SampleWindow& w) const {
    const std::size_t t = w.y.dim(0), c = w.y.dim(1);
    std::vector<double> out(t * c);
    for (std::size_t h = 0; h < t; ++h) {
        const double v = std::clamp(scale * ghi_at(lat_deg, lon_deg, w.t0 + static_cast<std::int64_t>(h)), 0.0, 1.0);
        for (std::size_t k = 0; k < c; ++k) out[h * c + k] = v;
    }
    return Tensor::from(w.y.shape(), std::move(out));
}

ClearSkyModel fit_clearsky(std::span<const data::SampleWindow> train, const data::PlantMeta& plant) {
    double num = 0.0, den = 0.0;
    for (const auto& w : train) {
        if (w.plant.id != plant.id) continue;
        const std::size_t c = w.y.dim(1);
        for (std::size_t h = 0; h < w.y.dim(0); ++h) {
            const double g = ghi_at(plant.lat_deg, plant.lon_deg, w.t0 + static_cast<std::int64_t>(h));
            if (g <= 0.0) continue;
            for (std::size_t k = 0; k < c; ++k) {
                num += g * w.y.data()[h * c + k];
                den += g * g;
            }
        }
    }
    if (den <= 0.0)
        throw std::invalid_argument("clear-sky fit: no daytime training hours for plant " + plant.id);
    return {plant.lat_deg, plant.lon_deg, std::max(0.0, num / den)};
}

ClearSky ClearSky::fit(std::span<const data::SampleWindow> train) {
    if (train.empty()) throw std::invalid_argument("clear-sky baseline: empty training set");
    ClearSky cs;
    for (const auto& w : train)
        if (!cs.models_.count(w.plant.id)) cs.models_[w.plant.id] = fit_clearsky(train, w.plant);
    double s = 0.0;
    for (const auto& [id, m] : cs.models_) s += m.scale;
    cs.fallback_ = s / static_cast<double>(cs.models_.size());
    return cs;
}

std::vector<Tensor> ClearSky::predict(std::span<const data::SampleWindow> windows) const {
    std::vector<Tensor> out;
    for (const auto& w : windows) {
        auto it = models_.find(w.plant.id);
        const ClearSkyModel m = it != models_.end() ? it->second
                                                    : ClearSkyModel{w.plant.lat_deg, w.plant.lon_deg, fallback_};
        out.push_back(m.predict(w));
    }
    return out;
}

void write_predictions_csv(const std::filesystem::path& path, std::span<const data::SampleWindow> windows,
                           const std::vector<Tensor>& predictions) {
    if (windows.size() != predictions.size())
        throw std::invalid_argument("write_predictions_csv: " + std::to_string(windows.size()) + " windows but " +
                                    std::to_string(predictions.size()) + " predictions");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "plant_id,t0,hour,y_hat\n";
    char buf[40];
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const std::string t0 = data::format_utc(windows[i].t0);
        const Tensor& p = predictions[i];
        const std::size_t c = p.dim(1);
        for (std::size_t h = 0; h < p.dim(0); ++h) {
            std::snprintf(buf, sizeof buf, "%.17g", p.data()[h * c]);
            os << windows[i].plant.id << ',' << t0 << ',' << h << ',' << buf << '\n';
        }
    }
}

}  // namespace solarfuse::baseline
