#include "solarfuse/solar_geometry.hpp"

#include <algorithm>
#include <cmath>

namespace solarfuse::baseline {
namespace {
constexpr double kDeg = M_PI / 180.0;

// Days since 1970-01-01 -> day of year (1-based).
int day_of_year(long days) {
    // civil-from-days (proleptic Gregorian)
    days += 719468;
    const long era = (days >= 0 ? days : days - 146096) / 146097;
    const long doe = days - era * 146097;
    const long yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const long doy_mar = doe - (365 * yoe + yoe / 4 - yoe / 100);  // day of year starting March 1
    const long y = yoe + era * 400 + (doy_mar >= 306 ? 1 : 0);
    const bool leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
    const long jan1_offset = leap ? 60 : 59;  // days from Jan 1 to Mar 1
    return static_cast<int>(doy_mar >= 306 ? doy_mar - 306 + 1 : doy_mar + jan1_offset + 1);
}
}  // namespace

double solar_zenith(double lat_deg, double lon_deg, double epoch_hours) {
    const double days = std::floor(epoch_hours / 24.0);
    const double utc_hour = epoch_hours - days * 24.0;
    const int doy = day_of_year(static_cast<long>(days));
    const double g = 2.0 * M_PI / 365.0 * (doy - 1 + (utc_hour - 12.0) / 24.0);
    const double decl = 0.006918 - 0.399912 * std::cos(g) + 0.070257 * std::sin(g) - 0.006758 * std::cos(2 * g) +
                        0.000907 * std::sin(2 * g) - 0.002697 * std::cos(3 * g) + 0.00148 * std::sin(3 * g);
    const double eot_min = 229.18 * (0.000075 + 0.001868 * std::cos(g) - 0.032077 * std::sin(g) -
                                     0.014615 * std::cos(2 * g) - 0.040849 * std::sin(2 * g));
    const double solar_min = utc_hour * 60.0 + eot_min + 4.0 * lon_deg;
    const double hour_angle = (solar_min / 4.0 - 180.0) * kDeg;
    const double lat = lat_deg * kDeg;
    double c = std::sin(lat) * std::sin(decl) + std::cos(lat) * std::cos(decl) * std::cos(hour_angle);
    c = std::clamp(c, -1.0, 1.0);
    return std::acos(c) / kDeg;
}

double clearsky_ghi(double zenith_deg) {
    if (zenith_deg >= 90.0) return 0.0;
    const double c = std::cos(zenith_deg * kDeg);
    if (c <= 0.0) return 0.0;
    return 1098.0 * c * std::exp(-0.057 / c);
}

}  // namespace solarfuse::baseline
