#pragma once

// Solar position and clear-sky irradiance. Times are UTC hours since
// 1970-01-01T00:00Z; angles in degrees.

namespace solarfuse::baseline {

// Spencer (1971) declination and equation of time, longitude-corrected hour angle.
double solar_zenith(double lat_deg, double lon_deg, double epoch_hours);

// Haurwitz: 1098 cos z exp(-0.057 / cos z), zero for z >= 90.
double clearsky_ghi(double zenith_deg);

// GHI at zenith 0, the normaliser used for irradiance-to-power mapping.
inline constexpr double kZenithGhi = 1037.1642881644427;

}  // namespace solarfuse::baseline
