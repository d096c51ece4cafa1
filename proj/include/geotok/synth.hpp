#pragma once

// Synthetic mobility generator. Each user owns a few anchor places inside a
// square region and alternates between dwelling at an anchor (jitter well
// under the stop threshold) and a straight-line trip to another anchor
// sampled every record_interval_s. Trip speed decides the label.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "geotok/trajectory_pipeline.hpp"

namespace geotok::synth {

struct SynthConfig {
    std::size_t users = 20;
    std::size_t anchors_per_user = 4;
    // Side of the square region in meters, centered on the projected origin
    // (a level-1 grid corner for the default grid origin).
    double extent_m = 20000.0;
    std::size_t trips_per_user = 8;
    // Trip duration in minutes, uniform in [min_len, max_len].
    std::size_t min_len = 15;
    std::size_t max_len = 30;
    double noise_m = 10.0;
    std::int64_t dwell_min_s = 600;
    std::int64_t dwell_max_s = 2400;
    std::int64_t record_interval_s = 20;
    std::int64_t start_time = 1600000020;
    double ref_lat = 0.0;
    std::uint64_t seed = 0;
};

// Lowest trip speed the generator produces, km/h.
inline constexpr double kMinTripKmh = 6.0;

void validate(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::json synth_config_to_json(const SynthConfig& c);

// Labels by trip speed: walk below 10 km/h, bike below 25 km/h, car above.
std::string mode_for_speed(double kmh);

// Records sorted by (user, time). Throws InvalidInput on a degenerate
// extent (anchors cannot be placed far enough apart).
std::vector<RawRecord> generate(const SynthConfig& cfg);

}  // namespace geotok::synth
