#include "geotok/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "geotok/error.hpp"
#include "geotok/tensor.hpp"

namespace geotok::synth {

namespace {

using tensor::Rng;
using tensor::uniform01;

std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

double min_separation(const SynthConfig& c) {
    // a max_len trip between the closest anchors still moves at kMinTripKmh
    return kMinTripKmh / 3.6 * 60.0 * static_cast<double>(c.max_len) * 1.2;
}

}  // namespace

void validate(const SynthConfig& c) {
    if (c.users == 0) throw ConfigError("users", "need at least one user");
    if (c.anchors_per_user < 2) throw ConfigError("anchors_per_user", "need at least two anchors");
    if (!(c.extent_m > 0.0)) throw InvalidInput("synth: degenerate extent " + std::to_string(c.extent_m));
    if (c.min_len < 1 || c.max_len < c.min_len) throw ConfigError("min_len", "need 1 <= min_len <= max_len");
    if (c.record_interval_s <= 0 || 60 % c.record_interval_s != 0)
        throw ConfigError("record_interval_s", "must be a positive divisor of 60");
    if (c.dwell_min_s < 300 || c.dwell_max_s < c.dwell_min_s)
        throw ConfigError("dwell_min_s", "dwell must last at least 300 s and min <= max");
    if (c.noise_m < 0.0 || c.noise_m > 25.0) throw ConfigError("noise_m", "jitter must lie in [0, 25] m");
    if (c.start_time <= 0) throw ConfigError("start_time", "must be positive");
    if (c.extent_m < min_separation(c) * 1.5) {
        throw InvalidInput("synth: degenerate extent " + std::to_string(c.extent_m) + " m, need at least " +
                           std::to_string(min_separation(c) * 1.5) + " m for max_len " + std::to_string(c.max_len));
    }
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
    SynthConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        try {
            if (k == "users") c.users = it->get<std::size_t>();
            else if (k == "anchors_per_user") c.anchors_per_user = it->get<std::size_t>();
            else if (k == "extent_m") c.extent_m = it->get<double>();
            else if (k == "trips_per_user") c.trips_per_user = it->get<std::size_t>();
            else if (k == "min_len") c.min_len = it->get<std::size_t>();
            else if (k == "max_len") c.max_len = it->get<std::size_t>();
            else if (k == "noise_m") c.noise_m = it->get<double>();
            else if (k == "dwell_min_s") c.dwell_min_s = it->get<std::int64_t>();
            else if (k == "dwell_max_s") c.dwell_max_s = it->get<std::int64_t>();
            else if (k == "record_interval_s") c.record_interval_s = it->get<std::int64_t>();
            else if (k == "start_time") c.start_time = it->get<std::int64_t>();
            else if (k == "ref_lat") c.ref_lat = it->get<double>();
            else if (k == "seed") c.seed = it->get<std::uint64_t>();
            else throw ConfigError("synth." + k, "unknown key synth." + k);
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("synth." + k, "bad value for synth." + k);
        }
    }
    return c;
}

nlohmann::json synth_config_to_json(const SynthConfig& c) {
    return {{"users", c.users},
            {"anchors_per_user", c.anchors_per_user},
            {"extent_m", c.extent_m},
            {"trips_per_user", c.trips_per_user},
            {"min_len", c.min_len},
            {"max_len", c.max_len},
            {"noise_m", c.noise_m},
            {"dwell_min_s", c.dwell_min_s},
            {"dwell_max_s", c.dwell_max_s},
            {"record_interval_s", c.record_interval_s},
            {"start_time", c.start_time},
            {"ref_lat", c.ref_lat},
            {"seed", c.seed}};
}

std::string mode_for_speed(double kmh) {
    if (kmh < 10.0) return "walk";
    if (kmh < 25.0) return "bike";
    return "car";
}

std::vector<RawRecord> generate(const SynthConfig& cfg) {
    validate(cfg);
    Rng rng(cfg.seed);
    const double half = cfg.extent_m / 2.0;
    const double sep = min_separation(cfg);
    // the projected origin is a level-1 grid corner, so the region straddles
    // four level-1 cells whenever it is large enough to hold the anchors
    const double cx = 0.0, cy = 0.0;
    const std::int64_t step = cfg.record_interval_s;
    std::vector<RawRecord> out;

    for (std::size_t u = 0; u < cfg.users; ++u) {
        char name[32];
        std::snprintf(name, sizeof name, "u%04zu", u);
        std::vector<ProjectedPoint> anchors;
        for (std::size_t tries = 0; anchors.size() < cfg.anchors_per_user; ++tries) {
            if (tries > 10000) throw InvalidInput("synth: degenerate extent, cannot place anchors for user " + std::string(name));
            ProjectedPoint p{cx + (2.0 * uniform01(rng) - 1.0) * half, cy + (2.0 * uniform01(rng) - 1.0) * half};
            const bool far = std::all_of(anchors.begin(), anchors.end(), [&](const ProjectedPoint& a) {
                return std::hypot(a.x - p.x, a.y - p.y) >= sep;
            });
            if (far) anchors.push_back(p);
        }

        // trips decided up front so dwell records can carry the next label
        std::vector<std::size_t> path{rng() % anchors.size()};
        std::vector<std::size_t> minutes;
        std::vector<std::string> modes;
        for (std::size_t k = 0; k < cfg.trips_per_user; ++k) {
            std::size_t nxt = rng() % (anchors.size() - 1);
            if (nxt >= path.back()) ++nxt;
            const auto& a = anchors[path.back()];
            const auto& b = anchors[nxt];
            const std::size_t len = uniform_int(rng, cfg.min_len, cfg.max_len);
            const double kmh = std::hypot(b.x - a.x, b.y - a.y) / (60.0 * static_cast<double>(len)) * 3.6;
            path.push_back(nxt);
            minutes.push_back(len);
            modes.push_back(mode_for_speed(kmh));
        }

        std::int64_t t = cfg.start_time + static_cast<std::int64_t>(u) * 86400;
        t -= t % 60;
        auto emit = [&](double x, double y, const std::string& label) {
            const auto [lat, lon] = unproject({x, y}, cfg.ref_lat);
            out.push_back(RawRecord{name, t, lat, lon, label});
            t += step;
        };
        auto dwell = [&](const ProjectedPoint& at, const std::string& label) {
            const auto span = static_cast<std::size_t>((cfg.dwell_max_s - cfg.dwell_min_s) / 60);
            const std::int64_t secs = cfg.dwell_min_s + 60 * static_cast<std::int64_t>(uniform_int(rng, 0, span));
            for (std::int64_t s = 0; s < secs; s += step) {
                const double r = cfg.noise_m * std::sqrt(uniform01(rng));
                const double th = 2.0 * M_PI * uniform01(rng);
                emit(at.x + r * std::cos(th), at.y + r * std::sin(th), label);
            }
        };

        dwell(anchors[path[0]], modes.empty() ? "walk" : modes[0]);
        for (std::size_t k = 0; k < minutes.size(); ++k) {
            const auto& a = anchors[path[k]];
            const auto& b = anchors[path[k + 1]];
            const std::int64_t n = static_cast<std::int64_t>(minutes[k]) * 60 / step;
            for (std::int64_t j = 1; j < n; ++j) {
                const double f = static_cast<double>(j) / static_cast<double>(n);
                const double jx = cfg.noise_m * 0.5 * (2.0 * uniform01(rng) - 1.0);
                const double jy = cfg.noise_m * 0.5 * (2.0 * uniform01(rng) - 1.0);
                emit(a.x + (b.x - a.x) * f + jx, a.y + (b.y - a.y) * f + jy, k == 0 ? modes[0] : modes[k - 1]);
            }
            dwell(b, modes[k]);
        }
    }
    return out;
}

}  // namespace geotok::synth
