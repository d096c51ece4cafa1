#include "geotok/trajectory_pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include "geotok/error.hpp"

namespace geotok {
namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

template <typename V>
bool parse_number(const std::string& s, V& out) {
    const char* b = s.data();
    const char* e = s.data() + s.size();
    while (b < e && *b == ' ') ++b;
    while (e > b && e[-1] == ' ') --e;
    auto [ptr, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && ptr == e && b != e;
}

std::string trim(std::string s) {
    while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.pop_back();
    std::size_t b = 0;
    while (b < s.size() && s[b] == ' ') ++b;
    return s.substr(b);
}

}  // namespace

std::vector<RawRecord> read_records_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("csv: missing header");
    auto header = split_csv_line(line);
    for (auto& h : header) h = trim(h);
    const bool has_label = header.size() == 5 && header[4] == "label";
    if (header.size() < 4 || header[0] != "user_id" || header[1] != "timestamp" || header[2] != "lat" ||
        header[3] != "lon" || (header.size() == 5 && !has_label) || header.size() > 5) {
        throw FormatError("csv: header must be user_id,timestamp,lat,lon[,label]");
    }
    std::vector<RawRecord> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != header.size()) {
            throw FormatError("csv line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                              " fields, got " + std::to_string(f.size()));
        }
        RawRecord r;
        r.user_id = trim(f[0]);
        if (r.user_id.empty()) throw FormatError("csv line " + std::to_string(lineno) + ": empty user_id");
        if (!parse_number(f[1], r.timestamp) || !parse_number(f[2], r.lat) || !parse_number(f[3], r.lon)) {
            throw FormatError("csv line " + std::to_string(lineno) + ": malformed number");
        }
        if (r.timestamp <= 0) {
            throw InvalidInput("csv line " + std::to_string(lineno) + ": timestamp must be positive");
        }
        if (!(std::fabs(r.lat) <= 90.0) || !(std::fabs(r.lon) <= 180.0)) {
            throw InvalidInput("csv line " + std::to_string(lineno) + ": coordinate out of range");
        }
        if (has_label) {
            auto lbl = trim(f[4]);
            if (!lbl.empty()) r.label = std::move(lbl);
        }
        out.push_back(std::move(r));
    }
    return out;
}

void write_records_csv(std::ostream& out, std::span<const RawRecord> records) {
    const bool labels = std::any_of(records.begin(), records.end(), [](const RawRecord& r) { return r.label.has_value(); });
    out << "user_id,timestamp,lat,lon" << (labels ? ",label" : "") << '\n';
    char buf[64];
    for (const auto& r : records) {
        out << r.user_id << ',' << r.timestamp << ',';
        std::snprintf(buf, sizeof buf, "%.7f,%.7f", r.lat, r.lon);
        out << buf;
        if (labels) out << ',' << r.label.value_or("");
        out << '\n';
    }
}

std::vector<std::vector<TrackPoint>> group_by_user(std::span<const RawRecord> records, double ref_lat) {
    std::map<std::string, std::vector<TrackPoint>> users;
    for (const auto& r : records) {
        TrackPoint p;
        p.raw = r;
        p.xy = project(r.lat, r.lon, ref_lat);
        users[r.user_id].push_back(std::move(p));
    }
    std::vector<std::vector<TrackPoint>> out;
    out.reserve(users.size());
    for (auto& [_, pts] : users) {
        std::stable_sort(pts.begin(), pts.end(),
                         [](const TrackPoint& a, const TrackPoint& b) { return a.raw.timestamp < b.raw.timestamp; });
        out.push_back(std::move(pts));
    }
    return out;
}

std::vector<TrackPoint> resample(std::span<const TrackPoint> points, std::int64_t interval_s) {
    if (interval_s <= 0) return {points.begin(), points.end()};
    std::vector<TrackPoint> out;
    std::optional<std::int64_t> last_bucket;
    for (const auto& p : points) {
        const std::int64_t bucket = p.raw.timestamp / interval_s;
        if (last_bucket && *last_bucket == bucket) continue;
        last_bucket = bucket;
        out.push_back(p);
    }
    return out;
}

void compute_velocity(std::span<TrackPoint> points) {
    if (points.empty()) return;
    points[0].speed_kmh = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i) {
        const auto dt = points[i].raw.timestamp - points[i - 1].raw.timestamp;
        if (dt <= 0) {
            points[i].duplicate_timestamp = true;
            points[i].speed_kmh = i >= 2 ? points[i - 1].speed_kmh : 0.0;
            continue;
        }
        const double dx = points[i].xy.x - points[i - 1].xy.x;
        const double dy = points[i].xy.y - points[i - 1].xy.y;
        points[i].speed_kmh = std::hypot(dx, dy) / static_cast<double>(dt) * 3.6;
    }
    if (points.size() >= 2) points[0].speed_kmh = points[1].speed_kmh;
}

void mark_stops(std::span<TrackPoint> points, double threshold_kmh) {
    for (auto& p : points) p.stop = p.speed_kmh < threshold_kmh;
}

std::vector<TrackPoint> filter_short_stays(std::span<const TrackPoint> points, std::int64_t min_duration_s,
                                           const GridSpec& spec) {
    std::vector<TrackPoint> out;
    std::size_t i = 0;
    while (i < points.size()) {
        const CellIndex cell = finest_cell(points[i].xy, spec);
        std::size_t j = i + 1;
        while (j < points.size() && finest_cell(points[j].xy, spec) == cell) ++j;
        const auto duration = points[j - 1].raw.timestamp - points[i].raw.timestamp;
        if (duration >= min_duration_s) out.push_back(points[i]);
        i = j;
    }
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> segment_bounds(std::span<const TrackPoint> points) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::optional<std::size_t> prev;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (!points[i].stop) continue;
        if (prev) out.emplace_back(*prev, i);
        prev = i;
    }
    return out;
}

std::vector<std::vector<TrackPoint>> segment_trajectories(std::span<const TrackPoint> points,
                                                          std::size_t min_records) {
    std::vector<std::vector<TrackPoint>> out;
    for (auto [a, b] : segment_bounds(points)) {
        if (b - a + 1 > min_records) out.emplace_back(points.begin() + a, points.begin() + b + 1);
    }
    return out;
}

std::vector<std::vector<TrackPoint>> extract_segments(std::span<const RawRecord> records, const PipelineConfig& cfg,
                                                      const GridSpec& spec) {
    std::vector<std::vector<TrackPoint>> out;
    for (auto& user : group_by_user(records, cfg.ref_lat)) {
        std::vector<TrackPoint> pts;
        if (cfg.profile == IngestProfile::gps) {
            pts = resample(user, cfg.resample_interval_s);
        } else {
            pts = filter_short_stays(user, cfg.min_stay_s, spec);
        }
        compute_velocity(pts);
        mark_stops(pts, cfg.stop_speed_kmh);
        for (auto& seg : segment_trajectories(pts, cfg.min_records)) out.push_back(std::move(seg));
    }
    return out;
}

std::vector<ProjectedPoint> segment_points(std::span<const std::vector<TrackPoint>> segments) {
    std::vector<ProjectedPoint> out;
    for (const auto& s : segments)
        for (const auto& p : s) out.push_back(p.xy);
    return out;
}

Trajectory to_trajectory(std::span<const TrackPoint> segment, const Vocabulary& vocab) {
    if (segment.empty()) throw InvalidInput("to_trajectory: empty segment");
    Trajectory t;
    t.user = segment.front().raw.user_id;
    t.ids.emplace_back(vocab.levels(), kSosId);
    t.ts.push_back(segment.front().raw.timestamp);
    for (const auto& p : segment) {
        t.ids.push_back(tokenize(p.xy, vocab).ids);
        t.ts.push_back(p.raw.timestamp);
    }
    t.label = segment.back().raw.label;
    return t;
}

std::vector<Trajectory> window(const Trajectory& traj, std::size_t max_seq_len) {
    if (max_seq_len < 2) throw InvalidInput("window: max_seq_len must be >= 2");
    const std::size_t chunk = max_seq_len - 1;
    const std::size_t real = traj.length();
    std::vector<Trajectory> out;
    for (std::size_t start = 0; start < real; start += chunk) {
        const std::size_t len = std::min(chunk, real - start);
        if (len <= 1) continue;
        Trajectory w;
        w.user = traj.user;
        w.label = traj.label;
        w.ids.push_back(traj.ids.front());
        w.ts.push_back(traj.ts[start + 1]);
        for (std::size_t i = 0; i < len; ++i) {
            w.ids.push_back(traj.ids[start + 1 + i]);
            w.ts.push_back(traj.ts[start + 1 + i]);
        }
        out.push_back(std::move(w));
    }
    return out;
}

DatasetSplit split(std::size_t n, std::uint64_t seed, SplitFractions f) {
    if (n < 10) throw InvalidInput("split: need at least 10 trajectories, got " + std::to_string(n));
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng() % (i + 1)]);
    constexpr double eps = 1e-9;
    const auto n_pre = static_cast<std::size_t>(std::floor(static_cast<double>(n) * f.pretrain + eps));
    const std::size_t rest = n - n_pre;
    const auto n_tr = static_cast<std::size_t>(std::floor(static_cast<double>(rest) * f.finetune_train + eps));
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(rest) * f.finetune_val + eps));
    DatasetSplit s;
    s.seed = seed;
    auto it = perm.begin();
    s.pretrain.assign(it, it + static_cast<std::ptrdiff_t>(n_pre));
    it += static_cast<std::ptrdiff_t>(n_pre);
    s.finetune_train.assign(it, it + static_cast<std::ptrdiff_t>(n_tr));
    it += static_cast<std::ptrdiff_t>(n_tr);
    s.finetune_val.assign(it, it + static_cast<std::ptrdiff_t>(n_val));
    it += static_cast<std::ptrdiff_t>(n_val);
    s.finetune_test.assign(it, perm.end());
    return s;
}

nlohmann::json trajectory_to_json(const Trajectory& t) {
    nlohmann::json j;
    j["user"] = t.user;
    j["ids"] = t.ids;
    j["ts"] = t.ts;
    j["label"] = t.label ? nlohmann::json(*t.label) : nlohmann::json(nullptr);
    return j;
}

Trajectory trajectory_from_json(const nlohmann::json& j) {
    try {
        Trajectory t;
        t.user = j.at("user").get<std::string>();
        t.ids = j.at("ids").get<std::vector<std::vector<std::int32_t>>>();
        t.ts = j.at("ts").get<std::vector<std::int64_t>>();
        if (j.contains("label") && !j.at("label").is_null()) t.label = j.at("label").get<std::string>();
        if (t.ids.size() != t.ts.size() || t.ids.size() < 2) {
            throw FormatError("trajectory: ids and ts must align and hold at least one location");
        }
        for (std::size_t i = 0; i < t.ids.size(); ++i) {
            if (t.ids[i].size() != t.ids[0].size()) throw FormatError("trajectory: ragged id tuples");
            for (auto id : t.ids[i]) {
                if ((i == 0) != (id == kSosId) || id == kPadId) {
                    throw FormatError("trajectory: SOS must appear only at index 0 and PAD never");
                }
            }
            if (t.ts[i] <= 0 || (i > 0 && t.ts[i] < t.ts[i - 1])) {
                throw FormatError("trajectory: timestamps must be positive and non-decreasing");
            }
        }
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("trajectory: ") + e.what());
    }
}

void write_trajectories_jsonl(std::ostream& out, std::span<const Trajectory> trajs) {
    for (const auto& t : trajs) out << trajectory_to_json(t).dump() << '\n';
}

std::vector<Trajectory> read_trajectories_jsonl(std::istream& in) {
    std::vector<Trajectory> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(trajectory_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("jsonl line " + std::to_string(lineno) + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError("jsonl line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

nlohmann::json split_to_json(const DatasetSplit& s) {
    return {{"seed", s.seed},
            {"pretrain", s.pretrain},
            {"finetune_train", s.finetune_train},
            {"finetune_val", s.finetune_val},
            {"finetune_test", s.finetune_test}};
}

DatasetSplit split_from_json(const nlohmann::json& j) {
    try {
        DatasetSplit s;
        s.seed = j.at("seed").get<std::uint64_t>();
        s.pretrain = j.at("pretrain").get<std::vector<std::size_t>>();
        s.finetune_train = j.at("finetune_train").get<std::vector<std::size_t>>();
        s.finetune_val = j.at("finetune_val").get<std::vector<std::size_t>>();
        s.finetune_test = j.at("finetune_test").get<std::vector<std::size_t>>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("split: ") + e.what());
    }
}

}  // namespace geotok
