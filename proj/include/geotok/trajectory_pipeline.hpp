#pragma once

// GPS / signalling record ingestion: resampling, velocity and stop marking,
// short-stay removal, stop-to-stop segmentation, tokenization, windowing and
// dataset splits.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geotok/geo_tokenizer.hpp"

namespace geotok {

struct RawRecord {
    std::string user_id;
    std::int64_t timestamp = 0;  // Unix seconds, > 0
    double lat = 0.0;
    double lon = 0.0;
    std::optional<std::string> label;
};

// A record after projection, annotated by the pipeline stages.
struct TrackPoint {
    RawRecord raw;
    ProjectedPoint xy;
    double speed_kmh = 0.0;
    bool stop = false;
    bool duplicate_timestamp = false;
};

// Tokenized trajectory. ids[0] is the per-level SOS tuple and ts[0] repeats
// the first real timestamp.
struct Trajectory {
    std::string user;
    std::vector<std::vector<std::int32_t>> ids;
    std::vector<std::int64_t> ts;
    std::optional<std::string> label;

    std::size_t length() const { return ids.empty() ? 0 : ids.size() - 1; }
};

enum class IngestProfile { gps, signal };

struct PipelineConfig {
    IngestProfile profile = IngestProfile::gps;
    std::int64_t resample_interval_s = 60;
    double stop_speed_kmh = 4.0;
    std::int64_t min_stay_s = 300;
    std::size_t min_records = 10;
    std::size_t max_seq_len = 32;
    double ref_lat = 0.0;
};

// CSV with header user_id,timestamp,lat,lon[,label]. Throws FormatError with
// the offending line number; coordinate/timestamp domain errors are
// InvalidInput.
std::vector<RawRecord> read_records_csv(std::istream& in);
void write_records_csv(std::ostream& out, std::span<const RawRecord> records);

// Stable grouping, each user's records sorted ascending by timestamp; users in
// lexicographic order.
std::vector<std::vector<TrackPoint>> group_by_user(std::span<const RawRecord> records, double ref_lat);

// The remaining stages operate on one user's time-sorted points.
std::vector<TrackPoint> resample(std::span<const TrackPoint> points, std::int64_t interval_s);
void compute_velocity(std::span<TrackPoint> points);
void mark_stops(std::span<TrackPoint> points, double threshold_kmh);
// Collapses runs in the same finest cell into one point (the run's first
// record) and drops runs lasting less than min_duration_s.
std::vector<TrackPoint> filter_short_stays(std::span<const TrackPoint> points, std::int64_t min_duration_s,
                                           const GridSpec& spec);

// Stop-to-stop segments, both boundary stops included; keeps segments with
// more than min_records records.
std::vector<std::vector<TrackPoint>> segment_trajectories(std::span<const TrackPoint> points,
                                                          std::size_t min_records);
// Segment boundaries before the length filter, as [first, last] index pairs.
std::vector<std::pair<std::size_t, std::size_t>> segment_bounds(std::span<const TrackPoint> points);

// Runs every stage for every user; the output order is by (user, time).
std::vector<std::vector<TrackPoint>> extract_segments(std::span<const RawRecord> records,
                                                      const PipelineConfig& cfg, const GridSpec& spec);

std::vector<ProjectedPoint> segment_points(std::span<const std::vector<TrackPoint>> segments);

Trajectory to_trajectory(std::span<const TrackPoint> segment, const Vocabulary& vocab);

// Non-overlapping chunks of at most max_seq_len - 1 real locations, each
// re-prefixed with SOS; a trailing chunk is kept when it has more than one
// real location.
std::vector<Trajectory> window(const Trajectory& traj, std::size_t max_seq_len);

struct SplitFractions {
    double pretrain = 0.8;
    double finetune_train = 0.8;
    double finetune_val = 0.1;
};

struct DatasetSplit {
    std::vector<std::size_t> pretrain;
    std::vector<std::size_t> finetune_train;
    std::vector<std::size_t> finetune_val;
    std::vector<std::size_t> finetune_test;
    std::uint64_t seed = 0;
};

// Deterministic shuffle of [0, n) by seed; throws InvalidInput for n < 10.
DatasetSplit split(std::size_t n, std::uint64_t seed, SplitFractions fractions = {});

nlohmann::json trajectory_to_json(const Trajectory& t);
Trajectory trajectory_from_json(const nlohmann::json& j);
void write_trajectories_jsonl(std::ostream& out, std::span<const Trajectory> trajs);
std::vector<Trajectory> read_trajectories_jsonl(std::istream& in);

nlohmann::json split_to_json(const DatasetSplit& s);
DatasetSplit split_from_json(const nlohmann::json& j);

}  // namespace geotok
