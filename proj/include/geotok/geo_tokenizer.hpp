#pragma once

// Hierarchical grid tokenizer. Level 1 is an absolute cell of the coarsest
// grid; every finer level h is the position of the point inside its parent
// cell, linearized row-major as o_x * q_h + o_y. The offset set at level h is
// the same for every parent, which is what keeps the per-level vocabularies
// small.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace geotok {

inline constexpr double kEarthRadiusM = 6371000.0;

struct ProjectedPoint {
    double x = 0.0;
    double y = 0.0;
};

// Equirectangular projection around ref_lat. Throws InvalidInput for
// |lat| > 90 or |lon| > 180.
ProjectedPoint project(double lat_deg, double lon_deg, double ref_lat_deg);
// Inverse of project().
std::pair<double, double> unproject(ProjectedPoint p, double ref_lat_deg);

class GridSpec {
public:
    // scales: cell sizes in meters, coarsest first; each must be an exact
    // integer multiple (>= 2) of the next. Throws InvalidInput otherwise.
    explicit GridSpec(std::vector<double> scales, ProjectedPoint origin = {});

    std::size_t levels() const noexcept { return scales_.size(); }
    // 0-based level index.
    double scale(std::size_t level) const { return scales_.at(level); }
    const std::vector<double>& scales() const noexcept { return scales_; }
    // q_h = r_{h-1} / r_h for level >= 1 (0-based); 0 for the top level.
    std::int64_t ratio(std::size_t level) const { return ratios_.at(level); }
    ProjectedPoint origin() const noexcept { return origin_; }

    // Default scales for H in {1, 2, 3, 4}.
    static std::vector<double> default_scales(std::size_t levels);

private:
    std::vector<double> scales_;
    std::vector<std::int64_t> ratios_;
    ProjectedPoint origin_;
};

struct CellIndex {
    std::int64_t i = 0;
    std::int64_t j = 0;
    auto operator<=>(const CellIndex&) const = default;
};

// Level 1: absolute (i, j). Levels > 1: offset in [0, q^2 - 1] with i = j = 0
// ignored; stored as `offset`.
struct HierCellKey {
    std::size_t level = 1;  // 1-based
    CellIndex cell{};       // level 1 only
    std::int64_t offset = 0;  // levels > 1 only
    auto operator<=>(const HierCellKey&) const = default;
};

std::vector<HierCellKey> encode_point(ProjectedPoint p, const GridSpec& spec);
// Absolute finest-resolution cell containing p.
CellIndex finest_cell(ProjectedPoint p, const GridSpec& spec);

struct DecodedCell {
    ProjectedPoint center;
    double extent = 0.0;  // r_H
};

// Throws FormatError for wrong length, level numbering or out-of-range offsets.
DecodedCell decode_keys(std::span<const HierCellKey> keys, const GridSpec& spec);

inline constexpr std::int32_t kSosId = 0;
inline constexpr std::int32_t kPadId = 1;
inline constexpr std::int32_t kFirstCellId = 2;

struct TokenizedLocation {
    std::vector<std::int32_t> ids;
    std::vector<HierCellKey> raw_keys;
};

class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(GridSpec spec);

    const GridSpec& spec() const { return *spec_; }
    std::size_t levels() const { return levels_.size(); }
    // |L^h| including SOS and PAD; level is 0-based.
    std::size_t level_size(std::size_t level) const { return levels_.at(level).ordered.size() + 2; }
    std::vector<std::size_t> level_sizes() const;
    // Sum over levels of observed cells, specials excluded.
    std::size_t hierarchical_total() const;
    std::size_t flat_count() const noexcept { return flat_count_; }

    // Inserts keys not seen before (first-seen order). Returns the ids.
    std::vector<std::int32_t> add(std::span<const HierCellKey> keys);
    void note_flat_cell(CellIndex finest);

    std::optional<std::int32_t> find(const HierCellKey& key) const;
    const HierCellKey& key_of(std::size_t level, std::int32_t id) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& doc);

private:
    struct Level {
        std::map<HierCellKey, std::int32_t> ids;
        std::vector<HierCellKey> ordered;
    };
    std::optional<GridSpec> spec_;
    std::vector<Level> levels_;
    std::set<CellIndex> flat_;
    std::size_t flat_count_ = 0;
};

// Throws InvalidInput on an empty corpus.
Vocabulary build_vocab(std::span<const ProjectedPoint> corpus, const GridSpec& spec);

// Closed vocabulary: throws OutOfVocabulary naming the first unseen level.
TokenizedLocation tokenize(ProjectedPoint p, const Vocabulary& vocab);

}  // namespace geotok
