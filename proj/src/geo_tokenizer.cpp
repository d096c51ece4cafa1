#include "geotok/geo_tokenizer.hpp"

#include <cmath>
#include <numbers>

#include "geotok/error.hpp"

namespace geotok {
namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

std::int64_t mod_euclid(std::int64_t a, std::int64_t b) {
    std::int64_t r = a % b;
    return r < 0 ? r + b : r;
}

std::int64_t finest_index(double coord, double origin, double r) {
    const double v = std::floor((coord - origin) / r);
    if (!std::isfinite(v) || std::fabs(v) > 9.0e15) {
        throw InvalidInput("coordinate " + std::to_string(coord) + " cannot be gridded");
    }
    return static_cast<std::int64_t>(v);
}

// Absolute cell index at 0-based `level` from the finest index.
std::int64_t level_index(std::int64_t finest, std::size_t level, const GridSpec& spec) {
    std::int64_t idx = finest;
    for (std::size_t h = spec.levels() - 1; h > level; --h) idx = floor_div(idx, spec.ratio(h));
    return idx;
}

}  // namespace

ProjectedPoint project(double lat_deg, double lon_deg, double ref_lat_deg) {
    if (!(std::fabs(lat_deg) <= 90.0) || !(std::fabs(lon_deg) <= 180.0)) {
        throw InvalidInput("coordinate out of range: lat=" + std::to_string(lat_deg) +
                           " lon=" + std::to_string(lon_deg));
    }
    if (!(std::fabs(ref_lat_deg) < 90.0)) {
        throw InvalidInput("reference latitude out of range: " + std::to_string(ref_lat_deg));
    }
    return {kEarthRadiusM * lon_deg * kDegToRad * std::cos(ref_lat_deg * kDegToRad),
            kEarthRadiusM * lat_deg * kDegToRad};
}

std::pair<double, double> unproject(ProjectedPoint p, double ref_lat_deg) {
    const double lat = p.y / kEarthRadiusM / kDegToRad;
    const double lon = p.x / (kEarthRadiusM * std::cos(ref_lat_deg * kDegToRad)) / kDegToRad;
    return {lat, lon};
}

GridSpec::GridSpec(std::vector<double> scales, ProjectedPoint origin)
    : scales_(std::move(scales)), origin_(origin) {
    if (scales_.empty()) throw InvalidInput("grid needs at least one level");
    ratios_.assign(scales_.size(), 0);
    for (std::size_t h = 0; h < scales_.size(); ++h) {
        if (!(scales_[h] > 0.0) || !std::isfinite(scales_[h])) {
            throw InvalidInput("grid scale at level " + std::to_string(h + 1) + " must be positive");
        }
        if (h == 0) continue;
        const double q = scales_[h - 1] / scales_[h];
        const double rq = std::round(q);
        if (std::fabs(q - rq) > 1e-9 * rq || rq < 2.0) {
            throw InvalidInput("grid scale " + std::to_string(scales_[h - 1]) + " is not an integer multiple (>= 2) of " +
                               std::to_string(scales_[h]));
        }
        ratios_[h] = static_cast<std::int64_t>(rq);
    }
    if (!std::isfinite(origin_.x) || !std::isfinite(origin_.y)) throw InvalidInput("grid origin must be finite");
}

std::vector<double> GridSpec::default_scales(std::size_t levels) {
    switch (levels) {
        case 1: return {100.0};
        case 2: return {10000.0, 100.0};
        case 3: return {100000.0, 1000.0, 100.0};
        case 4: return {100000.0, 10000.0, 1000.0, 100.0};
        default: throw InvalidInput("no default scales for " + std::to_string(levels) + " levels");
    }
}

CellIndex finest_cell(ProjectedPoint p, const GridSpec& spec) {
    const double r = spec.scales().back();
    return {finest_index(p.x, spec.origin().x, r), finest_index(p.y, spec.origin().y, r)};
}

std::vector<HierCellKey> encode_point(ProjectedPoint p, const GridSpec& spec) {
    const CellIndex f = finest_cell(p, spec);
    std::vector<HierCellKey> keys(spec.levels());
    for (std::size_t h = 0; h < spec.levels(); ++h) {
        const std::int64_t ix = level_index(f.i, h, spec);
        const std::int64_t iy = level_index(f.j, h, spec);
        keys[h].level = h + 1;
        if (h == 0) {
            keys[h].cell = {ix, iy};
        } else {
            const std::int64_t q = spec.ratio(h);
            keys[h].offset = mod_euclid(ix, q) * q + mod_euclid(iy, q);
        }
    }
    return keys;
}

DecodedCell decode_keys(std::span<const HierCellKey> keys, const GridSpec& spec) {
    if (keys.size() != spec.levels()) {
        throw FormatError("decode: expected " + std::to_string(spec.levels()) + " keys, got " +
                          std::to_string(keys.size()));
    }
    std::int64_t fx = 0, fy = 0;
    for (std::size_t h = 0; h < keys.size(); ++h) {
        if (keys[h].level != h + 1) throw FormatError("decode: key " + std::to_string(h) + " has wrong level");
        if (h == 0) {
            fx = keys[h].cell.i;
            fy = keys[h].cell.j;
            continue;
        }
        const std::int64_t q = spec.ratio(h);
        if (keys[h].offset < 0 || keys[h].offset >= q * q) {
            throw FormatError("decode: offset " + std::to_string(keys[h].offset) + " out of range at level " +
                              std::to_string(h + 1));
        }
        fx = fx * q + keys[h].offset / q;
        fy = fy * q + keys[h].offset % q;
    }
    const double r = spec.scales().back();
    return {{spec.origin().x + (static_cast<double>(fx) + 0.5) * r, spec.origin().y + (static_cast<double>(fy) + 0.5) * r},
            r};
}

Vocabulary::Vocabulary(GridSpec spec) : spec_(std::move(spec)), levels_(spec_->levels()) {}

std::vector<std::size_t> Vocabulary::level_sizes() const {
    std::vector<std::size_t> out;
    for (std::size_t h = 0; h < levels_.size(); ++h) out.push_back(level_size(h));
    return out;
}

std::size_t Vocabulary::hierarchical_total() const {
    std::size_t n = 0;
    for (const auto& l : levels_) n += l.ordered.size();
    return n;
}

std::vector<std::int32_t> Vocabulary::add(std::span<const HierCellKey> keys) {
    if (keys.size() != levels_.size()) throw InvalidInput("vocab: key tuple has wrong length");
    std::vector<std::int32_t> ids(keys.size());
    for (std::size_t h = 0; h < keys.size(); ++h) {
        auto& lvl = levels_[h];
        auto [it, inserted] =
            lvl.ids.emplace(keys[h], static_cast<std::int32_t>(lvl.ordered.size()) + kFirstCellId);
        if (inserted) lvl.ordered.push_back(keys[h]);
        ids[h] = it->second;
    }
    return ids;
}

void Vocabulary::note_flat_cell(CellIndex finest) {
    if (flat_.insert(finest).second) flat_count_ = flat_.size();
}

std::optional<std::int32_t> Vocabulary::find(const HierCellKey& key) const {
    if (key.level == 0 || key.level > levels_.size()) return std::nullopt;
    const auto& lvl = levels_[key.level - 1];
    auto it = lvl.ids.find(key);
    if (it == lvl.ids.end()) return std::nullopt;
    return it->second;
}

const HierCellKey& Vocabulary::key_of(std::size_t level, std::int32_t id) const {
    const auto& lvl = levels_.at(level);
    if (id < kFirstCellId || static_cast<std::size_t>(id - kFirstCellId) >= lvl.ordered.size()) {
        throw InvalidInput("vocab: id " + std::to_string(id) + " is not a cell at level " + std::to_string(level + 1));
    }
    return lvl.ordered[static_cast<std::size_t>(id - kFirstCellId)];
}

nlohmann::json Vocabulary::to_json() const {
    nlohmann::json doc;
    doc["scales"] = spec_->scales();
    doc["origin"] = {spec_->origin().x, spec_->origin().y};
    auto levels = nlohmann::json::array();
    for (const auto& lvl : levels_) {
        auto entries = nlohmann::json::array();
        for (std::size_t i = 0; i < lvl.ordered.size(); ++i) {
            const auto& k = lvl.ordered[i];
            nlohmann::json key = k.level == 1 ? nlohmann::json::array({k.cell.i, k.cell.j})
                                              : nlohmann::json::array({k.offset});
            entries.push_back({key, static_cast<std::int32_t>(i) + kFirstCellId});
        }
        levels.push_back({{"specials", {{"sos", kSosId}, {"pad", kPadId}}}, {"entries", entries}});
    }
    doc["levels"] = levels;
    doc["flat_count"] = flat_count_;
    return doc;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& doc) {
    try {
        const auto origin = doc.at("origin");
        Vocabulary v(GridSpec(doc.at("scales").get<std::vector<double>>(),
                              {origin.at(0).get<double>(), origin.at(1).get<double>()}));
        const auto& levels = doc.at("levels");
        if (levels.size() != v.levels_.size()) throw FormatError("vocab: level count does not match scales");
        for (std::size_t h = 0; h < levels.size(); ++h) {
            const auto& sp = levels[h].at("specials");
            if (sp.at("sos").get<int>() != kSosId || sp.at("pad").get<int>() != kPadId) {
                throw FormatError("vocab: unsupported special ids at level " + std::to_string(h + 1));
            }
            auto& lvl = v.levels_[h];
            for (const auto& e : levels[h].at("entries")) {
                HierCellKey key;
                key.level = h + 1;
                const auto& k = e.at(0);
                if (h == 0) {
                    key.cell = {k.at(0).get<std::int64_t>(), k.at(1).get<std::int64_t>()};
                } else {
                    key.offset = k.at(0).get<std::int64_t>();
                    const auto q = v.spec_->ratio(h);
                    if (key.offset < 0 || key.offset >= q * q) throw FormatError("vocab: offset out of range");
                }
                const auto id = e.at(1).get<std::int32_t>();
                if (id != static_cast<std::int32_t>(lvl.ordered.size()) + kFirstCellId) {
                    throw FormatError("vocab: ids at level " + std::to_string(h + 1) + " are not dense");
                }
                if (!lvl.ids.emplace(key, id).second) throw FormatError("vocab: duplicate key");
                lvl.ordered.push_back(key);
            }
        }
        v.flat_count_ = doc.at("flat_count").get<std::size_t>();
        return v;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("vocab: ") + e.what());
    } catch (const InvalidInput& e) {
        throw FormatError(std::string("vocab: ") + e.what());
    }
}

Vocabulary build_vocab(std::span<const ProjectedPoint> corpus, const GridSpec& spec) {
    if (corpus.empty()) throw InvalidInput("build_vocab: empty corpus");
    Vocabulary v(spec);
    for (const auto& p : corpus) {
        v.add(encode_point(p, spec));
        v.note_flat_cell(finest_cell(p, spec));
    }
    return v;
}

TokenizedLocation tokenize(ProjectedPoint p, const Vocabulary& vocab) {
    TokenizedLocation out;
    out.raw_keys = encode_point(p, vocab.spec());
    out.ids.resize(out.raw_keys.size());
    for (std::size_t h = 0; h < out.raw_keys.size(); ++h) {
        auto id = vocab.find(out.raw_keys[h]);
        if (!id) {
            throw OutOfVocabulary(h + 1, "location (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                                             ") is out of vocabulary at level " + std::to_string(h + 1));
        }
        out.ids[h] = *id;
    }
    return out;
}

}  // namespace geotok
