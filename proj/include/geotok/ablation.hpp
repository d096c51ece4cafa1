#pragma once

// Variant comparison under one training budget:
//   baseline_flat_alm   one head over full-resolution cells
//   gt_independent_alm  hierarchical tokens, unchained per-level heads
//   gt_halm             hierarchical tokens, chained heads

#include <string>
#include <vector>

#include "json.hpp"
#include "geotok/model.hpp"

namespace geotok::ablation {

struct FlatCorpus {
    std::vector<Trajectory> train;
    std::vector<Trajectory> eval;
    // Distinct full-resolution cells plus SOS and PAD.
    std::size_t vocab_size = 0;
};

// Replaces each location tuple by a single flat id (first-seen order over
// train then eval, starting after SOS and PAD).
FlatCorpus flatten(std::span<const Trajectory> train, std::span<const Trajectory> eval);

struct AblationConfig {
    // Width, depth and head settings; vocab_sizes and chained_heads are set
    // per variant.
    model::ModelConfig base{};
    model::TrainConfig train{};
    std::vector<std::string> variants{"baseline_flat_alm", "gt_independent_alm", "gt_halm"};
    std::size_t eval_batch = 32;
};

struct AblationRow {
    std::string variant;
    double halm_loss = 0.0;
    double acc1 = 0.0;
    double acc5 = 0.0;
    std::uint64_t params = 0;
    std::uint64_t embedding_params = 0;
    std::uint64_t flops = 0;
    bool divergent = false;
    std::string note;
};

struct TopkAccuracy {
    double acc1 = 0.0;
    double acc5 = 0.0;
    std::size_t n = 0;
};

// Joint top-k over the pre-training heads at every next-location position
// (all levels must match).
TopkAccuracy evaluate_halm_topk(const model::LocationModel<float>& m, std::span<const Trajectory> data,
                                std::size_t batch_size = 32);

// `level_sizes` are the hierarchical vocabulary sizes of the tokenized data.
std::vector<AblationRow> run_ablation(const AblationConfig& cfg, std::span<const Trajectory> train,
                                      std::span<const Trajectory> eval, const std::vector<std::size_t>& level_sizes);

nlohmann::json to_json(const std::vector<AblationRow>& rows);
std::string render_table(const std::vector<AblationRow>& rows);

}  // namespace geotok::ablation
