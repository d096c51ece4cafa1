#pragma once

// Run configuration shared by every CLI command. A JSON object whose keys
// mirror the model hyperparameters plus pipeline, fine-tuning and synthetic
// data settings; unknown keys are rejected with ConfigError naming the key.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "geotok/downstream.hpp"
#include "geotok/model.hpp"
#include "geotok/optim.hpp"
#include "geotok/synth.hpp"
#include "geotok/trajectory_pipeline.hpp"

namespace geotok::config {

enum class Task { next_location, classification };

struct RunConfig {
    // tokenizer
    std::size_t h_levels = 3;
    std::vector<double> scales = GridSpec::default_scales(3);
    std::array<double, 2> origin{0.0, 0.0};

    // model
    std::size_t hidden = 256;
    std::size_t layers = 6;
    std::size_t heads = 8;
    std::size_t ffn_mult = 4;
    std::size_t head_hidden = 0;
    double attn_dropout = 0.1;
    std::size_t max_seq_len = 32;

    // optimizer and schedule
    double lr = 1e-3;
    std::array<double, 2> betas{0.9, 0.999};
    double eps = 1e-8;
    double weight_decay = 1e-2;
    std::uint64_t warmup_steps = 10000;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::optional<std::uint64_t> seed;

    // preprocessing
    PipelineConfig pipeline{};
    SplitFractions split{};

    // fine-tuning
    Task task = Task::next_location;
    downstream::HeadKind head = downstream::HeadKind::ffn;
    bool freeze_backbone = false;
    std::size_t finetune_epochs = 10;
    double finetune_lr = 1e-3;
    std::uint64_t finetune_warmup_steps = 0;

    // ablation
    std::vector<std::string> ablation_variants{"baseline_flat_alm", "gt_independent_alm", "gt_halm"};

    synth::SynthConfig synth{};
};

RunConfig parse(const nlohmann::json& j);
// IoError when the file is missing, ConfigError on malformed JSON or keys.
RunConfig load(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& c);

GridSpec grid_spec(const RunConfig& c);
model::ModelConfig model_config(const RunConfig& c, std::vector<std::size_t> vocab_sizes);
optim::AdamConfig adam_config(const RunConfig& c);
// Throws ConfigError("seed") when no seed is set.
std::uint64_t require_seed(const RunConfig& c);
model::TrainConfig train_config(const RunConfig& c);
downstream::FinetuneConfig finetune_config(const RunConfig& c);

std::string to_string(Task t);

}  // namespace geotok::config
