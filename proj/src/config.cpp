#include "geotok/config.hpp"

#include <fstream>

#include "geotok/error.hpp"

namespace geotok::config {

namespace {

template <typename V>
V get_as(const nlohmann::json& v, const std::string& key) {
    try {
        return v.get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(key, "bad value for '" + key + "': " + v.dump());
    }
}

template <typename V>
V positive(const nlohmann::json& v, const std::string& key) {
    const V x = get_as<V>(v, key);
    if (!(x > V(0))) throw ConfigError(key, "'" + key + "' must be positive");
    return x;
}

IngestProfile parse_profile(const nlohmann::json& v) {
    const auto s = get_as<std::string>(v, "profile");
    if (s == "gps") return IngestProfile::gps;
    if (s == "signal") return IngestProfile::signal;
    throw ConfigError("profile", "profile must be \"gps\" or \"signal\", got \"" + s + "\"");
}

Task parse_task(const nlohmann::json& v) {
    const auto s = get_as<std::string>(v, "task");
    if (s == "next_location") return Task::next_location;
    if (s == "classification") return Task::classification;
    throw ConfigError("task", "task must be \"next_location\" or \"classification\", got \"" + s + "\"");
}

}  // namespace

std::string to_string(Task t) { return t == Task::next_location ? "next_location" : "classification"; }

RunConfig parse(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    RunConfig c;
    bool scales_set = false;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const auto& v = *it;
        if (k == "h_levels") c.h_levels = positive<std::size_t>(v, k);
        else if (k == "scales") { c.scales = get_as<std::vector<double>>(v, k); scales_set = true; }
        else if (k == "origin") c.origin = get_as<std::array<double, 2>>(v, k);
        else if (k == "hidden") c.hidden = positive<std::size_t>(v, k);
        else if (k == "layers") c.layers = get_as<std::size_t>(v, k);
        else if (k == "heads") c.heads = positive<std::size_t>(v, k);
        else if (k == "ffn_mult") c.ffn_mult = positive<std::size_t>(v, k);
        else if (k == "head_hidden") c.head_hidden = get_as<std::size_t>(v, k);
        else if (k == "attn_dropout") c.attn_dropout = get_as<double>(v, k);
        else if (k == "max_seq_len") c.max_seq_len = get_as<std::size_t>(v, k);
        else if (k == "lr") c.lr = positive<double>(v, k);
        else if (k == "betas") c.betas = get_as<std::array<double, 2>>(v, k);
        else if (k == "eps") c.eps = positive<double>(v, k);
        else if (k == "weight_decay") c.weight_decay = get_as<double>(v, k);
        else if (k == "warmup_steps") c.warmup_steps = get_as<std::uint64_t>(v, k);
        else if (k == "epochs") c.epochs = positive<std::size_t>(v, k);
        else if (k == "batch_size") c.batch_size = positive<std::size_t>(v, k);
        else if (k == "seed") c.seed = get_as<std::uint64_t>(v, k);
        else if (k == "profile") c.pipeline.profile = parse_profile(v);
        else if (k == "resample_interval_s") c.pipeline.resample_interval_s = positive<std::int64_t>(v, k);
        else if (k == "stop_speed_kmh") c.pipeline.stop_speed_kmh = positive<double>(v, k);
        else if (k == "min_stay_s") c.pipeline.min_stay_s = get_as<std::int64_t>(v, k);
        else if (k == "min_records") c.pipeline.min_records = get_as<std::size_t>(v, k);
        else if (k == "ref_lat") c.pipeline.ref_lat = get_as<double>(v, k);
        else if (k == "split_pretrain") c.split.pretrain = get_as<double>(v, k);
        else if (k == "split_finetune_train") c.split.finetune_train = get_as<double>(v, k);
        else if (k == "split_finetune_val") c.split.finetune_val = get_as<double>(v, k);
        else if (k == "task") c.task = parse_task(v);
        else if (k == "head") {
            try {
                c.head = downstream::parse_head_kind(get_as<std::string>(v, k));
            } catch (const ConfigError& e) {
                throw ConfigError("head", e.what());
            }
        }
        else if (k == "freeze_backbone") c.freeze_backbone = get_as<bool>(v, k);
        else if (k == "finetune_epochs") c.finetune_epochs = positive<std::size_t>(v, k);
        else if (k == "finetune_lr") c.finetune_lr = positive<double>(v, k);
        else if (k == "finetune_warmup_steps") c.finetune_warmup_steps = get_as<std::uint64_t>(v, k);
        else if (k == "ablation_variants") c.ablation_variants = get_as<std::vector<std::string>>(v, k);
        else if (k == "synth") {
            if (!v.is_object()) throw ConfigError("synth", "'synth' must be an object");
            c.synth = synth::synth_config_from_json(v);
        }
        else throw ConfigError(k, "unknown config key '" + k + "'");
    }

    if (!scales_set) {
        if (c.h_levels < 1 || c.h_levels > 4)
            throw ConfigError("h_levels", "no default scales for h_levels=" + std::to_string(c.h_levels) + "; set 'scales'");
        c.scales = GridSpec::default_scales(c.h_levels);
    } else if (j.contains("h_levels") && c.scales.size() != c.h_levels) {
        throw ConfigError("scales", "'scales' has " + std::to_string(c.scales.size()) + " entries but h_levels is " +
                                        std::to_string(c.h_levels));
    }
    c.h_levels = c.scales.size();
    try {
        (void)grid_spec(c);
    } catch (const Error& e) {
        throw ConfigError("scales", e.what());
    }
    c.pipeline.max_seq_len = c.max_seq_len;
    if (c.max_seq_len < 2) throw ConfigError("max_seq_len", "'max_seq_len' must be at least 2");
    if (!(c.attn_dropout >= 0.0 && c.attn_dropout < 1.0)) throw ConfigError("attn_dropout", "'attn_dropout' must lie in [0, 1)");
    if (c.hidden % c.heads != 0) throw ConfigError("heads", "'hidden' must be divisible by 'heads'");
    for (double b : c.betas)
        if (!(b >= 0.0 && b < 1.0)) throw ConfigError("betas", "'betas' must lie in [0, 1)");
    for (const auto& v : c.ablation_variants) {
        if (v != "baseline_flat_alm" && v != "gt_independent_alm" && v != "gt_halm")
            throw ConfigError("ablation_variants", "unknown ablation variant '" + v + "'");
    }
    return c;
}

RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("<json>", "config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse(j);
}

nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j = {{"h_levels", c.h_levels},
                        {"scales", c.scales},
                        {"origin", c.origin},
                        {"hidden", c.hidden},
                        {"layers", c.layers},
                        {"heads", c.heads},
                        {"ffn_mult", c.ffn_mult},
                        {"head_hidden", c.head_hidden},
                        {"attn_dropout", c.attn_dropout},
                        {"max_seq_len", c.max_seq_len},
                        {"lr", c.lr},
                        {"betas", c.betas},
                        {"eps", c.eps},
                        {"weight_decay", c.weight_decay},
                        {"warmup_steps", c.warmup_steps},
                        {"epochs", c.epochs},
                        {"batch_size", c.batch_size},
                        {"profile", c.pipeline.profile == IngestProfile::gps ? "gps" : "signal"},
                        {"resample_interval_s", c.pipeline.resample_interval_s},
                        {"stop_speed_kmh", c.pipeline.stop_speed_kmh},
                        {"min_stay_s", c.pipeline.min_stay_s},
                        {"min_records", c.pipeline.min_records},
                        {"ref_lat", c.pipeline.ref_lat},
                        {"split_pretrain", c.split.pretrain},
                        {"split_finetune_train", c.split.finetune_train},
                        {"split_finetune_val", c.split.finetune_val},
                        {"task", to_string(c.task)},
                        {"head", downstream::to_string(c.head)},
                        {"freeze_backbone", c.freeze_backbone},
                        {"finetune_epochs", c.finetune_epochs},
                        {"finetune_lr", c.finetune_lr},
                        {"finetune_warmup_steps", c.finetune_warmup_steps},
                        {"ablation_variants", c.ablation_variants},
                        {"synth", synth::synth_config_to_json(c.synth)}};
    if (c.seed) j["seed"] = *c.seed;
    return j;
}

GridSpec grid_spec(const RunConfig& c) { return GridSpec(c.scales, {c.origin[0], c.origin[1]}); }

model::ModelConfig model_config(const RunConfig& c, std::vector<std::size_t> vocab_sizes) {
    model::ModelConfig m;
    m.vocab_sizes = std::move(vocab_sizes);
    m.hidden = c.hidden;
    m.layers = c.layers;
    m.heads = c.heads;
    m.ffn_mult = c.ffn_mult;
    m.head_hidden = c.head_hidden;
    m.attn_dropout = c.attn_dropout;
    m.max_seq_len = c.max_seq_len;
    m.validate();
    return m;
}

optim::AdamConfig adam_config(const RunConfig& c) {
    optim::AdamConfig a;
    a.lr = c.lr;
    a.beta1 = c.betas[0];
    a.beta2 = c.betas[1];
    a.eps = c.eps;
    a.weight_decay = c.weight_decay;
    a.warmup_steps = c.warmup_steps;
    return a;
}

std::uint64_t require_seed(const RunConfig& c) {
    if (!c.seed) throw ConfigError("seed", "a seed is required for this command (config 'seed' or --seed)");
    return *c.seed;
}

model::TrainConfig train_config(const RunConfig& c) {
    model::TrainConfig t;
    t.epochs = c.epochs;
    t.batch_size = c.batch_size;
    t.adam = adam_config(c);
    t.seed = require_seed(c);
    return t;
}

downstream::FinetuneConfig finetune_config(const RunConfig& c) {
    downstream::FinetuneConfig f;
    f.head = c.head;
    f.freeze_backbone = c.freeze_backbone;
    f.epochs = c.finetune_epochs;
    f.batch_size = c.batch_size;
    f.adam = adam_config(c);
    f.adam.lr = c.finetune_lr;
    f.adam.warmup_steps = c.finetune_warmup_steps;
    f.seed = require_seed(c);
    return f;
}

}  // namespace geotok::config
