#include "geotok/ablation.hpp"

#include <cmath>
#include <cstdio>
#include <map>

#include "geotok/accounting.hpp"
#include "geotok/downstream.hpp"
#include "geotok/error.hpp"

namespace geotok::ablation {

namespace ts = geotok::tensor;

FlatCorpus flatten(std::span<const Trajectory> train, std::span<const Trajectory> eval) {
    std::map<std::vector<std::int32_t>, std::int32_t> ids;
    auto convert = [&](std::span<const Trajectory> src, std::vector<Trajectory>& dst) {
        for (const auto& tr : src) {
            Trajectory f;
            f.user = tr.user;
            f.ts = tr.ts;
            f.label = tr.label;
            f.ids.push_back({kSosId});
            for (std::size_t t = 1; t < tr.ids.size(); ++t) {
                auto [it, fresh] = ids.emplace(tr.ids[t], static_cast<std::int32_t>(kFirstCellId + ids.size()));
                f.ids.push_back({it->second});
            }
            dst.push_back(std::move(f));
        }
    };
    FlatCorpus out;
    convert(train, out.train);
    convert(eval, out.eval);
    out.vocab_size = ids.size() + kFirstCellId;
    return out;
}

TopkAccuracy evaluate_halm_topk(const model::LocationModel<float>& m, std::span<const Trajectory> data,
                                std::size_t batch_size) {
    if (data.empty()) throw InvalidInput("evaluate_halm_topk: empty dataset");
    ts::NoGradGuard guard;
    std::size_t hit1 = 0, hit5 = 0, n = 0;
    const std::size_t w = m.config().hidden;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const auto chunk = data.subspan(start, std::min(batch_size, data.size() - start));
        const auto batch = model::make_batch(chunk);
        const auto enc = m.encode(batch, false, nullptr);
        for (std::size_t b = 0; b < batch.size; ++b) {
            for (std::size_t t = 0; t + 1 < batch.lengths[b]; ++t) {
                const auto row = enc.values().subspan((b * batch.steps + t) * w, w);
                downstream::HalmScorer<float> sc(m, ts::Tensor<float>::from({1, w}, std::vector<float>(row.begin(), row.end())));
                const auto top = downstream::beam_topk(sc, 5);
                std::vector<std::int32_t> target(batch.levels);
                for (std::size_t h = 0; h < batch.levels; ++h) target[h] = batch.id(b, t + 1, h);
                if (top[0].ids == target) ++hit1;
                for (const auto& c : top)
                    if (c.ids == target) ++hit5;
                ++n;
            }
        }
    }
    if (n == 0) throw InvalidInput("evaluate_halm_topk: no next-location targets");
    return {static_cast<double>(hit1) / static_cast<double>(n), static_cast<double>(hit5) / static_cast<double>(n), n};
}

std::vector<AblationRow> run_ablation(const AblationConfig& cfg, std::span<const Trajectory> train,
                                      std::span<const Trajectory> eval, const std::vector<std::size_t>& level_sizes) {
    if (train.empty() || eval.empty()) throw InvalidInput("run_ablation: train and eval sets must be non-empty");
    const FlatCorpus flat = flatten(train, eval);
    std::vector<AblationRow> rows;
    for (const auto& variant : cfg.variants) {
        model::ModelConfig mc = cfg.base;
        std::span<const Trajectory> tr = train, ev = eval;
        if (variant == "baseline_flat_alm") {
            mc.vocab_sizes = {flat.vocab_size};
            mc.chained_heads = false;
            tr = flat.train;
            ev = flat.eval;
        } else if (variant == "gt_independent_alm") {
            mc.vocab_sizes = level_sizes;
            mc.chained_heads = false;
        } else if (variant == "gt_halm") {
            mc.vocab_sizes = level_sizes;
            mc.chained_heads = true;
        } else {
            throw ConfigError("ablation_variants", "unknown ablation variant '" + variant + "'");
        }
        AblationRow row;
        row.variant = variant;
        const auto pc = accounting::count_params(mc);
        row.params = pc.total();
        row.embedding_params = pc.embeddings;
        row.flops = accounting::estimate_macs(mc, mc.max_seq_len).flops();
        model::LocationModel<float> m(mc, cfg.train.seed);
        try {
            model::pretrain(m, tr, cfg.train);
            row.halm_loss = model::evaluate_halm_loss(m, ev, cfg.eval_batch);
            const auto acc = evaluate_halm_topk(m, ev, cfg.eval_batch);
            row.acc1 = acc.acc1;
            row.acc5 = acc.acc5;
            if (!std::isfinite(row.halm_loss)) throw NonFiniteError("non-finite eval loss");
        } catch (const NonFiniteError& e) {
            row.divergent = true;
            row.halm_loss = NAN;
            row.note = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

nlohmann::json to_json(const std::vector<AblationRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json j = {{"variant", r.variant},   {"acc1", r.acc1},
                            {"acc5", r.acc5},         {"params", r.params},
                            {"flops", r.flops},       {"embedding_params", r.embedding_params},
                            {"divergent", r.divergent}};
        // JSON has no NaN
        j["halm_loss"] = r.divergent ? nlohmann::json(nullptr) : nlohmann::json(r.halm_loss);
        if (!r.note.empty()) j["note"] = r.note;
        arr.push_back(std::move(j));
    }
    return arr;
}

std::string render_table(const std::vector<AblationRow>& rows) {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof line, "%-20s %10s %7s %7s %12s %12s %14s\n", "variant", "halm_loss", "acc1", "acc5",
                  "params", "emb_params", "flops");
    out += line;
    for (const auto& r : rows) {
        if (r.divergent) {
            std::snprintf(line, sizeof line, "%-20s %10s %7s %7s %12llu %12llu %14llu\n", r.variant.c_str(), "divergent",
                          "-", "-", static_cast<unsigned long long>(r.params),
                          static_cast<unsigned long long>(r.embedding_params), static_cast<unsigned long long>(r.flops));
        } else {
            std::snprintf(line, sizeof line, "%-20s %10.4f %7.4f %7.4f %12llu %12llu %14llu\n", r.variant.c_str(),
                          r.halm_loss, r.acc1, r.acc5, static_cast<unsigned long long>(r.params),
                          static_cast<unsigned long long>(r.embedding_params), static_cast<unsigned long long>(r.flops));
        }
        out += line;
    }
    return out;
}

}  // namespace geotok::ablation
