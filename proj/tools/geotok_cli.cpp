// geotok: command-line entry point.
//
//   geotok synth      --out DIR [--config C] [--seed N]
//   geotok vocab      --input CSV --out DIR [--config C]
//   geotok preprocess --input CSV --out DIR [--config C] [--vocab V] [--seed N]
//   geotok pretrain   --data DIR --out DIR [--config C] [--seed N]
//   geotok finetune   --data DIR --checkpoint F --out DIR [--config C] [--seed N]
//   geotok eval       --data DIR --checkpoint F --out DIR [--split S] [--config C]
//   geotok ablate     --data DIR --out DIR [--config C] [--seed N]
//
// Exit codes: 0 ok, 2 bad config or usage, 3 missing file, 1 anything else.
// Errors are printed as one line on stderr: error kind=<k> [key=<key>] msg="...".

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "geotok/ablation.hpp"
#include "geotok/checkpoint.hpp"
#include "geotok/config.hpp"
#include "geotok/downstream.hpp"
#include "geotok/error.hpp"
#include "geotok/io.hpp"
#include "geotok/model.hpp"
#include "geotok/synth.hpp"
#include "geotok/trajectory_pipeline.hpp"

namespace fs = std::filesystem;
using namespace geotok;

namespace {

struct Args {
    std::string config;
    std::string out;
    std::string input;
    std::string data;
    std::string checkpoint;
    std::string vocab;
    std::string split = "test";
    std::optional<std::uint64_t> seed;
};

void log(const std::string& msg) { std::cerr << "[geotok] " << msg << "\n"; }

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c == '\n' ? ' ' : c);
    }
    return out + "\"";
}

config::RunConfig resolve_config(const Args& a) {
    config::RunConfig c = a.config.empty() ? config::parse(nlohmann::json::object()) : config::load(a.config);
    if (a.seed) c.seed = a.seed;
    return c;
}

fs::path out_dir(const Args& a) {
    fs::path p(a.out);
    fs::create_directories(p);
    return p;
}

std::vector<fs::path> inputs_of(const Args& a) {
    std::vector<fs::path> in;
    if (!a.config.empty()) in.emplace_back(a.config);
    return in;
}

std::vector<RawRecord> read_records(const fs::path& p) {
    std::istringstream in(io::read_file(p));
    return read_records_csv(in);
}

struct Dataset {
    Vocabulary vocab;
    std::vector<Trajectory> trajs;
    DatasetSplit split;
};

Dataset read_dataset(const fs::path& dir) {
    Dataset d;
    d.vocab = Vocabulary::from_json(io::read_json(dir / "vocab.json"));
    std::istringstream in(io::read_file(dir / "trajectories.jsonl"));
    d.trajs = read_trajectories_jsonl(in);
    d.split = split_from_json(io::read_json(dir / "split.json"));
    return d;
}

std::vector<Trajectory> pick(const std::vector<Trajectory>& all, const std::vector<std::size_t>& idx) {
    std::vector<Trajectory> out;
    out.reserve(idx.size());
    for (auto i : idx) {
        if (i >= all.size()) throw FormatError("split index " + std::to_string(i) + " out of range");
        out.push_back(all[i]);
    }
    return out;
}

std::vector<fs::path> dataset_files(const fs::path& dir) {
    return {dir / "vocab.json", dir / "trajectories.jsonl", dir / "split.json"};
}

// ---------------------------------------------------------------------------

int cmd_synth(const Args& a) {
    auto c = resolve_config(a);
    auto sc = c.synth;
    if (c.seed) sc.seed = *c.seed;
    const auto records = synth::generate(sc);
    const auto dir = out_dir(a);
    std::ostringstream csv;
    write_records_csv(csv, records);
    io::write_file(dir / "records.csv", csv.str());
    log("synth: " + std::to_string(records.size()) + " records for " + std::to_string(sc.users) + " users");
    io::write_manifest(dir, "synth", config::to_json(c), sc.seed, inputs_of(a), {dir / "records.csv"});
    return 0;
}

nlohmann::json vocab_stats(const Vocabulary& v) {
    return {{"levels", v.level_sizes()},
            {"hierarchical_total", v.hierarchical_total()},
            {"flat_count", v.flat_count()},
            {"scales", v.spec().scales()}};
}

int cmd_vocab(const Args& a) {
    auto c = resolve_config(a);
    const auto records = read_records(a.input);
    std::vector<ProjectedPoint> pts;
    pts.reserve(records.size());
    for (const auto& r : records) pts.push_back(project(r.lat, r.lon, c.pipeline.ref_lat));
    const auto vocab = build_vocab(pts, config::grid_spec(c));
    const auto dir = out_dir(a);
    io::write_json(dir / "vocab.json", vocab.to_json());
    io::write_json(dir / "vocab_stats.json", vocab_stats(vocab));
    log("vocab: levels " + nlohmann::json(vocab.level_sizes()).dump() + ", flat " + std::to_string(vocab.flat_count()));
    auto in = inputs_of(a);
    in.emplace_back(a.input);
    io::write_manifest(dir, "vocab", config::to_json(c), nullptr, in, {dir / "vocab.json", dir / "vocab_stats.json"});
    return 0;
}

int cmd_preprocess(const Args& a) {
    auto c = resolve_config(a);
    const std::uint64_t seed = c.seed.value_or(0);
    const auto records = read_records(a.input);
    const auto spec = config::grid_spec(c);
    const auto segments = extract_segments(records, c.pipeline, spec);
    if (segments.empty()) throw InvalidInput("preprocess: no trajectories survived segmentation");
    Vocabulary vocab;
    if (!a.vocab.empty()) {
        vocab = Vocabulary::from_json(io::read_json(a.vocab));
    } else {
        const auto pts = segment_points(segments);
        vocab = build_vocab(pts, spec);
    }
    std::vector<Trajectory> trajs;
    for (const auto& seg : segments) {
        for (auto& w : window(to_trajectory(seg, vocab), c.max_seq_len)) trajs.push_back(std::move(w));
    }
    const auto sp = split(trajs.size(), seed, c.split);
    const auto dir = out_dir(a);
    io::write_json(dir / "vocab.json", vocab.to_json());
    std::ostringstream jl;
    write_trajectories_jsonl(jl, trajs);
    io::write_file(dir / "trajectories.jsonl", jl.str());
    io::write_json(dir / "split.json", split_to_json(sp));
    auto stats = vocab_stats(vocab);
    stats["records"] = records.size();
    stats["segments"] = segments.size();
    stats["trajectories"] = trajs.size();
    io::write_json(dir / "stats.json", stats);
    log("preprocess: " + std::to_string(segments.size()) + " segments -> " + std::to_string(trajs.size()) +
        " sequences; vocab levels " + nlohmann::json(vocab.level_sizes()).dump());
    auto in = inputs_of(a);
    in.emplace_back(a.input);
    if (!a.vocab.empty()) in.emplace_back(a.vocab);
    io::write_manifest(dir, "preprocess", config::to_json(c), seed, in,
                       {dir / "vocab.json", dir / "trajectories.jsonl", dir / "split.json", dir / "stats.json"});
    return 0;
}

int cmd_pretrain(const Args& a) {
    auto c = resolve_config(a);
    const auto tc = config::train_config(c);
    const auto ds = read_dataset(a.data);
    const auto train = pick(ds.trajs, ds.split.pretrain);
    model::LocationModel<float> m(config::model_config(c, ds.vocab.level_sizes()), tc.seed);
    log("pretrain: " + std::to_string(train.size()) + " sequences, " + std::to_string(m.parameter_count()) + " parameters");
    const auto res = model::pretrain(m, train, tc);
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& e : res.curve) {
        curve.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"level_loss", e.level_loss}});
        log("  epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.loss));
    }
    const auto dir = out_dir(a);
    checkpoint::save(dir / "model.gsq", checkpoint::from_model(m, {{"kind", "pretrained"}, {"steps", res.steps}}));
    io::write_json(dir / "curve.json", curve);
    auto in = inputs_of(a);
    for (auto& p : dataset_files(a.data)) in.push_back(p);
    io::write_manifest(dir, "pretrain", config::to_json(c), tc.seed, in, {dir / "model.gsq", dir / "curve.json"});
    return 0;
}

int cmd_finetune(const Args& a) {
    auto c = resolve_config(a);
    const auto fc = config::finetune_config(c);
    const auto ds = read_dataset(a.data);
    const auto ck = checkpoint::load(a.checkpoint);
    auto backbone = checkpoint::to_model<float>(ck);
    if (backbone.config().vocab_sizes != ds.vocab.level_sizes())
        throw ShapeError("finetune: checkpoint vocabulary does not match the dataset vocabulary");
    const auto train = pick(ds.trajs, ds.split.finetune_train);
    const auto val = pick(ds.trajs, ds.split.finetune_val);
    const auto test = pick(ds.trajs, ds.split.finetune_test);
    std::vector<double> curve;
    checkpoint::Checkpoint out = checkpoint::from_model(backbone, {});
    nlohmann::json report;
    if (c.task == config::Task::next_location) {
        auto head = downstream::finetune_next_location(backbone, train, fc, &curve);
        out = checkpoint::from_model(backbone, {{"kind", "next_location"}, {"head", head.describe()}});
        checkpoint::append_tensors<float>(out, head.named_parameters(), "head.");
        report = downstream::report_to_json(downstream::evaluate_next_location(backbone, head, test));
        if (!val.empty()) report["val"] = downstream::report_to_json(downstream::evaluate_next_location(backbone, head, val));
    } else {
        auto head = downstream::finetune_classifier(backbone, train, fc, &curve);
        out = checkpoint::from_model(backbone, {{"kind", "classification"}, {"classifier", head.describe()}});
        checkpoint::append_tensors<float>(out, head.named_parameters(), "head.");
        report = downstream::report_to_json(downstream::evaluate_classifier(backbone, head, test), &head.labels());
        if (!val.empty()) report["val"] = downstream::report_to_json(downstream::evaluate_classifier(backbone, head, val), &head.labels());
    }
    report["task"] = config::to_string(c.task);
    report["split"] = "test";
    const auto dir = out_dir(a);
    checkpoint::save(dir / "finetuned.gsq", out);
    io::write_json(dir / "curve.json", curve);
    io::write_json(dir / "report.json", report);
    log("finetune: test acc1 " + std::to_string(report["acc1"].get<double>()));
    auto in = inputs_of(a);
    for (auto& p : dataset_files(a.data)) in.push_back(p);
    in.emplace_back(a.checkpoint);
    io::write_manifest(dir, "finetune", config::to_json(c), fc.seed, in,
                       {dir / "finetuned.gsq", dir / "curve.json", dir / "report.json"});
    return 0;
}

int cmd_eval(const Args& a) {
    auto c = resolve_config(a);
    const auto ds = read_dataset(a.data);
    const auto ck = checkpoint::load(a.checkpoint);
    const auto backbone = checkpoint::to_model<float>(ck);
    std::vector<std::size_t> idx;
    if (a.split == "test") idx = ds.split.finetune_test;
    else if (a.split == "val") idx = ds.split.finetune_val;
    else if (a.split == "train") idx = ds.split.finetune_train;
    else if (a.split == "pretrain") idx = ds.split.pretrain;
    else throw ConfigError("split", "unknown split '" + a.split + "' (test, val, train, pretrain)");
    const auto data = pick(ds.trajs, idx);
    nlohmann::json report;
    if (ck.meta.contains("head")) {
        auto head = downstream::head_from_description<float>(ck.meta["head"]);
        head.load_values(checkpoint::extract_tensors<float>(ck, "head."));
        report = downstream::report_to_json(downstream::evaluate_next_location(backbone, head, data));
        report["task"] = "next_location";
    } else if (ck.meta.contains("classifier")) {
        auto head = downstream::classifier_from_description<float>(ck.meta["classifier"]);
        head.load_values(checkpoint::extract_tensors<float>(ck, "head."));
        report = downstream::report_to_json(downstream::evaluate_classifier(backbone, head, data), &head.labels());
        report["task"] = "classification";
    } else {
        report = downstream::report_to_json(downstream::evaluate_pretrained_next_location(backbone, data));
        report["halm_loss"] = model::evaluate_halm_loss(backbone, data);
        report["task"] = "pretrained_next_location";
    }
    report["split"] = a.split;
    const auto dir = out_dir(a);
    io::write_json(dir / "report.json", report);
    log("eval: acc1 " + std::to_string(report["acc1"].get<double>()) + " acc5 " + std::to_string(report["acc5"].get<double>()));
    auto in = inputs_of(a);
    for (auto& p : dataset_files(a.data)) in.push_back(p);
    in.emplace_back(a.checkpoint);
    io::write_manifest(dir, "eval", config::to_json(c), c.seed ? nlohmann::json(*c.seed) : nlohmann::json(nullptr), in,
                       {dir / "report.json"});
    return 0;
}

int cmd_ablate(const Args& a) {
    auto c = resolve_config(a);
    const auto ds = read_dataset(a.data);
    ablation::AblationConfig ac;
    ac.base = config::model_config(c, ds.vocab.level_sizes());
    ac.train = config::train_config(c);
    ac.variants = c.ablation_variants;
    const auto train = pick(ds.trajs, ds.split.pretrain);
    auto eval_idx = ds.split.finetune_test;
    eval_idx.insert(eval_idx.end(), ds.split.finetune_val.begin(), ds.split.finetune_val.end());
    const auto eval = pick(ds.trajs, eval_idx);
    const auto rows = ablation::run_ablation(ac, train, eval, ds.vocab.level_sizes());
    const auto dir = out_dir(a);
    io::write_json(dir / "ablation.json", ablation::to_json(rows));
    const auto table = ablation::render_table(rows);
    io::write_file(dir / "ablation.txt", table);
    std::cerr << table;
    auto in = inputs_of(a);
    for (auto& p : dataset_files(a.data)) in.push_back(p);
    io::write_manifest(dir, "ablate", config::to_json(c), ac.train.seed, in, {dir / "ablation.json", dir / "ablation.txt"});
    return 0;
}

int fail(int code, const char* kind, const std::string& msg, const std::string& key = "") {
    std::cerr << "error kind=" << kind;
    if (!key.empty()) std::cerr << " key=" << key;
    std::cerr << " msg=" << quote(msg) << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"geotok: hierarchical location tokenizer and causal location model"};
    app.require_subcommand(1);
    Args a;

    auto add_common = [&](CLI::App* s, bool needs_out = true) {
        s->add_option("--config", a.config, "run configuration JSON");
        auto* o = s->add_option("--out", a.out, "output directory");
        if (needs_out) o->required();
        s->add_option("--seed", a.seed, "random seed (overrides config)");
    };
    auto* synth_cmd = app.add_subcommand("synth", "generate synthetic GPS records");
    add_common(synth_cmd);
    auto* vocab_cmd = app.add_subcommand("vocab", "build a hierarchical vocabulary from records");
    add_common(vocab_cmd);
    vocab_cmd->add_option("--input", a.input, "records CSV")->required();
    auto* pre_cmd = app.add_subcommand("preprocess", "segment, tokenize, window and split records");
    add_common(pre_cmd);
    pre_cmd->add_option("--input", a.input, "records CSV")->required();
    pre_cmd->add_option("--vocab", a.vocab, "reuse an existing vocabulary JSON");
    auto* pt_cmd = app.add_subcommand("pretrain", "pre-train the location model");
    add_common(pt_cmd);
    pt_cmd->add_option("--data", a.data, "preprocess output directory")->required();
    auto* ft_cmd = app.add_subcommand("finetune", "fine-tune a downstream head");
    add_common(ft_cmd);
    ft_cmd->add_option("--data", a.data, "preprocess output directory")->required();
    ft_cmd->add_option("--checkpoint", a.checkpoint, "pre-trained checkpoint")->required();
    auto* ev_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(ev_cmd);
    ev_cmd->add_option("--data", a.data, "preprocess output directory")->required();
    ev_cmd->add_option("--checkpoint", a.checkpoint, "checkpoint to evaluate")->required();
    ev_cmd->add_option("--split", a.split, "test, val, train or pretrain");
    auto* ab_cmd = app.add_subcommand("ablate", "compare flat, independent and chained variants");
    add_common(ab_cmd);
    ab_cmd->add_option("--data", a.data, "preprocess output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << app.help();
        return fail(2, "usage", e.what());
    }

    try {
        if (*synth_cmd) return cmd_synth(a);
        if (*vocab_cmd) return cmd_vocab(a);
        if (*pre_cmd) return cmd_preprocess(a);
        if (*pt_cmd) return cmd_pretrain(a);
        if (*ft_cmd) return cmd_finetune(a);
        if (*ev_cmd) return cmd_eval(a);
        if (*ab_cmd) return cmd_ablate(a);
    } catch (const ConfigError& e) {
        return fail(2, "config", e.what(), e.key());
    } catch (const IoError& e) {
        return fail(3, "io", e.what());
    } catch (const OutOfVocabulary& e) {
        return fail(1, "oov", e.what());
    } catch (const FormatError& e) {
        return fail(1, "format", e.what());
    } catch (const ShapeError& e) {
        return fail(1, "shape", e.what());
    } catch (const NonFiniteError& e) {
        return fail(1, "nonfinite", e.what());
    } catch (const InvalidInput& e) {
        return fail(1, "input", e.what());
    } catch (const std::exception& e) {
        return fail(1, "internal", e.what());
    }
    return fail(2, "usage", "no subcommand");
}
