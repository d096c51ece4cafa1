#include "geotok/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "geotok/error.hpp"

namespace geotok::downstream {

namespace ts = geotok::tensor;

// ---------------------------------------------------------------------------
// beam

bool ranks_before(const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.ids < b.ids;
}

std::vector<Candidate> beam_topk(const ChainScorer& scorer, std::size_t k) {
    if (k == 0) throw InvalidInput("beam_topk: k must be at least 1");
    const std::size_t levels = scorer.levels();
    if (levels == 0) throw InvalidInput("beam_topk: scorer has no levels");
    // clamp without overflowing on large vocabularies
    std::size_t total = 1;
    for (std::size_t h = 0; h < levels && total < k; ++h) total *= scorer.level_size(h);
    k = std::min(k, total);

    std::vector<Candidate> beam{Candidate{{}, 1.0}};
    for (std::size_t h = 0; h < levels; ++h) {
        std::vector<Candidate> next;
        for (const auto& c : beam) {
            const auto pr = scorer.probs(h, c.ids);
            if (pr.size() != scorer.level_size(h)) throw ShapeError("beam_topk: scorer returned wrong width");
            for (std::size_t v = 0; v < pr.size(); ++v) {
                Candidate n{c.ids, c.score * pr[v]};
                n.ids.push_back(static_cast<std::int32_t>(v));
                next.push_back(std::move(n));
            }
        }
        const std::size_t keep = std::min(k, next.size());
        std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(), ranks_before);
        next.resize(keep);
        beam = std::move(next);
    }
    return beam;
}

template <typename T>
std::vector<double> softmax_row(std::span<const T> logits) {
    double mx = -INFINITY, z = 0.0;
    for (auto v : logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> p(logits.size());
    for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    for (auto& v : p) v /= z;
    return p;
}

template <typename T>
std::vector<double> HalmScorer<T>::probs(std::size_t level, std::span<const std::int32_t> prefix) const {
    ts::NoGradGuard guard;
    Tensor<T> in = e_;
    if (level > 0 && m_.config().chained_heads) {
        auto oh = Tensor<T>::zeros({1, m_.config().vocab_sizes[level - 1]});
        oh.values_mut()[static_cast<std::size_t>(prefix[level - 1])] = T(1);
        in = ts::concat_last(in, oh);
    }
    return softmax_row(m_.head_forward(level, in).values());
}

// ---------------------------------------------------------------------------
// metrics

EvalReport compute_metrics(std::span<const std::vector<std::int64_t>> ranked, std::span<const std::int64_t> targets) {
    if (ranked.size() != targets.size()) throw ShapeError("compute_metrics: predictions and targets differ in length");
    if (targets.empty()) throw InvalidInput("compute_metrics: no samples");
    EvalReport r;
    r.n = targets.size();
    std::size_t hit1 = 0, hit5 = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& list = ranked[i];
        if (list.empty()) throw InvalidInput("compute_metrics: empty prediction list at sample " + std::to_string(i));
        const auto tgt = targets[i];
        const bool known = tgt != kUnknownClass;
        if (!known) ++r.unknown;
        r.per_class[tgt].support++;
        r.per_class[list[0]].predicted++;
        if (known && list[0] == tgt) {
            ++hit1;
            r.per_class[tgt].correct++;
        }
        const std::size_t top = std::min<std::size_t>(5, list.size());
        if (known && std::find(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(top), tgt) !=
                         list.begin() + static_cast<std::ptrdiff_t>(top))
            ++hit5;
    }
    r.acc1 = static_cast<double>(hit1) / static_cast<double>(r.n);
    r.acc5 = static_cast<double>(hit5) / static_cast<double>(r.n);
    std::size_t classes = 0;
    for (const auto& [cls, c] : r.per_class) {
        if (c.support == 0) continue;
        ++classes;
        const double p = c.predicted ? static_cast<double>(c.correct) / static_cast<double>(c.predicted) : 0.0;
        const double rc = static_cast<double>(c.correct) / static_cast<double>(c.support);
        r.macro_p += p;
        r.macro_r += rc;
        r.macro_f1 += (p + rc > 0.0) ? 2.0 * p * rc / (p + rc) : 0.0;
    }
    r.macro_p /= static_cast<double>(classes);
    r.macro_r /= static_cast<double>(classes);
    r.macro_f1 /= static_cast<double>(classes);
    return r;
}

nlohmann::json report_to_json(const EvalReport& r, const std::vector<std::string>* names) {
    nlohmann::json j = {{"acc1", r.acc1},       {"acc5", r.acc5}, {"macro_p", r.macro_p},
                        {"macro_r", r.macro_r}, {"macro_f1", r.macro_f1}, {"n", r.n}};
    nlohmann::json pc = nlohmann::json::array();
    for (const auto& [cls, c] : r.per_class) {
        nlohmann::json row = {{"class", cls}, {"support", c.support}, {"predicted", c.predicted}, {"correct", c.correct}};
        if (names) {
            row["name"] = cls == kUnknownClass || cls < 0 || static_cast<std::size_t>(cls) >= names->size()
                              ? std::string("<unknown>")
                              : (*names)[static_cast<std::size_t>(cls)];
        }
        pc.push_back(std::move(row));
    }
    j["per_class"] = std::move(pc);
    j["unknown"] = r.unknown;
    if (!r.level_acc1.empty()) j["level_acc1"] = r.level_acc1;
    return j;
}

// ---------------------------------------------------------------------------
// pooling

template <typename T>
std::vector<T> pool_weights(const Batch& batch) {
    std::vector<T> w(batch.size * batch.steps, T(0));
    for (std::size_t b = 0; b < batch.size; ++b)
        for (std::size_t t = 1; t < batch.steps; ++t)
            if (batch.valid[b * batch.steps + t]) w[b * batch.steps + t] = T(1);
    return w;
}

template <typename T>
Tensor<T> pooled(const Tensor<T>& encoded, const Batch& batch) {
    const auto w = pool_weights<T>(batch);
    return ts::masked_mean_time(encoded, std::span<const T>(w));
}

// ---------------------------------------------------------------------------
// next-location head

HeadKind parse_head_kind(const std::string& s) {
    if (s == "ffn") return HeadKind::ffn;
    if (s == "lstm") return HeadKind::lstm;
    throw ConfigError("head", "unknown head kind '" + s + "' (expected ffn or lstm)");
}

std::string to_string(HeadKind k) { return k == HeadKind::ffn ? "ffn" : "lstm"; }

namespace {

template <typename T>
void init_normal(Tensor<T>& t, ts::Rng& rng) {
    for (auto& v : t.values_mut()) v = T(0.02 * ts::standard_normal(rng));
}

template <typename T>
void copy_named(std::vector<NamedTensor<T>>& dst, std::span<const NamedTensor<T>> src, const char* what) {
    for (auto& d : dst) {
        auto it = std::find_if(src.begin(), src.end(), [&](const NamedTensor<T>& s) { return s.name == d.name; });
        if (it == src.end()) throw ShapeError(std::string(what) + ": tensor '" + d.name + "' missing");
        if (it->tensor.shape() != d.tensor.shape()) {
            throw ShapeError(std::string(what) + ": tensor '" + d.name + "' has shape " + ts::to_string(it->tensor.shape()) +
                             ", expected " + ts::to_string(d.tensor.shape()));
        }
    }
    for (auto& d : dst) {
        auto it = std::find_if(src.begin(), src.end(), [&](const NamedTensor<T>& s) { return s.name == d.name; });
        std::copy(it->tensor.values().begin(), it->tensor.values().end(), d.tensor.values_mut().begin());
    }
}

template <typename T>
std::vector<Tensor<T>> unnamed(const std::vector<NamedTensor<T>>& v) {
    std::vector<Tensor<T>> out;
    for (const auto& p : v) out.push_back(p.tensor);
    return out;
}

}  // namespace

template <typename T>
std::size_t NextLocationHead<T>::add(std::string name, ts::Shape shape, ts::Rng& rng, bool normal) {
    auto t = Tensor<T>::zeros(std::move(shape), true);
    if (normal) init_normal(t, rng);
    params_.push_back({std::move(name), std::move(t)});
    return params_.size() - 1;
}

template <typename T>
NextLocationHead<T>::NextLocationHead(HeadKind kind, std::size_t width, std::vector<std::size_t> vocab_sizes,
                                      std::uint64_t seed)
    : kind_(kind), width_(width), vocab_sizes_(std::move(vocab_sizes)) {
    if (width_ == 0 || vocab_sizes_.empty()) throw ConfigError("head", "head needs a positive width and at least one level");
    ts::Rng rng(seed);
    for (std::size_t h = 0; h < vocab_sizes_.size(); ++h) {
        const std::string pre = to_string(kind_) + ".level" + std::to_string(h + 1) + ".";
        const std::size_t in = input_width(h), v = vocab_sizes_[h];
        Level lv{};
        if (kind_ == HeadKind::ffn) {
            lv.a = add(pre + "w", {in, v}, rng, true);
            lv.b = add(pre + "b", {v}, rng, false);
        } else {
            lv.a = add(pre + "wx", {in, 4 * width_}, rng, true);
            lv.b = add(pre + "wh", {width_, 4 * width_}, rng, true);
            lv.c = add(pre + "b", {4 * width_}, rng, false);
            lv.d = add(pre + "out_w", {width_, v}, rng, true);
            lv.e = add(pre + "out_b", {v}, rng, false);
        }
        levels_.push_back(lv);
    }
}

template <typename T>
std::size_t NextLocationHead<T>::input_width(std::size_t level) const {
    if (level >= levels()) throw InvalidInput("input_width: level out of range");
    return level == 0 ? width_ : width_ + vocab_sizes_[level - 1];
}

template <typename T>
std::vector<Tensor<T>> NextLocationHead<T>::parameters() const {
    return unnamed(params_);
}

template <typename T>
void NextLocationHead<T>::load_values(std::span<const NamedTensor<T>> source) {
    copy_named(params_, source, "head load");
}

template <typename T>
Tensor<T> NextLocationHead<T>::lstm_final(const Level& lv, const Tensor<T>& encoded, const Batch& batch,
                                          const Tensor<T>& cond) const {
    const std::size_t bsz = batch.size, steps = batch.steps, w = width_;
    if (steps < 2) throw InvalidInput("lstm head: prefix has no real location");
    auto h = Tensor<T>::zeros({bsz, w});
    auto c = Tensor<T>::zeros({bsz, w});
    Tensor<T> hist;
    for (std::size_t t = 1; t < steps; ++t) {
        auto x = ts::select_time(encoded, t);
        if (cond.defined()) x = ts::concat_last(x, cond);
        auto z = ts::add(ts::add(ts::matmul(x, p(lv.a)), ts::matmul(h, p(lv.b))), p(lv.c));
        auto ig = ts::sigmoid(ts::slice_last(z, 0, w));
        auto fg = ts::sigmoid(ts::slice_last(z, w, w));
        auto gg = ts::tanh(ts::slice_last(z, 2 * w, w));
        auto og = ts::sigmoid(ts::slice_last(z, 3 * w, w));
        c = ts::add(ts::mul(fg, c), ts::mul(ig, gg));
        h = ts::mul(og, ts::tanh(c));
        hist = hist.defined() ? ts::concat_last(hist, h) : h;
    }
    // pick each row's state at its last real step
    auto seq = ts::reshape(hist, {bsz, steps - 1, w});
    std::vector<T> pick(bsz * (steps - 1), T(0));
    for (std::size_t b = 0; b < bsz; ++b) pick[b * (steps - 1) + (batch.lengths[b] - 2)] = T(1);
    return ts::masked_mean_time(seq, std::span<const T>(pick));
}

template <typename T>
Tensor<T> NextLocationHead<T>::level_logits(const Tensor<T>& encoded, const Batch& batch, std::size_t level,
                                            const Tensor<T>& prev_one_hot) const {
    if (level >= levels()) throw InvalidInput("level_logits: level out of range");
    if (encoded.rank() != 3 || encoded.dim(2) != width_) {
        throw ShapeError("level_logits: encoded " + ts::to_string(encoded.shape()) + " does not match head width " +
                         std::to_string(width_));
    }
    Tensor<T> cond;
    if (level > 0) {
        if (!prev_one_hot.defined() || prev_one_hot.rank() != 2 || prev_one_hot.dim(0) != batch.size ||
            prev_one_hot.dim(1) != vocab_sizes_[level - 1]) {
            throw ShapeError("level_logits: conditioning one-hot has the wrong shape");
        }
        cond = prev_one_hot;
    }
    const auto& lv = levels_[level];
    if (kind_ == HeadKind::ffn) {
        auto x = pooled(encoded, batch);
        if (cond.defined()) x = ts::concat_last(x, cond);
        return ts::add(ts::matmul(x, p(lv.a)), p(lv.b));
    }
    auto hT = lstm_final(lv, encoded, batch, cond);
    return ts::add(ts::matmul(hT, p(lv.d)), p(lv.e));
}

template <typename T>
std::vector<Tensor<T>> NextLocationHead<T>::chain_logits(const Tensor<T>& encoded, const Batch& batch) const {
    std::vector<Tensor<T>> out;
    for (std::size_t h = 0; h < levels(); ++h) {
        Tensor<T> prev;
        if (h > 0) prev = ts::argmax_one_hot(out.back());
        out.push_back(level_logits(encoded, batch, h, prev));
    }
    return out;
}

template <typename T>
nlohmann::json NextLocationHead<T>::describe() const {
    return {{"kind", to_string(kind_)}, {"width", width_}, {"vocab_sizes", vocab_sizes_}};
}

template <typename T>
NextLocationHead<T> head_from_description(const nlohmann::json& j) {
    try {
        return NextLocationHead<T>(parse_head_kind(j.at("kind").get<std::string>()), j.at("width").get<std::size_t>(),
                                   j.at("vocab_sizes").get<std::vector<std::size_t>>(), 0);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("head description: ") + e.what());
    }
}

std::vector<NextLocationSample> next_location_samples(std::span<const Trajectory> data) {
    std::vector<NextLocationSample> out;
    out.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& tr = data[i];
        if (tr.length() < 2) {
            throw InvalidInput("next-location sample " + std::to_string(i) + " has " + std::to_string(tr.length()) +
                               " real locations, need at least 2");
        }
        NextLocationSample s;
        s.prefix.user = tr.user;
        s.prefix.label = tr.label;
        s.prefix.ids.assign(tr.ids.begin(), tr.ids.end() - 1);
        s.prefix.ts.assign(tr.ts.begin(), tr.ts.end() - 1);
        s.target = tr.ids.back();
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

template <typename T>
void check_compatible(const LocationModel<T>& backbone, std::size_t width, const std::vector<std::size_t>* vocab) {
    if (backbone.config().hidden != width) {
        throw ShapeError("head width " + std::to_string(width) + " does not match backbone width " +
                         std::to_string(backbone.config().hidden));
    }
    if (vocab && *vocab != backbone.config().vocab_sizes) {
        throw ShapeError("head vocabulary sizes do not match the backbone");
    }
}

template <typename T>
Tensor<T> encode_for_finetune(LocationModel<T>& backbone, const Batch& batch, bool freeze, ts::Rng& rng) {
    if (freeze) {
        ts::NoGradGuard guard;
        return backbone.encode(batch, false, nullptr);
    }
    return backbone.encode(batch, true, &rng);
}

template <typename T>
std::vector<Tensor<T>> trainable(LocationModel<T>& backbone, const std::vector<Tensor<T>>& head, bool freeze) {
    std::vector<Tensor<T>> params = head;
    if (!freeze) {
        auto bb = backbone.parameters();
        params.insert(params.end(), bb.begin(), bb.end());
    }
    return params;
}

template <typename T>
void check_loss(const Tensor<T>& loss, std::size_t epoch) {
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw NonFiniteError("finetune: non-finite loss at epoch " + std::to_string(epoch));
}

}  // namespace

template <typename T>
NextLocationHead<T> finetune_next_location(LocationModel<T>& backbone, std::span<const Trajectory> train,
                                           const FinetuneConfig& cfg, std::vector<double>* curve) {
    if (train.empty()) throw InvalidInput("finetune_next_location: empty training set");
    if (cfg.batch_size == 0) throw ConfigError("batch_size", "batch size must be positive");
    const auto samples = next_location_samples(train);
    NextLocationHead<T> head(cfg.head, backbone.config().hidden, backbone.config().vocab_sizes, cfg.seed);
    check_compatible(backbone, head.width(), &head.vocab_sizes());
    optim::AdamW<T> opt(trainable(backbone, head.parameters(), cfg.freeze_backbone), cfg.adam);
    ts::Rng rng(cfg.seed ^ 0x5bd1e995ULL);
    if (curve) curve->clear();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = model::epoch_order(samples.size(), rng);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<const Trajectory*> rows;
            std::vector<const NextLocationSample*> picked;
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
                rows.push_back(&samples[order[i]].prefix);
                picked.push_back(&samples[order[i]]);
            }
            const Batch batch = model::make_batch(std::span<const Trajectory* const>(rows));
            auto enc = encode_for_finetune(backbone, batch, cfg.freeze_backbone, rng);
            const auto logits = head.chain_logits(enc, batch);
            Tensor<T> loss;
            std::vector<std::int32_t> tgt(rows.size());
            for (std::size_t h = 0; h < head.levels(); ++h) {
                for (std::size_t b = 0; b < rows.size(); ++b) tgt[b] = picked[b]->target[h];
                auto ce = ts::cross_entropy(logits[h], std::span<const std::int32_t>(tgt), -1);
                loss = loss.defined() ? ts::add(loss, ce) : ce;
            }
            check_loss(loss, epoch);
            sum += static_cast<double>(loss.item());
            ts::backward(loss);
            opt.step();
            ++batches;
        }
        if (curve) curve->push_back(sum / static_cast<double>(batches));
    }
    return head;
}

namespace {

// Scores continuations of one encoded prefix row.
template <typename T>
class HeadScorer final : public ChainScorer {
public:
    HeadScorer(const NextLocationHead<T>& head, Tensor<T> encoded, Batch batch)
        : head_(head), enc_(std::move(encoded)), batch_(std::move(batch)) {}

    std::size_t levels() const override { return head_.levels(); }
    std::size_t level_size(std::size_t level) const override { return head_.vocab_sizes().at(level); }

    std::vector<double> probs(std::size_t level, std::span<const std::int32_t> prefix) const override {
        ts::NoGradGuard guard;
        Tensor<T> cond;
        if (level > 0) {
            cond = Tensor<T>::zeros({1, head_.vocab_sizes()[level - 1]});
            cond.values_mut()[static_cast<std::size_t>(prefix[level - 1])] = T(1);
        }
        return softmax_row(head_.level_logits(enc_, batch_, level, cond).values());
    }

private:
    const NextLocationHead<T>& head_;
    Tensor<T> enc_;
    Batch batch_;
};

// Row b of a batch and its encoding, cut to the row's own length.
template <typename T>
std::pair<Tensor<T>, Batch> row_of(const Tensor<T>& encoded, const Batch& batch, std::size_t b) {
    const std::size_t len = batch.lengths[b], w = encoded.dim(2);
    Batch one;
    one.size = 1;
    one.steps = len;
    one.levels = batch.levels;
    one.lengths = {len};
    one.ids.assign(batch.ids.begin() + static_cast<std::ptrdiff_t>(b * batch.steps * batch.levels),
                   batch.ids.begin() + static_cast<std::ptrdiff_t>((b * batch.steps + len) * batch.levels));
    one.log_time.assign(batch.log_time.begin() + static_cast<std::ptrdiff_t>(b * batch.steps),
                        batch.log_time.begin() + static_cast<std::ptrdiff_t>(b * batch.steps + len));
    one.valid.assign(len, 1);
    const auto src = encoded.values().subspan(b * batch.steps * w, len * w);
    return {Tensor<T>::from({1, len, w}, std::vector<T>(src.begin(), src.end())), std::move(one)};
}

}  // namespace

template <typename T>
std::vector<Candidate> predict_topk(const LocationModel<T>& backbone, const NextLocationHead<T>& head,
                                    const Trajectory& prefix, std::size_t k) {
    check_compatible(backbone, head.width(), &head.vocab_sizes());
    ts::NoGradGuard guard;
    const Batch batch = model::make_batch(std::span<const Trajectory>(&prefix, 1));
    HeadScorer<T> scorer(head, backbone.encode(batch, false, nullptr), batch);
    return beam_topk(scorer, k);
}

template <typename T>
EvalReport evaluate_next_location(const LocationModel<T>& backbone, const NextLocationHead<T>& head,
                                  std::span<const Trajectory> data, std::size_t batch_size) {
    check_compatible(backbone, head.width(), &head.vocab_sizes());
    if (batch_size == 0) throw ConfigError("batch_size", "batch size must be positive");
    const auto samples = next_location_samples(data);
    if (samples.empty()) throw InvalidInput("evaluate_next_location: no samples");
    ts::NoGradGuard guard;
    std::map<std::vector<std::int32_t>, std::int64_t> tuple_ids;
    auto id_of = [&](const std::vector<std::int32_t>& t) {
        auto [it, inserted] = tuple_ids.emplace(t, static_cast<std::int64_t>(tuple_ids.size()));
        return it->second;
    };
    std::vector<std::vector<std::int64_t>> ranked;
    std::vector<std::int64_t> targets;
    std::vector<std::size_t> level_hits(head.levels(), 0);
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        std::vector<const Trajectory*> rows;
        for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) rows.push_back(&samples[i].prefix);
        const Batch batch = model::make_batch(std::span<const Trajectory* const>(rows));
        const auto enc = backbone.encode(batch, false, nullptr);
        for (std::size_t b = 0; b < rows.size(); ++b) {
            const auto& target = samples[start + b].target;
            auto [row_enc, row_batch] = row_of(enc, batch, b);
            HeadScorer<T> scorer(head, std::move(row_enc), std::move(row_batch));
            const auto top = beam_topk(scorer, 5);
            std::vector<std::int64_t> list;
            for (const auto& c : top) list.push_back(id_of(c.ids));
            ranked.push_back(std::move(list));
            targets.push_back(id_of(target));
            for (std::size_t h = 0; h < head.levels(); ++h)
                if (top[0].ids[h] == target[h]) ++level_hits[h];
        }
    }
    auto report = compute_metrics(std::span<const std::vector<std::int64_t>>(ranked), std::span<const std::int64_t>(targets));
    for (auto hits : level_hits) report.level_acc1.push_back(static_cast<double>(hits) / static_cast<double>(samples.size()));
    return report;
}

template <typename T>
EvalReport evaluate_pretrained_next_location(const LocationModel<T>& backbone, std::span<const Trajectory> data,
                                             std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch_size", "batch size must be positive");
    const auto samples = next_location_samples(data);
    if (samples.empty()) throw InvalidInput("evaluate_pretrained_next_location: no samples");
    ts::NoGradGuard guard;
    const std::size_t w = backbone.config().hidden, levels = backbone.config().levels();
    std::map<std::vector<std::int32_t>, std::int64_t> tuple_ids;
    auto id_of = [&](const std::vector<std::int32_t>& t) {
        return tuple_ids.emplace(t, static_cast<std::int64_t>(tuple_ids.size())).first->second;
    };
    std::vector<std::vector<std::int64_t>> ranked;
    std::vector<std::int64_t> targets;
    std::vector<std::size_t> level_hits(levels, 0);
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        std::vector<const Trajectory*> rows;
        for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) rows.push_back(&samples[i].prefix);
        const Batch batch = model::make_batch(std::span<const Trajectory* const>(rows));
        const auto enc = backbone.encode(batch, false, nullptr);
        for (std::size_t b = 0; b < rows.size(); ++b) {
            const auto& target = samples[start + b].target;
            const auto row = enc.values().subspan((b * batch.steps + batch.lengths[b] - 1) * w, w);
            HalmScorer<T> scorer(backbone, Tensor<T>::from({1, w}, std::vector<T>(row.begin(), row.end())));
            const auto top = beam_topk(scorer, 5);
            std::vector<std::int64_t> list;
            for (const auto& c : top) list.push_back(id_of(c.ids));
            ranked.push_back(std::move(list));
            targets.push_back(id_of(target));
            for (std::size_t h = 0; h < levels; ++h)
                if (top[0].ids[h] == target[h]) ++level_hits[h];
        }
    }
    auto report = compute_metrics(std::span<const std::vector<std::int64_t>>(ranked), std::span<const std::int64_t>(targets));
    for (auto hits : level_hits) report.level_acc1.push_back(static_cast<double>(hits) / static_cast<double>(samples.size()));
    return report;
}

// ---------------------------------------------------------------------------
// classifier

template <typename T>
ClassifierHead<T>::ClassifierHead(std::size_t width, std::vector<std::string> labels, std::uint64_t seed)
    : width_(width), labels_(std::move(labels)) {
    if (width_ == 0 || labels_.empty()) throw ConfigError("classes", "classifier needs a positive width and at least one class");
    ts::Rng rng(seed);
    auto w = Tensor<T>::zeros({width_, labels_.size()}, true);
    init_normal(w, rng);
    params_.push_back({"classifier.w", w});
    params_.push_back({"classifier.b", Tensor<T>::zeros({labels_.size()}, true)});
}

template <typename T>
std::int64_t ClassifierHead<T>::label_index(const std::string& label) const {
    auto it = std::find(labels_.begin(), labels_.end(), label);
    return it == labels_.end() ? kUnknownClass : static_cast<std::int64_t>(it - labels_.begin());
}

template <typename T>
std::vector<Tensor<T>> ClassifierHead<T>::parameters() const {
    return unnamed(params_);
}

template <typename T>
void ClassifierHead<T>::load_values(std::span<const NamedTensor<T>> source) {
    copy_named(params_, source, "classifier load");
}

template <typename T>
Tensor<T> ClassifierHead<T>::logits(const Tensor<T>& encoded, const Batch& batch) const {
    if (encoded.rank() != 3 || encoded.dim(2) != width_) {
        throw ShapeError("classifier: encoded " + ts::to_string(encoded.shape()) + " does not match width " +
                         std::to_string(width_));
    }
    return ts::add(ts::matmul(pooled(encoded, batch), params_[0].tensor), params_[1].tensor);
}

template <typename T>
nlohmann::json ClassifierHead<T>::describe() const {
    return {{"width", width_}, {"labels", labels_}};
}

template <typename T>
ClassifierHead<T> classifier_from_description(const nlohmann::json& j) {
    try {
        return ClassifierHead<T>(j.at("width").get<std::size_t>(), j.at("labels").get<std::vector<std::string>>(), 0);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("classifier description: ") + e.what());
    }
}

template <typename T>
ClassifierHead<T> finetune_classifier(LocationModel<T>& backbone, std::span<const Trajectory> train,
                                      const FinetuneConfig& cfg, std::vector<double>* curve) {
    if (train.empty()) throw InvalidInput("finetune_classifier: empty training set");
    if (cfg.batch_size == 0) throw ConfigError("batch_size", "batch size must be positive");
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < train.size(); ++i) {
        if (!train[i].label) throw InvalidInput("finetune_classifier: trajectory " + std::to_string(i) + " has no label");
        if (std::find(labels.begin(), labels.end(), *train[i].label) == labels.end()) labels.push_back(*train[i].label);
    }
    ClassifierHead<T> head(backbone.config().hidden, labels, cfg.seed);
    check_compatible<T>(backbone, head.width(), nullptr);
    optim::AdamW<T> opt(trainable(backbone, head.parameters(), cfg.freeze_backbone), cfg.adam);
    ts::Rng rng(cfg.seed ^ 0x27d4eb2fULL);
    if (curve) curve->clear();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = model::epoch_order(train.size(), rng);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<const Trajectory*> rows;
            std::vector<std::int32_t> tgt;
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
                rows.push_back(&train[order[i]]);
                tgt.push_back(static_cast<std::int32_t>(head.label_index(*train[order[i]].label)));
            }
            const Batch batch = model::make_batch(std::span<const Trajectory* const>(rows));
            auto enc = encode_for_finetune(backbone, batch, cfg.freeze_backbone, rng);
            auto loss = ts::cross_entropy(head.logits(enc, batch), std::span<const std::int32_t>(tgt), -1);
            check_loss(loss, epoch);
            sum += static_cast<double>(loss.item());
            ts::backward(loss);
            opt.step();
            ++batches;
        }
        if (curve) curve->push_back(sum / static_cast<double>(batches));
    }
    return head;
}

template <typename T>
EvalReport evaluate_classifier(const LocationModel<T>& backbone, const ClassifierHead<T>& head,
                               std::span<const Trajectory> data, std::size_t batch_size) {
    check_compatible<T>(backbone, head.width(), nullptr);
    if (data.empty()) throw InvalidInput("evaluate_classifier: no samples");
    if (batch_size == 0) throw ConfigError("batch_size", "batch size must be positive");
    ts::NoGradGuard guard;
    std::vector<std::vector<std::int64_t>> ranked;
    std::vector<std::int64_t> targets;
    const std::size_t classes = head.labels().size();
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const auto chunk = data.subspan(start, std::min(batch_size, data.size() - start));
        const Batch batch = model::make_batch(chunk);
        const auto logits = head.logits(backbone.encode(batch, false, nullptr), batch);
        const auto vals = logits.values();
        for (std::size_t b = 0; b < chunk.size(); ++b) {
            if (!chunk[b].label) throw InvalidInput("evaluate_classifier: unlabeled trajectory at " + std::to_string(start + b));
            std::vector<std::int64_t> order(classes);
            for (std::size_t c = 0; c < classes; ++c) order[c] = static_cast<std::int64_t>(c);
            std::stable_sort(order.begin(), order.end(), [&](std::int64_t x, std::int64_t y) {
                return vals[b * classes + static_cast<std::size_t>(x)] > vals[b * classes + static_cast<std::size_t>(y)];
            });
            ranked.push_back(std::move(order));
            targets.push_back(head.label_index(*chunk[b].label));
        }
    }
    return compute_metrics(std::span<const std::vector<std::int64_t>>(ranked), std::span<const std::int64_t>(targets));
}

#define GEOTOK_DS_INSTANTIATE(T)                                                                                     \
    template std::vector<double> softmax_row<T>(std::span<const T>);                                                \
    template class HalmScorer<T>;                                                                                   \
    template EvalReport evaluate_pretrained_next_location<T>(const LocationModel<T>&, std::span<const Trajectory>,  \
                                                             std::size_t);                                          \
    template std::vector<T> pool_weights<T>(const Batch&);                                                          \
    template Tensor<T> pooled<T>(const Tensor<T>&, const Batch&);                                                   \
    template class NextLocationHead<T>;                                                                             \
    template NextLocationHead<T> head_from_description<T>(const nlohmann::json&);                                   \
    template NextLocationHead<T> finetune_next_location<T>(LocationModel<T>&, std::span<const Trajectory>,          \
                                                           const FinetuneConfig&, std::vector<double>*);            \
    template std::vector<Candidate> predict_topk<T>(const LocationModel<T>&, const NextLocationHead<T>&,            \
                                                    const Trajectory&, std::size_t);                                \
    template EvalReport evaluate_next_location<T>(const LocationModel<T>&, const NextLocationHead<T>&,              \
                                                  std::span<const Trajectory>, std::size_t);                        \
    template class ClassifierHead<T>;                                                                               \
    template ClassifierHead<T> classifier_from_description<T>(const nlohmann::json&);                               \
    template ClassifierHead<T> finetune_classifier<T>(LocationModel<T>&, std::span<const Trajectory>,               \
                                                      const FinetuneConfig&, std::vector<double>*);                 \
    template EvalReport evaluate_classifier<T>(const LocationModel<T>&, const ClassifierHead<T>&,                   \
                                               std::span<const Trajectory>, std::size_t);

GEOTOK_DS_INSTANTIATE(float)
GEOTOK_DS_INSTANTIATE(double)

}  // namespace geotok::downstream
