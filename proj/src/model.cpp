#include "geotok/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "geotok/error.hpp"

namespace geotok::model {

namespace ts = geotok::tensor;

std::size_t ModelConfig::head_input_width(std::size_t level) const {
    if (level >= levels()) throw InvalidInput("head_input_width: level out of range");
    return (chained_heads && level > 0) ? hidden + vocab_sizes[level - 1] : hidden;
}

void ModelConfig::validate() const {
    if (vocab_sizes.empty()) throw ConfigError("h_levels", "model needs at least one hierarchy level");
    for (auto v : vocab_sizes)
        if (v < 1) throw ConfigError("vocab_sizes", "every vocabulary needs at least one entry");
    if (hidden == 0) throw ConfigError("hidden", "hidden width must be positive");
    if (heads == 0 || hidden % heads != 0) {
        throw ConfigError("heads", "hidden width " + std::to_string(hidden) + " is not divisible by " +
                                       std::to_string(heads) + " heads");
    }
    if (ffn_mult == 0) throw ConfigError("ffn_mult", "feed-forward multiplier must be positive");
    if (!(attn_dropout >= 0.0 && attn_dropout < 1.0)) throw ConfigError("attn_dropout", "must lie in [0, 1)");
    if (max_seq_len < 2) throw ConfigError("max_seq_len", "must be at least 2");
}

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"vocab_sizes", c.vocab_sizes}, {"hidden", c.hidden},         {"layers", c.layers},
            {"heads", c.heads},             {"ffn_mult", c.ffn_mult},     {"head_hidden", c.head_hidden},
            {"attn_dropout", c.attn_dropout}, {"max_seq_len", c.max_seq_len}, {"chained_heads", c.chained_heads}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig c;
        c.vocab_sizes = j.at("vocab_sizes").get<std::vector<std::size_t>>();
        c.hidden = j.at("hidden").get<std::size_t>();
        c.layers = j.at("layers").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
        c.head_hidden = j.at("head_hidden").get<std::size_t>();
        c.attn_dropout = j.at("attn_dropout").get<double>();
        c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        c.chained_heads = j.at("chained_heads").get<bool>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
}

Batch make_batch(std::span<const Trajectory* const> seqs) {
    if (seqs.empty()) throw InvalidInput("make_batch: no sequences");
    Batch b;
    b.size = seqs.size();
    b.levels = seqs[0]->ids.empty() ? 0 : seqs[0]->ids[0].size();
    for (const auto* s : seqs) {
        if (s->ids.empty() || s->ids.size() != s->ts.size()) throw InvalidInput("make_batch: malformed sequence");
        b.steps = std::max(b.steps, s->ids.size());
    }
    b.ids.assign(b.size * b.steps * b.levels, kPadId);
    b.log_time.assign(b.size * b.steps, 0.0);
    b.valid.assign(b.size * b.steps, 0);
    b.lengths.resize(b.size);
    for (std::size_t i = 0; i < b.size; ++i) {
        const auto& s = *seqs[i];
        b.lengths[i] = s.ids.size();
        double last_log = 0.0;
        for (std::size_t t = 0; t < b.steps; ++t) {
            if (t < s.ids.size()) {
                if (s.ids[t].size() != b.levels) throw InvalidInput("make_batch: ragged id tuple");
                if (s.ts[t] <= 0) throw InvalidInput("make_batch: non-positive timestamp " + std::to_string(s.ts[t]));
                std::copy(s.ids[t].begin(), s.ids[t].end(), b.ids.begin() + static_cast<std::ptrdiff_t>((i * b.steps + t) * b.levels));
                last_log = std::log(static_cast<double>(s.ts[t]));
                b.valid[i * b.steps + t] = 1;
            }
            b.log_time[i * b.steps + t] = last_log;
        }
    }
    return b;
}

Batch make_batch(std::span<const Trajectory> seqs) {
    std::vector<const Trajectory*> ptrs;
    ptrs.reserve(seqs.size());
    for (const auto& s : seqs) ptrs.push_back(&s);
    return make_batch(std::span<const Trajectory* const>(ptrs));
}

std::vector<double> positional_encoding(std::size_t steps, std::size_t width) {
    std::vector<double> pe(steps * width);
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t d = 0; d < width; ++d) {
            const double pair = static_cast<double>(d - d % 2);
            const double angle = static_cast<double>(t) / std::pow(10000.0, pair / static_cast<double>(width));
            pe[t * width + d] = (d % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

template <typename T>
std::size_t LocationModel<T>::add_param(std::string name, ts::Shape shape, ts::Rng& rng, bool normal) {
    auto t = Tensor<T>::zeros(std::move(shape), true);
    if (normal) {
        for (auto& v : t.values_mut()) v = T(0.02 * ts::standard_normal(rng));
    }
    params_.push_back({std::move(name), std::move(t)});
    return params_.size() - 1;
}

template <typename T>
LocationModel<T>::LocationModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    ts::Rng rng(seed);
    const std::size_t w = cfg_.hidden, inner = cfg_.ffn_mult * w;
    for (std::size_t h = 0; h < cfg_.levels(); ++h) {
        embeddings_.push_back(add_param("embed.level" + std::to_string(h + 1), {cfg_.vocab_sizes[h], w}, rng, true));
    }
    time_w_ = add_param("time.weight", {1, w}, rng, true);
    time_b_ = add_param("time.bias", {w}, rng, false);
    auto ones = [&](std::size_t idx) {
        for (auto& v : params_[idx].tensor.values_mut()) v = T(1);
        return idx;
    };
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const std::string pre = "decoder." + std::to_string(l) + ".";
        Block b{};
        b.ln1_g = ones(add_param(pre + "ln1.gamma", {w}, rng, false));
        b.ln1_b = add_param(pre + "ln1.beta", {w}, rng, false);
        b.wq = add_param(pre + "attn.wq", {w, w}, rng, true);
        b.bq = add_param(pre + "attn.bq", {w}, rng, false);
        b.wk = add_param(pre + "attn.wk", {w, w}, rng, true);
        b.bk = add_param(pre + "attn.bk", {w}, rng, false);
        b.wv = add_param(pre + "attn.wv", {w, w}, rng, true);
        b.bv = add_param(pre + "attn.bv", {w}, rng, false);
        b.wo = add_param(pre + "attn.wo", {w, w}, rng, true);
        b.bo = add_param(pre + "attn.bo", {w}, rng, false);
        b.ln2_g = ones(add_param(pre + "ln2.gamma", {w}, rng, false));
        b.ln2_b = add_param(pre + "ln2.beta", {w}, rng, false);
        b.w1 = add_param(pre + "ffn.w1", {w, inner}, rng, true);
        b.b1 = add_param(pre + "ffn.b1", {inner}, rng, false);
        b.w2 = add_param(pre + "ffn.w2", {inner, w}, rng, true);
        b.b2 = add_param(pre + "ffn.b2", {w}, rng, false);
        blocks_.push_back(b);
    }
    if (cfg_.layers > 0) {
        final_g_ = ones(add_param("decoder.final_ln.gamma", {w}, rng, false));
        final_b_ = add_param("decoder.final_ln.beta", {w}, rng, false);
    }
    backbone_end_ = params_.size();
    const std::size_t hh = cfg_.head_inner();
    for (std::size_t h = 0; h < cfg_.levels(); ++h) {
        const std::string pre = "halm.level" + std::to_string(h + 1) + ".";
        Head hd{};
        hd.w1 = add_param(pre + "w1", {cfg_.head_input_width(h), hh}, rng, true);
        hd.b1 = add_param(pre + "b1", {hh}, rng, false);
        hd.w2 = add_param(pre + "w2", {hh, cfg_.vocab_sizes[h]}, rng, true);
        hd.b2 = add_param(pre + "b2", {cfg_.vocab_sizes[h]}, rng, false);
        heads_.push_back(hd);
    }
}

template <typename T>
std::vector<NamedTensor<T>> LocationModel<T>::named_parameters() const {
    return params_;
}

template <typename T>
std::vector<Tensor<T>> LocationModel<T>::parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
}

template <typename T>
std::vector<Tensor<T>> LocationModel<T>::backbone_parameters() const {
    std::vector<Tensor<T>> out;
    for (std::size_t i = 0; i < backbone_end_; ++i) out.push_back(params_[i].tensor);
    return out;
}

template <typename T>
std::vector<Tensor<T>> LocationModel<T>::head_parameters() const {
    std::vector<Tensor<T>> out;
    for (std::size_t i = backbone_end_; i < params_.size(); ++i) out.push_back(params_[i].tensor);
    return out;
}

template <typename T>
std::size_t LocationModel<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

template <typename T>
void LocationModel<T>::load_values(std::span<const NamedTensor<T>> source) {
    for (auto& dst : params_) {
        auto it = std::find_if(source.begin(), source.end(), [&](const NamedTensor<T>& s) { return s.name == dst.name; });
        if (it == source.end()) throw ShapeError("load: tensor '" + dst.name + "' missing from source");
        if (it->tensor.shape() != dst.tensor.shape()) {
            throw ShapeError("load: tensor '" + dst.name + "' has shape " + ts::to_string(it->tensor.shape()) +
                             ", model expects " + ts::to_string(dst.tensor.shape()));
        }
    }
    for (auto& dst : params_) {
        auto it = std::find_if(source.begin(), source.end(), [&](const NamedTensor<T>& s) { return s.name == dst.name; });
        std::copy(it->tensor.values().begin(), it->tensor.values().end(), dst.tensor.values_mut().begin());
    }
}

template <typename T>
Tensor<T> LocationModel<T>::temporal_encoding(const Batch& batch) const {
    std::vector<T> lt(batch.log_time.size());
    for (std::size_t i = 0; i < lt.size(); ++i) {
        if (!std::isfinite(batch.log_time[i])) throw InvalidInput("temporal_encoding: non-finite log time");
        lt[i] = T(batch.log_time[i]);
    }
    auto x = Tensor<T>::from({batch.size, batch.steps, 1}, std::move(lt));
    return ts::relu(ts::add(ts::matmul(x, p(time_w_)), p(time_b_)));
}

template <typename T>
Tensor<T> LocationModel<T>::embed(const Batch& batch) const {
    if (batch.levels != cfg_.levels()) {
        throw ShapeError("embed: batch has " + std::to_string(batch.levels) + " levels, model has " +
                         std::to_string(cfg_.levels()));
    }
    if (batch.steps > cfg_.max_seq_len) {
        throw ShapeError("embed: sequence length " + std::to_string(batch.steps) + " exceeds max_seq_len " +
                         std::to_string(cfg_.max_seq_len));
    }
    const std::size_t w = cfg_.hidden;
    std::vector<std::int32_t> level_ids(batch.size * batch.steps);
    Tensor<T> sum;
    for (std::size_t h = 0; h < cfg_.levels(); ++h) {
        for (std::size_t i = 0; i < level_ids.size(); ++i) level_ids[i] = batch.ids[i * batch.levels + h];
        auto e = ts::embedding(p(embeddings_[h]), std::span<const std::int32_t>(level_ids), {batch.size, batch.steps});
        sum = sum.defined() ? ts::add(sum, e) : e;
    }
    const auto pe = positional_encoding(batch.steps, w);
    auto pe_t = Tensor<T>::from({batch.steps, w}, std::vector<T>(pe.begin(), pe.end()));
    return ts::add(ts::add(sum, pe_t), temporal_encoding(batch));
}

template <typename T>
Tensor<T> LocationModel<T>::decode(const Tensor<T>& x, const Batch& batch, bool train, ts::Rng* rng) const {
    if (x.rank() != 3 || x.dim(0) != batch.size || x.dim(1) != batch.steps || x.dim(2) != cfg_.hidden) {
        throw ShapeError("decode: input " + ts::to_string(x.shape()) + " does not match batch [" +
                         std::to_string(batch.size) + "," + std::to_string(batch.steps) + "," +
                         std::to_string(cfg_.hidden) + "]");
    }
    ts::AttentionOptions opts;
    opts.heads = cfg_.heads;
    opts.causal = true;
    opts.key_valid = batch.valid;
    opts.dropout = cfg_.attn_dropout;
    opts.train = train;
    Tensor<T> h = x;
    for (const auto& b : blocks_) {
        auto n1 = ts::layer_norm(h, p(b.ln1_g), p(b.ln1_b));
        auto q = ts::add(ts::matmul(n1, p(b.wq)), p(b.bq));
        auto k = ts::add(ts::matmul(n1, p(b.wk)), p(b.bk));
        auto v = ts::add(ts::matmul(n1, p(b.wv)), p(b.bv));
        auto a = ts::attention(q, k, v, opts, rng);
        h = ts::add(h, ts::add(ts::matmul(a, p(b.wo)), p(b.bo)));
        auto n2 = ts::layer_norm(h, p(b.ln2_g), p(b.ln2_b));
        auto f = ts::relu(ts::add(ts::matmul(n2, p(b.w1)), p(b.b1)));
        h = ts::add(h, ts::add(ts::matmul(f, p(b.w2)), p(b.b2)));
    }
    if (!blocks_.empty()) h = ts::layer_norm(h, p(final_g_), p(final_b_));
    return h;
}

template <typename T>
Tensor<T> LocationModel<T>::head_forward(std::size_t level, const Tensor<T>& input) const {
    const auto& hd = heads_.at(level);
    auto z = ts::relu(ts::add(ts::matmul(input, p(hd.w1)), p(hd.b1)));
    return ts::add(ts::matmul(z, p(hd.w2)), p(hd.b2));
}

template <typename T>
std::vector<Tensor<T>> LocationModel<T>::halm_logits(const Tensor<T>& encoded) const {
    std::vector<Tensor<T>> out;
    out.reserve(cfg_.levels());
    for (std::size_t h = 0; h < cfg_.levels(); ++h) {
        if (h == 0 || !cfg_.chained_heads) {
            out.push_back(head_forward(h, encoded));
        } else {
            auto onehot = ts::argmax_one_hot(out.back());
            out.push_back(head_forward(h, ts::concat_last(encoded, onehot)));
        }
    }
    return out;
}

template <typename T>
Tensor<T> LocationModel<T>::halm_loss(const std::vector<Tensor<T>>& logits, const Batch& batch,
                                      std::vector<double>* per_level, std::optional<std::size_t> levels_used) const {
    const std::size_t used = levels_used.value_or(cfg_.levels());
    if (logits.size() != cfg_.levels() || used == 0 || used > cfg_.levels()) {
        throw ShapeError("halm_loss: expected " + std::to_string(cfg_.levels()) + " logit tensors");
    }
    std::vector<std::int32_t> targets(batch.size * batch.steps);
    bool any = false;
    Tensor<T> total;
    if (per_level) per_level->assign(used, 0.0);
    for (std::size_t h = 0; h < used; ++h) {
        for (std::size_t b = 0; b < batch.size; ++b) {
            for (std::size_t t = 0; t < batch.steps; ++t) {
                const bool has_next = t + 1 < batch.lengths[b];
                targets[b * batch.steps + t] = has_next ? batch.id(b, t + 1, h) : -1;
                any = any || has_next;
            }
        }
        if (!any) throw InvalidInput("halm_loss: batch has no next-location targets");
        auto ce = ts::cross_entropy(logits[h], std::span<const std::int32_t>(targets), -1);
        if (per_level) (*per_level)[h] = static_cast<double>(ce.item());
        total = total.defined() ? ts::add(total, ce) : ce;
    }
    return total;
}

std::vector<std::size_t> epoch_order(std::size_t n, ts::Rng& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    return order;
}

template <typename T>
PretrainResult pretrain(LocationModel<T>& model, std::span<const Trajectory> data, const TrainConfig& cfg) {
    if (data.empty()) throw InvalidInput("pretrain: empty dataset");
    if (cfg.batch_size == 0) throw ConfigError("batch_size", "batch size must be positive");
    optim::AdamW<T> opt(model.parameters(), cfg.adam);
    ts::Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    PretrainResult result;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = epoch_order(data.size(), rng);
        double loss_sum = 0.0;
        std::vector<double> level_sum(model.config().levels(), 0.0);
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<const Trajectory*> rows;
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
                rows.push_back(&data[order[i]]);
            const Batch batch = make_batch(std::span<const Trajectory* const>(rows));
            std::vector<double> levels;
            auto loss = model.halm_loss(model.halm_logits(model.encode(batch, true, &rng)), batch, &levels);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) {
                std::ostringstream os;
                os << "pretrain: non-finite loss at epoch " << epoch << ", step " << opt.steps_taken() + 1
                   << " (per-level:";
                for (auto v : levels) os << ' ' << v;
                os << ')';
                throw NonFiniteError(os.str());
            }
            ts::backward(loss);
            opt.step();
            loss_sum += lv;
            for (std::size_t h = 0; h < levels.size(); ++h) level_sum[h] += levels[h];
            ++batches;
        }
        EpochStats st;
        st.epoch = epoch;
        st.loss = loss_sum / static_cast<double>(batches);
        for (auto& v : level_sum) v /= static_cast<double>(batches);
        st.level_loss = std::move(level_sum);
        result.curve.push_back(std::move(st));
    }
    result.steps = opt.steps_taken();
    return result;
}

template <typename T>
double evaluate_halm_loss(const LocationModel<T>& model, std::span<const Trajectory> data, std::size_t batch_size,
                          std::vector<double>* per_level) {
    if (data.empty()) throw InvalidInput("evaluate_halm_loss: empty dataset");
    ts::NoGradGuard guard;
    double weighted = 0.0;
    std::vector<double> level_weighted(model.config().levels(), 0.0);
    std::size_t count = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const auto chunk = data.subspan(start, std::min(batch_size, data.size() - start));
        const Batch batch = make_batch(chunk);
        std::vector<double> levels;
        const double lv = static_cast<double>(
            model.halm_loss(model.halm_logits(model.encode(batch, false, nullptr)), batch, &levels).item());
        weighted += lv * static_cast<double>(chunk.size());
        for (std::size_t h = 0; h < levels.size(); ++h) level_weighted[h] += levels[h] * static_cast<double>(chunk.size());
        count += chunk.size();
    }
    if (per_level) {
        per_level->clear();
        for (auto v : level_weighted) per_level->push_back(v / static_cast<double>(count));
    }
    return weighted / static_cast<double>(count);
}

template <typename T>
double evaluate_halm_accuracy(const LocationModel<T>& model, std::span<const Trajectory> data, std::size_t batch_size) {
    if (data.empty()) throw InvalidInput("evaluate_halm_accuracy: empty dataset");
    ts::NoGradGuard guard;
    std::size_t hits = 0, total = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const auto chunk = data.subspan(start, std::min(batch_size, data.size() - start));
        const Batch batch = make_batch(chunk);
        const auto logits = model.halm_logits(model.encode(batch, false, nullptr));
        std::vector<std::vector<std::int32_t>> pred;
        for (const auto& l : logits) pred.push_back(ts::argmax_rows(l));
        for (std::size_t b = 0; b < batch.size; ++b) {
            for (std::size_t t = 0; t + 1 < batch.lengths[b]; ++t) {
                bool ok = true;
                for (std::size_t h = 0; h < batch.levels && ok; ++h)
                    ok = pred[h][b * batch.steps + t] == batch.id(b, t + 1, h);
                hits += ok;
                ++total;
            }
        }
    }
    if (total == 0) throw InvalidInput("evaluate_halm_accuracy: no next-location targets");
    return static_cast<double>(hits) / static_cast<double>(total);
}

template class LocationModel<float>;
template class LocationModel<double>;
template PretrainResult pretrain(LocationModel<float>&, std::span<const Trajectory>, const TrainConfig&);
template PretrainResult pretrain(LocationModel<double>&, std::span<const Trajectory>, const TrainConfig&);
template double evaluate_halm_accuracy(const LocationModel<float>&, std::span<const Trajectory>, std::size_t);
template double evaluate_halm_accuracy(const LocationModel<double>&, std::span<const Trajectory>, std::size_t);
template double evaluate_halm_loss(const LocationModel<float>&, std::span<const Trajectory>, std::size_t,
                                   std::vector<double>*);
template double evaluate_halm_loss(const LocationModel<double>&, std::span<const Trajectory>, std::size_t,
                                   std::vector<double>*);

}  // namespace geotok::model
