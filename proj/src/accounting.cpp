#include "geotok/accounting.hpp"

namespace geotok::accounting {

ParamCounts count_params(const model::ModelConfig& cfg) {
    cfg.validate();
    const std::uint64_t w = cfg.hidden, m = cfg.ffn_mult, n = cfg.layers, hh = cfg.head_inner();
    ParamCounts p;
    p.embeddings = embedding_params(cfg.hidden, cfg.vocab_sizes);
    p.temporal = 2 * w;
    p.attention = n * (4 * w * w + 4 * w);
    p.ffn = n * (2 * m * w * w + m * w + w);
    p.norms = n * 4 * w + (n > 0 ? 2 * w : 0);
    for (std::size_t h = 0; h < cfg.levels(); ++h) {
        const std::uint64_t in = cfg.head_input_width(h), v = cfg.vocab_sizes[h];
        p.heads += in * hh + hh + hh * v + v;
    }
    return p;
}

std::uint64_t embedding_params(std::size_t width, std::size_t vocab) {
    return static_cast<std::uint64_t>(width) * vocab;
}

std::uint64_t embedding_params(std::size_t width, std::span<const std::size_t> vocab_sizes) {
    std::uint64_t s = 0;
    for (auto v : vocab_sizes) s += v;
    return static_cast<std::uint64_t>(width) * s;
}

MacCounts estimate_macs(const model::ModelConfig& cfg, std::size_t seq_len) {
    cfg.validate();
    const std::uint64_t s = seq_len, w = cfg.hidden, m = cfg.ffn_mult, n = cfg.layers, hh = cfg.head_inner();
    MacCounts c;
    c.temporal = s * w;
    c.projections = n * 4 * s * w * w;
    // heads * head_dim = W, and query i sees i + 1 keys
    const std::uint64_t pairs = s * (s + 1) / 2;
    c.scores = n * pairs * w;
    c.context = n * pairs * w;
    c.ffn = n * 2 * m * s * w * w;
    for (std::size_t h = 0; h < cfg.levels(); ++h)
        c.heads += s * (cfg.head_input_width(h) * hh + hh * cfg.vocab_sizes[h]);
    return c;
}

nlohmann::json to_json(const ParamCounts& p) {
    return {{"embeddings", p.embeddings}, {"temporal", p.temporal}, {"attention", p.attention}, {"ffn", p.ffn},
            {"norms", p.norms},           {"heads", p.heads},       {"backbone", p.backbone()}, {"total", p.total()}};
}

nlohmann::json to_json(const MacCounts& m) {
    return {{"temporal", m.temporal}, {"projections", m.projections}, {"scores", m.scores}, {"context", m.context},
            {"ffn", m.ffn},           {"heads", m.heads},             {"macs", m.total()},  {"flops", m.flops()}};
}

}  // namespace geotok::accounting
