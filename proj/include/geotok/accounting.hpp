#pragma once

// Closed-form parameter and multiply-accumulate accounting for LocationModel.
//
// MACs cover matmul-class work only: the temporal affine map, the four
// attention projections, causal score and context products, the
// feed-forward pair and the prediction heads. Embedding lookups and their
// sums, norms, activations and softmax are free. FLOPs = 2 * MACs.

#include <cstdint>
#include <span>

#include "json.hpp"
#include "geotok/model.hpp"

namespace geotok::accounting {

struct ParamCounts {
    std::uint64_t embeddings = 0;  // W * sum_h |L^h|
    std::uint64_t temporal = 0;    // W_d and b_d
    std::uint64_t attention = 0;   // per layer 4W^2 + 4W
    std::uint64_t ffn = 0;         // per layer 2mW^2 + mW + W
    std::uint64_t norms = 0;       // per layer 4W, plus 2W final when N > 0
    std::uint64_t heads = 0;
    std::uint64_t total() const { return embeddings + temporal + attention + ffn + norms + heads; }
    // Everything except the prediction heads.
    std::uint64_t backbone() const { return total() - heads; }
};

ParamCounts count_params(const model::ModelConfig& cfg);

// W * vocab for a single embedding table.
std::uint64_t embedding_params(std::size_t width, std::size_t vocab);
// W * sum of per-level sizes.
std::uint64_t embedding_params(std::size_t width, std::span<const std::size_t> vocab_sizes);

struct MacCounts {
    std::uint64_t temporal = 0;
    std::uint64_t projections = 0;  // q, k, v, o
    std::uint64_t scores = 0;       // q k^T over allowed keys
    std::uint64_t context = 0;      // probs v over allowed keys
    std::uint64_t ffn = 0;
    std::uint64_t heads = 0;
    std::uint64_t total() const { return temporal + projections + scores + context + ffn + heads; }
    std::uint64_t flops() const { return 2 * total(); }
};

// One forward pass over one sequence of `seq_len` positions (SOS included),
// causal mask, no padding.
MacCounts estimate_macs(const model::ModelConfig& cfg, std::size_t seq_len);

nlohmann::json to_json(const ParamCounts& p);
nlohmann::json to_json(const MacCounts& m);

}  // namespace geotok::accounting
