#pragma once

// Causal location embedding model: geo-tokenizer embedding layer (sum of
// per-level cell embeddings, sinusoidal position and log-time features), a
// stack of pre-norm masked decoder blocks, and one prediction head per
// hierarchy level. With chained heads, the head of level h also reads the
// one-hot of the level h-1 argmax (gradient-stopped).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geotok/optim.hpp"
#include "geotok/tensor.hpp"
#include "geotok/trajectory_pipeline.hpp"

namespace geotok::model {

using tensor::Tensor;

struct ModelConfig {
    // |L^h| per level, SOS and PAD included.
    std::vector<std::size_t> vocab_sizes;
    std::size_t hidden = 256;
    std::size_t layers = 6;
    std::size_t heads = 8;
    std::size_t ffn_mult = 4;
    // Inner width of each two-layer head; 0 means `hidden`.
    std::size_t head_hidden = 0;
    double attn_dropout = 0.1;
    std::size_t max_seq_len = 32;
    bool chained_heads = true;

    std::size_t levels() const { return vocab_sizes.size(); }
    std::size_t head_inner() const { return head_hidden == 0 ? hidden : head_hidden; }
    // W for level 0, W + |L^{h-1}| for chained levels h > 0.
    std::size_t head_input_width(std::size_t level) const;
    void validate() const;
};

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

// Right-padded batch. Position 0 of every row is SOS.
struct Batch {
    std::size_t size = 0;
    std::size_t steps = 0;
    std::size_t levels = 0;
    std::vector<std::int32_t> ids;     // [size, steps, levels]
    std::vector<double> log_time;      // [size, steps]
    std::vector<std::uint8_t> valid;   // [size, steps], 0 on PAD
    std::vector<std::size_t> lengths;  // per row, SOS included

    std::int32_t id(std::size_t b, std::size_t t, std::size_t h) const {
        return ids[(b * steps + t) * levels + h];
    }
};

// Throws InvalidInput for non-positive timestamps or ragged tuples.
Batch make_batch(std::span<const Trajectory* const> seqs);
Batch make_batch(std::span<const Trajectory> seqs);

// Sinusoidal table: sin on even dims, cos on odd dims, base 10000.
std::vector<double> positional_encoding(std::size_t steps, std::size_t width);

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
class LocationModel {
public:
    LocationModel(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return cfg_; }

    std::vector<NamedTensor<T>> named_parameters() const;
    std::vector<Tensor<T>> parameters() const;
    std::vector<Tensor<T>> backbone_parameters() const;
    std::vector<Tensor<T>> head_parameters() const;
    std::size_t parameter_count() const;

    // psi(t) = ReLU(log(r_t) W_d + b_d) -> [B, S, W]
    Tensor<T> temporal_encoding(const Batch& batch) const;
    // sum_h z_h(l^h_t) + p_t + psi(t) -> [B, S, W]
    Tensor<T> embed(const Batch& batch) const;
    Tensor<T> decode(const Tensor<T>& x, const Batch& batch, bool train, tensor::Rng* rng) const;
    Tensor<T> encode(const Batch& batch, bool train, tensor::Rng* rng) const {
        return decode(embed(batch), batch, train, rng);
    }

    // Logits of one head on rows [..., head_input_width(level)].
    Tensor<T> head_forward(std::size_t level, const Tensor<T>& input) const;
    // Per-level logits [B, S, |L^h|] over encoded positions.
    std::vector<Tensor<T>> halm_logits(const Tensor<T>& encoded) const;
    // Sum over levels of the mean next-token cross-entropy; PAD targets and
    // the final position of each row are ignored. per_level receives each
    // level's term when non-null; `levels_used` restricts the sum.
    Tensor<T> halm_loss(const std::vector<Tensor<T>>& logits, const Batch& batch,
                        std::vector<double>* per_level = nullptr,
                        std::optional<std::size_t> levels_used = std::nullopt) const;

    // Copies values from `source` by name; throws ShapeError naming the first
    // missing or mismatched tensor.
    void load_values(std::span<const NamedTensor<T>> source);

private:
    struct Block {
        std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    struct Head {
        std::size_t w1, b1, w2, b2;
    };

    std::size_t add_param(std::string name, tensor::Shape shape, tensor::Rng& rng, bool normal);
    const Tensor<T>& p(std::size_t i) const { return params_[i].tensor; }

    ModelConfig cfg_;
    std::vector<NamedTensor<T>> params_;
    std::vector<std::size_t> embeddings_;
    std::size_t time_w_ = 0, time_b_ = 0;
    std::vector<Block> blocks_;
    std::size_t final_g_ = 0, final_b_ = 0;
    std::vector<Head> heads_;
    std::size_t backbone_end_ = 0;
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    optim::AdamConfig adam{};
    std::uint64_t seed = 0;
};

struct EpochStats {
    std::size_t epoch = 0;
    double loss = 0.0;
    std::vector<double> level_loss;
};

struct PretrainResult {
    std::vector<EpochStats> curve;
    std::uint64_t steps = 0;
};

// Trains on halm_loss with AdamW; throws NonFiniteError on a non-finite loss.
template <typename T>
PretrainResult pretrain(LocationModel<T>& model, std::span<const Trajectory> data, const TrainConfig& cfg);

// Eval-mode halm_loss averaged over batches.
template <typename T>
double evaluate_halm_loss(const LocationModel<T>& model, std::span<const Trajectory> data,
                          std::size_t batch_size = 32, std::vector<double>* per_level = nullptr);

// Fraction of next-location targets whose per-level argmax predictions are
// all correct, in eval mode.
template <typename T>
double evaluate_halm_accuracy(const LocationModel<T>& model, std::span<const Trajectory> data,
                              std::size_t batch_size = 32);

// Batch order for one epoch of training.
std::vector<std::size_t> epoch_order(std::size_t n, tensor::Rng& rng);

}  // namespace geotok::model
