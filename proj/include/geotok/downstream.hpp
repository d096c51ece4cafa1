#pragma once

// Fine-tuning heads on top of a pre-trained LocationModel: next-location
// prediction (pooled FFN or per-level LSTM, chained across levels like the
// pre-training heads), trajectory classification, joint top-k decoding and
// metrics.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "geotok/model.hpp"
#include "geotok/optim.hpp"

namespace geotok::downstream {

using model::Batch;
using model::LocationModel;
using model::NamedTensor;
using tensor::Tensor;

// ---------------------------------------------------------------------------
// joint top-k over a conditional chain

class ChainScorer {
public:
    virtual ~ChainScorer() = default;
    virtual std::size_t levels() const = 0;
    virtual std::size_t level_size(std::size_t level) const = 0;
    // Distribution over level `level` given the ids chosen at levels < level.
    virtual std::vector<double> probs(std::size_t level, std::span<const std::int32_t> prefix) const = 0;
};

struct Candidate {
    std::vector<std::int32_t> ids;
    double score = 0.0;
};

// Higher score first; equal scores fall back to ascending tuple order.
bool ranks_before(const Candidate& a, const Candidate& b);

// Per-level beam of width k keeping the running product of probabilities.
// k is clamped to the number of complete tuples.
std::vector<Candidate> beam_topk(const ChainScorer& scorer, std::size_t k);

// Pre-training heads applied to one encoded position e[1, W].
template <typename T>
class HalmScorer final : public ChainScorer {
public:
    HalmScorer(const LocationModel<T>& m, Tensor<T> position) : m_(m), e_(std::move(position)) {}
    std::size_t levels() const override { return m_.config().levels(); }
    std::size_t level_size(std::size_t level) const override { return m_.config().vocab_sizes.at(level); }
    std::vector<double> probs(std::size_t level, std::span<const std::int32_t> prefix) const override;

private:
    const LocationModel<T>& m_;
    Tensor<T> e_;
};

// Softmax of one logits row in double precision.
template <typename T>
std::vector<double> softmax_row(std::span<const T> logits);

// ---------------------------------------------------------------------------
// metrics

struct ClassCount {
    std::size_t support = 0;
    std::size_t predicted = 0;
    std::size_t correct = 0;
};

struct EvalReport {
    double acc1 = 0.0;
    double acc5 = 0.0;
    double macro_p = 0.0;
    double macro_r = 0.0;
    double macro_f1 = 0.0;
    std::size_t n = 0;
    std::map<std::int64_t, ClassCount> per_class;
    // Targets with no known class (encoded as kUnknownClass).
    std::size_t unknown = 0;
    // Per-level top-1 accuracy, filled by next-location evaluation.
    std::vector<double> level_acc1;
};

inline constexpr std::int64_t kUnknownClass = -1;

// ranked[i] is the prediction list for sample i, best first. Macro metrics use
// ranked[i][0] and average over classes with support > 0.
EvalReport compute_metrics(std::span<const std::vector<std::int64_t>> ranked, std::span<const std::int64_t> targets);

// Required keys acc1, acc5, macro_p, macro_r, macro_f1, n plus per-class
// counts; `names` labels class ids when given.
nlohmann::json report_to_json(const EvalReport& r, const std::vector<std::string>* names = nullptr);

// ---------------------------------------------------------------------------
// pooled features

// Weights over [B, S] selecting real locations: SOS and PAD get 0.
template <typename T>
std::vector<T> pool_weights(const Batch& batch);

// Mean of encoded[B, S, W] over real locations -> [B, W].
template <typename T>
Tensor<T> pooled(const Tensor<T>& encoded, const Batch& batch);

// ---------------------------------------------------------------------------
// next-location heads

enum class HeadKind { ffn, lstm };
HeadKind parse_head_kind(const std::string& s);
std::string to_string(HeadKind k);

template <typename T>
class NextLocationHead {
public:
    NextLocationHead(HeadKind kind, std::size_t width, std::vector<std::size_t> vocab_sizes, std::uint64_t seed);

    HeadKind kind() const noexcept { return kind_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t levels() const noexcept { return vocab_sizes_.size(); }
    const std::vector<std::size_t>& vocab_sizes() const noexcept { return vocab_sizes_; }
    // W for level 0, W + |L^{h-1}| after.
    std::size_t input_width(std::size_t level) const;

    std::vector<NamedTensor<T>> named_parameters() const { return params_; }
    std::vector<Tensor<T>> parameters() const;
    void load_values(std::span<const NamedTensor<T>> source);

    // Logits [B, |L^h|] for level h given the level h-1 one-hot [B, |L^{h-1}|]
    // (ignored and may be undefined for level 0).
    Tensor<T> level_logits(const Tensor<T>& encoded, const Batch& batch, std::size_t level,
                           const Tensor<T>& prev_one_hot) const;
    // Every level, each conditioned on the argmax of the previous one.
    std::vector<Tensor<T>> chain_logits(const Tensor<T>& encoded, const Batch& batch) const;

    nlohmann::json describe() const;

private:
    struct Level {
        std::size_t a, b, c, d, e;  // ffn: w, b; lstm: wx, wh, b, out_w, out_b
    };
    std::size_t add(std::string name, tensor::Shape shape, tensor::Rng& rng, bool normal);
    const Tensor<T>& p(std::size_t i) const { return params_[i].tensor; }
    Tensor<T> lstm_final(const Level& lv, const Tensor<T>& encoded, const Batch& batch, const Tensor<T>& cond) const;

    HeadKind kind_;
    std::size_t width_;
    std::vector<std::size_t> vocab_sizes_;
    std::vector<NamedTensor<T>> params_;
    std::vector<Level> levels_;
};

template <typename T>
NextLocationHead<T> head_from_description(const nlohmann::json& j);

// Input prefix (SOS + first T real locations) and the final location as target.
struct NextLocationSample {
    Trajectory prefix;
    std::vector<std::int32_t> target;
};

// Throws InvalidInput for trajectories with fewer than 2 real locations.
std::vector<NextLocationSample> next_location_samples(std::span<const Trajectory> data);

struct FinetuneConfig {
    HeadKind head = HeadKind::ffn;
    bool freeze_backbone = false;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    optim::AdamConfig adam{};
    std::uint64_t seed = 0;
};

template <typename T>
NextLocationHead<T> finetune_next_location(LocationModel<T>& backbone, std::span<const Trajectory> train,
                                           const FinetuneConfig& cfg, std::vector<double>* curve = nullptr);

// Joint top-k for one prefix trajectory.
template <typename T>
std::vector<Candidate> predict_topk(const LocationModel<T>& backbone, const NextLocationHead<T>& head,
                                    const Trajectory& prefix, std::size_t k);

// acc@1 / acc@5 with all levels required to match; macro metrics over full
// location tuples.
template <typename T>
EvalReport evaluate_next_location(const LocationModel<T>& backbone, const NextLocationHead<T>& head,
                                  std::span<const Trajectory> data, std::size_t batch_size = 32);

// Next-location metrics straight from the pre-training heads: prefix ->
// final location, scored at the last prefix position.
template <typename T>
EvalReport evaluate_pretrained_next_location(const LocationModel<T>& backbone, std::span<const Trajectory> data,
                                             std::size_t batch_size = 32);

// ---------------------------------------------------------------------------
// classification

template <typename T>
class ClassifierHead {
public:
    ClassifierHead(std::size_t width, std::vector<std::string> labels, std::uint64_t seed);

    std::size_t width() const noexcept { return width_; }
    const std::vector<std::string>& labels() const noexcept { return labels_; }
    // Index of `label`, kUnknownClass when absent.
    std::int64_t label_index(const std::string& label) const;

    std::vector<NamedTensor<T>> named_parameters() const { return params_; }
    std::vector<Tensor<T>> parameters() const;
    void load_values(std::span<const NamedTensor<T>> source);

    Tensor<T> logits(const Tensor<T>& encoded, const Batch& batch) const;
    nlohmann::json describe() const;

private:
    std::size_t width_;
    std::vector<std::string> labels_;
    std::vector<NamedTensor<T>> params_;
};

template <typename T>
ClassifierHead<T> classifier_from_description(const nlohmann::json& j);

// Labels are collected from `train` in first-seen order. Throws InvalidInput
// on unlabeled trajectories.
template <typename T>
ClassifierHead<T> finetune_classifier(LocationModel<T>& backbone, std::span<const Trajectory> train,
                                      const FinetuneConfig& cfg, std::vector<double>* curve = nullptr);

// Labels unseen in training count as wrong and are tallied in `unknown`.
template <typename T>
EvalReport evaluate_classifier(const LocationModel<T>& backbone, const ClassifierHead<T>& head,
                               std::span<const Trajectory> data, std::size_t batch_size = 32);

}  // namespace geotok::downstream
