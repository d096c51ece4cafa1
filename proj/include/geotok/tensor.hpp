#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a shared handle to a node; every op records its parents and a
// backward closure when gradient tracking is enabled and at least one input
// requires a gradient. backward() walks the recorded graph in reverse
// topological order. Instantiated for float (training) and double
// (verification).

#include <cstddef>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace geotok::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    T* grad_data() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad.data();
    }
};

}  // namespace detail

template <typename T>
class Tensor {
public:
    using Node = detail::Node<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }
    const char* op() const { return node_->op; }

    std::span<const T> values() const { return node_->value; }
    // Direct write access; only meaningful on leaves (parameters, inputs).
    std::span<T> values_mut() { return node_->value; }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad_mut() { return {node_->grad_data(), node_->value.size()}; }
    bool has_grad() const { return !node_->grad.empty(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad() { node_->grad.clear(); }

    T item() const;
    Tensor detach() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Gradient recording is on by default; the guard disables it for its scope
// on the current thread.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Multiply-accumulate count of matmul-class work performed by forward ops on
// this thread (matmul, attention scores and context).
std::uint64_t& mac_counter();

using Rng = std::mt19937_64;

// Generator-only sampling so sequences do not depend on the standard
// library's distribution implementations.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double standard_normal(Rng& rng);

// x[..., K] @ w[K, N] -> [..., N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w);

// b's shape must equal a's shape or a suffix of it (broadcast over leading dims).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len);

// x[B, T, W] -> x[:, t, :] as [B, W]
template <typename T>
Tensor<T> select_time(const Tensor<T>& x, std::size_t t);

// Same values, new shape of equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// table[V, W] gathered by ids laid out as id_shape -> [id_shape..., W]
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, const Shape& id_shape);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> tanh(const Tensor<T>& x);

template <typename T>
Tensor<T> log(const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x);

// Inverted dropout; identity when !train or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, Rng& rng, bool train);

struct AttentionOptions {
    std::size_t heads = 1;
    bool causal = true;
    // B*T flags, nonzero = key position may be attended; empty = all valid.
    std::span<const std::uint8_t> key_valid = {};
    double dropout = 0.0;
    bool train = false;
};

// Multi-head scaled dot-product attention over q, k, v of shape [B, T, W].
// Masked keys are excluded from the softmax entirely.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionOptions& opts, Rng* rng = nullptr);

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

// logits[..., C] viewed as rows of C classes; mean over rows whose target !=
// ignore_id of -log softmax(row)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::int32_t ignore_id);

// x[B, T, W] averaged over t with weights[B*T] (0/1 masks) -> [B, W]
template <typename T>
Tensor<T> masked_mean_time(const Tensor<T>& x, std::span<const T> weights);

// one-hot of the row-wise argmax (lowest index wins ties); never requires grad.
template <typename T>
Tensor<T> argmax_one_hot(const Tensor<T>& logits);

template <typename T>
std::vector<std::int32_t> argmax_rows(const Tensor<T>& logits);

struct BackwardOptions {
    bool retain_graph = false;
};

template <typename T>
void backward(const Tensor<T>& loss, BackwardOptions opts = {});

}  // namespace geotok::tensor
