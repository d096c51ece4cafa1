#include "geotok/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "geotok/error.hpp"
#include "geotok/kernels.hpp"

namespace geotok::tensor {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_macs = 0;

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
    throw ShapeError(std::string(op) + ": " + detail);
}

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

// Allocates the output node and wires parents when recording is active.
template <typename T>
NodePtr<T> make_result(Shape shape, const char* op, std::initializer_list<const Tensor<T>*> inputs) {
    auto out = std::make_shared<detail::Node<T>>();
    out->shape = std::move(shape);
    out->value.assign(numel(out->shape), T(0));
    out->op = op;
    if (g_grad_enabled) {
        for (const auto* in : inputs) {
            if (in->requires_grad()) {
                out->requires_grad = true;
                break;
            }
        }
        if (out->requires_grad) {
            for (const auto* in : inputs) out->parents.push_back(in->node_ptr());
        }
    }
    return out;
}

inline std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::uint64_t& mac_counter() { return g_macs; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value.assign(tensor::numel(shape), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (values.size() != tensor::numel(shape)) {
        shape_fail("from", to_string(shape) + " needs " + std::to_string(tensor::numel(shape)) +
                               " values, got " + std::to_string(values.size()));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) shape_fail("item", "tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from(shape(), node_->value, false);
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
    if (w.rank() != 2 || x.rank() < 1 || last_dim(x.shape()) != w.dim(0)) {
        shape_fail("matmul", to_string(x.shape()) + " @ " + to_string(w.shape()));
    }
    const std::size_t k = w.dim(0), n = w.dim(1), rows = x.numel() / k;
    Shape out_shape = x.shape();
    out_shape.back() = n;
    auto out = make_result<T>(std::move(out_shape), "matmul", {&x, &w});
    kernels::gemm_nn(x.values().data(), w.values().data(), out->value.data(), rows, k, n);
    g_macs += rows * k * n;
    if (out->requires_grad) {
        out->backward = [rows, k, n](detail::Node<T>& self) {
            auto& xn = *self.parents[0];
            auto& wn = *self.parents[1];
            if (xn.requires_grad) kernels::gemm_nt(self.grad.data(), wn.value.data(), xn.grad_data(), rows, n, k);
            if (wn.requires_grad) kernels::gemm_tn(xn.value.data(), self.grad.data(), wn.grad_data(), rows, k, n);
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
        shape_fail("add", to_string(as) + " + " + to_string(bs));
    }
    const std::size_t inner = b.numel(), outer = a.numel() / std::max<std::size_t>(inner, 1);
    auto out = make_result<T>(as, "add", {&a, &b});
    const T* av = a.values().data();
    const T* bv = b.values().data();
    T* ov = out->value.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) ov[o * inner + i] = av[o * inner + i] + bv[i];
    if (out->requires_grad) {
        out->backward = [outer, inner](detail::Node<T>& self) {
            auto& an = *self.parents[0];
            auto& bn = *self.parents[1];
            const T* g = self.grad.data();
            if (an.requires_grad) {
                T* ga = an.grad_data();
                for (std::size_t i = 0; i < outer * inner; ++i) ga[i] += g[i];
            }
            if (bn.requires_grad) {
                T* gb = bn.grad_data();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
            }
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) shape_fail("mul", to_string(a.shape()) + " * " + to_string(b.shape()));
    auto out = make_result<T>(a.shape(), "mul", {&a, &b});
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out->value[i] = a.values()[i] * b.values()[i];
    if (out->requires_grad) {
        out->backward = [n](detail::Node<T>& self) {
            auto& an = *self.parents[0];
            auto& bn = *self.parents[1];
            if (an.requires_grad) {
                T* ga = an.grad_data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * bn.value[i];
            }
            if (bn.requires_grad) {
                T* gb = bn.grad_data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * an.value[i];
            }
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    auto out = make_result<T>(a.shape(), "scale", {&a});
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out->value[i] = a.values()[i] * s;
    if (out->requires_grad) {
        out->backward = [n, s](detail::Node<T>& self) {
            T* ga = self.parents[0]->grad_data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * s;
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != bs.size() || as.empty() || !std::equal(as.begin(), as.end() - 1, bs.begin())) {
        shape_fail("concat_last", to_string(as) + " ++ " + to_string(bs));
    }
    const std::size_t na = as.back(), nb = bs.back(), rows = a.numel() / std::max<std::size_t>(na, 1);
    Shape os = as;
    os.back() = na + nb;
    auto out = make_result<T>(std::move(os), "concat_last", {&a, &b});
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.values().data() + r * na, na, out->value.data() + r * (na + nb));
        std::copy_n(b.values().data() + r * nb, nb, out->value.data() + r * (na + nb) + na);
    }
    if (out->requires_grad) {
        out->backward = [rows, na, nb](detail::Node<T>& self) {
            auto& an = *self.parents[0];
            auto& bn = *self.parents[1];
            for (std::size_t r = 0; r < rows; ++r) {
                const T* g = self.grad.data() + r * (na + nb);
                if (an.requires_grad) {
                    T* ga = an.grad_data() + r * na;
                    for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                }
                if (bn.requires_grad) {
                    T* gb = bn.grad_data() + r * nb;
                    for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
                }
            }
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len) {
    const std::size_t w = last_dim(x.shape());
    if (x.rank() == 0 || start + len > w) {
        shape_fail("slice_last", to_string(x.shape()) + " [" + std::to_string(start) + ", +" +
                                     std::to_string(len) + ")");
    }
    const std::size_t rows = x.numel() / std::max<std::size_t>(w, 1);
    Shape os = x.shape();
    os.back() = len;
    auto out = make_result<T>(std::move(os), "slice_last", {&x});
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(x.values().data() + r * w + start, len, out->value.data() + r * len);
    if (out->requires_grad) {
        out->backward = [rows, w, start, len](detail::Node<T>& self) {
            T* gx = self.parents[0]->grad_data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t i = 0; i < len; ++i) gx[r * w + start + i] += self.grad[r * len + i];
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> select_time(const Tensor<T>& x, std::size_t t) {
    if (x.rank() != 3 || t >= x.dim(1)) {
        shape_fail("select_time", to_string(x.shape()) + " at t=" + std::to_string(t));
    }
    const std::size_t b = x.dim(0), steps = x.dim(1), w = x.dim(2);
    auto out = make_result<T>({b, w}, "select_time", {&x});
    for (std::size_t i = 0; i < b; ++i)
        std::copy_n(x.values().data() + (i * steps + t) * w, w, out->value.data() + i * w);
    if (out->requires_grad) {
        out->backward = [b, steps, w, t](detail::Node<T>& self) {
            T* gx = self.parents[0]->grad_data();
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < w; ++j) gx[(i * steps + t) * w + j] += self.grad[i * w + j];
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel()) shape_fail("reshape", to_string(x.shape()) + " -> " + to_string(shape));
    auto out = make_result<T>(std::move(shape), "reshape", {&x});
    std::copy(x.values().begin(), x.values().end(), out->value.begin());
    if (out->requires_grad) {
        out->backward = [](detail::Node<T>& self) {
            T* gx = self.parents[0]->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, const Shape& id_shape) {
    if (table.rank() != 2 || ids.size() != numel(id_shape)) {
        shape_fail("embedding", "table " + to_string(table.shape()) + ", ids " + std::to_string(ids.size()) +
                                    " for shape " + to_string(id_shape));
    }
    const std::size_t vocab = table.dim(0), w = table.dim(1);
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw InvalidInput("embedding: id " + std::to_string(id) + " out of range [0, " +
                               std::to_string(vocab) + ")");
        }
    }
    Shape os = id_shape;
    os.push_back(w);
    auto out = make_result<T>(std::move(os), "embedding", {&table});
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * w, w, out->value.data() + i * w);
    if (out->requires_grad) {
        std::vector<std::int32_t> saved(ids.begin(), ids.end());
        out->backward = [saved = std::move(saved), w](detail::Node<T>& self) {
            T* gt = self.parents[0]->grad_data();
            for (std::size_t i = 0; i < saved.size(); ++i) {
                T* row = gt + static_cast<std::size_t>(saved[i]) * w;
                for (std::size_t j = 0; j < w; ++j) row[j] += self.grad[i * w + j];
            }
        };
    }
    return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
    auto out = make_result<T>(x.shape(), op, {&x});
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out->value[i] = fwd(x.values()[i]);
    if (out->requires_grad) {
        // deriv(input, output)
        out->backward = [n, deriv](detail::Node<T>& self) {
            auto& xn = *self.parents[0];
            T* gx = xn.grad_data();
            for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[i] * deriv(xn.value[i], self.value[i]);
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary(
        x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary(
        x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T out) { return out * (T(1) - out); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    return unary(
        x, "tanh", [](T v) { return std::tanh(v); }, [](T, T out) { return T(1) - out * out; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    for (auto v : x.values()) {
        if (!(v > T(0))) throw InvalidInput("log: non-positive input " + std::to_string(v));
    }
    return unary(
        x, "log", [](T v) { return std::log(v); }, [](T in, T) { return T(1) / in; });
}

// ---------------------------------------------------------------------------
// normalization / softmax

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const std::size_t w = last_dim(x.shape());
    if (x.rank() == 0 || gamma.shape() != Shape{w} || beta.shape() != Shape{w}) {
        shape_fail("layer_norm", to_string(x.shape()) + " with gamma " + to_string(gamma.shape()) + ", beta " +
                                     to_string(beta.shape()));
    }
    const std::size_t rows = x.numel() / w;
    auto out = make_result<T>(x.shape(), "layer_norm", {&x, &gamma, &beta});
    std::vector<T> xhat(x.numel()), rstd(rows);
    const T* xv = x.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv + r * w;
        T mean = 0;
        for (std::size_t i = 0; i < w; ++i) mean += row[i];
        mean /= T(w);
        T var = 0;
        for (std::size_t i = 0; i < w; ++i) var += (row[i] - mean) * (row[i] - mean);
        var /= T(w);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < w; ++i) {
            xhat[r * w + i] = (row[i] - mean) * rstd[r];
            out->value[r * w + i] = xhat[r * w + i] * gamma.values()[i] + beta.values()[i];
        }
    }
    if (out->requires_grad) {
        out->backward = [rows, w, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
            auto& xn = *self.parents[0];
            auto& gn = *self.parents[1];
            auto& bn = *self.parents[2];
            const T* g = self.grad.data();
            if (gn.requires_grad || bn.requires_grad) {
                T* gg = gn.requires_grad ? gn.grad_data() : nullptr;
                T* gb = bn.requires_grad ? bn.grad_data() : nullptr;
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < w; ++i) {
                        if (gg) gg[i] += g[r * w + i] * xhat[r * w + i];
                        if (gb) gb[i] += g[r * w + i];
                    }
            }
            if (xn.requires_grad) {
                T* gx = xn.grad_data();
                std::vector<T> dxhat(w);
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_d = 0, mean_dx = 0;
                    for (std::size_t i = 0; i < w; ++i) {
                        dxhat[i] = g[r * w + i] * gn.value[i];
                        mean_d += dxhat[i];
                        mean_dx += dxhat[i] * xhat[r * w + i];
                    }
                    mean_d /= T(w);
                    mean_dx /= T(w);
                    for (std::size_t i = 0; i < w; ++i)
                        gx[r * w + i] += rstd[r] * (dxhat[i] - mean_d - xhat[r * w + i] * mean_dx);
                }
            }
        };
    }
    return Tensor<T>(out);
}

namespace {

template <typename T>
void softmax_row(const T* in, T* out, std::size_t n) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, in[i]);
    T sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - mx);
        sum += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= sum;
}

}  // namespace

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
    const std::size_t w = last_dim(x.shape());
    if (x.rank() == 0 || w == 0) shape_fail("softmax_last", to_string(x.shape()));
    const std::size_t rows = x.numel() / w;
    auto out = make_result<T>(x.shape(), "softmax_last", {&x});
    for (std::size_t r = 0; r < rows; ++r) softmax_row(x.values().data() + r * w, out->value.data() + r * w, w);
    if (out->requires_grad) {
        out->backward = [rows, w](detail::Node<T>& self) {
            T* gx = self.parents[0]->grad_data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = self.value.data() + r * w;
                const T* g = self.grad.data() + r * w;
                T dotp = 0;
                for (std::size_t i = 0; i < w; ++i) dotp += y[i] * g[i];
                for (std::size_t i = 0; i < w; ++i) gx[r * w + i] += y[i] * (g[i] - dotp);
            }
        };
    }
    return Tensor<T>(out);
}

double standard_normal(Rng& rng) {
    // Box-Muller; one draw per call keeps the stream position simple.
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, Rng& rng, bool train) {
    if (!train || p <= T(0)) return x;
    if (p >= T(1)) throw InvalidInput("dropout: p must be < 1");
    const std::size_t n = x.numel();
    std::vector<T> mask(n);
    const T keep_scale = T(1) / (T(1) - p);
    for (auto& m : mask) m = uniform01(rng) < static_cast<double>(p) ? T(0) : keep_scale;
    auto out = make_result<T>(x.shape(), "dropout", {&x});
    for (std::size_t i = 0; i < n; ++i) out->value[i] = x.values()[i] * mask[i];
    if (out->requires_grad) {
        out->backward = [mask = std::move(mask)](detail::Node<T>& self) {
            T* gx = self.parents[0]->grad_data();
            for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += self.grad[i] * mask[i];
        };
    }
    return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// attention

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionOptions& opts,
                    Rng* rng) {
    if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
        shape_fail("attention", "q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                                    to_string(v.shape()));
    }
    const std::size_t batch = q.dim(0), steps = q.dim(1), width = q.dim(2), heads = opts.heads;
    if (heads == 0 || width % heads != 0) {
        shape_fail("attention", "width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                                    " heads");
    }
    if (!opts.key_valid.empty() && opts.key_valid.size() != batch * steps) {
        shape_fail("attention", "key mask has " + std::to_string(opts.key_valid.size()) + " entries, scores need " +
                                    std::to_string(batch * steps));
    }
    const bool use_dropout = opts.train && opts.dropout > 0.0;
    if (use_dropout && rng == nullptr) throw InvalidInput("attention: dropout in training needs an rng");
    const std::size_t hd = width / heads;
    const T inv_sqrt = T(1) / std::sqrt(T(hd));
    const auto& kt = kernels::active<T>();

    auto out = make_result<T>(q.shape(), "attention", {&q, &k, &v});
    // probs: softmax weights; kept: post-dropout weights actually applied.
    std::vector<T> probs(batch * heads * steps * steps, T(0));
    std::vector<T> kept;
    if (use_dropout) kept.assign(probs.size(), T(0));
    const T keep_scale = use_dropout ? T(1) / T(1.0 - opts.dropout) : T(1);

    const T* qv = q.values().data();
    const T* kv = k.values().data();
    const T* vv = v.values().data();
    std::vector<T> scores(steps);
    std::vector<std::size_t> allowed;
    allowed.reserve(steps);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < steps; ++t) {
                allowed.clear();
                const std::size_t limit = opts.causal ? t + 1 : steps;
                for (std::size_t j = 0; j < limit; ++j) {
                    if (opts.key_valid.empty() || opts.key_valid[b * steps + j]) allowed.push_back(j);
                }
                if (allowed.empty()) continue;
                const T* qrow = qv + (b * steps + t) * width + h * hd;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t a = 0; a < allowed.size(); ++a) {
                    const T* krow = kv + (b * steps + allowed[a]) * width + h * hd;
                    scores[a] = kt.dot(qrow, krow, hd) * inv_sqrt;
                    mx = std::max(mx, scores[a]);
                }
                g_macs += allowed.size() * hd;
                T sum = 0;
                for (std::size_t a = 0; a < allowed.size(); ++a) {
                    scores[a] = std::exp(scores[a] - mx);
                    sum += scores[a];
                }
                T* prow = probs.data() + ((b * heads + h) * steps + t) * steps;
                T* orow = out->value.data() + (b * steps + t) * width + h * hd;
                for (std::size_t a = 0; a < allowed.size(); ++a) {
                    const std::size_t j = allowed[a];
                    prow[j] = scores[a] / sum;
                    T w = prow[j];
                    if (use_dropout) {
                        w = uniform01(*rng) < opts.dropout ? T(0) : w * keep_scale;
                        kept[((b * heads + h) * steps + t) * steps + j] = w;
                    }
                    if (w != T(0)) kt.axpy(w, vv + (b * steps + j) * width + h * hd, orow, hd);
                }
                g_macs += allowed.size() * hd;
            }
        }
    }

    if (out->requires_grad) {
        out->backward = [=, probs = std::move(probs), kept = std::move(kept)](detail::Node<T>& self) {
            auto& qn = *self.parents[0];
            auto& kn = *self.parents[1];
            auto& vn = *self.parents[2];
            const auto& kt2 = kernels::active<T>();
            T* gq = qn.requires_grad ? qn.grad_data() : nullptr;
            T* gk = kn.requires_grad ? kn.grad_data() : nullptr;
            T* gv = vn.requires_grad ? vn.grad_data() : nullptr;
            std::vector<T> dp(steps);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    for (std::size_t t = 0; t < steps; ++t) {
                        const std::size_t base = ((b * heads + h) * steps + t) * steps;
                        const T* prow = probs.data() + base;
                        const T* grow = self.grad.data() + (b * steps + t) * width + h * hd;
                        const std::size_t limit = opts.causal ? t + 1 : steps;
                        T dot_pd = 0;
                        for (std::size_t j = 0; j < limit; ++j) {
                            if (prow[j] == T(0)) {
                                dp[j] = 0;
                                continue;
                            }
                            const T applied = use_dropout ? kept[base + j] : prow[j];
                            const T* vrow = vn.value.data() + (b * steps + j) * width + h * hd;
                            if (gv && applied != T(0)) {
                                kt2.axpy(applied, grow, gv + (b * steps + j) * width + h * hd, hd);
                            }
                            T d = kt2.dot(grow, vrow, hd);
                            if (use_dropout) d = applied != T(0) ? d * keep_scale : T(0);
                            dp[j] = d;
                            dot_pd += prow[j] * d;
                        }
                        const T* qrow = qn.value.data() + (b * steps + t) * width + h * hd;
                        for (std::size_t j = 0; j < limit; ++j) {
                            if (prow[j] == T(0)) continue;
                            const T ds = prow[j] * (dp[j] - dot_pd) * inv_sqrt;
                            if (ds == T(0)) continue;
                            const T* krow = kn.value.data() + (b * steps + j) * width + h * hd;
                            if (gq) kt2.axpy(ds, krow, gq + (b * steps + t) * width + h * hd, hd);
                            if (gk) kt2.axpy(ds, qrow, gk + (b * steps + j) * width + h * hd, hd);
                        }
                    }
                }
            }
        };
    }
    return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// reductions and losses

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    auto out = make_result<T>({}, "sum_all", {&x});
    T acc = 0;
    for (auto v : x.values()) acc += v;
    out->value[0] = acc;
    if (out->requires_grad) {
        out->backward = [](detail::Node<T>& self) {
            auto& xn = *self.parents[0];
            T* gx = xn.grad_data();
            for (std::size_t i = 0; i < xn.value.size(); ++i) gx[i] += self.grad[0];
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    if (x.numel() == 0) shape_fail("mean_all", "empty tensor");
    return scale(sum_all(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets, std::int32_t ignore_id) {
    if (logits.rank() < 2 || logits.shape().back() == 0 ||
        logits.numel() / logits.shape().back() != targets.size()) {
        shape_fail("cross_entropy", "logits " + to_string(logits.shape()) + " vs " + std::to_string(targets.size()) +
                                        " targets");
    }
    const std::size_t classes = logits.shape().back(), rows = logits.numel() / classes;
    std::size_t valid = 0;
    for (auto t : targets) {
        if (t == ignore_id) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= classes) {
            throw InvalidInput("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                               std::to_string(classes) + ")");
        }
        ++valid;
    }
    if (valid == 0) throw InvalidInput("cross_entropy: every row is ignored");
    auto out = make_result<T>({}, "cross_entropy", {&logits});
    std::vector<T> sm(rows * classes, T(0));
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] == ignore_id) continue;
        const T* row = logits.values().data() + r * classes;
        softmax_row(row, sm.data() + r * classes, classes);
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, row[c]);
        T lse = 0;
        for (std::size_t c = 0; c < classes; ++c) lse += std::exp(row[c] - mx);
        total += std::log(lse) + mx - row[targets[r]];
    }
    out->value[0] = total / T(valid);
    if (out->requires_grad) {
        std::vector<std::int32_t> saved(targets.begin(), targets.end());
        out->backward = [rows, classes, valid, ignore_id, sm = std::move(sm),
                         saved = std::move(saved)](detail::Node<T>& self) {
            T* gl = self.parents[0]->grad_data();
            const T g = self.grad[0] / T(valid);
            for (std::size_t r = 0; r < rows; ++r) {
                if (saved[r] == ignore_id) continue;
                for (std::size_t c = 0; c < classes; ++c) {
                    const T onehot = static_cast<std::size_t>(saved[r]) == c ? T(1) : T(0);
                    gl[r * classes + c] += g * (sm[r * classes + c] - onehot);
                }
            }
        };
    }
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> masked_mean_time(const Tensor<T>& x, std::span<const T> weights) {
    if (x.rank() != 3 || weights.size() != x.dim(0) * x.dim(1)) {
        shape_fail("masked_mean_time", to_string(x.shape()) + " with " + std::to_string(weights.size()) + " weights");
    }
    const std::size_t b = x.dim(0), steps = x.dim(1), w = x.dim(2);
    std::vector<T> norm(b, T(0));
    for (std::size_t i = 0; i < b; ++i) {
        T s = 0;
        for (std::size_t t = 0; t < steps; ++t) s += weights[i * steps + t];
        if (s <= T(0)) throw InvalidInput("masked_mean_time: row " + std::to_string(i) + " has no weight");
        norm[i] = s;
    }
    auto out = make_result<T>({b, w}, "masked_mean_time", {&x});
    const auto& kt = kernels::active<T>();
    for (std::size_t i = 0; i < b; ++i) {
        T* orow = out->value.data() + i * w;
        for (std::size_t t = 0; t < steps; ++t) {
            const T c = weights[i * steps + t];
            if (c != T(0)) kt.axpy(c, x.values().data() + (i * steps + t) * w, orow, w);
        }
        kt.scale(T(1) / norm[i], orow, w);
    }
    if (out->requires_grad) {
        std::vector<T> saved(weights.begin(), weights.end());
        out->backward = [b, steps, w, norm = std::move(norm), saved = std::move(saved)](detail::Node<T>& self) {
            T* gx = self.parents[0]->grad_data();
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t t = 0; t < steps; ++t) {
                    const T c = saved[i * steps + t] / norm[i];
                    if (c == T(0)) continue;
                    for (std::size_t j = 0; j < w; ++j) gx[(i * steps + t) * w + j] += c * self.grad[i * w + j];
                }
        };
    }
    return Tensor<T>(out);
}

template <typename T>
std::vector<std::int32_t> argmax_rows(const Tensor<T>& logits) {
    const std::size_t w = last_dim(logits.shape());
    if (logits.rank() == 0 || w == 0) shape_fail("argmax_rows", to_string(logits.shape()));
    const std::size_t rows = logits.numel() / w;
    std::vector<std::int32_t> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = logits.values().data() + r * w;
        std::size_t best = 0;
        for (std::size_t c = 1; c < w; ++c)
            if (row[c] > row[best]) best = c;
        out[r] = static_cast<std::int32_t>(best);
    }
    return out;
}

template <typename T>
Tensor<T> argmax_one_hot(const Tensor<T>& logits) {
    const auto idx = argmax_rows(logits);
    const std::size_t w = logits.shape().back();
    auto out = Tensor<T>::zeros(logits.shape());
    auto vals = out.values_mut();
    for (std::size_t r = 0; r < idx.size(); ++r) vals[r * w + static_cast<std::size_t>(idx[r])] = T(1);
    return out;
}

// ---------------------------------------------------------------------------
// backward

template <typename T>
void backward(const Tensor<T>& loss, BackwardOptions opts) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(loss.shape()));
    if (!loss.requires_grad()) throw InvalidInput("backward: loss does not depend on any trainable tensor");
    using N = detail::Node<T>;
    std::vector<N*> order;
    std::unordered_set<N*> seen;
    // iterative post-order DFS
    std::vector<std::pair<N*, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            N* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad_data()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        N* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    if (!opts.retain_graph) {
        for (N* n : order) {
            if (!n->parents.empty()) {
                n->backward = nullptr;
                n->parents.clear();
                n->grad.clear();
            }
        }
    }
}

// ---------------------------------------------------------------------------

#define GEOTOK_INSTANTIATE(T)                                                                                   \
    template class Tensor<T>;                                                                                   \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                              \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<T> scale(const Tensor<T>&, T);                                                              \
    template Tensor<T> concat_last(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);                                  \
    template Tensor<T> select_time(const Tensor<T>&, std::size_t);                                              \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                        \
    template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, const Shape&);                \
    template Tensor<T> relu(const Tensor<T>&);                                                                  \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                               \
    template Tensor<T> tanh(const Tensor<T>&);                                                                  \
    template Tensor<T> log(const Tensor<T>&);                                                                   \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                     \
    template Tensor<T> softmax_last(const Tensor<T>&);                                                          \
    template Tensor<T> dropout(const Tensor<T>&, T, Rng&, bool);                                                \
    template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const AttentionOptions&, \
                                 Rng*);                                                                         \
    template Tensor<T> mean_all(const Tensor<T>&);                                                              \
    template Tensor<T> sum_all(const Tensor<T>&);                                                               \
    template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>, std::int32_t);            \
    template Tensor<T> masked_mean_time(const Tensor<T>&, std::span<const T>);                                  \
    template Tensor<T> argmax_one_hot(const Tensor<T>&);                                                        \
    template std::vector<std::int32_t> argmax_rows(const Tensor<T>&);                                           \
    template void backward(const Tensor<T>&, BackwardOptions);

GEOTOK_INSTANTIATE(float)
GEOTOK_INSTANTIATE(double)

#undef GEOTOK_INSTANTIATE

}  // namespace geotok::tensor
