#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "geotok/error.hpp"
#include "geotok/kernels.hpp"
#include "geotok/optim.hpp"
#include "geotok/tensor.hpp"
#include "support.hpp"

using namespace geotok;
using namespace geotok::tensor;
using testsupport::check_gradients;
using testsupport::project_to_scalar;
using testsupport::randn;

namespace {

using Leaves = std::vector<std::pair<std::string, Tensor<double>>>;

constexpr int kSeeds = 20;
constexpr double kStep = 1e-6;
constexpr double kTol = 1e-5;
constexpr double kFloor = 1e-4;

void expect_grads(const Leaves& leaves, const std::function<Tensor<double>()>& f) {
    const auto r = check_gradients(leaves, f, kStep, kTol, kFloor);
    INFO(r.worst);
    CHECK(r.failed == 0);
    CHECK(r.checked > 0);
}

}  // namespace

TEST_CASE("softmax: analytic rows") {
    auto s = softmax_last(Tensor<double>::from({2, 2}, {0.0, 0.0, std::log(2.0), 0.0}));
    CHECK(s.values()[0] == doctest::Approx(0.5));
    CHECK(s.values()[1] == doctest::Approx(0.5));
    CHECK(s.values()[2] == doctest::Approx(2.0 / 3.0));
    CHECK(s.values()[3] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("softmax: rows sum to one in both precisions") {
    std::mt19937_64 rng(3);
    auto xd = randn<double>({16, 37}, rng, 8.0, false);
    auto xf = randn<float>({16, 37}, rng, 8.0f, false);
    auto sd = softmax_last(xd);
    auto sf = softmax_last(xf);
    for (std::size_t r = 0; r < 16; ++r) {
        double a = 0, b = 0;
        for (std::size_t c = 0; c < 37; ++c) {
            a += sd.values()[r * 37 + c];
            b += sf.values()[r * 37 + c];
        }
        CHECK(std::abs(a - 1.0) < 1e-12);
        CHECK(std::abs(b - 1.0) < 1e-6);
    }
}

TEST_CASE("cross_entropy: analytic values and masking") {
    auto uniform = Tensor<double>::zeros({1, 4});
    const std::vector<std::int32_t> t0{2};
    CHECK(cross_entropy(uniform, t0, -1).item() == doctest::Approx(std::log(4.0)));

    auto sharp = Tensor<double>::from({1, 3}, {10.0, 0.0, 0.0});
    const std::vector<std::int32_t> t1{0};
    CHECK(cross_entropy(sharp, t1, -1).item() < 1e-4);

    auto two = Tensor<double>::from({2, 3}, {1.0, 2.0, 3.0, 9.0, -4.0, 0.5});
    const std::vector<std::int32_t> masked{1, -1};
    auto one = Tensor<double>::from({1, 3}, {1.0, 2.0, 3.0});
    const std::vector<std::int32_t> single{1};
    CHECK(cross_entropy(two, masked, -1).item() == doctest::Approx(cross_entropy(one, single, -1).item()));

    const std::vector<std::int32_t> none{-1, -1};
    CHECK_THROWS_AS(cross_entropy(two, none, -1), InvalidInput);
    const std::vector<std::int32_t> oob{5, 0};
    CHECK_THROWS(cross_entropy(two, oob, -1));
}

TEST_CASE("backward: scalar basics") {
    auto x = Tensor<double>::from({1}, {3.0}, true);
    backward(sum_all(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(6.0));

    auto y = Tensor<double>::from({1}, {1.0}, true);
    backward(sum_all(relu(scale(y, -1.0))));
    CHECK(y.grad()[0] == 0.0);

    auto z = Tensor<double>::from({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(z), ShapeError);
}

TEST_CASE("shape errors name the op") {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({4, 2});
    try {
        (void)matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    }
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(reshape(a, {5}), ShapeError);
    const std::vector<std::int32_t> ids{0, 7};
    CHECK_THROWS(embedding(Tensor<double>::zeros({3, 2}), ids, {2}));
}

TEST_CASE("gradcheck: elementwise and structural primitives") {
    for (int s = 0; s < kSeeds; ++s) {
        std::mt19937_64 rng(100 + s);
        auto a = randn<double>({2, 3, 4}, rng);
        auto b = randn<double>({2, 3, 4}, rng);
        auto row = randn<double>({4}, rng);
        auto pos = Tensor<double>::from({5}, {0.5, 1.5, 2.0, 3.0, 0.7}, true);
        for (auto& v : pos.values_mut()) v += std::abs(randn<double>({1}, rng, 0.1, false).item());
        const auto seed = static_cast<std::uint64_t>(s);
        expect_grads({{"a", a}, {"b", b}}, [&] { return project_to_scalar(add(a, b), seed); });
        expect_grads({{"a", a}, {"row", row}}, [&] { return project_to_scalar(add(a, row), seed); });
        expect_grads({{"a", a}, {"b", b}}, [&] { return project_to_scalar(mul(a, b), seed); });
        expect_grads({{"a", a}}, [&] { return project_to_scalar(scale(a, -1.7), seed); });
        expect_grads({{"a", a}, {"b", b}}, [&] { return project_to_scalar(concat_last(a, b), seed); });
        expect_grads({{"a", a}}, [&] { return project_to_scalar(slice_last(a, 1, 2), seed); });
        expect_grads({{"a", a}}, [&] { return project_to_scalar(select_time(a, 2), seed); });
        expect_grads({{"a", a}}, [&] { return project_to_scalar(reshape(a, {6, 4}), seed); });
        expect_grads({{"a", a}}, [&] { return project_to_scalar(sigmoid(a), seed); });
        expect_grads({{"a", a}}, [&] { return project_to_scalar(tanh(a), seed); });
        expect_grads({{"pos", pos}}, [&] { return project_to_scalar(log(pos), seed); });
        expect_grads({{"a", a}}, [&] { return mean_all(mul(a, a)); });
        expect_grads({{"a", a}}, [&] { return project_to_scalar(softmax_last(a), seed); });
        const std::vector<double> w{1, 0, 1, 1, 1, 0};
        expect_grads({{"a", a}}, [&] { return project_to_scalar(masked_mean_time(a, std::span<const double>(w)), seed); });
    }
}

TEST_CASE("gradcheck: relu away from the kink") {
    for (int s = 0; s < kSeeds; ++s) {
        std::mt19937_64 rng(200 + s);
        auto a = randn<double>({3, 5}, rng);
        for (auto& v : a.values_mut())
            if (std::abs(v) < 1e-3) v = 0.5;
        expect_grads({{"a", a}}, [&] { return project_to_scalar(relu(a), s); });
    }
}

TEST_CASE("gradcheck: matmul, embedding, layer norm") {
    for (int s = 0; s < kSeeds; ++s) {
        std::mt19937_64 rng(300 + s);
        auto x = randn<double>({2, 3, 5}, rng);
        auto w = randn<double>({5, 4}, rng);
        expect_grads({{"x", x}, {"w", w}}, [&] { return project_to_scalar(matmul(x, w), s); });

        auto table = randn<double>({6, 3}, rng);
        const std::vector<std::int32_t> ids{0, 5, 2, 2, 1, 5};
        expect_grads({{"table", table}}, [&] { return project_to_scalar(embedding(table, ids, {2, 3}), s); });

        auto g = randn<double>({5}, rng);
        auto b = randn<double>({5}, rng);
        expect_grads({{"x", x}, {"g", g}, {"b", b}}, [&] { return project_to_scalar(layer_norm(x, g, b), s); });
    }
}

TEST_CASE("gradcheck: cross entropy with ignored rows") {
    for (int s = 0; s < kSeeds; ++s) {
        std::mt19937_64 rng(400 + s);
        auto logits = randn<double>({2, 3, 6}, rng, 2.0);
        const std::vector<std::int32_t> t{0, 5, -1, 3, -1, 1};
        expect_grads({{"logits", logits}}, [&] { return cross_entropy(logits, t, -1); });
    }
}

TEST_CASE("gradcheck: causal attention with padding") {
    for (int s = 0; s < kSeeds; ++s) {
        std::mt19937_64 rng(500 + s);
        auto q = randn<double>({2, 4, 6}, rng);
        auto k = randn<double>({2, 4, 6}, rng);
        auto v = randn<double>({2, 4, 6}, rng);
        const std::vector<std::uint8_t> valid{1, 1, 1, 1, 1, 1, 0, 0};
        AttentionOptions o;
        o.heads = 2;
        o.key_valid = valid;
        expect_grads({{"q", q}, {"k", k}, {"v", v}}, [&] { return project_to_scalar(attention(q, k, v, o), s); });
    }
}

TEST_CASE("gradcheck: three-layer MLP") {
    for (int s = 0; s < kSeeds; ++s) {
        std::mt19937_64 rng(600 + s);
        auto x = randn<double>({4, 5}, rng, 1.0, false);
        auto w1 = randn<double>({5, 7}, rng, 0.5);
        auto b1 = randn<double>({7}, rng, 0.1);
        auto w2 = randn<double>({7, 6}, rng, 0.5);
        auto b2 = randn<double>({6}, rng, 0.1);
        auto w3 = randn<double>({6, 3}, rng, 0.5);
        auto b3 = randn<double>({3}, rng, 0.1);
        const std::vector<std::int32_t> t{0, 2, 1, 2};
        auto f = [&] {
            auto h = tanh(add(matmul(x, w1), b1));
            h = sigmoid(add(matmul(h, w2), b2));
            return cross_entropy(add(matmul(h, w3), b3), t, -1);
        };
        expect_grads({{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"w3", w3}, {"b3", b3}}, f);
    }
}

TEST_CASE("attention: first position only sees itself") {
    std::mt19937_64 rng(8);
    auto q = randn<double>({1, 3, 4}, rng, 1.0, false);
    auto k = randn<double>({1, 3, 4}, rng, 1.0, false);
    auto v = randn<double>({1, 3, 4}, rng, 1.0, false);
    auto out = attention(q, k, v, {});
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.values()[c] == doctest::Approx(v.values()[c]));
}

TEST_CASE("attention: future perturbation leaves the past bit-identical") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        auto q = randn<float>({2, 8, 8}, rng, 1.0, false);
        auto k = randn<float>({2, 8, 8}, rng, 1.0, false);
        auto v = randn<float>({2, 8, 8}, rng, 1.0, false);
        AttentionOptions o;
        o.heads = 2;
        const auto before = attention(q, k, v, o);
        const std::size_t t = rng() % 7;
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t p = t + 1; p < 8; ++p)
                for (std::size_t c = 0; c < 8; ++c) {
                    q.values_mut()[(b * 8 + p) * 8 + c] += 3.0f;
                    k.values_mut()[(b * 8 + p) * 8 + c] -= 2.0f;
                    v.values_mut()[(b * 8 + p) * 8 + c] *= -5.0f;
                }
        const auto after = attention(q, k, v, o);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t p = 0; p <= t; ++p)
                for (std::size_t c = 0; c < 8; ++c) {
                    const auto i = (b * 8 + p) * 8 + c;
                    CHECK(before.values()[i] == after.values()[i]);
                }
    }
}

TEST_CASE("dropout: identity in eval and for p = 0") {
    std::mt19937_64 init(1);
    auto x = randn<float>({4, 4}, init, 1.0, false);
    Rng rng(2);
    auto e = dropout(x, 0.5f, rng, false);
    auto z = dropout(x, 0.0f, rng, true);
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(e.values()[i] == x.values()[i]);
        CHECK(z.values()[i] == x.values()[i]);
    }
    auto t = dropout(x, 0.5f, rng, true);
    for (std::size_t i = 0; i < 16; ++i) {
        const float v = t.values()[i];
        CHECK((v == 0.0f || v == doctest::Approx(2.0f * x.values()[i])));
    }
}

TEST_CASE("argmax one-hot: lowest index on ties, no gradient") {
    auto l = Tensor<double>::from({2, 3}, {1.0, 3.0, 3.0, -1.0, -2.0, -3.0}, true);
    auto oh = argmax_one_hot(l);
    CHECK_FALSE(oh.requires_grad());
    CHECK(std::vector<double>(oh.values().begin(), oh.values().end()) == std::vector<double>{0, 1, 0, 1, 0, 0});
    CHECK(argmax_rows(l) == std::vector<std::int32_t>{1, 0});
}

TEST_CASE("no-grad guard skips graph recording") {
    auto w = Tensor<double>::from({1}, {2.0}, true);
    {
        NoGradGuard g;
        CHECK_FALSE(grad_enabled());
        auto y = mul(w, w);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
    CHECK(mul(w, w).requires_grad());
}

TEST_CASE("mac counter: matmul counts rows * k * n") {
    mac_counter() = 0;
    (void)matmul(Tensor<float>::zeros({2, 3, 5}), Tensor<float>::zeros({5, 7}));
    CHECK(mac_counter() == 2 * 3 * 5 * 7);
}

TEST_CASE("kernels: AVX2 variant agrees with the scalar reference") {
    const auto& ref = kernels::scalar_table<float>();
    const auto* fast = kernels::avx2_table<float>();
    const auto* fastd = kernels::avx2_table<double>();
    if (!fast || !fastd) {
        MESSAGE("AVX2 kernels unavailable on this CPU; equivalence skipped");
        return;
    }
    std::mt19937_64 rng(77);
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t len : {0u, 1u, 3u, 7u, 8u, 9u, 15u, 16u, 17u, 31u, 64u, 257u}) {
        std::vector<float> x(len), y(len);
        std::vector<double> xd(len), yd(len);
        for (std::size_t i = 0; i < len; ++i) {
            x[i] = static_cast<float>(n(rng));
            y[i] = static_cast<float>(n(rng));
            xd[i] = x[i];
            yd[i] = y[i];
        }
        const float d0 = ref.dot(x.data(), y.data(), len);
        const float d1 = fast->dot(x.data(), y.data(), len);
        CHECK(d1 == doctest::Approx(d0).epsilon(1e-5).scale(1.0));
        CHECK(fastd->dot(xd.data(), yd.data(), len) ==
              doctest::Approx(kernels::scalar_table<double>().dot(xd.data(), yd.data(), len)).epsilon(1e-12));

        auto y0 = y, y1 = y;
        ref.axpy(0.37f, x.data(), y0.data(), len);
        fast->axpy(0.37f, x.data(), y1.data(), len);
        for (std::size_t i = 0; i < len; ++i) CHECK(y1[i] == doctest::Approx(y0[i]).epsilon(1e-6));
        ref.scale(-1.5f, y0.data(), len);
        fast->scale(-1.5f, y1.data(), len);
        for (std::size_t i = 0; i < len; ++i) CHECK(y1[i] == doctest::Approx(y0[i]).epsilon(1e-6));
    }
}

TEST_CASE("kernels: gemm variants agree across dispatch and with a naive loop") {
    std::mt19937_64 rng(78);
    std::normal_distribution<double> n(0.0, 1.0);
    const std::size_t m = 5, k = 19, nn = 11;
    std::vector<float> a(m * k), b(k * nn), bt(nn * k), g(m * nn);
    for (auto& v : a) v = static_cast<float>(n(rng));
    for (auto& v : b) v = static_cast<float>(n(rng));
    for (auto& v : g) v = static_cast<float>(n(rng));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < nn; ++j) bt[j * k + i] = b[i * nn + j];
    std::vector<double> naive(m * nn, 0.0), naive_tn(k * nn, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nn; ++j)
            for (std::size_t p = 0; p < k; ++p) naive[i * nn + j] += double(a[i * k + p]) * b[p * nn + j];
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < nn; ++j)
            for (std::size_t i = 0; i < m; ++i) naive_tn[p * nn + j] += double(a[i * k + p]) * g[i * nn + j];

    for (bool scalar : {true, false}) {
        kernels::force_scalar(scalar);
        std::vector<float> c1(m * nn, 0.0f), c2(m * nn, 0.0f), c3(k * nn, 0.0f);
        kernels::gemm_nn(a.data(), b.data(), c1.data(), m, k, nn);
        kernels::gemm_nt(a.data(), bt.data(), c2.data(), m, k, nn);
        kernels::gemm_tn(a.data(), g.data(), c3.data(), m, k, nn);
        for (std::size_t i = 0; i < m * nn; ++i) {
            CHECK(c1[i] == doctest::Approx(naive[i]).epsilon(1e-4).scale(1.0));
            CHECK(c2[i] == doctest::Approx(naive[i]).epsilon(1e-4).scale(1.0));
        }
        for (std::size_t i = 0; i < k * nn; ++i) CHECK(c3[i] == doctest::Approx(naive_tn[i]).epsilon(1e-4).scale(1.0));
    }
    kernels::force_scalar(false);
}

TEST_CASE("kernels: model-scale ops agree between dispatch paths") {
    std::mt19937_64 rng(79);
    auto x = randn<float>({3, 9, 24}, rng, 1.0, false);
    auto w = randn<float>({24, 40}, rng, 1.0, false);
    kernels::force_scalar(true);
    const auto a = matmul(x, w);
    const auto att_a = attention(x, x, x, {.heads = 4});
    kernels::force_scalar(false);
    const auto b = matmul(x, w);
    const auto att_b = attention(x, x, x, {.heads = 4});
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(b.values()[i] == doctest::Approx(a.values()[i]).epsilon(1e-5).scale(1.0));
    for (std::size_t i = 0; i < att_a.numel(); ++i)
        CHECK(att_b.values()[i] == doctest::Approx(att_a.values()[i]).epsilon(1e-5).scale(1.0));
}

TEST_CASE("adamw: first step, zero gradient, warmup and non-finite guard") {
    optim::AdamConfig c;
    c.lr = 1e-3;
    c.weight_decay = 0.0;
    c.warmup_steps = 0;
    auto p = Tensor<double>::from({2}, {1.0, -2.0}, true);
    optim::AdamW<double> opt({p}, c);
    p.grad_mut()[0] = 1.0;
    p.grad_mut()[1] = 1.0;
    opt.step();
    CHECK(p.values()[0] == doctest::Approx(1.0 - 1e-3 / (1.0 + 1e-8)));
    CHECK(p.values()[1] == doctest::Approx(-2.0 - 1e-3));

    auto q = Tensor<double>::from({3}, {0.5, 0.25, -1.0}, true);
    optim::AdamW<double> still({q}, c);
    for (int i = 0; i < 10; ++i) {
        q.grad_mut();
        still.step();
    }
    CHECK(q.values()[0] == 0.5);
    CHECK(q.values()[2] == -1.0);

    // Decoupled decay shrinks the parameter even with zero gradient.
    c.weight_decay = 0.1;
    auto r = Tensor<double>::from({1}, {2.0}, true);
    optim::AdamW<double> decay({r}, c);
    r.grad_mut();
    decay.step();
    CHECK(r.values()[0] == doctest::Approx(2.0 - 1e-3 * 0.1 * 2.0));

    optim::AdamConfig w;
    w.lr = 1e-3;
    w.warmup_steps = 10000;
    CHECK(optim::warmup_lr(w, 5000) == doctest::Approx(5e-4));
    CHECK(optim::warmup_lr(w, 20000) == doctest::Approx(1e-3));

    auto bad = Tensor<double>::from({2}, {1.0, 1.0}, true);
    optim::AdamW<double> guard({bad}, c);
    bad.grad_mut()[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(guard.step(), NonFiniteError);
    CHECK(bad.values()[0] == 1.0);
}
