#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lapflow/nn.hpp"
#include "lapflow/tensor.hpp"

using namespace lapflow;

namespace {

// Independent triple-loop reference, kept deliberately naive.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    Tensor c({a.rows(), b.cols()});
    for (int64_t i = 0; i < a.rows(); ++i)
        for (int64_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (int64_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
    return c;
}

// Single-head attention spelled out: softmax(q k^T / sqrt(d)) v.
Tensor attention_oracle_1head(const Tensor& q, const Tensor& k, const Tensor& v) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Tensor logits = matmul_oracle(q, [&] {
        Tensor kt({k.cols(), k.rows()});
        for (int64_t i = 0; i < k.rows(); ++i)
            for (int64_t j = 0; j < k.cols(); ++j) kt.at(j, i) = k.at(i, j);
        return kt;
    }());
    logits *= scale;
    Tensor p = softmax_rows(logits);
    return matmul_oracle(p, v);
}

}  // namespace

TEST_CASE("matmul basics") {
    Tensor id = Tensor::from_rows({{1, 0}, {0, 1}});
    Tensor b = Tensor::from_rows({{3, 4}, {5, 6}});
    Tensor c = matmul(id, b);
    CHECK(max_abs_diff(c, b) == 0.0);

    Tensor a = Tensor::from_rows({{1, 2}});
    Tensor d = Tensor::from_rows({{3}, {4}});
    CHECK(matmul(a, d).at(0, 0) == 11.0);

    CHECK_THROWS_AS(matmul(d, b), std::invalid_argument);  // (2,1) x (2,2)
}

TEST_CASE("matmul matches triple-loop oracle on random 5x7 * 7x3") {
    Rng rng(42);
    Tensor a = Tensor::randn({5, 7}, rng);
    Tensor b = Tensor::randn({7, 3}, rng);
    CHECK(max_abs_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-12);
    // associativity with identity
    Tensor id({3, 3});
    for (int i = 0; i < 3; ++i) id.at(i, i) = 1.0;
    CHECK(max_abs_diff(matmul(matmul(a, b), id), matmul(a, b)) == 0.0);
}

TEST_CASE("matmul_a_bt and matmul_at_b_acc agree with explicit transposes") {
    Rng rng(7);
    Tensor a = Tensor::randn({4, 6}, rng);
    Tensor b = Tensor::randn({5, 6}, rng);
    Tensor bt({6, 5});
    for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 6; ++j) bt.at(j, i) = b.at(i, j);
    CHECK(max_abs_diff(matmul_a_bt(a, b), matmul_oracle(a, bt)) < 1e-12);

    Tensor x = Tensor::randn({4, 5}, rng);
    Tensor acc({6, 5});
    matmul_at_b_acc(a, x, acc);
    Tensor at({6, 4});
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 6; ++j) at.at(j, i) = a.at(i, j);
    CHECK(max_abs_diff(acc, matmul_oracle(at, x)) < 1e-12);
}

TEST_CASE("softmax rows") {
    Tensor z = Tensor::from_rows({{0, 0}});
    Tensor s = softmax_rows(z);
    CHECK(s.at(0, 0) == Catch::Approx(0.5));
    CHECK(s.at(0, 1) == Catch::Approx(0.5));

    // shift invariance under overflow-prone input
    Tensor big = Tensor::from_rows({{1000, 1000}});
    Tensor sb = softmax_rows(big);
    CHECK(sb.at(0, 0) == Catch::Approx(0.5));

    // high-precision oracle on [1,2,3]
    Tensor x = Tensor::from_rows({{1, 2, 3}});
    Tensor sx = softmax_rows(x);
    long double e1 = expl(1.0L), e2 = expl(2.0L), e3 = expl(3.0L);
    long double denom = e1 + e2 + e3;
    CHECK(sx.at(0, 0) == Catch::Approx(static_cast<double>(e1 / denom)).epsilon(1e-14));
    CHECK(sx.at(0, 1) == Catch::Approx(static_cast<double>(e2 / denom)).epsilon(1e-14));
    CHECK(sx.at(0, 2) == Catch::Approx(static_cast<double>(e3 / denom)).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one for random finite input") {
    Rng rng(3);
    Tensor x = Tensor::randn({17, 9}, rng, 10.0);
    Tensor s = softmax_rows(x);
    for (int64_t i = 0; i < 17; ++i) {
        double sum = 0.0;
        for (int64_t j = 0; j < 9; ++j) sum += s.at(i, j);
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
    // shift invariance: softmax(x) == softmax(x + c)
    Tensor shifted = x;
    for (auto& v : shifted.data) v += 123.456;
    CHECK(max_abs_diff(softmax_rows(shifted), s) < 1e-12);
}

TEST_CASE("rms_norm") {
    Tensor gain = Tensor::full({2}, 1.0);
    Tensor x = Tensor::from_rows({{2, 2}});
    Tensor y = rms_norm(x, gain);
    CHECK(y.at(0, 0) == Catch::Approx(1.0).epsilon(1e-6));

    Tensor z = Tensor::from_rows({{0, 0}});
    Tensor yz = rms_norm(z, gain);
    CHECK(yz.at(0, 0) == 0.0);
    CHECK(yz.at(0, 1) == 0.0);

    // direct formula oracle on [1,2,3]
    Tensor g3 = Tensor::full({3}, 1.0);
    Tensor x3 = Tensor::from_rows({{1, 2, 3}});
    Tensor y3 = rms_norm(x3, g3);
    const double inv = 1.0 / std::sqrt((1.0 + 4.0 + 9.0) / 3.0 + 1e-6);
    CHECK(y3.at(0, 0) == Catch::Approx(1.0 * inv).epsilon(1e-14));
    CHECK(y3.at(0, 1) == Catch::Approx(2.0 * inv).epsilon(1e-14));
    CHECK(y3.at(0, 2) == Catch::Approx(3.0 * inv).epsilon(1e-14));

    CHECK_THROWS_AS(rms_norm(x3, gain), std::invalid_argument);
}

TEST_CASE("silu") {
    Tensor x = Tensor::from_rows({{0, 50, 1}});
    Tensor y = silu(x);
    CHECK(y.at(0, 0) == 0.0);
    CHECK(y.at(0, 1) == Catch::Approx(50.0).epsilon(1e-12));  // asymptote
    CHECK(y.at(0, 2) == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-14));
}

TEST_CASE("attention: single key/value token broadcasts v") {
    Rng rng(5);
    Tensor q = Tensor::randn({4, 8}, rng);
    Tensor k = Tensor::randn({1, 8}, rng);
    Tensor v = Tensor::randn({1, 8}, rng);
    Tensor out = multi_head_attention(q, k, v, AttentionMask::full(), 2);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t d = 0; d < 8; ++d) CHECK(out.at(i, d) == v.at(0, d));
}

TEST_CASE("attention: causal position 0 attends only to key 0") {
    Rng rng(6);
    Tensor q = Tensor::randn({3, 4}, rng);
    Tensor k = Tensor::randn({3, 4}, rng);
    Tensor v = Tensor::randn({3, 4}, rng);
    Tensor out = multi_head_attention(q, k, v, AttentionMask::causal(), 1);
    for (int64_t d = 0; d < 4; ++d) CHECK(out.at(0, d) == v.at(0, d));
}

TEST_CASE("attention: 1-head matches naive oracle within 1e-12") {
    Rng rng(8);
    Tensor q = Tensor::randn({3, 6}, rng);
    Tensor k = Tensor::randn({3, 6}, rng);
    Tensor v = Tensor::randn({3, 6}, rng);
    Tensor got = multi_head_attention(q, k, v, AttentionMask::full(), 1);
    CHECK(max_abs_diff(got, attention_oracle_1head(q, k, v)) < 1e-12);
}

TEST_CASE("attention: causal output exactly invariant to future perturbation") {
    Rng rng(9);
    const int64_t sl = 6, h = 8;
    Tensor q = Tensor::randn({sl, h}, rng), k = Tensor::randn({sl, h}, rng), v = Tensor::randn({sl, h}, rng);
    Tensor base = multi_head_attention(q, k, v, AttentionMask::causal(), 2);
    Tensor q2 = q, k2 = k, v2 = v;
    for (int64_t j = 3; j < sl; ++j)
        for (int64_t d = 0; d < h; ++d) {
            q2.at(j, d) += rng.normal();
            k2.at(j, d) += rng.normal();
            v2.at(j, d) += rng.normal();
        }
    Tensor pert = multi_head_attention(q2, k2, v2, AttentionMask::causal(), 2);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t d = 0; d < h; ++d) CHECK(pert.at(i, d) == base.at(i, d));
}

TEST_CASE("attention: fully-masked row is an error") {
    Tensor q({2, 4}), k({2, 4}), v({2, 4});
    auto vis = std::vector<uint8_t>{1, 1, 0, 0};  // row 1 sees nothing
    CHECK_THROWS_AS(multi_head_attention(q, k, v, AttentionMask::explicit_mask(2, 2, vis), 1),
                    std::invalid_argument);
}

TEST_CASE("transformer block: zero weights degenerate to rms-normed residual") {
    Rng rng(10);
    BlockWeights w = BlockWeights::zeroed(8, 2);
    Tensor x = Tensor::randn({5, 8}, rng);
    Tensor y = transformer_block(x, w, AttentionMask::full());
    Tensor expect = rms_norm(x, w.post_gain);
    CHECK(max_abs_diff(y, expect) == 0.0);
    CHECK(y.shape == x.shape);
}

TEST_CASE("transformer block matches manual sub-op composition") {
    Rng rng(11);
    BlockWeights w = BlockWeights::randomized(8, 2, rng);
    Tensor x = Tensor::randn({4, 8}, rng);
    Tensor got = transformer_block(x, w, AttentionMask::causal());

    Tensor a = rms_norm(x, w.pre_gain);
    Tensor q = matmul(a, w.wq), k = matmul(a, w.wk), v = matmul(a, w.wv);
    Tensor m = multi_head_attention(q, k, v, AttentionMask::causal(), 2);
    Tensor s = x;
    s += matmul(m, w.wo);
    Tensor u = rms_norm(s, w.post_gain);
    Tensor y = u;
    y += matmul(silu(matmul(u, w.ff_in)), w.ff_out);
    CHECK(max_abs_diff(got, y) == 0.0);
}

TEST_CASE("grad_check: quadratic") {
    Tensor p({1});
    p.data[0] = 3.0;
    Tensor analytic({1});
    analytic.data[0] = 6.0;
    double err = grad_check([&] { return p.data[0] * p.data[0]; }, p, analytic, 1e-5);
    CHECK(err < 1e-9);
}

TEST_CASE("grad_check: sum of silu over random input") {
    Rng rng(12);
    Tensor p = Tensor::randn({3, 5}, rng);
    Tensor analytic(p.shape);
    for (size_t i = 0; i < p.data.size(); ++i) analytic.data[i] = silu_grad(p.data[i]);
    double err = grad_check(
        [&] {
            double s = 0.0;
            for (double v : silu(p).data) s += v;
            return s;
        },
        p, analytic, 1e-5);
    CHECK(err <= 1e-6);
}

TEST_CASE("transformer block gradients vs finite differences") {
    Rng rng(13);
    const int64_t h = 8;
    BlockWeights w = BlockWeights::randomized(h, 2, rng);
    Tensor x = Tensor::randn({3, h}, rng);
    // scalar objective: weighted sum of outputs, fixed projection
    Tensor probe = Tensor::randn({3, h}, rng);
    auto objective = [&] {
        Tensor y = transformer_block(x, w, AttentionMask::causal());
        double s = 0.0;
        for (size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * probe.data[i];
        return s;
    };
    BlockCache cache;
    transformer_block(x, w, AttentionMask::causal(), &cache);
    BlockWeights grads = BlockWeights::grads_like(w);
    transformer_block_bwd(cache, w, probe, grads);

    ParamRefs wp, gp;
    append_block_params(wp, "w", w);
    append_block_params(gp, "g", grads);
    double err = grad_check_many(objective, wp, gp, 1e-5);
    CHECK(err <= 1e-4);
}

TEST_CASE("transformer block input gradient vs finite differences") {
    Rng rng(14);
    BlockWeights w = BlockWeights::randomized(8, 2, rng);
    Tensor x = Tensor::randn({3, 8}, rng);
    Tensor probe = Tensor::randn({3, 8}, rng);
    BlockCache cache;
    transformer_block(x, w, AttentionMask::full(), &cache);
    BlockWeights grads = BlockWeights::grads_like(w);
    Tensor dx = transformer_block_bwd(cache, w, probe, grads);
    auto objective = [&] {
        Tensor y = transformer_block(x, w, AttentionMask::full());
        double s = 0.0;
        for (size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * probe.data[i];
        return s;
    };
    double err = grad_check(objective, x, dx, 1e-5);
    CHECK(err <= 1e-4);
}

TEST_CASE("adamw matches an independently coded update on a 2-parameter toy") {
    Tensor p = Tensor::from_rows({{0.5, -0.25}});
    Tensor g = Tensor::from_rows({{0.1, -0.3}});
    AdamW opt;
    opt.lr = 1e-2;
    opt.weight_decay = 0.01;
    ParamRefs pr{{"p", &p}}, gr{{"g", &g}};
    opt.init(pr);

    // independent reference, two steps
    double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {0.5, -0.25};
    for (int t = 1; t <= 2; ++t) {
        for (int i = 0; i < 2; ++i) {
            const double gi = g.data[static_cast<size_t>(i)];
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            const double mh = m[i] / (1.0 - std::pow(0.9, t));
            const double vh = v[i] / (1.0 - std::pow(0.999, t));
            ref[i] -= 1e-2 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * ref[i]);
        }
        opt.step(pr, gr);
    }
    CHECK(std::abs(p.data[0] - ref[0]) < 1e-12);
    CHECK(std::abs(p.data[1] - ref[1]) < 1e-12);
}

TEST_CASE("adamw with zero learning rate leaves parameters bitwise unchanged") {
    Rng rng(15);
    Tensor p = Tensor::randn({4, 4}, rng);
    Tensor before = p;
    Tensor g = Tensor::randn({4, 4}, rng);
    AdamW opt;
    opt.lr = 0.0;
    opt.weight_decay = 0.1;
    ParamRefs pr{{"p", &p}}, gr{{"g", &g}};
    opt.init(pr);
    opt.step(pr, gr);
    CHECK(std::memcmp(p.data.data(), before.data.data(), p.data.size() * sizeof(double)) == 0);
}
