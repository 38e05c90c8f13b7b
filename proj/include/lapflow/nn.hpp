#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lapflow/tensor.hpp"

namespace lapflow {

inline int64_t ff_inner_dim(int64_t hidden) {
    // expand/contract factor 1.3 on the hidden dimension
    return static_cast<int64_t>(std::ceil(1.3 * static_cast<double>(hidden)));
}

// One transformer block: q/k/v/o projections, RMS norm before and after
// self-attention, feed-forward with SiLU. The same struct doubles as the
// gradient accumulator for the block.
struct BlockWeights {
    int64_t hidden = 0;
    int num_heads = 1;
    Tensor wq, wk, wv, wo;        // (h, h)
    Tensor pre_gain, post_gain;   // (h)
    Tensor ff_in, ff_out;         // (h, ff), (ff, h)

    static BlockWeights sized(int64_t h, int heads) {
        require(h > 0 && heads > 0 && h % heads == 0, "block: hidden must divide by heads");
        BlockWeights b;
        b.hidden = h;
        b.num_heads = heads;
        const int64_t ff = ff_inner_dim(h);
        b.wq = Tensor({h, h});
        b.wk = Tensor({h, h});
        b.wv = Tensor({h, h});
        b.wo = Tensor({h, h});
        b.pre_gain = Tensor({h});
        b.post_gain = Tensor({h});
        b.ff_in = Tensor({h, ff});
        b.ff_out = Tensor({ff, h});
        return b;
    }

    static BlockWeights randomized(int64_t h, int heads, Rng& rng) {
        BlockWeights b = sized(h, heads);
        const double s = 1.0 / std::sqrt(static_cast<double>(h));
        for (Tensor* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ff_in})
            for (auto& x : t->data) x = s * rng.normal();
        const double so = 1.0 / std::sqrt(static_cast<double>(ff_inner_dim(h)));
        for (auto& x : b.ff_out.data) x = so * rng.normal();
        b.pre_gain.fill(1.0);
        b.post_gain.fill(1.0);
        return b;
    }

    // Zero projections and feed-forward, unit gains: the block degenerates to
    // rms-normed identity on the residual path.
    static BlockWeights zeroed(int64_t h, int heads) {
        BlockWeights b = sized(h, heads);
        b.pre_gain.fill(1.0);
        b.post_gain.fill(1.0);
        return b;
    }

    static BlockWeights grads_like(const BlockWeights& w) { return sized(w.hidden, w.num_heads); }
};

struct ParamRef {
    std::string name;
    Tensor* tensor;
};
using ParamRefs = std::vector<ParamRef>;

inline void append_block_params(ParamRefs& out, const std::string& prefix, BlockWeights& b) {
    out.push_back({prefix + ".wq", &b.wq});
    out.push_back({prefix + ".wk", &b.wk});
    out.push_back({prefix + ".wv", &b.wv});
    out.push_back({prefix + ".wo", &b.wo});
    out.push_back({prefix + ".pre_gain", &b.pre_gain});
    out.push_back({prefix + ".post_gain", &b.post_gain});
    out.push_back({prefix + ".ff_in", &b.ff_in});
    out.push_back({prefix + ".ff_out", &b.ff_out});
}

// ---------------------------------------------------------------------------
// RMS norm with cache

struct RmsCache {
    Tensor x;
    std::vector<double> inv;  // per-row 1/sqrt(mean(x^2)+eps)
};

inline Tensor rms_norm_fwd(const Tensor& x, const Tensor& gain, RmsCache* cache = nullptr) {
    const int64_t w = x.shape.back();
    require(gain.numel() == w, "rms_norm: gain length must equal last dimension");
    Tensor y = x;
    const int64_t nrows = x.numel() / w;
    std::vector<double> inv(static_cast<size_t>(nrows));
    for (int64_t r = 0; r < nrows; ++r) {
        double* row = y.data.data() + r * w;
        double ms = 0.0;
        for (int64_t j = 0; j < w; ++j) ms += row[j] * row[j];
        ms /= static_cast<double>(w);
        const double iv = 1.0 / std::sqrt(ms + kRmsNormEps);
        inv[static_cast<size_t>(r)] = iv;
        for (int64_t j = 0; j < w; ++j) row[j] = gain.data[static_cast<size_t>(j)] * row[j] * iv;
    }
    if (cache) {
        cache->x = x;
        cache->inv = std::move(inv);
    }
    return y;
}

inline Tensor rms_norm_bwd(const RmsCache& cache, const Tensor& gain, const Tensor& dy, Tensor& dgain) {
    const int64_t w = cache.x.shape.back();
    const int64_t nrows = cache.x.numel() / w;
    Tensor dx(cache.x.shape);
    for (int64_t r = 0; r < nrows; ++r) {
        const double* xr = cache.x.data.data() + r * w;
        const double* dyr = dy.data.data() + r * w;
        double* dxr = dx.data.data() + r * w;
        const double iv = cache.inv[static_cast<size_t>(r)];
        double dot = 0.0;
        for (int64_t j = 0; j < w; ++j) {
            dgain.data[static_cast<size_t>(j)] += dyr[j] * xr[j] * iv;
            dot += dyr[j] * gain.data[static_cast<size_t>(j)] * xr[j];
        }
        const double c = iv * iv * iv * dot / static_cast<double>(w);
        for (int64_t j = 0; j < w; ++j)
            dxr[j] = iv * gain.data[static_cast<size_t>(j)] * dyr[j] - c * xr[j];
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention

struct AttentionCache {
    Tensor q, k, v;                  // projected inputs (sl, h)
    std::vector<Tensor> probs;       // per head (sl_q, sl_k)
};

// q (sl_q, h), k/v (sl_k, h). Masked positions get -inf before the softmax;
// the masked probabilities are exactly zero, so outputs at position i are
// bitwise invariant to what sits behind the mask.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const AttentionMask& mask, int num_heads,
                                   AttentionCache* cache = nullptr) {
    require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: rank-2 inputs required");
    const int64_t h = q.cols();
    require(k.cols() == h && v.cols() == h, "attention: hidden dims must match");
    require(k.rows() == v.rows(), "attention: k/v sequence lengths must match");
    require(num_heads > 0 && h % num_heads == 0, "attention: hidden must divide by heads");
    const int64_t sl_q = q.rows(), sl_k = k.rows();
    const int64_t dh = h / num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double neg_inf = -std::numeric_limits<double>::infinity();

    Tensor out({sl_q, h});
    std::vector<Tensor> probs(static_cast<size_t>(num_heads));
    for (int hd = 0; hd < num_heads; ++hd) {
        Tensor p({sl_q, sl_k});
        for (int64_t i = 0; i < sl_q; ++i) {
            const double* qi = q.row_ptr(i) + hd * dh;
            double* pi = p.row_ptr(i);
            double mx = neg_inf;
            for (int64_t j = 0; j < sl_k; ++j) {
                if (!mask.at(i, j)) {
                    pi[j] = neg_inf;
                    continue;
                }
                const double* kj = k.row_ptr(j) + hd * dh;
                double s = 0.0;
                for (int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                pi[j] = s * scale;
                mx = std::max(mx, pi[j]);
            }
            require(mx != neg_inf, "attention: fully-masked row");
            double sum = 0.0;
            for (int64_t j = 0; j < sl_k; ++j) {
                pi[j] = std::exp(pi[j] - mx);
                sum += pi[j];
            }
            double* oi = out.row_ptr(i) + hd * dh;
            for (int64_t j = 0; j < sl_k; ++j) {
                pi[j] /= sum;
                if (pi[j] == 0.0) continue;
                const double* vj = v.row_ptr(j) + hd * dh;
                for (int64_t d = 0; d < dh; ++d) oi[d] += pi[j] * vj[d];
            }
        }
        probs[static_cast<size_t>(hd)] = std::move(p);
    }
    if (cache) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->probs = std::move(probs);
    }
    return out;
}

inline void multi_head_attention_bwd(const AttentionCache& cache, int num_heads, const Tensor& dout,
                                     Tensor& dq, Tensor& dk, Tensor& dv) {
    const int64_t h = cache.q.cols();
    const int64_t sl_q = cache.q.rows(), sl_k = cache.k.rows();
    const int64_t dh = h / num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    dq = Tensor({sl_q, h});
    dk = Tensor({sl_k, h});
    dv = Tensor({sl_k, h});
    for (int hd = 0; hd < num_heads; ++hd) {
        const Tensor& p = cache.probs[static_cast<size_t>(hd)];
        for (int64_t i = 0; i < sl_q; ++i) {
            const double* pi = p.row_ptr(i);
            const double* doi = dout.row_ptr(i) + hd * dh;
            // dP and the softmax Jacobian contraction, row by row
            double row_dot = 0.0;
            std::vector<double> dp(static_cast<size_t>(sl_k));
            for (int64_t j = 0; j < sl_k; ++j) {
                if (pi[j] == 0.0) {
                    dp[static_cast<size_t>(j)] = 0.0;
                    continue;
                }
                const double* vj = cache.v.row_ptr(j) + hd * dh;
                double s = 0.0;
                for (int64_t d = 0; d < dh; ++d) s += doi[d] * vj[d];
                dp[static_cast<size_t>(j)] = s;
                row_dot += pi[j] * s;
                // dv accumulation
                double* dvj = dv.row_ptr(j) + hd * dh;
                for (int64_t d = 0; d < dh; ++d) dvj[d] += pi[j] * doi[d];
            }
            const double* qi = cache.q.row_ptr(i) + hd * dh;
            double* dqi = dq.row_ptr(i) + hd * dh;
            for (int64_t j = 0; j < sl_k; ++j) {
                if (pi[j] == 0.0) continue;
                const double ds = pi[j] * (dp[static_cast<size_t>(j)] - row_dot) * scale;
                const double* kj = cache.k.row_ptr(j) + hd * dh;
                double* dkj = dk.row_ptr(j) + hd * dh;
                for (int64_t d = 0; d < dh; ++d) {
                    dqi[d] += ds * kj[d];
                    dkj[d] += ds * qi[d];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Transformer block

struct BlockCache {
    RmsCache pre, post;
    Tensor a;              // pre-normed input
    AttentionCache attn;   // holds projected q/k/v (with any fused extras appended)
    Tensor m;              // concatenated head outputs
    Tensor s;              // x + attn residual
    Tensor u;              // post-norm output
    Tensor f1;             // ff pre-activation
    Tensor f2;             // silu(f1)
    int64_t n_own_kv = 0;  // rows of k/v belonging to this block (rest are fused)
};

// y = post_norm(x + Attn(pre_norm(x))) + FF(post_norm(...)). When k_extra/v_extra
// are given, their rows are appended to this block's keys and values and every
// query may attend to them (layerwise key-value fusion).
inline Tensor transformer_block(const Tensor& x, const BlockWeights& w, const AttentionMask& mask,
                                BlockCache* cache = nullptr,
                                const Tensor* k_extra = nullptr, const Tensor* v_extra = nullptr) {
    require(x.rank() == 2 && x.cols() == w.hidden, "block: input hidden dim mismatch");
    const int64_t sl = x.rows(), h = w.hidden;

    RmsCache pre_cache;
    Tensor a = rms_norm_fwd(x, w.pre_gain, cache ? &pre_cache : nullptr);
    Tensor q = matmul(a, w.wq);
    Tensor k = matmul(a, w.wk);
    Tensor v = matmul(a, w.wv);

    const int64_t n_own = k.rows();
    AttentionMask attn_mask = mask;
    if (k_extra != nullptr) {
        require(v_extra != nullptr && k_extra->rows() == v_extra->rows(),
                "block: fused k/v row mismatch");
        require(k_extra->cols() == h && v_extra->cols() == h, "block: fused k/v dim mismatch");
        const int64_t n_ext = k_extra->rows();
        Tensor k2({n_own + n_ext, h}), v2({n_own + n_ext, h});
        std::copy(k.data.begin(), k.data.end(), k2.data.begin());
        std::copy(k_extra->data.begin(), k_extra->data.end(), k2.data.begin() + n_own * h);
        std::copy(v.data.begin(), v.data.end(), v2.data.begin());
        std::copy(v_extra->data.begin(), v_extra->data.end(), v2.data.begin() + n_own * h);
        k = std::move(k2);
        v = std::move(v2);
        // own-sequence mask extended with full visibility onto the fused rows
        std::vector<uint8_t> vis(static_cast<size_t>(sl * (n_own + n_ext)));
        for (int64_t i = 0; i < sl; ++i)
            for (int64_t j = 0; j < n_own + n_ext; ++j)
                vis[static_cast<size_t>(i * (n_own + n_ext) + j)] =
                    (j >= n_own) ? 1 : (mask.at(i, j) ? 1 : 0);
        attn_mask = AttentionMask::explicit_mask(sl, n_own + n_ext, std::move(vis));
    }

    AttentionCache attn_cache;
    Tensor m = multi_head_attention(q, k, v, attn_mask, w.num_heads, cache ? &attn_cache : nullptr);
    Tensor o = matmul(m, w.wo);

    Tensor s = x;
    s += o;
    RmsCache post_cache;
    Tensor u = rms_norm_fwd(s, w.post_gain, cache ? &post_cache : nullptr);

    Tensor f1 = matmul(u, w.ff_in);
    Tensor f2 = silu(f1);
    Tensor y = u;
    Tensor ff = matmul(f2, w.ff_out);
    y += ff;

    if (cache) {
        cache->pre = std::move(pre_cache);
        cache->post = std::move(post_cache);
        cache->a = std::move(a);
        cache->attn = std::move(attn_cache);
        cache->m = std::move(m);
        cache->s = std::move(s);
        cache->u = std::move(u);
        cache->f1 = std::move(f1);
        cache->f2 = std::move(f2);
        cache->n_own_kv = n_own;
    }
    return y;
}

// Returns dx; accumulates parameter gradients into `grads`. Gradients onto any
// fused (extra) key/value rows are written to dk_extra/dv_extra when provided,
// otherwise dropped (fused rows come from a frozen encoder).
inline Tensor transformer_block_bwd(const BlockCache& cache, const BlockWeights& w, const Tensor& dy,
                                    BlockWeights& grads,
                                    Tensor* dk_extra = nullptr, Tensor* dv_extra = nullptr) {
    // FF branch
    Tensor df2 = matmul_a_bt(dy, w.ff_out);           // (sl, ff)
    matmul_at_b_acc(cache.f2, dy, grads.ff_out);
    Tensor df1 = df2;
    for (size_t i = 0; i < df1.data.size(); ++i) df1.data[i] *= silu_grad(cache.f1.data[i]);
    matmul_at_b_acc(cache.u, df1, grads.ff_in);
    Tensor du = dy;
    {
        Tensor t = matmul_a_bt(df1, w.ff_in);
        du += t;
    }

    Tensor ds = rms_norm_bwd(cache.post, w.post_gain, du, grads.post_gain);

    // attention branch
    Tensor dm = matmul_a_bt(ds, w.wo);
    matmul_at_b_acc(cache.m, ds, grads.wo);
    Tensor dq, dk, dv;
    multi_head_attention_bwd(cache.attn, w.num_heads, dm, dq, dk, dv);

    const int64_t n_own = cache.n_own_kv;
    const int64_t h = w.hidden;
    if (dk.rows() > n_own) {
        if (dk_extra) {
            *dk_extra = Tensor({dk.rows() - n_own, h});
            *dv_extra = Tensor({dk.rows() - n_own, h});
            std::copy(dk.data.begin() + n_own * h, dk.data.end(), dk_extra->data.begin());
            std::copy(dv.data.begin() + n_own * h, dv.data.end(), dv_extra->data.begin());
        }
        Tensor dk_own({n_own, h}), dv_own({n_own, h});
        std::copy(dk.data.begin(), dk.data.begin() + n_own * h, dk_own.data.begin());
        std::copy(dv.data.begin(), dv.data.begin() + n_own * h, dv_own.data.begin());
        dk = std::move(dk_own);
        dv = std::move(dv_own);
    }

    matmul_at_b_acc(cache.a, dq, grads.wq);
    matmul_at_b_acc(cache.a, dk, grads.wk);
    matmul_at_b_acc(cache.a, dv, grads.wv);
    Tensor da = matmul_a_bt(dq, w.wq);
    {
        Tensor t = matmul_a_bt(dk, w.wk);
        da += t;
        t = matmul_a_bt(dv, w.wv);
        da += t;
    }

    Tensor dx = rms_norm_bwd(cache.pre, w.pre_gain, da, grads.pre_gain);
    dx += ds;  // residual path
    return dx;
}

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay)

struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int64_t step_count = 0;
    std::vector<std::vector<double>> m, v;

    void init(const ParamRefs& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.tensor->data.size(), 0.0);
            v.emplace_back(p.tensor->data.size(), 0.0);
        }
        step_count = 0;
    }

    void step(const ParamRefs& params, const ParamRefs& grads) {
        require(params.size() == grads.size() && params.size() == m.size(),
                "adamw: parameter/gradient list mismatch");
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (size_t pi = 0; pi < params.size(); ++pi) {
            auto& pd = params[pi].tensor->data;
            const auto& gd = grads[pi].tensor->data;
            require(pd.size() == gd.size(), "adamw: gradient shape mismatch");
            auto& mi = m[pi];
            auto& vi = v[pi];
            for (size_t j = 0; j < pd.size(); ++j) {
                mi[j] = beta1 * mi[j] + (1.0 - beta1) * gd[j];
                vi[j] = beta2 * vi[j] + (1.0 - beta2) * gd[j] * gd[j];
                const double mh = mi[j] / bc1;
                const double vh = vi[j] / bc2;
                pd[j] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * pd[j]);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle

// Central differences of f around the current parameter values, compared to
// the supplied analytic gradient. Returns max over parameters of
// |analytic - numeric| / max(1, |analytic|). f is evaluated with the tensor
// temporarily perturbed in place.
inline double grad_check(const std::function<double()>& f, Tensor& params, const Tensor& analytic,
                         double eps = 1e-5) {
    require(params.same_shape(analytic), "grad_check: gradient shape mismatch");
    require(eps > 0, "grad_check: eps must be positive");
    double worst = 0.0;
    for (size_t i = 0; i < params.data.size(); ++i) {
        const double keep = params.data[i];
        params.data[i] = keep + eps;
        const double fp = f();
        params.data[i] = keep - eps;
        const double fm = f();
        params.data[i] = keep;
        require_io(std::isfinite(fp) && std::isfinite(fm), "grad_check: non-finite objective");
        const double numeric = (fp - fm) / (2.0 * eps);
        const double rel = std::abs(analytic.data[i] - numeric) /
                           std::max(1.0, std::abs(analytic.data[i]));
        worst = std::max(worst, rel);
    }
    return worst;
}

inline double grad_check_many(const std::function<double()>& f, const ParamRefs& params,
                              const ParamRefs& analytic, double eps = 1e-5) {
    require(params.size() == analytic.size(), "grad_check_many: list size mismatch");
    double worst = 0.0;
    for (size_t i = 0; i < params.size(); ++i)
        worst = std::max(worst, grad_check(f, *params[i].tensor, *analytic[i].tensor, eps));
    return worst;
}

}  // namespace lapflow
