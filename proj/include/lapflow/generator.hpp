#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "lapflow/image.hpp"
#include "lapflow/nn.hpp"
#include "lapflow/tensor.hpp"

namespace lapflow {

struct DiTConfig {
    int layers = 3;        // N_D
    int64_t hidden = 32;   // h_D
    int heads = 4;
    int64_t patch = 2;     // patchification edge, fixed at 2 for this model
    int64_t time_dim = 16; // sinusoidal time embedding width (even)
    int64_t channels = 3;
    int64_t max_latent = 256;

    // Reference full-scale values from the source architecture, recorded as
    // metadata only; toy defaults above are what actually runs.
    static constexpr int kReferenceLayers = 32;
    static constexpr int64_t kReferenceHidden = 4096;

    int64_t token_dim() const { return patch * patch * channels; }

    void validate() const {
        require(layers >= 1 && hidden > 0 && heads > 0 && hidden % heads == 0,
                "dit config: layers/hidden/heads invalid");
        require(patch == 2, "dit config: patch size is fixed at 2");
        require(time_dim > 0 && time_dim % 2 == 0, "dit config: time_dim must be even");
    }
};

struct DiTWeights {
    Tensor patch_embed;  // (4*C, h)
    Tensor pos_emb;      // (max_latent, h) latent-position embeddings
    Tensor seg_emb;      // (2, h): row 0 conditioning span, row 1 latent span
    Tensor time_proj;    // (time_dim, h)
    std::vector<BlockWeights> blocks;
    Tensor head;         // (h, 4*C)

    static DiTWeights sized(const DiTConfig& cfg) {
        DiTWeights w;
        w.patch_embed = Tensor({cfg.token_dim(), cfg.hidden});
        w.pos_emb = Tensor({cfg.max_latent, cfg.hidden});
        w.seg_emb = Tensor({2, cfg.hidden});
        w.time_proj = Tensor({cfg.time_dim, cfg.hidden});
        for (int i = 0; i < cfg.layers; ++i) w.blocks.push_back(BlockWeights::sized(cfg.hidden, cfg.heads));
        w.head = Tensor({cfg.hidden, cfg.token_dim()});
        return w;
    }

    static DiTWeights randomized(const DiTConfig& cfg, Rng& rng) {
        DiTWeights w = sized(cfg);
        const double sp = 1.0 / std::sqrt(static_cast<double>(cfg.token_dim()));
        for (auto& x : w.patch_embed.data) x = sp * rng.normal();
        for (auto& x : w.pos_emb.data) x = 0.02 * rng.normal();
        for (auto& x : w.seg_emb.data) x = 0.02 * rng.normal();
        const double st = 1.0 / std::sqrt(static_cast<double>(cfg.time_dim));
        for (auto& x : w.time_proj.data) x = st * rng.normal();
        for (size_t i = 0; i < w.blocks.size(); ++i)
            w.blocks[i] = BlockWeights::randomized(cfg.hidden, cfg.heads, rng);
        const double sh = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        for (auto& x : w.head.data) x = sh * rng.normal();
        return w;
    }

    ParamRefs params() {
        ParamRefs out;
        out.push_back({"dit.patch_embed", &patch_embed});
        out.push_back({"dit.pos_emb", &pos_emb});
        out.push_back({"dit.seg_emb", &seg_emb});
        out.push_back({"dit.time_proj", &time_proj});
        for (size_t i = 0; i < blocks.size(); ++i)
            append_block_params(out, "dit.block" + std::to_string(i), blocks[i]);
        out.push_back({"dit.head", &head});
        return out;
    }
};

// ---------------------------------------------------------------------------
// Patchification

// Row-major 2x2 patches flattened to tokens of dim 4*channels; within a patch
// the layout is (dy, dx, channel).
inline Tensor patchify(const LatentImage& img, int64_t p = 2) {
    require(img.height % p == 0 && img.width % p == 0, "patchify: dims not divisible by patch");
    auto patches = extract_patches(img, p);
    const int64_t n = static_cast<int64_t>(patches.size());
    const int64_t d = p * p * img.channels;
    Tensor t({n, d});
    for (int64_t i = 0; i < n; ++i)
        std::copy(patches[static_cast<size_t>(i)].begin(), patches[static_cast<size_t>(i)].end(),
                  t.row_ptr(i));
    return t;
}

inline LatentImage unpatchify(const Tensor& tokens, int64_t height, int64_t width, int64_t channels,
                              int64_t p = 2) {
    require(tokens.rank() == 2 && tokens.cols() == p * p * channels, "unpatchify: token dim mismatch");
    require(height % p == 0 && width % p == 0, "unpatchify: dims not divisible by patch");
    const int64_t gy = height / p, gx = width / p;
    require(tokens.rows() == gy * gx, "unpatchify: token count mismatch");
    LatentImage img(height, width, channels);
    for (int64_t py = 0; py < gy; ++py)
        for (int64_t px = 0; px < gx; ++px) {
            const double* row = tokens.row_ptr(py * gx + px);
            size_t i = 0;
            for (int64_t dy = 0; dy < p; ++dy)
                for (int64_t dx = 0; dx < p; ++dx)
                    for (int64_t c = 0; c < channels; ++c)
                        img.at(py * p + dy, px * p + dx, c) = row[i++];
        }
    return img;
}

// ---------------------------------------------------------------------------
// Rectified flow

// Linear interpolant between data (t=0) and noise (t=1); the regression
// target is the constant path velocity x1 - x0.
struct FlowSample {
    Tensor x0, x1;
    double t = 0.0;
    Tensor x_t, v_star;
};

inline FlowSample make_flow_sample(const Tensor& x0, const Tensor& x1, double t) {
    require(x0.same_shape(x1), "flow sample: shape mismatch");
    require(t >= 0.0 && t <= 1.0, "flow sample: t out of [0,1]");
    FlowSample s;
    s.x0 = x0;
    s.x1 = x1;
    s.t = t;
    s.x_t = Tensor(x0.shape);
    s.v_star = Tensor(x0.shape);
    for (size_t i = 0; i < x0.data.size(); ++i) {
        s.x_t.data[i] = (1.0 - t) * x0.data[i] + t * x1.data[i];
        s.v_star.data[i] = x1.data[i] - x0.data[i];
    }
    return s;
}

inline double flow_loss(const Tensor& pred, const Tensor& v_star) {
    require(pred.same_shape(v_star), "flow loss: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - v_star.data[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.data.size());
}

inline Tensor flow_loss_grad(const Tensor& pred, const Tensor& v_star) {
    Tensor g(pred.shape);
    const double scale = 2.0 / static_cast<double>(pred.data.size());
    for (size_t i = 0; i < pred.data.size(); ++i)
        g.data[i] = scale * (pred.data[i] - v_star.data[i]);
    return g;
}

inline Tensor time_embedding(double t, int64_t dim) {
    Tensor e({dim});
    const int64_t half = dim / 2;
    for (int64_t i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
        e.data[static_cast<size_t>(i)] = std::sin(t * freq);
        e.data[static_cast<size_t>(half + i)] = std::cos(t * freq);
    }
    return e;
}

// ---------------------------------------------------------------------------
// Conditioning concat

// Conditioning tokens prepended to latent tokens; segment tags record which
// span each position belongs to (0 = conditioning, 1 = latent).
struct GenInput {
    Tensor tokens;              // (n_cond + n_latent, h)
    std::vector<int> segments;  // per position
    int64_t n_cond = 0;
};

inline GenInput condition_concat(const Tensor& cond, const Tensor& latent) {
    GenInput g;
    if (cond.numel() > 0) {
        require(cond.rank() == 2 && latent.rank() == 2 && cond.cols() == latent.cols(),
                "condition_concat: hidden dims must match");
        g.n_cond = cond.rows();
        g.tokens = Tensor({cond.rows() + latent.rows(), latent.cols()});
        std::copy(cond.data.begin(), cond.data.end(), g.tokens.data.begin());
        std::copy(latent.data.begin(), latent.data.end(), g.tokens.data.begin() + cond.numel());
    } else {
        g.n_cond = 0;
        g.tokens = latent;
    }
    g.segments.assign(static_cast<size_t>(g.tokens.rows()), 1);
    for (int64_t i = 0; i < g.n_cond; ++i) g.segments[static_cast<size_t>(i)] = 0;
    return g;
}

// Elementwise residual injection with prefix alignment: source token i adds to
// target position i; target positions past the source length are unchanged.
inline Tensor hsi_inject(const Tensor& x_d, const Tensor& x_e) {
    require(x_d.rank() == 2 && x_e.rank() == 2 && x_d.cols() == x_e.cols(),
            "hsi_inject: hidden dims must match");
    Tensor out = x_d;
    const int64_t n = std::min(x_d.rows(), x_e.rows());
    for (int64_t i = 0; i < n; ++i) {
        double* o = out.row_ptr(i);
        const double* e = x_e.row_ptr(i);
        for (int64_t d = 0; d < x_d.cols(); ++d) o[d] += e[d];
    }
    return out;
}

// ---------------------------------------------------------------------------
// DiT forward/backward

// Optional per-layer hooks used by the fusion variants. All vectors, when
// present, have one entry per DiT layer.
struct DiTLayerHooks {
    const std::vector<Tensor>* kv_extra_k = nullptr;  // fused encoder keys
    const std::vector<Tensor>* kv_extra_v = nullptr;  // fused encoder values
    const std::vector<Tensor>* residual_add = nullptr;  // post-block prefix additions
};

struct DiTFwdCache {
    Tensor raw_latent;  // (n_l, 4C)
    Tensor te;          // (time_dim)
    std::vector<BlockCache> blocks;
    Tensor final_states;
    int64_t n_cond = 0;
    int64_t n_latent = 0;
};

// cond: (n_c, h) pooled conditioning (may be empty); latent_tokens: (n_l, 4C)
// raw interpolant patches. Full self-attention throughout; sinusoidal time
// embedding is added to latent tokens only, never to conditioning tokens.
// Returns per-latent-token velocity predictions (n_l, 4C).
inline Tensor dit_forward(const Tensor& cond, const Tensor& latent_tokens, double t,
                          const DiTConfig& cfg, const DiTWeights& w,
                          const DiTLayerHooks& hooks = {}, DiTFwdCache* cache = nullptr) {
    require(latent_tokens.rank() == 2 && latent_tokens.cols() == cfg.token_dim(),
            "dit_forward: latent token dim mismatch");
    const int64_t n_l = latent_tokens.rows();
    require(n_l <= cfg.max_latent, "dit_forward: too many latent tokens");
    if (cond.numel() > 0)
        require(cond.rank() == 2 && cond.cols() == cfg.hidden, "dit_forward: conditioning dim mismatch");

    Tensor lat = matmul(latent_tokens, w.patch_embed);
    const Tensor te = time_embedding(t, cfg.time_dim);
    Tensor te_h({cfg.hidden});
    for (int64_t d = 0; d < cfg.hidden; ++d) {
        double s = 0.0;
        for (int64_t i = 0; i < cfg.time_dim; ++i) s += te.data[static_cast<size_t>(i)] * w.time_proj.at(i, d);
        te_h.data[static_cast<size_t>(d)] = s;
    }
    for (int64_t i = 0; i < n_l; ++i) {
        double* row = lat.row_ptr(i);
        const double* pos = w.pos_emb.row_ptr(i);
        const double* seg = w.seg_emb.row_ptr(1);
        for (int64_t d = 0; d < cfg.hidden; ++d) row[d] += pos[d] + seg[d] + te_h.data[static_cast<size_t>(d)];
    }

    Tensor cond_in = cond;
    for (int64_t i = 0; i < cond_in.rows() && cond_in.numel() > 0; ++i) {
        double* row = cond_in.row_ptr(i);
        const double* seg = w.seg_emb.row_ptr(0);
        for (int64_t d = 0; d < cfg.hidden; ++d) row[d] += seg[d];
    }

    GenInput gin = condition_concat(cond_in, lat);
    Tensor x = std::move(gin.tokens);
    const AttentionMask mask = AttentionMask::full();
    if (cache) {
        cache->raw_latent = latent_tokens;
        cache->te = te;
        cache->n_cond = gin.n_cond;
        cache->n_latent = n_l;
        cache->blocks.clear();
    }
    for (int n = 0; n < cfg.layers; ++n) {
        const Tensor* ek = hooks.kv_extra_k ? &(*hooks.kv_extra_k)[static_cast<size_t>(n)] : nullptr;
        const Tensor* ev = hooks.kv_extra_v ? &(*hooks.kv_extra_v)[static_cast<size_t>(n)] : nullptr;
        BlockCache bc;
        x = transformer_block(x, w.blocks[static_cast<size_t>(n)], mask, cache ? &bc : nullptr, ek, ev);
        if (hooks.residual_add) x = hsi_inject(x, (*hooks.residual_add)[static_cast<size_t>(n)]);
        if (cache) cache->blocks.push_back(std::move(bc));
    }
    if (cache) cache->final_states = x;

    Tensor out({n_l, cfg.token_dim()});
    for (int64_t i = 0; i < n_l; ++i) {
        const double* hrow = x.row_ptr(gin.n_cond + i);
        double* orow = out.row_ptr(i);
        for (int64_t j = 0; j < cfg.token_dim(); ++j) {
            double s = 0.0;
            for (int64_t d = 0; d < cfg.hidden; ++d) s += hrow[d] * w.head.at(d, j);
            orow[j] = s;
        }
    }
    return out;
}

// Backward companion. Returns the gradient on the conditioning tokens (n_c, h)
// and, when d_residual_adds is non-null, the per-layer gradients on the
// residual additions (for per-layer adapter training).
inline Tensor dit_backward(const DiTFwdCache& cache, const DiTConfig& cfg, const DiTWeights& w,
                           const Tensor& d_out, DiTWeights& grads,
                           std::vector<Tensor>* d_residual_adds = nullptr) {
    const int64_t n_c = cache.n_cond, n_l = cache.n_latent;
    const int64_t n = n_c + n_l;
    Tensor dx({n, cfg.hidden});
    for (int64_t i = 0; i < n_l; ++i) {
        const double* drow = d_out.row_ptr(i);
        const double* hrow = cache.final_states.row_ptr(n_c + i);
        double* dxr = dx.row_ptr(n_c + i);
        for (int64_t j = 0; j < cfg.token_dim(); ++j) {
            const double dv = drow[j];
            if (dv == 0.0) continue;
            for (int64_t d = 0; d < cfg.hidden; ++d) {
                grads.head.at(d, j) += hrow[d] * dv;
                dxr[d] += w.head.at(d, j) * dv;
            }
        }
    }

    if (d_residual_adds) d_residual_adds->assign(static_cast<size_t>(cfg.layers), Tensor());
    for (int nb = cfg.layers - 1; nb >= 0; --nb) {
        if (d_residual_adds) {
            // the addition is elementwise on a prefix, so its gradient is the
            // current dx restricted to that prefix; the caller knows the span
            (*d_residual_adds)[static_cast<size_t>(nb)] = dx;
        }
        dx = transformer_block_bwd(cache.blocks[static_cast<size_t>(nb)], w.blocks[static_cast<size_t>(nb)],
                                   dx, grads.blocks[static_cast<size_t>(nb)]);
    }

    // embedding-side gradients
    Tensor te_h_grad({cfg.hidden});
    for (int64_t i = 0; i < n_l; ++i) {
        const double* dxr = dx.row_ptr(n_c + i);
        double* gpos = grads.pos_emb.row_ptr(i);
        double* gseg = grads.seg_emb.row_ptr(1);
        for (int64_t d = 0; d < cfg.hidden; ++d) {
            gpos[d] += dxr[d];
            gseg[d] += dxr[d];
            te_h_grad.data[static_cast<size_t>(d)] += dxr[d];
        }
    }
    for (int64_t i = 0; i < cfg.time_dim; ++i) {
        const double tv = cache.te.data[static_cast<size_t>(i)];
        double* g = grads.time_proj.row_ptr(i);
        for (int64_t d = 0; d < cfg.hidden; ++d) g[d] += tv * te_h_grad.data[static_cast<size_t>(d)];
    }
    {
        Tensor dlat({n_l, cfg.hidden});
        std::copy(dx.data.begin() + n_c * cfg.hidden, dx.data.end(), dlat.data.begin());
        matmul_at_b_acc(cache.raw_latent, dlat, grads.patch_embed);
    }

    Tensor d_cond({n_c, cfg.hidden});
    if (n_c > 0) {
        std::copy(dx.data.begin(), dx.data.begin() + n_c * cfg.hidden, d_cond.data.begin());
        double* gseg = grads.seg_emb.row_ptr(0);
        for (int64_t i = 0; i < n_c; ++i) {
            const double* dxr = dx.row_ptr(i);
            for (int64_t d = 0; d < cfg.hidden; ++d) gseg[d] += dxr[d];
        }
    }
    return d_cond;
}

// ---------------------------------------------------------------------------
// Euler sampling

// Integrates dx/dt = velocity from t=1 (noise) down to t=0 (data) with a
// uniform step 1/steps. The velocity callback receives raw latent patch
// tokens and the current time.
inline Tensor euler_sample(const std::function<Tensor(const Tensor&, double)>& velocity,
                           const Tensor& x1_tokens, int steps) {
    require(steps >= 1, "euler_sample: steps must be >= 1");
    Tensor x = x1_tokens;
    const double dt = 1.0 / static_cast<double>(steps);
    for (int i = 0; i < steps; ++i) {
        const double t = 1.0 - static_cast<double>(i) * dt;
        Tensor v = velocity(x, t);
        require(v.same_shape(x), "euler_sample: velocity shape mismatch");
        for (size_t j = 0; j < x.data.size(); ++j) x.data[j] -= dt * v.data[j];
    }
    return x;
}

inline Tensor gaussian_tokens(int64_t rows, int64_t cols, Rng& rng) {
    Tensor t({rows, cols});
    for (auto& v : t.data) v = rng.normal();
    return t;
}

}  // namespace lapflow
