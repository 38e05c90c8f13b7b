#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lapflow/encoder.hpp"
#include "lapflow/generator.hpp"

namespace lapflow {

// ---------------------------------------------------------------------------
// Variants

enum class FusionKind { LastLayer, KVFusion, HSI, LAP };

inline const char* fusion_kind_name(FusionKind k) {
    switch (k) {
        case FusionKind::LastLayer: return "last_layer";
        case FusionKind::KVFusion: return "kv_fusion";
        case FusionKind::HSI: return "hsi";
        case FusionKind::LAP: return "lap";
    }
    return "?";
}

inline FusionKind fusion_kind_from(const std::string& s) {
    if (s == "last_layer") return FusionKind::LastLayer;
    if (s == "kv_fusion") return FusionKind::KVFusion;
    if (s == "hsi") return FusionKind::HSI;
    if (s == "lap") return FusionKind::LAP;
    throw std::invalid_argument("unknown fusion kind: " + s);
}

struct FusionVariant {
    FusionKind kind = FusionKind::LAP;
    int stride = 3;             // encoder layer selection stride (pooled variants)
    bool use_refiner = true;    // bidirectional refiner on the pooled sequence
    bool per_dit_layer = false; // dedicated adapter per DiT layer, injected residually
    // Optional unit-gain RMS passes applied to last-layer features; matches the
    // norm config of a degenerate one-hot LAP for cross-variant checks.
    int ll_rms_passes = 0;
};

// ---------------------------------------------------------------------------
// Pooled conditioning

struct PooledConditioning {
    Tensor tokens;                      // (sl, h_D)
    std::vector<int> source_positions;  // input positions that contributed
};

// c = x_N: the final-layer hidden states, copied out of the stack.
inline Tensor last_layer_extract(const LayerStack& stack) {
    require(!stack.states.empty(), "last_layer_extract: empty stack");
    return stack.states.back();  // stack indices are increasing; back() is the final layer
}

// ---------------------------------------------------------------------------
// Adapter weights

struct AdapterWeights {
    int64_t num_layers = 0;  // L, selected encoder layers
    BlockWeights lap1, lap2;      // layer-axis attention (h_E)
    Tensor layer_emb;             // (L, h_E), added before LAP attention
    Tensor pool_w;                // (L)
    Tensor pool_bias;             // (1)
    BlockWeights refiner1, refiner2;  // sequence-axis attention (h_D)
    Tensor projection;            // (h_E, h_D); empty when h_E == h_D

    bool has_projection() const { return projection.numel() > 0; }

    static AdapterWeights sized(int64_t L, int64_t h_e, int64_t h_d, int lap_heads, int ref_heads) {
        AdapterWeights a;
        a.num_layers = L;
        a.lap1 = BlockWeights::sized(h_e, lap_heads);
        a.lap2 = BlockWeights::sized(h_e, lap_heads);
        a.layer_emb = Tensor({L, h_e});
        a.pool_w = Tensor({L});
        a.pool_bias = Tensor({1});
        a.refiner1 = BlockWeights::sized(h_d, ref_heads);
        a.refiner2 = BlockWeights::sized(h_d, ref_heads);
        if (h_e != h_d) a.projection = Tensor({h_e, h_d});
        return a;
    }

    static AdapterWeights randomized(int64_t L, int64_t h_e, int64_t h_d, int lap_heads,
                                     int ref_heads, Rng& rng) {
        AdapterWeights a = sized(L, h_e, h_d, lap_heads, ref_heads);
        a.lap1 = BlockWeights::randomized(h_e, lap_heads, rng);
        a.lap2 = BlockWeights::randomized(h_e, lap_heads, rng);
        for (auto& x : a.layer_emb.data) x = 0.02 * rng.normal();
        a.pool_w.fill(1.0 / static_cast<double>(L));
        a.pool_bias.fill(0.0);
        a.refiner1 = BlockWeights::randomized(h_d, ref_heads, rng);
        a.refiner2 = BlockWeights::randomized(h_d, ref_heads, rng);
        if (a.has_projection()) {
            const double s = 1.0 / std::sqrt(static_cast<double>(h_e));
            for (auto& x : a.projection.data) x = s * rng.normal();
        }
        return a;
    }

    // Only the tensors the variant actually uses are exposed for training.
    ParamRefs params(const FusionVariant& v, const std::string& prefix) {
        ParamRefs out;
        if (v.kind == FusionKind::LAP) {
            append_block_params(out, prefix + ".lap1", lap1);
            append_block_params(out, prefix + ".lap2", lap2);
            out.push_back({prefix + ".layer_emb", &layer_emb});
            out.push_back({prefix + ".pool_w", &pool_w});
            out.push_back({prefix + ".pool_bias", &pool_bias});
        }
        if (v.use_refiner) {
            append_block_params(out, prefix + ".refiner1", refiner1);
            append_block_params(out, prefix + ".refiner2", refiner2);
        }
        if (has_projection() && v.kind != FusionKind::KVFusion && v.kind != FusionKind::HSI)
            out.push_back({prefix + ".projection", &projection});
        return out;
    }
};

// ---------------------------------------------------------------------------
// LAP ops

// Token-major stack (sl, L, h) of the selected layers with layer-index
// embeddings added per layer row. Without the embeddings the LAP blocks would
// be permutation-equivariant over layers.
inline Tensor lap_stack(const LayerStack& stack, const Tensor& layer_emb) {
    const int64_t L = stack.num_layers();
    require(L >= 1, "lap_stack: at least one layer required");
    require(layer_emb.rank() == 2 && layer_emb.rows() == L && layer_emb.cols() == stack.hidden(),
            "lap_stack: layer embedding shape mismatch");
    const int64_t sl = stack.seq_len(), h = stack.hidden();
    Tensor out({sl, L, h});
    for (int64_t t = 0; t < sl; ++t)
        for (int64_t l = 0; l < L; ++l) {
            double* row = out.data.data() + (t * L + l) * h;
            const double* s = stack.states[static_cast<size_t>(l)].row_ptr(t);
            const double* e = layer_emb.row_ptr(l);
            for (int64_t d = 0; d < h; ++d) row[d] = s[d] + e[d];
        }
    return out;
}

struct LapCache {
    Tensor stacked;                   // (sl, L, h) input
    std::vector<BlockCache> b1, b2;   // per token
    Tensor y;                         // (sl, L, h) after both blocks
    Tensor pooled;                    // (sl, h_E) pre-projection
};

// Two full-self-attention blocks applied over the layer axis independently per
// token, then a learned per-layer weighted sum; optional h_E -> h_D projection.
inline PooledConditioning lap_forward(const Tensor& stacked, const AdapterWeights& w,
                                      LapCache* cache = nullptr) {
    require(stacked.rank() == 3, "lap_forward: (sl, L, h) input required");
    const int64_t sl = stacked.dim(0), L = stacked.dim(1), h = stacked.dim(2);
    require(L == w.pool_w.numel(), "lap_forward: layer axis must match pool weights");
    const AttentionMask full = AttentionMask::full();

    Tensor y({sl, L, h});
    Tensor pooled({sl, h});
    if (cache) {
        cache->stacked = stacked;
        cache->b1.resize(static_cast<size_t>(sl));
        cache->b2.resize(static_cast<size_t>(sl));
    }
    for (int64_t t = 0; t < sl; ++t) {
        Tensor x({L, h});
        std::copy(stacked.data.begin() + t * L * h, stacked.data.begin() + (t + 1) * L * h,
                  x.data.begin());
        Tensor y1 = transformer_block(x, w.lap1, full, cache ? &cache->b1[static_cast<size_t>(t)] : nullptr);
        Tensor y2 = transformer_block(y1, w.lap2, full, cache ? &cache->b2[static_cast<size_t>(t)] : nullptr);
        std::copy(y2.data.begin(), y2.data.end(), y.data.begin() + t * L * h);
        double* pr = pooled.row_ptr(t);
        for (int64_t l = 0; l < L; ++l) {
            const double wl = w.pool_w.data[static_cast<size_t>(l)];
            const double* yr = y2.row_ptr(l);
            for (int64_t d = 0; d < h; ++d) pr[d] += wl * yr[d];
        }
        const double b = w.pool_bias.data[0];
        for (int64_t d = 0; d < h; ++d) pr[d] += b;
    }

    PooledConditioning out;
    out.tokens = w.has_projection() ? matmul(pooled, w.projection) : pooled;
    if (cache) {
        cache->y = std::move(y);
        cache->pooled = std::move(pooled);
    }
    return out;
}

// Backward through pooling and both LAP blocks. Returns gradient on the
// stacked input (layer embeddings are accumulated here; the underlying frozen
// states absorb the rest).
inline Tensor lap_backward(const LapCache& cache, const AdapterWeights& w, const Tensor& d_tokens,
                           AdapterWeights& grads) {
    const int64_t sl = cache.stacked.dim(0), L = cache.stacked.dim(1), h = cache.stacked.dim(2);
    Tensor d_pooled = w.has_projection() ? matmul_a_bt(d_tokens, w.projection) : d_tokens;
    if (w.has_projection()) matmul_at_b_acc(cache.pooled, d_tokens, grads.projection);

    Tensor d_stacked({sl, L, h});
    for (int64_t t = 0; t < sl; ++t) {
        const double* dp = d_pooled.row_ptr(t);
        Tensor dy2({L, h});
        for (int64_t l = 0; l < L; ++l) {
            const double wl = w.pool_w.data[static_cast<size_t>(l)];
            const double* yr = cache.y.data.data() + (t * L + l) * h;
            double* dr = dy2.row_ptr(l);
            double dot = 0.0;
            for (int64_t d = 0; d < h; ++d) {
                dr[d] = wl * dp[d];
                dot += dp[d] * yr[d];
            }
            grads.pool_w.data[static_cast<size_t>(l)] += dot;
        }
        double bsum = 0.0;
        for (int64_t d = 0; d < h; ++d) bsum += dp[d];
        grads.pool_bias.data[0] += bsum;

        Tensor dy1 = transformer_block_bwd(cache.b2[static_cast<size_t>(t)], w.lap2, dy2, grads.lap2);
        Tensor dx = transformer_block_bwd(cache.b1[static_cast<size_t>(t)], w.lap1, dy1, grads.lap1);
        std::copy(dx.data.begin(), dx.data.end(), d_stacked.data.begin() + t * L * h);
        // layer-index embeddings receive the same gradient as the stacked rows
        for (int64_t l = 0; l < L; ++l) {
            double* ge = grads.layer_emb.row_ptr(l);
            const double* dr = dx.row_ptr(l);
            for (int64_t d = 0; d < h; ++d) ge[d] += dr[d];
        }
    }
    return d_stacked;
}

struct RefinerCache {
    BlockCache r1, r2;
};

// Two transformer blocks over the sequence axis with a full bidirectional
// mask; this is the only place right-to-left flow enters the conditioning path.
inline PooledConditioning refine(const PooledConditioning& c, const AdapterWeights& w,
                                 RefinerCache* cache = nullptr) {
    PooledConditioning out;
    out.source_positions = c.source_positions;
    if (c.tokens.numel() == 0) {
        out.tokens = c.tokens;
        return out;
    }
    const AttentionMask full = AttentionMask::full();
    Tensor y1 = transformer_block(c.tokens, w.refiner1, full, cache ? &cache->r1 : nullptr);
    out.tokens = transformer_block(y1, w.refiner2, full, cache ? &cache->r2 : nullptr);
    return out;
}

inline Tensor refine_backward(const RefinerCache& cache, const AdapterWeights& w, const Tensor& dy,
                              AdapterWeights& grads) {
    Tensor d1 = transformer_block_bwd(cache.r2, w.refiner2, dy, grads.refiner2);
    return transformer_block_bwd(cache.r1, w.refiner1, d1, grads.refiner1);
}

// ---------------------------------------------------------------------------
// Key-value fused attention (standalone op)

// Attention over the concatenated key/value sequence: own keys first, encoder
// keys appended with full visibility. With empty encoder keys this is exactly
// plain multi-head attention.
inline Tensor kv_fuse_attention(const Tensor& q_d, const Tensor& k_d, const Tensor& v_d,
                                const Tensor& k_e, const Tensor& v_e, const AttentionMask& mask,
                                int num_heads) {
    require(k_e.numel() == 0 || k_e.cols() == q_d.cols(), "kv_fuse: hidden dims must match");
    require(k_e.rows() == v_e.rows(), "kv_fuse: encoder k/v lengths differ");
    if (k_e.numel() == 0 && k_e.rows() == 0) return multi_head_attention(q_d, k_d, v_d, mask, num_heads);

    const int64_t h = q_d.cols();
    const int64_t n_d = k_d.rows(), n_e = k_e.rows(), n_q = q_d.rows();
    Tensor k({n_d + n_e, h}), v({n_d + n_e, h});
    std::copy(k_d.data.begin(), k_d.data.end(), k.data.begin());
    std::copy(k_e.data.begin(), k_e.data.end(), k.data.begin() + n_d * h);
    std::copy(v_d.data.begin(), v_d.data.end(), v.data.begin());
    std::copy(v_e.data.begin(), v_e.data.end(), v.data.begin() + n_d * h);
    std::vector<uint8_t> vis(static_cast<size_t>(n_q * (n_d + n_e)));
    for (int64_t i = 0; i < n_q; ++i)
        for (int64_t j = 0; j < n_d + n_e; ++j)
            vis[static_cast<size_t>(i * (n_d + n_e) + j)] = (j >= n_d) ? 1 : (mask.at(i, j) ? 1 : 0);
    return multi_head_attention(q_d, k, v, AttentionMask::explicit_mask(n_q, n_d + n_e, std::move(vis)),
                                num_heads);
}

// ---------------------------------------------------------------------------
// Conditioning source

// Everything a fused generator needs from one encoded sequence. Tests build
// these directly to probe degenerate cases (zero states, empty sequences).
struct ConditioningSource {
    LayerStack selected;              // stride-selected, restricted to conditioning positions
    std::vector<int> positions;       // original sequence positions of `selected`
    std::vector<Tensor> fused_k, fused_v;  // per encoder block, full sequence (KVFusion)
    std::vector<Tensor> layer_states;      // x_1..x_N over the full sequence (HSI)
};

// ---------------------------------------------------------------------------
// Fused generator

struct FusedModel {
    EncoderConfig enc_cfg;
    const EncoderWeights* encoder = nullptr;  // frozen, not owned
    DiTConfig dit_cfg;
    DiTWeights dit;
    FusionVariant variant;
    AdapterWeights adapter;
    std::vector<AdapterWeights> layer_adapters;  // per_dit_layer LAP

    int64_t selected_layer_count() const {
        int cnt = 0;
        for (int n = variant.stride; n <= enc_cfg.layers; n += variant.stride) ++cnt;
        if (enc_cfg.layers % variant.stride != 0) ++cnt;  // final layer always included
        return cnt;
    }
};

struct FusedGrads {
    DiTWeights dit;
    AdapterWeights adapter;
    std::vector<AdapterWeights> layer_adapters;
};

inline void check_variant_constraints(const FusionVariant& v, const EncoderConfig& e,
                                      const DiTConfig& d) {
    if (v.kind == FusionKind::KVFusion || v.kind == FusionKind::HSI) {
        require(e.layers == d.layers, "fusion: layer counts must match for kv-fusion/hsi");
        require(e.hidden == d.hidden, "fusion: hidden dims must match for kv-fusion/hsi");
    }
    if (v.kind == FusionKind::KVFusion)
        require(e.heads == d.heads, "fusion: head counts must match for kv-fusion");
    if (v.per_dit_layer) {
        require(v.kind == FusionKind::LAP, "fusion: per-layer adapters are a LAP option");
        require(!v.use_refiner, "fusion: per-layer adapters do not take a refiner");
    }
    if (v.kind == FusionKind::LastLayer || v.kind == FusionKind::LAP)
        require(v.stride >= 1 && v.stride <= e.layers, "fusion: invalid stride");
}

// Builds a fused model with freshly initialized trainable weights around a
// frozen encoder.
inline FusedModel build_fused_generator(const FusionVariant& variant, const EncoderConfig& enc_cfg,
                                        const EncoderWeights& enc, const DiTConfig& dit_cfg,
                                        Rng& rng) {
    check_variant_constraints(variant, enc_cfg, dit_cfg);
    FusedModel m;
    m.enc_cfg = enc_cfg;
    m.encoder = &enc;
    m.dit_cfg = dit_cfg;
    m.variant = variant;
    m.dit = DiTWeights::randomized(dit_cfg, rng);
    const int64_t L = m.selected_layer_count();
    if (variant.per_dit_layer) {
        for (int i = 0; i < dit_cfg.layers; ++i)
            m.layer_adapters.push_back(AdapterWeights::randomized(L, enc_cfg.hidden, dit_cfg.hidden,
                                                                  enc_cfg.heads, dit_cfg.heads, rng));
        m.adapter = AdapterWeights::sized(L, enc_cfg.hidden, dit_cfg.hidden, enc_cfg.heads, dit_cfg.heads);
    } else {
        m.adapter = AdapterWeights::randomized(L, enc_cfg.hidden, dit_cfg.hidden, enc_cfg.heads,
                                               dit_cfg.heads, rng);
    }
    return m;
}

inline ParamRefs trainable_params(FusedModel& m) {
    ParamRefs out = m.dit.params();
    if (m.variant.per_dit_layer) {
        for (size_t i = 0; i < m.layer_adapters.size(); ++i) {
            ParamRefs a = m.layer_adapters[i].params(m.variant, "adapter" + std::to_string(i));
            out.insert(out.end(), a.begin(), a.end());
        }
    } else if (m.variant.kind == FusionKind::LAP || m.variant.kind == FusionKind::LastLayer) {
        ParamRefs a = m.adapter.params(m.variant, "adapter");
        out.insert(out.end(), a.begin(), a.end());
    }
    return out;
}

inline FusedGrads grads_like(const FusedModel& m) {
    FusedGrads g;
    g.dit = DiTWeights::sized(m.dit_cfg);
    const int64_t L = m.selected_layer_count();
    g.adapter = AdapterWeights::sized(L, m.enc_cfg.hidden, m.dit_cfg.hidden, m.enc_cfg.heads,
                                      m.dit_cfg.heads);
    for (size_t i = 0; i < m.layer_adapters.size(); ++i)
        g.layer_adapters.push_back(AdapterWeights::sized(L, m.enc_cfg.hidden, m.dit_cfg.hidden,
                                                         m.enc_cfg.heads, m.dit_cfg.heads));
    return g;
}

// Same order as trainable_params so optimizer slots line up.
inline ParamRefs grad_refs(FusedGrads& g, const FusedModel& m) {
    ParamRefs out = g.dit.params();
    if (m.variant.per_dit_layer) {
        for (size_t i = 0; i < g.layer_adapters.size(); ++i) {
            ParamRefs a = g.layer_adapters[i].params(m.variant, "adapter" + std::to_string(i));
            out.insert(out.end(), a.begin(), a.end());
        }
    } else if (m.variant.kind == FusionKind::LAP || m.variant.kind == FusionKind::LastLayer) {
        ParamRefs a = g.adapter.params(m.variant, "adapter");
        out.insert(out.end(), a.begin(), a.end());
    }
    return out;
}

inline void zero_adapter(AdapterWeights& a) {
    FusionVariant all;
    all.kind = FusionKind::LAP;
    all.use_refiner = true;
    for (auto& p : a.params(all, "a")) p.tensor->fill(0.0);
    if (a.has_projection()) a.projection.fill(0.0);
}

inline void zero_grads(FusedGrads& g) {
    for (auto& p : g.dit.params()) p.tensor->fill(0.0);
    zero_adapter(g.adapter);
    for (auto& la : g.layer_adapters) zero_adapter(la);
}

// Encodes a sequence and assembles whatever the variant needs.
inline ConditioningSource build_source(const FusedModel& m, const TokenSequence& seq,
                                       const std::vector<int>& cond_positions) {
    ConditioningSource src;
    const bool want_kv = m.variant.kind == FusionKind::KVFusion;
    EncodeResult enc = encode(seq, m.enc_cfg, *m.encoder, want_kv);
    if (m.variant.kind == FusionKind::LastLayer || m.variant.kind == FusionKind::LAP) {
        LayerStack sel = select_layers(enc.stack, m.variant.stride);
        src.selected = restrict_positions(sel, cond_positions);
        src.positions = cond_positions;
    } else if (want_kv) {
        src.fused_k = std::move(enc.k_cap);
        src.fused_v = std::move(enc.v_cap);
    } else {  // HSI
        for (int n = 1; n <= m.enc_cfg.layers; ++n) src.layer_states.push_back(enc.stack.by_index(n));
    }
    return src;
}

struct FusedFwdCache {
    LapCache lap;
    RefinerCache refiner;
    std::vector<LapCache> layer_lap;
    std::vector<RmsCache> ll_rms;   // last-layer rms passes
    Tensor ll_in;                   // last-layer features pre-projection
    DiTFwdCache dit;
    Tensor cond;                    // conditioning handed to the DiT (pre segment tag)
};

// Produces the pooled conditioning for LastLayer/LAP variants.
inline Tensor pooled_conditioning(const FusedModel& m, const ConditioningSource& src,
                                  FusedFwdCache* cache) {
    if (m.variant.kind == FusionKind::LAP) {
        Tensor stacked = lap_stack(src.selected, m.adapter.layer_emb);
        PooledConditioning c = lap_forward(stacked, m.adapter, cache ? &cache->lap : nullptr);
        c.source_positions = src.positions;
        if (m.variant.use_refiner) c = refine(c, m.adapter, cache ? &cache->refiner : nullptr);
        return c.tokens;
    }
    // LastLayer
    Tensor c = last_layer_extract(src.selected);
    if (cache) cache->ll_rms.clear();
    if (m.variant.ll_rms_passes > 0) {
        Tensor unit = Tensor::full({c.cols()}, 1.0);
        for (int i = 0; i < m.variant.ll_rms_passes; ++i) {
            RmsCache rc;
            c = rms_norm_fwd(c, unit, cache ? &rc : nullptr);
            if (cache) cache->ll_rms.push_back(std::move(rc));
        }
    }
    if (cache) cache->ll_in = c;
    if (m.adapter.has_projection()) c = matmul(c, m.adapter.projection);
    if (m.variant.use_refiner) {
        PooledConditioning pc;
        pc.tokens = std::move(c);
        pc = refine(pc, m.adapter, cache ? &cache->refiner : nullptr);
        c = std::move(pc.tokens);
    }
    return c;
}

// Full fused forward: conditioning source + noised latent patch tokens ->
// velocity prediction tokens.
inline Tensor fused_forward(const FusedModel& m, const ConditioningSource& src,
                            const Tensor& latent_tokens, double t, FusedFwdCache* cache = nullptr) {
    DiTLayerHooks hooks;
    std::vector<Tensor> adds;
    Tensor cond({0, 0});
    switch (m.variant.kind) {
        case FusionKind::LastLayer:
        case FusionKind::LAP:
            if (m.variant.per_dit_layer) {
                if (cache) cache->layer_lap.resize(m.layer_adapters.size());
                for (size_t n = 0; n < m.layer_adapters.size(); ++n) {
                    Tensor stacked = lap_stack(src.selected, m.layer_adapters[n].layer_emb);
                    PooledConditioning c =
                        lap_forward(stacked, m.layer_adapters[n], cache ? &cache->layer_lap[n] : nullptr);
                    adds.push_back(std::move(c.tokens));
                }
                hooks.residual_add = &adds;
            } else {
                cond = pooled_conditioning(m, src, cache);
            }
            break;
        case FusionKind::KVFusion: {
            require(src.fused_k.size() == static_cast<size_t>(m.dit_cfg.layers),
                    "fused_forward: kv capture must cover every layer");
            hooks.kv_extra_k = &src.fused_k;
            hooks.kv_extra_v = &src.fused_v;
            break;
        }
        case FusionKind::HSI: {
            require(src.layer_states.size() == static_cast<size_t>(m.dit_cfg.layers),
                    "fused_forward: hsi states must cover every layer");
            hooks.residual_add = &src.layer_states;
            break;
        }
    }
    if (cache) cache->cond = cond;
    return dit_forward(cond, latent_tokens, t, m.dit_cfg, m.dit, hooks, cache ? &cache->dit : nullptr);
}

// Backward for all trainable paths of the variant. Gradients are accumulated
// into `g` (caller zeroes between steps).
inline void fused_backward(const FusedModel& m, const ConditioningSource& src,
                           const FusedFwdCache& cache, const Tensor& d_out, FusedGrads& g) {
    std::vector<Tensor> d_adds;
    const bool want_adds = m.variant.per_dit_layer;
    Tensor d_cond = dit_backward(cache.dit, m.dit_cfg, m.dit, d_out, g.dit,
                                 want_adds ? &d_adds : nullptr);

    if (m.variant.per_dit_layer) {
        const int64_t n_mask = src.selected.seq_len();
        for (size_t n = 0; n < m.layer_adapters.size(); ++n) {
            // the injected tokens touched the first min(n_mask, seq) positions
            const Tensor& dfull = d_adds[n];
            const int64_t rows = std::min<int64_t>(n_mask, dfull.rows());
            Tensor dtok({n_mask, m.dit_cfg.hidden});
            for (int64_t i = 0; i < rows; ++i)
                std::copy(dfull.row_ptr(i), dfull.row_ptr(i) + m.dit_cfg.hidden, dtok.row_ptr(i));
            lap_backward(cache.layer_lap[n], m.layer_adapters[n], dtok, g.layer_adapters[n]);
        }
        return;
    }
    if (m.variant.kind == FusionKind::KVFusion || m.variant.kind == FusionKind::HSI) return;
    if (d_cond.numel() == 0) return;

    Tensor d = d_cond;
    if (m.variant.use_refiner) d = refine_backward(cache.refiner, m.adapter, d, g.adapter);
    if (m.variant.kind == FusionKind::LAP) {
        lap_backward(cache.lap, m.adapter, d, g.adapter);
    } else {
        if (m.adapter.has_projection()) {
            matmul_at_b_acc(cache.ll_in, d, g.adapter.projection);
        }
        // remaining path is frozen features (plus non-trainable unit-gain norms)
    }
}

// Deterministic Euler sampling of one image.
inline LatentImage fused_sample(const FusedModel& m, const ConditioningSource& src, int64_t height,
                                int64_t width, int steps, Rng& rng) {
    const int64_t p = m.dit_cfg.patch;
    require(height % p == 0 && width % p == 0, "fused_sample: dims not divisible by patch");
    const int64_t n_tokens = (height / p) * (width / p);
    Tensor x1 = gaussian_tokens(n_tokens, m.dit_cfg.token_dim(), rng);
    Tensor x0 = euler_sample(
        [&](const Tensor& x, double t) { return fused_forward(m, src, x, t); }, x1, steps);
    LatentImage img = unpatchify(x0, height, width, m.dit_cfg.channels, p);
    img.clamp();
    return img;
}

}  // namespace lapflow
