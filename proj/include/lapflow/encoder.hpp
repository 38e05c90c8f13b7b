#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "lapflow/image.hpp"
#include "lapflow/nn.hpp"
#include "lapflow/tensor.hpp"

namespace lapflow {

// ---------------------------------------------------------------------------
// Vocabulary: character-level toy alphabet plus chat/image marker specials.

struct Vocabulary {
    int v_text = 27;  // 'a'..'z' and space

    int bos() const { return v_text + 0; }
    int eos() const { return v_text + 1; }
    int sys_open() const { return v_text + 2; }
    int sys_close() const { return v_text + 3; }
    int usr_open() const { return v_text + 4; }
    int usr_close() const { return v_text + 5; }
    int asst_open() const { return v_text + 6; }
    int img_patch_mark() const { return v_text + 7; }
    int img_thumb_mark() const { return v_text + 8; }
    int total() const { return v_text + 9; }

    bool in_alphabet(char c) const { return (c >= 'a' && c <= 'z') || c == ' '; }

    int id_of(char c) const {
        require(in_alphabet(c), std::string("tokenize: character out of toy alphabet: '") + c + "'");
        return c == ' ' ? 26 : c - 'a';
    }

    char char_of(int id) const {
        require(id >= 0 && id < v_text, "detokenize: id out of text range");
        return id == 26 ? ' ' : static_cast<char>('a' + id);
    }
};

inline std::vector<int> tokenize_text(const std::string& s, const Vocabulary& vocab) {
    std::vector<int> ids;
    ids.reserve(s.size());
    for (char c : s) ids.push_back(vocab.id_of(c));
    return ids;
}

inline std::string detokenize_text(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string s;
    s.reserve(ids.size());
    for (int id : ids) s.push_back(vocab.char_of(id));
    return s;
}

// ---------------------------------------------------------------------------
// Token sequences

enum class Modality { Text, ImagePatch, ImageThumb };
enum class Role { System, User, Rewritten, Image };

struct TokenEntry {
    int token_id = -1;              // >= 0 for discrete tokens
    std::vector<double> embedding;  // continuous patch input when token_id < 0
    Modality modality = Modality::Text;
    Role role = Role::User;
    int tile_index = -1;            // 0..num_tiles for image entries (num_tiles = thumbnail)

    static TokenEntry text(int id, Role r) {
        TokenEntry e;
        e.token_id = id;
        e.modality = Modality::Text;
        e.role = r;
        return e;
    }
    static TokenEntry patch(std::vector<double> emb, int tile, Modality m) {
        TokenEntry e;
        e.embedding = std::move(emb);
        e.modality = m;
        e.role = Role::Image;
        e.tile_index = tile;
        return e;
    }
};

struct TokenSequence {
    std::vector<TokenEntry> entries;

    int64_t size() const { return static_cast<int64_t>(entries.size()); }
    void push_text(int id, Role r) { entries.push_back(TokenEntry::text(id, r)); }
};

// ---------------------------------------------------------------------------
// Configuration and weights

struct EncoderConfig {
    int layers = 6;        // N_E
    int64_t hidden = 48;   // h_E
    int heads = 4;
    int v_text = 27;
    int64_t patch = 4;     // encoder patch edge (pixels)
    int64_t tile = 8;      // tile edge (pixels)
    int64_t channels = 3;
    int max_tiles = 10;
    int64_t max_seq = 160;

    int64_t patch_dim() const { return patch * patch * channels; }

    // Training-grade validation; verification harnesses may build smaller
    // encoders directly.
    void validate(int downstream_stride) const {
        require(layers >= 4, "encoder config: layer count must be >= 4");
        require(downstream_stride >= 1 && layers % downstream_stride == 0,
                "encoder config: layer count must divide by the downstream stride");
        require(hidden > 0 && heads > 0 && hidden % heads == 0, "encoder config: hidden/heads invalid");
    }
};

struct EncoderWeights {
    Tensor tok_emb;      // (V_total, h)
    Tensor pos_emb;      // (max_seq, h)
    Tensor patch_embed;  // (patch_dim, h)
    std::vector<BlockWeights> blocks;
    Tensor lm_head;      // (h, V_total)
    Tensor patch_head;   // (h, patch_dim), next-patch regression for pretraining

    static EncoderWeights sized(const EncoderConfig& cfg) {
        Vocabulary v;
        v.v_text = cfg.v_text;
        EncoderWeights w;
        w.tok_emb = Tensor({v.total(), cfg.hidden});
        w.pos_emb = Tensor({cfg.max_seq, cfg.hidden});
        w.patch_embed = Tensor({cfg.patch_dim(), cfg.hidden});
        for (int i = 0; i < cfg.layers; ++i) w.blocks.push_back(BlockWeights::sized(cfg.hidden, cfg.heads));
        w.lm_head = Tensor({cfg.hidden, v.total()});
        w.patch_head = Tensor({cfg.hidden, cfg.patch_dim()});
        return w;
    }

    static EncoderWeights randomized(const EncoderConfig& cfg, Rng& rng) {
        EncoderWeights w = sized(cfg);
        for (auto& x : w.tok_emb.data) x = 0.02 * rng.normal();
        for (auto& x : w.pos_emb.data) x = 0.02 * rng.normal();
        const double sp = 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim()));
        for (auto& x : w.patch_embed.data) x = sp * rng.normal();
        const double sh = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        for (auto& x : w.lm_head.data) x = sh * rng.normal();
        for (auto& x : w.patch_head.data) x = sh * rng.normal();
        for (size_t i = 0; i < w.blocks.size(); ++i)
            w.blocks[i] = BlockWeights::randomized(cfg.hidden, cfg.heads, rng);
        return w;
    }

    ParamRefs params() {
        ParamRefs out;
        out.push_back({"enc.tok_emb", &tok_emb});
        out.push_back({"enc.pos_emb", &pos_emb});
        out.push_back({"enc.patch_embed", &patch_embed});
        for (size_t i = 0; i < blocks.size(); ++i)
            append_block_params(out, "enc.block" + std::to_string(i), blocks[i]);
        out.push_back({"enc.lm_head", &lm_head});
        out.push_back({"enc.patch_head", &patch_head});
        return out;
    }

    // Frozen-contract checksum over all weight bytes.
    uint64_t checksum() const {
        uint64_t h = 1469598103934665603ull;
        auto fold = [&h](const Tensor& t) { h = fnv1a(t.data.data(), t.data.size() * sizeof(double), h); };
        fold(tok_emb);
        fold(pos_emb);
        fold(patch_embed);
        for (const auto& b : blocks) {
            fold(b.wq); fold(b.wk); fold(b.wv); fold(b.wo);
            fold(b.pre_gain); fold(b.post_gain);
            fold(b.ff_in); fold(b.ff_out);
        }
        fold(lm_head);
        fold(patch_head);
        return h;
    }
};

// ---------------------------------------------------------------------------
// Layer stacks

// Residual-stream states for a selected set of layers. Index 0 is the
// embedding output; index n is the output of block n.
struct LayerStack {
    std::vector<int> layer_indices;
    std::vector<Tensor> states;  // each (sl, h)

    int64_t num_layers() const { return static_cast<int64_t>(states.size()); }
    int64_t seq_len() const { return states.empty() ? 0 : states[0].rows(); }
    int64_t hidden() const { return states.empty() ? 0 : states[0].cols(); }
    int max_index() const { return layer_indices.empty() ? -1 : layer_indices.back(); }

    const Tensor& by_index(int n) const {
        for (size_t i = 0; i < layer_indices.size(); ++i)
            if (layer_indices[i] == n) return states[i];
        throw std::invalid_argument("layer stack: layer " + std::to_string(n) + " not present");
    }
};

// Keeps layer indices {stride, 2*stride, ...} up to the final layer, which is
// always included.
inline LayerStack select_layers(const LayerStack& stack, int stride) {
    require(stride >= 1, "select_layers: stride must be >= 1");
    const int n_max = stack.max_index();
    require(stride <= n_max, "select_layers: stride exceeds layer count");
    std::vector<int> want;
    for (int n = stride; n <= n_max; n += stride) want.push_back(n);
    if (want.empty() || want.back() != n_max) want.push_back(n_max);
    LayerStack out;
    for (int n : want) {
        out.layer_indices.push_back(n);
        out.states.push_back(stack.by_index(n));
    }
    return out;
}

// Restriction to a position subset, order-preserving.
inline LayerStack restrict_positions(const LayerStack& stack, const std::vector<int>& positions) {
    LayerStack out;
    out.layer_indices = stack.layer_indices;
    for (const Tensor& s : stack.states) {
        Tensor r({static_cast<int64_t>(positions.size()), s.cols()});
        for (size_t i = 0; i < positions.size(); ++i) {
            require(positions[i] >= 0 && positions[i] < s.rows(), "restrict: position out of range");
            std::copy(s.row_ptr(positions[i]), s.row_ptr(positions[i]) + s.cols(), r.row_ptr(static_cast<int64_t>(i)));
        }
        out.states.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Image tiling

struct TileSet {
    int num_tiles = 0;
    int grid_w = 0, grid_h = 0;
    int64_t patches_per_tile = 0, patches_per_thumb = 0;
    std::vector<std::vector<double>> tile_patches;  // tile-major, then row-major patches
    std::vector<int> tile_of_patch;                 // tile index per entry of tile_patches
    std::vector<std::vector<double>> thumb_patches;
};

// Chooses a (grid_w x grid_h) factorization of num_tiles whose aspect best
// matches the image, average-pools the image onto that grid of tile x tile
// crops, and patchifies each crop. At the native grid the pooling kernel is
// 1x1 and the tiles are exact crops. The thumbnail is the 2x average-pooled
// whole image.
inline TileSet tile_image(const LatentImage& img, int num_tiles, const EncoderConfig& cfg) {
    require(num_tiles >= 1 && num_tiles <= cfg.max_tiles, "tile_image: tile count out of range");
    require(img.channels == cfg.channels, "tile_image: channel mismatch");
    const int64_t t = cfg.tile;

    int best_gw = -1, best_gh = -1;
    int64_t best_mismatch = -1;
    for (int gw = 1; gw <= num_tiles; ++gw) {
        if (num_tiles % gw != 0) continue;
        const int gh = num_tiles / gw;
        if (img.width % (gw * t) != 0 || img.height % (gh * t) != 0) continue;
        const int64_t mismatch = std::abs(gw * img.height - gh * img.width);
        if (best_gw < 0 || mismatch < best_mismatch || (mismatch == best_mismatch && gw > best_gw)) {
            best_gw = gw;
            best_gh = gh;
            best_mismatch = mismatch;
        }
    }
    require(best_gw > 0, "tile_image: image dimensions not divisible by any tile grid");

    const int64_t kw = img.width / (best_gw * t);
    const int64_t kh = img.height / (best_gh * t);
    LatentImage pooled = avg_pool(img, kh, kw);  // (gh*t, gw*t)

    TileSet out;
    out.num_tiles = num_tiles;
    out.grid_w = best_gw;
    out.grid_h = best_gh;
    out.patches_per_tile = (t / cfg.patch) * (t / cfg.patch);
    for (int ty = 0; ty < best_gh; ++ty)
        for (int tx = 0; tx < best_gw; ++tx) {
            LatentImage tile = crop(pooled, ty * t, tx * t, t, t);
            auto patches = extract_patches(tile, cfg.patch);
            for (auto& p : patches) {
                out.tile_patches.push_back(std::move(p));
                out.tile_of_patch.push_back(ty * best_gw + tx);
            }
        }

    require(img.height % 2 == 0 && img.width % 2 == 0, "tile_image: dims must be even for thumbnail");
    LatentImage thumb = avg_pool(img, 2, 2);
    require(thumb.height % cfg.patch == 0 && thumb.width % cfg.patch == 0,
            "tile_image: thumbnail not divisible by patch size");
    out.thumb_patches = extract_patches(thumb, cfg.patch);
    out.patches_per_thumb = static_cast<int64_t>(out.thumb_patches.size());
    return out;
}

// Appends the image-token block for one image: IMG_PATCH_MARK, tile patches,
// IMG_THUMB_MARK, thumbnail patches. Returns the index ranges of the patch
// and thumbnail embedding entries (marker tokens excluded from both).
inline std::vector<std::pair<int, int>> append_image_entries(TokenSequence& seq, const TileSet& tiles,
                                                             const Vocabulary& vocab) {
    seq.entries.push_back(TokenEntry::text(vocab.img_patch_mark(), Role::User));
    const int patches_begin = static_cast<int>(seq.size());
    for (size_t i = 0; i < tiles.tile_patches.size(); ++i)
        seq.entries.push_back(
            TokenEntry::patch(tiles.tile_patches[i], tiles.tile_of_patch[i], Modality::ImagePatch));
    const int patches_end = static_cast<int>(seq.size());
    seq.entries.push_back(TokenEntry::text(vocab.img_thumb_mark(), Role::User));
    const int thumb_begin = static_cast<int>(seq.size());
    // thumbnail carries tile index num_tiles
    for (const auto& p : tiles.thumb_patches)
        seq.entries.push_back(TokenEntry::patch(p, tiles.num_tiles, Modality::ImageThumb));
    const int thumb_end = static_cast<int>(seq.size());
    return {{patches_begin, patches_end}, {thumb_begin, thumb_end}};
}

// ---------------------------------------------------------------------------
// Encoder forward

struct EncoderFwdCache {
    Tensor x0;
    std::vector<BlockCache> blocks;
};

struct EncodeResult {
    LayerStack stack;                  // all layers 0..N_E
    std::vector<Tensor> k_cap, v_cap;  // per block (sl, h) when captured
};

inline Tensor embed_sequence(const TokenSequence& seq, const EncoderConfig& cfg,
                             const EncoderWeights& w) {
    const int64_t sl = seq.size();
    require(sl <= cfg.max_seq, "encode: sequence exceeds configured maximum");
    Tensor x({sl, cfg.hidden});
    for (int64_t i = 0; i < sl; ++i) {
        const TokenEntry& e = seq.entries[static_cast<size_t>(i)];
        double* row = x.row_ptr(i);
        if (e.token_id >= 0) {
            require(e.token_id < w.tok_emb.rows(), "encode: token id out of vocabulary");
            const double* emb = w.tok_emb.row_ptr(e.token_id);
            for (int64_t d = 0; d < cfg.hidden; ++d) row[d] = emb[d];
        } else {
            require(static_cast<int64_t>(e.embedding.size()) == cfg.patch_dim(),
                    "encode: patch embedding dim mismatch");
            for (int64_t d = 0; d < cfg.hidden; ++d) {
                double s = 0.0;
                for (int64_t p = 0; p < cfg.patch_dim(); ++p)
                    s += e.embedding[static_cast<size_t>(p)] * w.patch_embed.at(p, d);
                row[d] = s;
            }
        }
        const double* pos = w.pos_emb.row_ptr(i);
        for (int64_t d = 0; d < cfg.hidden; ++d) row[d] += pos[d];
    }
    return x;
}

// Causal forward; returns every residual-stream state including the embedding
// output. Weights are const throughout: the frozen contract is structural.
inline EncodeResult encode(const TokenSequence& seq, const EncoderConfig& cfg,
                           const EncoderWeights& w, bool capture_kv = false,
                           EncoderFwdCache* cache = nullptr) {
    EncodeResult out;
    Tensor x = embed_sequence(seq, cfg, w);
    if (cache) cache->x0 = x;
    out.stack.layer_indices.push_back(0);
    out.stack.states.push_back(x);
    const AttentionMask mask = AttentionMask::causal();
    for (int n = 0; n < cfg.layers; ++n) {
        BlockCache bc;
        const bool want_cache = capture_kv || cache != nullptr;
        x = transformer_block(x, w.blocks[static_cast<size_t>(n)], mask, want_cache ? &bc : nullptr);
        if (capture_kv) {
            out.k_cap.push_back(bc.attn.k);
            out.v_cap.push_back(bc.attn.v);
        }
        if (cache) cache->blocks.push_back(std::move(bc));
        out.stack.layer_indices.push_back(n + 1);
        out.stack.states.push_back(x);
    }
    return out;
}

// Backward from a gradient on the final-layer states down to the embeddings.
// Accumulates into `grads`; used by encoder pretraining only.
inline void encoder_backward(const TokenSequence& seq, const EncoderConfig& cfg,
                             const EncoderWeights& w, const EncoderFwdCache& cache,
                             const Tensor& d_final, EncoderWeights& grads) {
    Tensor dx = d_final;
    for (int n = cfg.layers - 1; n >= 0; --n)
        dx = transformer_block_bwd(cache.blocks[static_cast<size_t>(n)], w.blocks[static_cast<size_t>(n)],
                                   dx, grads.blocks[static_cast<size_t>(n)]);
    const int64_t sl = seq.size();
    for (int64_t i = 0; i < sl; ++i) {
        const TokenEntry& e = seq.entries[static_cast<size_t>(i)];
        const double* drow = dx.row_ptr(i);
        if (e.token_id >= 0) {
            double* g = grads.tok_emb.row_ptr(e.token_id);
            for (int64_t d = 0; d < cfg.hidden; ++d) g[d] += drow[d];
        } else {
            for (int64_t p = 0; p < cfg.patch_dim(); ++p) {
                double* g = grads.patch_embed.row_ptr(p);
                const double ev = e.embedding[static_cast<size_t>(p)];
                for (int64_t d = 0; d < cfg.hidden; ++d) g[d] += ev * drow[d];
            }
        }
        double* gp = grads.pos_emb.row_ptr(i);
        for (int64_t d = 0; d < cfg.hidden; ++d) gp[d] += drow[d];
    }
}

// ---------------------------------------------------------------------------
// Greedy decoding

struct DecodeResult {
    std::vector<int> ids;
    // Per emitted token: its full per-layer states (each Tensor is (1, h)),
    // captured from the forward pass that first contained the token.
    std::vector<LayerStack> step_stacks;
    LayerStack final_stack;  // all layers over the final full sequence
};

inline int argmax_logit(const Tensor& logits_row) {
    int best = 0;
    double bv = logits_row.data[0];
    for (int64_t j = 1; j < logits_row.numel(); ++j) {
        if (logits_row.data[static_cast<size_t>(j)] > bv) {  // ties keep the lowest id
            bv = logits_row.data[static_cast<size_t>(j)];
            best = static_cast<int>(j);
        }
    }
    return best;
}

// Argmax decoding from the linear head over the final hidden state. Decoding
// stops at EOS; the EOS token is not appended. New tokens join the sequence
// with role Rewritten.
inline DecodeResult greedy_decode(const TokenSequence& prefix, int max_new, const EncoderConfig& cfg,
                                  const EncoderWeights& w, const Vocabulary& vocab) {
    require(max_new >= 0, "greedy_decode: max_new must be >= 0");
    DecodeResult out;
    TokenSequence seq = prefix;
    EncodeResult enc = encode(seq, cfg, w);
    for (int step = 0; step < max_new; ++step) {
        const Tensor& last = enc.stack.states.back();
        Tensor logits({vocab.total()});
        const double* hrow = last.row_ptr(last.rows() - 1);
        for (int j = 0; j < vocab.total(); ++j) {
            double s = 0.0;
            for (int64_t d = 0; d < cfg.hidden; ++d) s += hrow[d] * w.lm_head.at(d, j);
            logits.data[static_cast<size_t>(j)] = s;
        }
        const int tok = argmax_logit(logits);
        if (tok == vocab.eos()) break;
        seq.push_text(tok, Role::Rewritten);
        enc = encode(seq, cfg, w);
        // capture the new token's states at its own position
        LayerStack col;
        col.layer_indices = enc.stack.layer_indices;
        const int64_t pos = seq.size() - 1;
        for (const Tensor& s : enc.stack.states) {
            Tensor r({1, s.cols()});
            std::copy(s.row_ptr(pos), s.row_ptr(pos) + s.cols(), r.row_ptr(0));
            col.states.push_back(std::move(r));
        }
        out.step_stacks.push_back(std::move(col));
        out.ids.push_back(tok);
    }
    out.final_stack = std::move(enc.stack);
    return out;
}

}  // namespace lapflow
