#pragma once

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "lapflow/fusion.hpp"

namespace lapflow {

// ---------------------------------------------------------------------------
// Layer inspection

struct LayerReport {
    std::vector<int> layer_indices;
    std::vector<double> pool_weight_abs;   // |w| per selected layer
    std::vector<double> adjacent_cosine;   // between consecutive selected layers
    // per (token, layer) activation norms of the first LAP block's projections
    Tensor q_norm, k_norm, v_norm, qk_norm, kv_norm;
};

inline std::vector<double> pooling_weight_report(const AdapterWeights& a) {
    std::vector<double> out;
    out.reserve(a.pool_w.data.size());
    for (double w : a.pool_w.data) out.push_back(std::abs(w));
    return out;
}

inline double cosine(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "cosine: shape mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        dot += a.data[i] * b.data[i];
        na += a.data[i] * a.data[i];
        nb += b.data[i] * b.data[i];
    }
    require(na > 0.0 && nb > 0.0, "cosine: zero-norm layer");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// cos(vec(x_l), vec(x_{l+1})) for consecutive layers of the stack.
inline std::vector<double> layer_similarity(const LayerStack& stack) {
    require(stack.num_layers() >= 2, "layer_similarity: need at least two layers");
    std::vector<double> out;
    for (int64_t l = 0; l + 1 < stack.num_layers(); ++l)
        out.push_back(cosine(stack.states[static_cast<size_t>(l)], stack.states[static_cast<size_t>(l + 1)]));
    return out;
}

// Per-(token, layer) L2 norms of the first LAP block's query/key/value
// activations. The figure-facing quantity is ambiguous between query-key and
// key-value norms, so both combined norms are emitted.
inline LayerReport activation_norm_report(const LayerStack& selected, const AdapterWeights& a) {
    const int64_t sl = selected.seq_len(), L = selected.num_layers(), h = selected.hidden();
    LayerReport rep;
    rep.layer_indices = selected.layer_indices;
    rep.pool_weight_abs = pooling_weight_report(a);
    if (L >= 2) rep.adjacent_cosine = layer_similarity(selected);
    rep.q_norm = Tensor({sl, L});
    rep.k_norm = Tensor({sl, L});
    rep.v_norm = Tensor({sl, L});
    rep.qk_norm = Tensor({sl, L});
    rep.kv_norm = Tensor({sl, L});
    Tensor st = lap_stack(selected, a.layer_emb);
    for (int64_t t = 0; t < sl; ++t) {
        Tensor x({L, h});
        std::copy(st.data.begin() + t * L * h, st.data.begin() + (t + 1) * L * h, x.data.begin());
        Tensor norm_in = rms_norm(x, a.lap1.pre_gain);
        Tensor q = matmul(norm_in, a.lap1.wq);
        Tensor k = matmul(norm_in, a.lap1.wk);
        Tensor v = matmul(norm_in, a.lap1.wv);
        for (int64_t l = 0; l < L; ++l) {
            double nq = 0.0, nk = 0.0, nv = 0.0;
            for (int64_t d = 0; d < h; ++d) {
                nq += q.at(l, d) * q.at(l, d);
                nk += k.at(l, d) * k.at(l, d);
                nv += v.at(l, d) * v.at(l, d);
            }
            rep.q_norm.at(t, l) = std::sqrt(nq);
            rep.k_norm.at(t, l) = std::sqrt(nk);
            rep.v_norm.at(t, l) = std::sqrt(nv);
            rep.qk_norm.at(t, l) = std::sqrt(nq + nk);
            rep.kv_norm.at(t, l) = std::sqrt(nk + nv);
        }
    }
    return rep;
}

// Generates twice with the same sampler seed, zeroing the pooling weights of
// the dropped layers on the second run; returns the per-pixel MSE between the
// two outputs.
inline double layer_dropout_probe(const FusedModel& model, const ConditioningSource& src,
                                  const std::vector<int>& drop_layer_indices, int64_t height,
                                  int64_t width, int steps, uint64_t sampler_seed) {
    for (int n : drop_layer_indices) {
        bool found = false;
        for (int have : src.selected.layer_indices) found = found || have == n;
        require(found, "layer_dropout_probe: layer " + std::to_string(n) + " not in the selected set");
    }
    Rng r1(sampler_seed);
    LatentImage base = fused_sample(model, src, height, width, steps, r1);

    FusedModel dropped = model;
    for (int n : drop_layer_indices)
        for (size_t l = 0; l < src.selected.layer_indices.size(); ++l)
            if (src.selected.layer_indices[l] == n) dropped.adapter.pool_w.data[l] = 0.0;
    Rng r2(sampler_seed);
    LatentImage out = fused_sample(dropped, src, height, width, steps, r2);
    return image_mse(base, out);
}

// ---------------------------------------------------------------------------
// Position bias probe

struct PositionBiasRow {
    int marker_pos = 0;
    double early_off = 0.0;  // sensitivity of positions before the marker, refiner off
    double early_on = 0.0;
    double total_off = 0.0;
    double total_on = 0.0;
};

// Swaps a marker token at each position of a templated prompt and measures
// the conditioning difference, with and without the refiner.
inline std::vector<PositionBiasRow> position_bias_probe(FusedModel& model, const std::string& base_text,
                                                        char marker_a, char marker_b) {
    Vocabulary vocab;
    vocab.v_text = model.enc_cfg.v_text;
    const FusionVariant keep = model.variant;
    std::vector<PositionBiasRow> rows;
    for (int p = 0; p < static_cast<int>(base_text.size()); ++p) {
        auto cond_for = [&](char marker, bool refiner) {
            std::string text = base_text;
            text[static_cast<size_t>(p)] = marker;
            TokenSequence seq;
            for (int id : tokenize_text(text, vocab)) seq.push_text(id, Role::User);
            std::vector<int> all(static_cast<size_t>(seq.size()));
            for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
            model.variant.use_refiner = refiner;
            ConditioningSource src = build_source(model, seq, all);
            FusedFwdCache cache;
            return pooled_conditioning(model, src, &cache);
        };
        PositionBiasRow row;
        row.marker_pos = p;
        for (bool refiner : {false, true}) {
            Tensor ca = cond_for(marker_a, refiner);
            Tensor cb = cond_for(marker_b, refiner);
            double early = 0.0, total = 0.0;
            for (int64_t i = 0; i < ca.rows(); ++i)
                for (int64_t d = 0; d < ca.cols(); ++d) {
                    const double diff = ca.at(i, d) - cb.at(i, d);
                    total += diff * diff;
                    if (i < p) early += diff * diff;
                }
            (refiner ? row.early_on : row.early_off) = std::sqrt(early);
            (refiner ? row.total_on : row.total_off) = std::sqrt(total);
        }
        rows.push_back(row);
    }
    model.variant = keep;
    return rows;
}

inline void write_position_bias_csv(const std::vector<PositionBiasRow>& rows, const std::string& path) {
    std::ofstream f(path);
    require_io(f.good(), "cannot write " + path);
    f << "marker_pos,early_off,early_on,total_off,total_on\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", r.marker_pos, r.early_off,
                      r.early_on, r.total_off, r.total_on);
        f << buf;
    }
}

// ---------------------------------------------------------------------------
// Reconstruction metrics

struct ReconMetrics {
    double mse = 0.0;
    double psnr = 0.0;  // +inf when mse == 0
};

inline ReconMetrics reconstruction_metrics(const LatentImage& orig, const LatentImage& recon) {
    ReconMetrics m;
    m.mse = image_mse(orig, recon);
    const double peak = 2.0;  // value range of [-1, 1]
    m.psnr = m.mse == 0.0 ? std::numeric_limits<double>::infinity()
                          : 10.0 * std::log10(peak * peak / m.mse);
    return m;
}

// ---------------------------------------------------------------------------
// Benchmark score aggregation

struct ScoreRow {
    std::string prompt_id, category;
    int seed = 0;
    double score = 0.0;
};

struct ScoreTable {
    std::vector<ScoreRow> rows;

    void add(ScoreRow row) {
        require(row.score >= 0.0 && row.score <= 1.0, "score table: score out of [0,1]");
        for (const auto& r : rows)
            require(!(r.category == row.category && r.prompt_id == row.prompt_id && r.seed == row.seed),
                    "score table: duplicate (prompt, seed) in category " + row.category);
        rows.push_back(std::move(row));
    }
};

inline ScoreTable load_score_csv(const std::string& path) {
    std::ifstream f(path);
    require_io(f.good(), "cannot open score csv " + path);
    std::string line;
    require_io(static_cast<bool>(std::getline(f, line)), "empty score csv");
    require_io(line == "prompt_id,category,seed,score", "score csv: bad header: " + line);
    ScoreTable t;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        ScoreRow r;
        std::string seed, score;
        require_io(static_cast<bool>(std::getline(ss, r.prompt_id, ',')) &&
                       static_cast<bool>(std::getline(ss, r.category, ',')) &&
                       static_cast<bool>(std::getline(ss, seed, ',')) &&
                       static_cast<bool>(std::getline(ss, score, ',')),
                   "score csv: malformed row: " + line);
        r.seed = std::stoi(seed);
        r.score = std::stod(score);
        t.add(std::move(r));
    }
    return t;
}

struct CategoryScores {
    std::string category;
    double avg = 0.0;
    double top_k = 0.0;
};

struct AggregateReport {
    double micro_avg = 0.0;   // mean over all (prompt, seed) scores
    double macro_avg = 0.0;   // mean of per-category averages
    double micro_top_k = 0.0; // mean over all prompts of the per-prompt top-k
    double macro_top_k = 0.0; // mean of per-category top-k values
    std::vector<CategoryScores> per_category;
};

// Canonical aggregation order: categories sorted lexicographically, prompts
// sorted within category, seeds ascending. Per-prompt top-k is the max over
// the k lowest-numbered seeds. Averages use all seeds.
inline AggregateReport benchmark_aggregate(const ScoreTable& table, int top_k) {
    require(top_k >= 1, "aggregate: top_k must be >= 1");
    // category -> prompt -> (seed -> score)
    std::map<std::string, std::map<std::string, std::map<int, double>>> tree;
    for (const auto& r : table.rows) tree[r.category][r.prompt_id][r.seed] = r.score;

    size_t seeds_per_prompt = 0;
    bool first = true;
    for (const auto& [cat, prompts] : tree)
        for (const auto& [pid, seeds] : prompts) {
            if (first) {
                seeds_per_prompt = seeds.size();
                first = false;
            }
            require(seeds.size() == seeds_per_prompt, "aggregate: ragged seed counts at prompt " + pid);
        }
    require(!first, "aggregate: empty table");
    require(static_cast<size_t>(top_k) <= seeds_per_prompt, "aggregate: top_k exceeds seeds per prompt");

    AggregateReport rep;
    double micro_sum = 0.0;
    int64_t micro_n = 0;
    double micro_topk_sum = 0.0;
    int64_t prompt_n = 0;
    for (const auto& [cat, prompts] : tree) {
        double cat_sum = 0.0;
        int64_t cat_n = 0;
        double cat_topk_sum = 0.0;
        for (const auto& [pid, seeds] : prompts) {
            double best = -1.0;
            int taken = 0;
            for (const auto& [seed, score] : seeds) {  // std::map: ascending seeds
                cat_sum += score;
                ++cat_n;
                micro_sum += score;
                ++micro_n;
                if (taken < top_k) {
                    best = std::max(best, score);
                    ++taken;
                }
            }
            cat_topk_sum += best;
            micro_topk_sum += best;
            ++prompt_n;
        }
        CategoryScores cs;
        cs.category = cat;
        cs.avg = cat_sum / static_cast<double>(cat_n);
        cs.top_k = cat_topk_sum / static_cast<double>(prompts.size());
        rep.per_category.push_back(cs);
    }
    rep.micro_avg = micro_sum / static_cast<double>(micro_n);
    rep.micro_top_k = micro_topk_sum / static_cast<double>(prompt_n);
    double macro_sum = 0.0, macro_topk = 0.0;
    for (const auto& c : rep.per_category) {
        macro_sum += c.avg;
        macro_topk += c.top_k;
    }
    rep.macro_avg = macro_sum / static_cast<double>(rep.per_category.size());
    rep.macro_top_k = macro_topk / static_cast<double>(rep.per_category.size());
    return rep;
}

struct BuggyAggregateReport {
    double overall = 0.0;  // correct micro average over all rows
    std::vector<std::pair<std::string, double>> per_category;  // LAST row's score only
};

// Reproduces the documented aggregation defect: the overall score averages
// every row, but each category reports only the score of its last row.
inline BuggyAggregateReport benchmark_aggregate_buggy(const ScoreTable& table) {
    require(!table.rows.empty(), "aggregate: empty table");
    BuggyAggregateReport rep;
    double sum = 0.0;
    std::vector<std::string> order;
    std::map<std::string, double> last;
    for (const auto& r : table.rows) {
        sum += r.score;
        if (last.find(r.category) == last.end()) order.push_back(r.category);
        last[r.category] = r.score;
    }
    rep.overall = sum / static_cast<double>(table.rows.size());
    for (const auto& cat : order) rep.per_category.emplace_back(cat, last[cat]);
    return rep;
}

}  // namespace lapflow
