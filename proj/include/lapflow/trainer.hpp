#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lapflow/analysis.hpp"
#include "lapflow/checkpoint.hpp"
#include "lapflow/config.hpp"
#include "lapflow/dataset.hpp"
#include "lapflow/fusion.hpp"
#include "lapflow/verifi.hpp"

namespace lapflow {

inline std::string format_loss_row(int64_t step, double loss) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%lld,%.17g\n", static_cast<long long>(step), loss);
    return buf;
}

// ---------------------------------------------------------------------------
// Chat assembly shared by training and evaluation

struct AssembledSample {
    TokenSequence sequence;
    std::vector<int> cond_positions;
};

// Builds the chat sequence for one sample under a batch mode. Text modes
// teacher-force the canonical long caption as the rewritten span; image modes
// attach the tiled image. Conditioning positions follow the rewriting
// selection rule: rewritten tokens, plus all image tokens when images are in.
inline AssembledSample assemble_sample(const DatasetSample& s, BatchMode mode,
                                       const std::string& system_text, int tiles,
                                       const EncoderConfig& enc_cfg, const Vocabulary& vocab) {
    std::vector<TileSet> images;
    if (mode == BatchMode::Image || mode == BatchMode::TextImage)
        images.push_back(tile_image(s.image, tiles, enc_cfg));
    const std::string user_text = mode == BatchMode::Image ? std::string() : s.short_caption;
    ChatSequence chat = build_chat_sequence(system_text, user_text, images, vocab);

    std::vector<int> rewritten;
    if (mode != BatchMode::Image && !s.long_caption.empty())
        rewritten = tokenize_text(s.long_caption, vocab);

    AssembledSample out;
    out.sequence = chat.seq;
    for (int id : rewritten) out.sequence.push_text(id, Role::Rewritten);
    for (int i = static_cast<int>(chat.seq.size()); i < static_cast<int>(out.sequence.size()); ++i)
        out.cond_positions.push_back(i);
    if (mode != BatchMode::Text)
        for (const auto& span : chat.image_spans)
            for (int i = span.first; i < span.second; ++i) out.cond_positions.push_back(i);
    std::sort(out.cond_positions.begin(), out.cond_positions.end());
    return out;
}

// ---------------------------------------------------------------------------
// Fused-model trainer

class Trainer {
public:
    Trainer(const RunConfig& cfg, const Dataset& dataset, const EncoderWeights& encoder)
        : cfg_(cfg), dataset_(&dataset), encoder_(&encoder), vocab_() {
        vocab_.v_text = cfg.encoder.v_text;
        encoder_checksum_ = encoder.checksum();
        const bool handoff = cfg.train.handoff_fraction > 0.0;
        FusionVariant variant = cfg.fusion;
        if (handoff) {
            require(cfg.fusion.kind == FusionKind::LAP || cfg.fusion.kind == FusionKind::LastLayer,
                    "trainer: handoff requires a pooled target variant");
            variant.kind = cfg.train.handoff_initial;
            if (variant.kind == FusionKind::LastLayer) {
                variant.use_refiner = false;
                variant.per_dit_layer = false;
            }
        }
        Rng init = Rng::stream(cfg.seed, "init");
        model_ = std::make_unique<FusedModel>(
            build_fused_generator(variant, cfg.encoder, encoder, cfg.dit, init));
        reset_optimizer();
    }

    FusedModel& model() { return *model_; }
    const std::vector<double>& losses() const { return losses_; }

    // Scheduled conditioning mode for a step, if any hook applies. Boundaries
    // are exact: step s is governed by the first hook with s < round(f * steps).
    std::optional<BatchMode> scheduled_mode(int64_t step) const {
        for (const auto& h : cfg_.train.schedule) {
            const int64_t boundary = static_cast<int64_t>(std::llround(
                h.until_fraction * static_cast<double>(cfg_.train.steps)));
            if (step < boundary) return h.mode;
        }
        return std::nullopt;
    }

    int64_t handoff_step() const {
        if (cfg_.train.handoff_fraction <= 0.0) return -1;
        return static_cast<int64_t>(std::llround(cfg_.train.handoff_fraction *
                                                 static_cast<double>(cfg_.train.steps)));
    }

    // Swaps the conditioning stack to the configured target variant: the DiT
    // weights carry over untouched, the adapter is freshly initialized, and
    // the optimizer restarts.
    void apply_handoff() {
        FusionVariant target = cfg_.fusion;
        Rng init = Rng::stream(cfg_.seed, "init-handoff");
        FusedModel next = build_fused_generator(target, cfg_.encoder, *encoder_, cfg_.dit, init);
        next.dit = std::move(model_->dit);
        *model_ = std::move(next);
        reset_optimizer();
    }

    double train_step(int64_t step, std::optional<double> fixed_t = std::nullopt) {
        const int64_t B = cfg_.train.batch;
        // draw all per-step randomness up front; worker threads touch none
        Rng tstream = Rng::stream(cfg_.seed, "t-sampling", static_cast<uint64_t>(step));
        Rng dstream = Rng::stream(cfg_.seed, "data", static_cast<uint64_t>(step));
        Rng nstream = Rng::stream(cfg_.seed, "noise", static_cast<uint64_t>(step));

        struct Element {
            const TrainItem* item;
            double t;
            Tensor x1;
        };
        std::vector<Element> batch(static_cast<size_t>(B));
        const std::optional<BatchMode> forced = scheduled_mode(step);
        for (int64_t b = 0; b < B; ++b) {
            const int64_t sample_idx = static_cast<int64_t>(dstream.below(dataset_->samples.size()));
            const BatchMode mode = forced ? *forced : draw_mode(dstream);
            const int tiles = cfg_.train.tile_options[static_cast<size_t>(
                sample_idx % static_cast<int64_t>(cfg_.train.tile_options.size()))];
            Element& e = batch[static_cast<size_t>(b)];
            e.item = &item_for(sample_idx, mode, tiles);
            e.t = fixed_t ? *fixed_t : tstream.uniform();
            e.x1 = Tensor(e.item->x0.shape);
            for (auto& v : e.x1.data) v = nstream.normal();
        }

        // forward/backward per element into per-slot grads, reduced in batch
        // order so results do not depend on the thread count
        const int threads = cfg_.threads;
        const int64_t chunk = std::max<int64_t>(1, threads);
        ensure_slots(chunk);
        zero_grads(master_grads());
        double loss_sum = 0.0;
        for (int64_t base = 0; base < B; base += chunk) {
            const int64_t n = std::min<int64_t>(chunk, B - base);
            parallel_for(n, threads, [&](int64_t i) {
                Element& e = batch[static_cast<size_t>(base + i)];
                FusedGrads& g = *slots_[static_cast<size_t>(i)];
                zero_grads(g);
                FlowSample fs = make_flow_sample(e.item->x0, e.x1, e.t);
                FusedFwdCache cache;
                Tensor pred = fused_forward(*model_, e.item->source, fs.x_t, e.t, &cache);
                slot_loss_[static_cast<size_t>(i)] = flow_loss(pred, fs.v_star);
                Tensor d = flow_loss_grad(pred, fs.v_star);
                d *= 1.0 / static_cast<double>(B);
                fused_backward(*model_, e.item->source, cache, d, g);
            });
            for (int64_t i = 0; i < n; ++i) {
                loss_sum += slot_loss_[static_cast<size_t>(i)];
                accumulate(static_cast<size_t>(i));
            }
        }
        const double loss = loss_sum / static_cast<double>(B);
        require_io(std::isfinite(loss), "trainer: non-finite loss at step " + std::to_string(step));
        optimizer_.step(param_refs_, grad_refs_);
        return loss;
    }

    // Runs steps [start, cfg.train.steps); appends to losses and loss.csv.
    void train(int64_t start_step = 0) {
        namespace fs = std::filesystem;
        std::ofstream loss_csv;
        if (!cfg_.out_dir.empty()) {
            fs::create_directories(cfg_.out_dir);
            loss_csv.open(fs::path(cfg_.out_dir) / "loss.csv",
                          start_step == 0 ? std::ios::trunc : std::ios::app);
            if (start_step == 0) loss_csv << "step,loss\n";
        }
        const int64_t swap_at = handoff_step();
        for (int64_t s = start_step; s < cfg_.train.steps; ++s) {
            if (swap_at >= 0 && s == swap_at) apply_handoff();
            const double loss = train_step(s);
            losses_.push_back(loss);
            if (loss_csv.is_open()) loss_csv << format_loss_row(s, loss);
        }
        require_io(encoder_->checksum() == encoder_checksum_,
                   "trainer: frozen encoder was mutated during training");
        if (!cfg_.out_dir.empty()) save_state((fs::path(cfg_.out_dir) / "model.ckpt").string());
    }

    // Mean loss over the final tenth of the run (at least one step).
    double final_loss() const {
        require(!losses_.empty(), "trainer: no steps recorded");
        const size_t n = losses_.size();
        const size_t tail = std::max<size_t>(1, n / 10);
        double s = 0.0;
        for (size_t i = n - tail; i < n; ++i) s += losses_[i];
        return s / static_cast<double>(tail);
    }

    void save_state(const std::string& path) {
        std::vector<std::pair<std::string, const Tensor*>> entries;
        for (const auto& p : param_refs_) entries.emplace_back(p.name, p.tensor);
        Tensor step_t({1});
        step_t.data[0] = static_cast<double>(optimizer_.step_count);
        entries.emplace_back("opt.step_count", &step_t);
        std::vector<Tensor> moments;
        moments.reserve(param_refs_.size() * 2);
        for (size_t i = 0; i < param_refs_.size(); ++i) {
            Tensor m(param_refs_[i].tensor->shape);
            m.data = optimizer_.m[i];
            moments.push_back(std::move(m));
            Tensor v(param_refs_[i].tensor->shape);
            v.data = optimizer_.v[i];
            moments.push_back(std::move(v));
        }
        for (size_t i = 0; i < param_refs_.size(); ++i) {
            entries.emplace_back("opt.m." + param_refs_[i].name, &moments[2 * i]);
            entries.emplace_back("opt.v." + param_refs_[i].name, &moments[2 * i + 1]);
        }
        save_checkpoint(path, entries);
    }

    // Restores weights and optimizer state; returns the recorded step count.
    int64_t load_state(const std::string& path) {
        auto stored = load_checkpoint(path);
        apply_checkpoint(stored, param_refs_);
        for (size_t i = 0; i < param_refs_.size(); ++i) {
            auto m = stored.find("opt.m." + param_refs_[i].name);
            auto v = stored.find("opt.v." + param_refs_[i].name);
            require_io(m != stored.end() && v != stored.end(), "checkpoint: missing optimizer state");
            optimizer_.m[i] = m->second.data;
            optimizer_.v[i] = v->second.data;
        }
        auto st = stored.find("opt.step_count");
        require_io(st != stored.end(), "checkpoint: missing step count");
        optimizer_.step_count = static_cast<int64_t>(st->second.data[0]);
        return optimizer_.step_count;
    }

    // Loads only the generator weights from a checkpoint (conditioning-stack
    // handoff from a previous run); the adapter stays freshly initialized.
    void adopt_dit(const std::string& path) {
        auto stored = load_checkpoint(path);
        apply_checkpoint(stored, model_->dit.params());
        reset_optimizer();
    }

    struct TrainItem {
        Tensor x0;  // patchified data tokens
        ConditioningSource source;
    };

    const TrainItem& item_for(int64_t sample_idx, BatchMode mode, int tiles) {
        const int64_t key =
            (sample_idx * 8 + static_cast<int64_t>(mode)) * 16 + tiles;
        auto it = items_.find(key);
        if (it != items_.end()) return *it->second;
        const DatasetSample& s = dataset_->samples[static_cast<size_t>(sample_idx)];
        auto item = std::make_unique<TrainItem>();
        item->x0 = patchify(s.image, cfg_.dit.patch);
        AssembledSample asm_ = assemble_sample(s, mode, cfg_.system_text, tiles, cfg_.encoder, vocab_);
        item->source = build_source(*model_, asm_.sequence, asm_.cond_positions);
        auto [pos, ok] = items_.emplace(key, std::move(item));
        return *pos->second;
    }

private:
    BatchMode draw_mode(Rng& rng) {
        const double u = rng.uniform();
        if (u < cfg_.train.mix_text) return BatchMode::Text;
        if (u < cfg_.train.mix_text + cfg_.train.mix_image) return BatchMode::Image;
        return BatchMode::TextImage;
    }

    void reset_optimizer() {
        param_refs_ = trainable_params(*model_);
        master_grads_ = std::make_unique<FusedGrads>(grads_like(*model_));
        grad_refs_ = grad_refs(*master_grads_, *model_);
        optimizer_ = AdamW{};
        optimizer_.lr = cfg_.train.lr;
        optimizer_.weight_decay = cfg_.train.weight_decay;
        optimizer_.init(param_refs_);
        slots_.clear();
        slot_refs_.clear();
        items_.clear();  // sources depend on the variant
    }

    FusedGrads& master_grads() { return *master_grads_; }

    void ensure_slots(int64_t n) {
        while (static_cast<int64_t>(slots_.size()) < n) {
            slots_.push_back(std::make_unique<FusedGrads>(grads_like(*model_)));
            slot_refs_.push_back(grad_refs(*slots_.back(), *model_));
        }
        slot_loss_.resize(static_cast<size_t>(n));
    }

    void accumulate(size_t slot) {
        const ParamRefs& src = slot_refs_[slot];
        for (size_t i = 0; i < grad_refs_.size(); ++i) {
            auto& dst = grad_refs_[i].tensor->data;
            const auto& s = src[i].tensor->data;
            for (size_t j = 0; j < dst.size(); ++j) dst[j] += s[j];
        }
    }

    RunConfig cfg_;
    const Dataset* dataset_;
    const EncoderWeights* encoder_;
    Vocabulary vocab_;
    uint64_t encoder_checksum_ = 0;
    std::unique_ptr<FusedModel> model_;
    std::unique_ptr<FusedGrads> master_grads_;
    ParamRefs param_refs_, grad_refs_;
    AdamW optimizer_;
    std::vector<std::unique_ptr<FusedGrads>> slots_;
    std::vector<ParamRefs> slot_refs_;
    std::vector<double> slot_loss_;
    std::vector<double> losses_;
    std::map<int64_t, std::unique_ptr<TrainItem>> items_;
};

// ---------------------------------------------------------------------------
// Encoder pretraining: next-token prediction over caption chats plus
// next-patch regression over tiled images, mixed per batch.

struct PretrainBatchItem {
    TokenSequence seq;
};

class EncoderPretrainer {
public:
    EncoderPretrainer(const RunConfig& cfg, const std::vector<const Dataset*>& corpora)
        : cfg_(cfg) {
        vocab_.v_text = cfg.encoder.v_text;
        Rng init = Rng::stream(cfg.seed, "encoder-init");
        weights_ = EncoderWeights::randomized(cfg.encoder, init);
        for (const Dataset* ds : corpora)
            for (const auto& s : ds->samples) {
                if (!s.short_caption.empty()) caption_samples_.push_back(&s);
                image_samples_.push_back(&s);
            }
        require(!caption_samples_.empty() || !image_samples_.empty(), "pretrain: empty corpus");
        params_ = weights_.params();
        grads_ = EncoderWeights::sized(cfg.encoder);
        grad_refs_ = grads_.params();
        optimizer_.lr = cfg.train.lr;
        optimizer_.weight_decay = cfg.train.weight_decay;
        optimizer_.init(params_);
    }

    EncoderWeights& weights() { return weights_; }
    const std::vector<double>& losses() const { return losses_; }

    TokenSequence make_sequence(const DatasetSample& s, bool image_task, int tiles) {
        if (!image_task) {
            ChatSequence chat = build_chat_sequence(cfg_.system_text, s.short_caption, {}, vocab_);
            TokenSequence seq = chat.seq;
            for (int id : tokenize_text(s.long_caption, vocab_)) seq.push_text(id, Role::Rewritten);
            seq.push_text(vocab_.eos(), Role::Rewritten);
            return seq;
        }
        TokenSequence seq;
        seq.push_text(vocab_.bos(), Role::User);
        TileSet ts = tile_image(s.image, tiles, cfg_.encoder);
        append_image_entries(seq, ts, vocab_);
        return seq;
    }

    // Per-sequence objective: cross-entropy on positions whose successor is a
    // token, squared error against the successor's raw patch vector elsewhere.
    double sequence_loss_and_backward(const TokenSequence& seq, EncoderWeights& grads, double scale) {
        EncoderFwdCache cache;
        EncodeResult enc = encode(seq, cfg_.encoder, weights_, false, &cache);
        const Tensor& top = enc.stack.states.back();
        const int64_t sl = seq.size();
        const int64_t V = vocab_.total();
        Tensor d_final({sl, cfg_.encoder.hidden});
        double loss = 0.0;
        int64_t n_pred = 0;
        for (int64_t i = 0; i + 1 < sl; ++i)
            if (seq.entries[static_cast<size_t>(i + 1)].token_id >= 0 ||
                !seq.entries[static_cast<size_t>(i + 1)].embedding.empty())
                ++n_pred;
        if (n_pred == 0) return 0.0;
        const double inv = 1.0 / static_cast<double>(n_pred);

        for (int64_t i = 0; i + 1 < sl; ++i) {
            const TokenEntry& next = seq.entries[static_cast<size_t>(i + 1)];
            const double* hrow = top.row_ptr(i);
            if (next.token_id >= 0) {
                // next-token cross-entropy
                std::vector<double> logits(static_cast<size_t>(V));
                for (int64_t j = 0; j < V; ++j) {
                    double sum = 0.0;
                    for (int64_t d = 0; d < cfg_.encoder.hidden; ++d)
                        sum += hrow[d] * weights_.lm_head.at(d, j);
                    logits[static_cast<size_t>(j)] = sum;
                }
                double mx = logits[0];
                for (double l : logits) mx = std::max(mx, l);
                double denom = 0.0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    denom += l;
                }
                const double p_target = logits[static_cast<size_t>(next.token_id)] / denom;
                loss += -std::log(std::max(p_target, 1e-300)) * inv;
                for (int64_t j = 0; j < V; ++j) {
                    double dl = (logits[static_cast<size_t>(j)] / denom -
                                 (j == next.token_id ? 1.0 : 0.0)) *
                                inv * scale;
                    if (dl == 0.0) continue;
                    for (int64_t d = 0; d < cfg_.encoder.hidden; ++d) {
                        grads.lm_head.at(d, j) += hrow[d] * dl;
                        d_final.at(i, d) += weights_.lm_head.at(d, j) * dl;
                    }
                }
            } else {
                // next-patch regression
                const int64_t P = cfg_.encoder.patch_dim();
                std::vector<double> pred(static_cast<size_t>(P));
                for (int64_t j = 0; j < P; ++j) {
                    double sum = 0.0;
                    for (int64_t d = 0; d < cfg_.encoder.hidden; ++d)
                        sum += hrow[d] * weights_.patch_head.at(d, j);
                    pred[static_cast<size_t>(j)] = sum;
                }
                const double pinv = inv / static_cast<double>(P);
                for (int64_t j = 0; j < P; ++j) {
                    const double diff = pred[static_cast<size_t>(j)] - next.embedding[static_cast<size_t>(j)];
                    loss += diff * diff * pinv;
                    const double dl = 2.0 * diff * pinv * scale;
                    for (int64_t d = 0; d < cfg_.encoder.hidden; ++d) {
                        grads.patch_head.at(d, j) += hrow[d] * dl;
                        d_final.at(i, d) += weights_.patch_head.at(d, j) * dl;
                    }
                }
            }
        }
        encoder_backward(seq, cfg_.encoder, weights_, cache, d_final, grads);
        return loss;
    }

    double train_step(int64_t step) {
        const int64_t B = cfg_.train.batch;
        Rng dstream = Rng::stream(cfg_.seed, "pretrain-data", static_cast<uint64_t>(step));
        std::vector<TokenSequence> seqs;
        seqs.reserve(static_cast<size_t>(B));
        for (int64_t b = 0; b < B; ++b) {
            const bool image_task =
                caption_samples_.empty() ||
                (!image_samples_.empty() && dstream.uniform() < image_task_fraction_);
            const auto& pool = image_task ? image_samples_ : caption_samples_;
            const DatasetSample* s = pool[dstream.below(pool.size())];
            const int tiles = cfg_.train.tile_options[static_cast<size_t>(
                dstream.below(cfg_.train.tile_options.size()))];
            seqs.push_back(make_sequence(*s, image_task, tiles));
        }
        for (auto& p : grad_refs_) p.tensor->fill(0.0);
        ensure_slots(cfg_.threads);
        double loss_sum = 0.0;
        const double scale = 1.0 / static_cast<double>(B);
        for (int64_t base = 0; base < B; base += cfg_.threads) {
            const int64_t n = std::min<int64_t>(cfg_.threads, B - base);
            parallel_for(n, cfg_.threads, [&](int64_t i) {
                EncoderWeights& g = *slots_[static_cast<size_t>(i)];
                for (auto& p : slot_refs_[static_cast<size_t>(i)]) p.tensor->fill(0.0);
                slot_loss_[static_cast<size_t>(i)] =
                    sequence_loss_and_backward(seqs[static_cast<size_t>(base + i)], g, scale);
            });
            for (int64_t i = 0; i < n; ++i) {
                loss_sum += slot_loss_[static_cast<size_t>(i)];
                for (size_t j = 0; j < grad_refs_.size(); ++j) {
                    auto& dst = grad_refs_[j].tensor->data;
                    const auto& src = slot_refs_[static_cast<size_t>(i)][j].tensor->data;
                    for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
                }
            }
        }
        const double loss = loss_sum / static_cast<double>(B);
        require_io(std::isfinite(loss), "pretrain: non-finite loss");
        optimizer_.step(params_, grad_refs_);
        return loss;
    }

    void train() {
        namespace fs = std::filesystem;
        std::ofstream loss_csv;
        if (!cfg_.out_dir.empty()) {
            fs::create_directories(cfg_.out_dir);
            loss_csv.open(fs::path(cfg_.out_dir) / "pretrain_loss.csv");
            loss_csv << "step,loss\n";
        }
        for (int64_t s = 0; s < cfg_.train.steps; ++s) {
            const double loss = train_step(s);
            losses_.push_back(loss);
            if (loss_csv.is_open()) loss_csv << format_loss_row(s, loss);
        }
        if (!cfg_.out_dir.empty())
            save_checkpoint((fs::path(cfg_.out_dir) / "encoder.ckpt").string(), params_);
    }

private:
    void ensure_slots(int64_t n) {
        while (static_cast<int64_t>(slots_.size()) < n) {
            slots_.push_back(std::make_unique<EncoderWeights>(EncoderWeights::sized(cfg_.encoder)));
            slot_refs_.push_back(slots_.back()->params());
        }
        slot_loss_.resize(static_cast<size_t>(n));
    }

    RunConfig cfg_;
    Vocabulary vocab_;
    EncoderWeights weights_;
    std::vector<const DatasetSample*> caption_samples_, image_samples_;
    double image_task_fraction_ = 0.3;
    ParamRefs params_, grad_refs_;
    EncoderWeights grads_ = EncoderWeights();
    AdamW optimizer_;
    std::vector<std::unique_ptr<EncoderWeights>> slots_;
    std::vector<ParamRefs> slot_refs_;
    std::vector<double> slot_loss_;
    std::vector<double> losses_;
};

inline EncoderWeights load_encoder(const std::string& path, const EncoderConfig& cfg) {
    EncoderWeights w = EncoderWeights::sized(cfg);
    apply_checkpoint(load_checkpoint(path), w.params());
    return w;
}

// ---------------------------------------------------------------------------
// Evaluation

struct GenEvalResult {
    double accuracy = 0.0;
    std::string csv;  // per-generation rows
};

// Conditional generation accuracy under the nearest-template classifier:
// every class is prompted eval_seeds times and the sampled image is assigned
// to the class of the nearest canonical template.
inline GenEvalResult evaluate_shapes(Trainer& trainer, const RunConfig& cfg, const Dataset& ds) {
    require(ds.spec.kind == "shapes", "evaluate_shapes: shapes dataset required");
    FusedModel& m = trainer.model();
    const int64_t C = ds.spec.num_classes();
    std::vector<LatentImage> templates;
    for (int64_t c = 0; c < C; ++c) templates.push_back(render_template(scene_of_class(c, ds.spec), ds.spec));

    Vocabulary vocab;
    vocab.v_text = cfg.encoder.v_text;
    GenEvalResult out;
    out.csv = "class_id,seed,predicted,correct,mse\n";
    int64_t correct = 0, total = 0;
    char buf[128];
    for (int64_t c = 0; c < C; ++c) {
        DatasetSample probe;
        probe.scene = scene_of_class(c, ds.spec);
        probe.short_caption = short_caption(probe.scene);
        probe.long_caption = long_caption(probe.scene);
        probe.image = templates[static_cast<size_t>(c)];
        AssembledSample asm_ =
            assemble_sample(probe, BatchMode::Text, cfg.system_text, 1, cfg.encoder, vocab);
        ConditioningSource src = build_source(m, asm_.sequence, asm_.cond_positions);
        for (int s = 0; s < cfg.train.eval_seeds; ++s) {
            Rng sampler = Rng::stream(cfg.seed, "sampler", static_cast<uint64_t>(c * 1000 + s));
            LatentImage gen = fused_sample(m, src, ds.spec.image_h, ds.spec.image_w,
                                           cfg.train.sample_steps, sampler);
            int64_t best = 0;
            double best_mse = image_mse(gen, templates[0]);
            for (int64_t k = 1; k < C; ++k) {
                const double mse = image_mse(gen, templates[static_cast<size_t>(k)]);
                if (mse < best_mse) {
                    best_mse = mse;
                    best = k;
                }
            }
            const bool ok = best == c;
            correct += ok ? 1 : 0;
            ++total;
            std::snprintf(buf, sizeof(buf), "%lld,%d,%lld,%d,%.17g\n", static_cast<long long>(c), s,
                          static_cast<long long>(best), ok ? 1 : 0, best_mse);
            out.csv += buf;
        }
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    return out;
}

struct ReconEvalResult {
    std::string csv;
    // psnr[tiles][image]
    std::map<int, std::vector<double>> psnr;
};

// Image-reconstruction sweep: encode each image at the given tile counts,
// sample a reconstruction with a fixed per-image seed, and report PSNR.
inline ReconEvalResult evaluate_reconstruction(FusedModel& m, const RunConfig& cfg,
                                               const std::vector<LatentImage>& images,
                                               const std::vector<int>& tile_counts) {
    Vocabulary vocab;
    vocab.v_text = cfg.encoder.v_text;
    ReconEvalResult out;
    out.csv = "image,tiles,mse,psnr\n";
    char buf[160];
    for (size_t i = 0; i < images.size(); ++i) {
        for (int tiles : tile_counts) {
            DatasetSample probe;
            probe.image = images[i];
            AssembledSample asm_ =
                assemble_sample(probe, BatchMode::Image, cfg.system_text, tiles, cfg.encoder, vocab);
            ConditioningSource src = build_source(m, asm_.sequence, asm_.cond_positions);
            Rng sampler = Rng::stream(cfg.seed, "recon-sampler", static_cast<uint64_t>(i));
            LatentImage rec = fused_sample(m, src, images[i].height, images[i].width,
                                           cfg.train.sample_steps, sampler);
            ReconMetrics met = reconstruction_metrics(images[i], rec);
            out.psnr[tiles].push_back(met.psnr);
            std::snprintf(buf, sizeof(buf), "%zu,%d,%.17g,%.17g\n", i, tiles, met.mse, met.psnr);
            out.csv += buf;
        }
    }
    return out;
}

}  // namespace lapflow
