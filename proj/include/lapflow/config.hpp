#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lapflow/dataset.hpp"
#include "lapflow/fusion.hpp"
#include "lapflow/verifi.hpp"

namespace lapflow {

// Conditioning composition of one training element.
enum class BatchMode { Text, Image, TextImage };

inline const char* batch_mode_name(BatchMode m) {
    switch (m) {
        case BatchMode::Text: return "text";
        case BatchMode::Image: return "image";
        case BatchMode::TextImage: return "text_image";
    }
    return "?";
}

inline BatchMode batch_mode_from(const std::string& s) {
    if (s == "text") return BatchMode::Text;
    if (s == "image") return BatchMode::Image;
    if (s == "text_image") return BatchMode::TextImage;
    throw std::invalid_argument("unknown batch mode: " + s);
}

// Forces a conditioning mode for all steps below the given fraction of the
// run; steps past every hook fall back to the configured mix.
struct ScheduleHook {
    double until_fraction = 0.0;
    BatchMode mode = BatchMode::Text;
};

struct TrainConfig {
    int64_t steps = 2000;
    int64_t batch = 64;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double mix_text = 0.85, mix_image = 0.05, mix_text_image = 0.10;
    std::vector<int> tile_options = {1};  // per-sample tile count rotation
    std::vector<ScheduleHook> schedule;
    double handoff_fraction = 0.0;        // 0 = no mid-run conditioning swap
    FusionKind handoff_initial = FusionKind::LastLayer;
    int sample_steps = 16;
    int eval_seeds = 8;
    int64_t checkpoint_every = 0;  // 0 = final only
};

struct RunConfig {
    uint64_t seed = 1;
    std::string out_dir = "out";
    int threads = 2;
    std::string system_text = "describe the picture";
    EncoderConfig encoder;
    DiTConfig dit;
    FusionVariant fusion;
    SyntheticDatasetSpec dataset;
    TrainConfig train;

    void validate() const {
        encoder.validate(fusion.kind == FusionKind::LAP || fusion.kind == FusionKind::LastLayer
                             ? fusion.stride
                             : 1);
        dit.validate();
        check_variant_constraints(fusion, encoder, dit);
        const double mix = train.mix_text + train.mix_image + train.mix_text_image;
        require(std::abs(mix - 1.0) < 1e-9, "config: data mix fractions must sum to 1");
        require(train.steps >= 1 && train.batch >= 1, "config: steps/batch must be positive");
        require(!train.tile_options.empty(), "config: tile options must not be empty");
        for (int t : train.tile_options)
            require(t >= 1 && t <= encoder.max_tiles, "config: tile count out of range");
        require(train.handoff_fraction >= 0.0 && train.handoff_fraction < 1.0,
                "config: handoff fraction must be in [0,1)");
        double prev = 0.0;
        for (const auto& h : train.schedule) {
            require(h.until_fraction > prev && h.until_fraction <= 1.0,
                    "config: schedule fractions must be increasing in (0,1]");
            prev = h.until_fraction;
        }
        require(dataset.kind == "shapes" || dataset.kind == "textures", "config: unknown dataset kind");
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::set<std::string>& known,
                       const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        require(known.count(it.key()) > 0, "config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void maybe(const nlohmann::json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

// Strict parser: unknown keys anywhere are errors, so a typo cannot silently
// fall back to a default.
inline RunConfig parse_run_config(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::maybe;
    RunConfig cfg;
    check_keys(j, {"seed", "out_dir", "threads", "system_text", "encoder", "dit", "fusion",
                   "dataset", "train"},
               "top level");
    maybe(j, "seed", cfg.seed);
    maybe(j, "out_dir", cfg.out_dir);
    maybe(j, "threads", cfg.threads);
    maybe(j, "system_text", cfg.system_text);

    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        check_keys(e, {"layers", "hidden", "heads", "patch", "tile", "channels", "max_tiles", "max_seq"},
                   "encoder");
        maybe(e, "layers", cfg.encoder.layers);
        maybe(e, "hidden", cfg.encoder.hidden);
        maybe(e, "heads", cfg.encoder.heads);
        maybe(e, "patch", cfg.encoder.patch);
        maybe(e, "tile", cfg.encoder.tile);
        maybe(e, "channels", cfg.encoder.channels);
        maybe(e, "max_tiles", cfg.encoder.max_tiles);
        maybe(e, "max_seq", cfg.encoder.max_seq);
    }
    if (j.contains("dit")) {
        const auto& d = j.at("dit");
        check_keys(d, {"layers", "hidden", "heads", "time_dim", "channels", "max_latent"}, "dit");
        maybe(d, "layers", cfg.dit.layers);
        maybe(d, "hidden", cfg.dit.hidden);
        maybe(d, "heads", cfg.dit.heads);
        maybe(d, "time_dim", cfg.dit.time_dim);
        maybe(d, "channels", cfg.dit.channels);
        maybe(d, "max_latent", cfg.dit.max_latent);
    }
    if (j.contains("fusion")) {
        const auto& f = j.at("fusion");
        check_keys(f, {"kind", "stride", "use_refiner", "per_dit_layer", "ll_rms_passes"}, "fusion");
        if (f.contains("kind")) cfg.fusion.kind = fusion_kind_from(f.at("kind").get<std::string>());
        maybe(f, "stride", cfg.fusion.stride);
        maybe(f, "use_refiner", cfg.fusion.use_refiner);
        maybe(f, "per_dit_layer", cfg.fusion.per_dit_layer);
        maybe(f, "ll_rms_passes", cfg.fusion.ll_rms_passes);
    }
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, {"kind", "image_h", "image_w", "channels", "shapes", "colors", "count", "speckles"},
                   "dataset");
        maybe(d, "kind", cfg.dataset.kind);
        maybe(d, "image_h", cfg.dataset.image_h);
        maybe(d, "image_w", cfg.dataset.image_w);
        maybe(d, "channels", cfg.dataset.channels);
        maybe(d, "shapes", cfg.dataset.shapes);
        maybe(d, "colors", cfg.dataset.colors);
        maybe(d, "count", cfg.dataset.count);
        maybe(d, "speckles", cfg.dataset.speckles);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t,
                   {"steps", "batch", "lr", "weight_decay", "mix", "tiles", "schedule", "handoff",
                    "sample_steps", "eval_seeds", "checkpoint_every"},
                   "train");
        maybe(t, "steps", cfg.train.steps);
        maybe(t, "batch", cfg.train.batch);
        maybe(t, "lr", cfg.train.lr);
        maybe(t, "weight_decay", cfg.train.weight_decay);
        maybe(t, "sample_steps", cfg.train.sample_steps);
        maybe(t, "eval_seeds", cfg.train.eval_seeds);
        maybe(t, "checkpoint_every", cfg.train.checkpoint_every);
        if (t.contains("mix")) {
            const auto& m = t.at("mix");
            check_keys(m, {"text", "image", "text_image"}, "train.mix");
            maybe(m, "text", cfg.train.mix_text);
            maybe(m, "image", cfg.train.mix_image);
            maybe(m, "text_image", cfg.train.mix_text_image);
        }
        if (t.contains("tiles")) {
            if (t.at("tiles").is_array())
                cfg.train.tile_options = t.at("tiles").get<std::vector<int>>();
            else
                cfg.train.tile_options = {t.at("tiles").get<int>()};
        }
        if (t.contains("schedule")) {
            cfg.train.schedule.clear();
            for (const auto& h : t.at("schedule")) {
                check_keys(h, {"until", "mode"}, "train.schedule[]");
                ScheduleHook hook;
                hook.until_fraction = h.at("until").get<double>();
                hook.mode = batch_mode_from(h.at("mode").get<std::string>());
                cfg.train.schedule.push_back(hook);
            }
        }
        if (t.contains("handoff")) {
            const auto& h = t.at("handoff");
            check_keys(h, {"fraction", "initial"}, "train.handoff");
            maybe(h, "fraction", cfg.train.handoff_fraction);
            if (h.contains("initial"))
                cfg.train.handoff_initial = fusion_kind_from(h.at("initial").get<std::string>());
        }
    }
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    require_io(f.good(), "config: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(f);
    RunConfig cfg = parse_run_config(j);
    cfg.validate();
    return cfg;
}

}  // namespace lapflow
