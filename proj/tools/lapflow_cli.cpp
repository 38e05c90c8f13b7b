// Command-line surface: dataset synthesis, encoder pretraining, fused-model
// training with optional conditioning handoff, evaluation, reconstruction
// sweeps, analysis probes, benchmark aggregation, and in-context rewriting.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lapflow/analysis.hpp"
#include "lapflow/checkpoint.hpp"
#include "lapflow/config.hpp"
#include "lapflow/dataset.hpp"
#include "lapflow/trainer.hpp"
#include "lapflow/verifi.hpp"

namespace fs = std::filesystem;
using namespace lapflow;

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::string out_dir;
};

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = load_run_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* c = cmd->add_option("--config", args.config_path, "run configuration (json)");
    if (config_required) c->required();
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("--out", args.out_dir, "override the output directory");
}

EncoderWeights make_encoder(const RunConfig& cfg, const std::string& ckpt, bool random_frozen) {
    if (random_frozen) {
        Rng rng = Rng::stream(cfg.seed, "encoder-init");
        return EncoderWeights::randomized(cfg.encoder, rng);
    }
    require_io(!ckpt.empty(), "an encoder checkpoint is required (or pass --random-encoder)");
    return load_encoder(ckpt, cfg.encoder);
}

Dataset dataset_for(const RunConfig& cfg, const std::string& data_dir) {
    if (!data_dir.empty()) return load_dataset(data_dir);
    return generate_dataset(cfg.dataset, cfg.seed);
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path);
    require_io(f.good(), "cannot write " + path.string());
    f << text;
}

int cmd_gen_data(const CommonArgs& common) {
    RunConfig cfg = load_config(common);
    Dataset ds = generate_dataset(cfg.dataset, cfg.seed);
    write_dataset(ds, cfg.out_dir);
    std::cout << "wrote " << ds.samples.size() << " samples to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_pretrain_encoder(const CommonArgs& common, const std::vector<std::string>& data_dirs) {
    RunConfig cfg = load_config(common);
    std::vector<Dataset> owned;
    if (data_dirs.empty())
        owned.push_back(generate_dataset(cfg.dataset, cfg.seed));
    else
        for (const auto& d : data_dirs) owned.push_back(load_dataset(d));
    std::vector<const Dataset*> corpora;
    for (const auto& d : owned) corpora.push_back(&d);
    EncoderPretrainer pre(cfg, corpora);
    pre.train();
    std::cout << "encoder checkpoint: " << (fs::path(cfg.out_dir) / "encoder.ckpt").string() << "\n";
    return 0;
}

int cmd_train(const CommonArgs& common, const std::string& encoder_ckpt, bool random_encoder,
              const std::string& data_dir, const std::string& resume, const std::string& dit_from) {
    RunConfig cfg = load_config(common);
    Dataset ds = dataset_for(cfg, data_dir);
    EncoderWeights enc = make_encoder(cfg, encoder_ckpt, random_encoder);
    Trainer trainer(cfg, ds, enc);
    int64_t start = 0;
    if (!dit_from.empty()) trainer.adopt_dit(dit_from);
    if (!resume.empty()) start = trainer.load_state(resume);
    trainer.train(start);
    std::cout << "final loss " << trainer.final_loss() << "; checkpoint "
              << (fs::path(cfg.out_dir) / "model.ckpt").string() << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& encoder_ckpt, bool random_encoder,
             const std::string& ckpt, const std::string& data_dir) {
    RunConfig cfg = load_config(common);
    Dataset ds = dataset_for(cfg, data_dir);
    EncoderWeights enc = make_encoder(cfg, encoder_ckpt, random_encoder);
    Trainer trainer(cfg, ds, enc);
    require_io(!ckpt.empty(), "eval: --ckpt is required");
    trainer.load_state(ckpt);
    GenEvalResult res = evaluate_shapes(trainer, cfg, ds);
    fs::create_directories(cfg.out_dir);
    write_text(fs::path(cfg.out_dir) / "eval.csv", res.csv);
    nlohmann::ordered_json summary;
    summary["accuracy"] = res.accuracy;
    summary["classes"] = ds.spec.num_classes();
    summary["seeds_per_class"] = cfg.train.eval_seeds;
    write_text(fs::path(cfg.out_dir) / "eval_summary.json", summary.dump(2) + "\n");
    // a strip of generated samples for eyeballing
    FusedModel& m = trainer.model();
    Vocabulary vocab;
    vocab.v_text = cfg.encoder.v_text;
    for (int64_t c = 0; c < std::min<int64_t>(4, ds.spec.num_classes()); ++c) {
        DatasetSample probe;
        probe.scene = scene_of_class(c, ds.spec);
        probe.short_caption = short_caption(probe.scene);
        probe.long_caption = long_caption(probe.scene);
        probe.image = render_template(probe.scene, ds.spec);
        AssembledSample asm_ =
            assemble_sample(probe, BatchMode::Text, cfg.system_text, 1, cfg.encoder, vocab);
        ConditioningSource src = build_source(m, asm_.sequence, asm_.cond_positions);
        Rng sampler = Rng::stream(cfg.seed, "sampler", static_cast<uint64_t>(c * 1000));
        LatentImage img =
            fused_sample(m, src, ds.spec.image_h, ds.spec.image_w, cfg.train.sample_steps, sampler);
        char name[64];
        std::snprintf(name, sizeof(name), "sample_class%02lld.pnm", static_cast<long long>(c));
        write_pnm(img, (fs::path(cfg.out_dir) / name).string());
    }
    std::cout << "accuracy " << res.accuracy << "\n";
    return 0;
}

int cmd_reconstruct(const CommonArgs& common, const std::string& encoder_ckpt, bool random_encoder,
                    const std::string& ckpt, const std::string& image_path,
                    std::vector<int> tile_counts) {
    RunConfig cfg = load_config(common);
    Dataset ds;  // trainer needs a dataset object; reuse the configured one lazily
    ds.spec = cfg.dataset;
    EncoderWeights enc = make_encoder(cfg, encoder_ckpt, random_encoder);
    Dataset stub = generate_dataset(cfg.dataset, cfg.seed);
    Trainer trainer(cfg, stub, enc);
    require_io(!ckpt.empty(), "reconstruct: --ckpt is required");
    trainer.load_state(ckpt);
    if (tile_counts.empty()) tile_counts = {1, 5, 10};
    LatentImage img = read_pnm(image_path);
    ReconEvalResult res = evaluate_reconstruction(trainer.model(), cfg, {img}, tile_counts);
    fs::create_directories(cfg.out_dir);
    write_text(fs::path(cfg.out_dir) / "reconstruct.csv", res.csv);
    // also write the reconstruction images
    Vocabulary vocab;
    vocab.v_text = cfg.encoder.v_text;
    for (int tiles : tile_counts) {
        DatasetSample probe;
        probe.image = img;
        AssembledSample asm_ =
            assemble_sample(probe, BatchMode::Image, cfg.system_text, tiles, cfg.encoder, vocab);
        ConditioningSource src = build_source(trainer.model(), asm_.sequence, asm_.cond_positions);
        Rng sampler = Rng::stream(cfg.seed, "recon-sampler", 0);
        LatentImage rec = fused_sample(trainer.model(), src, img.height, img.width,
                                       cfg.train.sample_steps, sampler);
        char name[64];
        std::snprintf(name, sizeof(name), "recon_tiles%02d.pnm", tiles);
        write_pnm(rec, (fs::path(cfg.out_dir) / name).string());
    }
    std::cout << res.csv;
    return 0;
}

int cmd_analyze(const CommonArgs& common, const std::string& encoder_ckpt, bool random_encoder,
                const std::string& ckpt, const std::string& probe,
                const std::vector<int>& drop_layers) {
    RunConfig cfg = load_config(common);
    EncoderWeights enc = make_encoder(cfg, encoder_ckpt, random_encoder);
    Dataset ds = generate_dataset(cfg.dataset, cfg.seed);
    Trainer trainer(cfg, ds, enc);
    if (!ckpt.empty()) trainer.load_state(ckpt);
    FusedModel& m = trainer.model();
    fs::create_directories(cfg.out_dir);
    Vocabulary vocab;
    vocab.v_text = cfg.encoder.v_text;

    if (probe == "pooling-weights") {
        nlohmann::ordered_json j;
        j["layer_indices"] = nlohmann::json::array();
        int cnt = 0;
        for (int n = cfg.fusion.stride; n <= cfg.encoder.layers; n += cfg.fusion.stride) {
            j["layer_indices"].push_back(n);
            ++cnt;
        }
        j["pool_weight_abs"] = pooling_weight_report(m.adapter);
        write_text(fs::path(cfg.out_dir) / "pooling_weights.json", j.dump(2) + "\n");
        std::cout << j.dump(2) << "\n";
        return 0;
    }
    if (probe == "layer-similarity") {
        const DatasetSample& s = ds.samples.at(0);
        AssembledSample asm_ =
            assemble_sample(s, BatchMode::Text, cfg.system_text, 1, cfg.encoder, vocab);
        EncodeResult er = encode(asm_.sequence, cfg.encoder, enc);
        std::string csv = "layer_a,layer_b,cosine\n";
        LayerStack all = select_layers(er.stack, 1);
        auto sims = layer_similarity(all);
        char buf[96];
        for (size_t i = 0; i + 1 < all.layer_indices.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", all.layer_indices[i],
                          all.layer_indices[i + 1], sims[i]);
            csv += buf;
        }
        write_text(fs::path(cfg.out_dir) / "layer_similarity.csv", csv);
        std::cout << csv;
        return 0;
    }
    if (probe == "layer-dropout") {
        const DatasetSample& s = ds.samples.at(0);
        AssembledSample asm_ =
            assemble_sample(s, BatchMode::Text, cfg.system_text, 1, cfg.encoder, vocab);
        ConditioningSource src = build_source(m, asm_.sequence, asm_.cond_positions);
        std::vector<std::pair<std::string, std::vector<int>>> sets;
        if (!drop_layers.empty()) {
            sets.emplace_back("requested", drop_layers);
        } else {
            const auto& idx = src.selected.layer_indices;
            sets.emplace_back("first", std::vector<int>{idx.front()});
            sets.emplace_back("middle", std::vector<int>{idx[idx.size() / 2]});
            sets.emplace_back("last", std::vector<int>{idx.back()});
        }
        std::string csv = "drop_set,mse_delta\n";
        for (const auto& [name, layers] : sets) {
            const double delta = layer_dropout_probe(m, src, layers, cfg.dataset.image_h,
                                                     cfg.dataset.image_w, cfg.train.sample_steps,
                                                     cfg.seed);
            char buf[96];
            std::snprintf(buf, sizeof(buf), "%s,%.17g\n", name.c_str(), delta);
            csv += buf;
        }
        write_text(fs::path(cfg.out_dir) / "layer_dropout.csv", csv);
        std::cout << csv;
        return 0;
    }
    if (probe == "position-bias") {
        auto rows = position_bias_probe(m, "the marker sits here somewhere", 'x', 'q');
        write_position_bias_csv(rows, (fs::path(cfg.out_dir) / "position_bias.csv").string());
        std::cout << "wrote position_bias.csv (" << rows.size() << " rows)\n";
        return 0;
    }
    if (probe == "activation-norms") {
        const DatasetSample& s = ds.samples.at(0);
        AssembledSample asm_ =
            assemble_sample(s, BatchMode::Text, cfg.system_text, 1, cfg.encoder, vocab);
        ConditioningSource src = build_source(m, asm_.sequence, asm_.cond_positions);
        LayerReport rep = activation_norm_report(src.selected, m.adapter);
        std::string csv = "token,layer,q_norm,k_norm,v_norm,qk_norm,kv_norm\n";
        char buf[192];
        for (int64_t t = 0; t < rep.qk_norm.rows(); ++t)
            for (int64_t l = 0; l < rep.qk_norm.cols(); ++l) {
                std::snprintf(buf, sizeof(buf), "%lld,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                              static_cast<long long>(t), rep.layer_indices[static_cast<size_t>(l)],
                              rep.q_norm.at(t, l), rep.k_norm.at(t, l), rep.v_norm.at(t, l),
                              rep.qk_norm.at(t, l), rep.kv_norm.at(t, l));
                csv += buf;
            }
        write_text(fs::path(cfg.out_dir) / "activation_norms.csv", csv);
        std::cout << "wrote activation_norms.csv\n";
        return 0;
    }
    throw std::invalid_argument("unknown probe: " + probe);
}

int cmd_aggregate(const std::string& csv_path, int top_k, const std::string& out_path, bool buggy) {
    ScoreTable table = load_score_csv(csv_path);
    nlohmann::ordered_json j;
    if (buggy) {
        BuggyAggregateReport rep = benchmark_aggregate_buggy(table);
        j["overall"] = rep.overall;
        for (const auto& [cat, score] : rep.per_category) j["per_category"][cat] = score;
    } else {
        AggregateReport rep = benchmark_aggregate(table, top_k);
        j["micro_avg"] = rep.micro_avg;
        j["macro_avg"] = rep.macro_avg;
        j["micro_top_k"] = rep.micro_top_k;
        j["macro_top_k"] = rep.macro_top_k;
        j["top_k"] = top_k;
        for (const auto& c : rep.per_category) {
            j["per_category"][c.category]["avg"] = c.avg;
            j["per_category"][c.category]["top_k"] = c.top_k;
        }
    }
    const std::string text = j.dump(2) + "\n";
    if (!out_path.empty()) write_text(out_path, text);
    std::cout << text;
    return 0;
}

int cmd_rewrite(const CommonArgs& common, const std::string& encoder_ckpt, bool random_encoder,
                const std::string& mode, int max_new, const std::string& system_file,
                const std::string& prompt, const std::string& image_path, int tiles) {
    RunConfig cfg = load_config(common);
    EncoderWeights enc = make_encoder(cfg, encoder_ckpt, random_encoder);
    Vocabulary vocab;
    vocab.v_text = cfg.encoder.v_text;
    std::string system_text = cfg.system_text;
    if (!system_file.empty()) {
        std::ifstream f(system_file);
        require_io(f.good(), "cannot open system file " + system_file);
        std::getline(f, system_text);
    }
    std::vector<TileSet> images;
    if (!image_path.empty()) images.push_back(tile_image(read_pnm(image_path), tiles, cfg.encoder));
    ChatSequence chat = build_chat_sequence(system_text, prompt, images, vocab);
    RewriteResult res = rewrite_in_context(cfg.encoder, enc, chat, max_new, vocab);
    auto [mask, stack] = select_conditioning(res, conditioning_mode_from(mode));

    nlohmann::ordered_json j;
    j["rewritten"] = detokenize_text(res.rewritten_ids, vocab);
    j["rewritten_span"] = {res.rewritten_span.first, res.rewritten_span.second};
    j["selected_positions"] = mask.positions();
    j["selected_count"] = mask.positions().size();
    j["sequence_length"] = res.full_sequence.size();
    std::cout << j.dump(2) << "\n";
    if (!common.out_dir.empty()) write_text(fs::path(common.out_dir) / "rewrite.json", j.dump(2) + "\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified-encoder conditioning toolbox"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string encoder_ckpt, ckpt, data_dir, resume, dit_from, image_path, probe, system_file,
        prompt, mode = "text", csv_path, out_path;
    bool random_encoder = false, buggy = false;
    std::vector<std::string> data_dirs;
    std::vector<int> tile_counts, drop_layers;
    int top_k = 4, max_new = 24, tiles = 1;

    auto* gen = app.add_subcommand("gen-data", "synthesize a dataset");
    add_common(gen, common);

    auto* pre = app.add_subcommand("pretrain-encoder", "pretrain the frozen encoder");
    add_common(pre, common);
    pre->add_option("--data", data_dirs, "dataset directories (repeatable)");

    auto* train = app.add_subcommand("train", "train a fused generator");
    add_common(train, common);
    train->add_option("--encoder", encoder_ckpt, "encoder checkpoint");
    train->add_flag("--random-encoder", random_encoder, "use a random frozen encoder");
    train->add_option("--data", data_dir, "dataset directory (default: generate from config)");
    train->add_option("--resume", resume, "resume from a model checkpoint");
    train->add_option("--dit-from", dit_from, "adopt generator weights from a checkpoint");

    auto* handoff = app.add_subcommand("handoff", "continue an old generator with a new conditioning stack");
    add_common(handoff, common);
    handoff->add_option("--encoder", encoder_ckpt, "encoder checkpoint");
    handoff->add_flag("--random-encoder", random_encoder, "use a random frozen encoder");
    handoff->add_option("--data", data_dir, "dataset directory");
    handoff->add_option("--ckpt", ckpt, "old model checkpoint to adopt the generator from")->required();

    auto* eval = app.add_subcommand("eval", "conditional-accuracy evaluation");
    add_common(eval, common);
    eval->add_option("--encoder", encoder_ckpt, "encoder checkpoint");
    eval->add_flag("--random-encoder", random_encoder, "use a random frozen encoder");
    eval->add_option("--ckpt", ckpt, "model checkpoint")->required();
    eval->add_option("--data", data_dir, "dataset directory");

    auto* recon = app.add_subcommand("reconstruct", "tile-sweep reconstruction of one image");
    add_common(recon, common);
    recon->add_option("--encoder", encoder_ckpt, "encoder checkpoint");
    recon->add_flag("--random-encoder", random_encoder, "use a random frozen encoder");
    recon->add_option("--ckpt", ckpt, "model checkpoint")->required();
    recon->add_option("--image", image_path, "input image (pnm)")->required();
    recon->add_option("--tiles", tile_counts, "tile counts to sweep (default 1 5 10)");

    auto* analyze = app.add_subcommand("analyze", "inspection probes");
    add_common(analyze, common);
    analyze->add_option("--encoder", encoder_ckpt, "encoder checkpoint");
    analyze->add_flag("--random-encoder", random_encoder, "use a random frozen encoder");
    analyze->add_option("--ckpt", ckpt, "model checkpoint (optional for some probes)");
    analyze
        ->add_option("--probe", probe,
                     "pooling-weights | layer-similarity | layer-dropout | position-bias | "
                     "activation-norms")
        ->required();
    analyze->add_option("--drop-layers", drop_layers, "layer indices for the dropout probe");

    auto* agg = app.add_subcommand("aggregate", "benchmark score aggregation");
    agg->add_option("--csv", csv_path, "score table csv")->required();
    agg->add_option("--top-k", top_k, "seeds per prompt used for the best-of column");
    agg->add_option("--out", out_path, "write the report json here");
    agg->add_flag("--buggy", buggy, "reproduce the documented defective aggregation");

    auto* rewrite = app.add_subcommand("rewrite", "in-context rewriting of one prompt");
    add_common(rewrite, common);
    rewrite->add_option("--encoder", encoder_ckpt, "encoder checkpoint");
    rewrite->add_flag("--random-encoder", random_encoder, "use a random frozen encoder");
    rewrite->add_option("--mode", mode, "text | multimodal");
    rewrite->add_option("--max-new", max_new, "decode budget");
    rewrite->add_option("--system-file", system_file, "file holding the system text");
    rewrite->add_option("--prompt", prompt, "user prompt")->required();
    rewrite->add_option("--image", image_path, "optional input image (pnm)");
    rewrite->add_option("--tiles", tiles, "tile count for the image");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(common);
        if (pre->parsed()) return cmd_pretrain_encoder(common, data_dirs);
        if (train->parsed())
            return cmd_train(common, encoder_ckpt, random_encoder, data_dir, resume, dit_from);
        if (handoff->parsed())
            return cmd_train(common, encoder_ckpt, random_encoder, data_dir, "", ckpt);
        if (eval->parsed()) return cmd_eval(common, encoder_ckpt, random_encoder, ckpt, data_dir);
        if (recon->parsed())
            return cmd_reconstruct(common, encoder_ckpt, random_encoder, ckpt, image_path, tile_counts);
        if (analyze->parsed())
            return cmd_analyze(common, encoder_ckpt, random_encoder, ckpt, probe, drop_layers);
        if (agg->parsed()) return cmd_aggregate(csv_path, top_k, out_path, buggy);
        if (rewrite->parsed())
            return cmd_rewrite(common, encoder_ckpt, random_encoder, mode, max_new, system_file,
                               prompt, image_path, tiles);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
