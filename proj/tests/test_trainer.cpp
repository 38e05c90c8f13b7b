#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "lapflow/trainer.hpp"

using namespace lapflow;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run(const std::string& out = "") {
    RunConfig cfg;
    cfg.seed = 5;
    cfg.out_dir = out;
    cfg.threads = 2;
    cfg.system_text = "draw";
    cfg.encoder.layers = 2;
    cfg.encoder.hidden = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.channels = 3;
    cfg.encoder.patch = 4;
    cfg.encoder.tile = 8;
    cfg.encoder.max_seq = 96;
    cfg.dit.layers = 2;
    cfg.dit.hidden = 8;
    cfg.dit.heads = 2;
    cfg.dit.channels = 3;
    cfg.dit.time_dim = 8;
    cfg.dit.max_latent = 16;
    cfg.fusion.kind = FusionKind::LAP;
    cfg.fusion.stride = 1;
    cfg.fusion.use_refiner = true;
    cfg.dataset.kind = "shapes";
    cfg.dataset.image_h = 8;
    cfg.dataset.image_w = 8;
    cfg.dataset.shapes = {"square", "disc"};
    cfg.dataset.colors = {"red", "blue"};
    cfg.dataset.count = 8;
    cfg.train.steps = 4;
    cfg.train.batch = 2;
    cfg.train.lr = 1e-3;
    cfg.train.mix_text = 1.0;
    cfg.train.mix_image = 0.0;
    cfg.train.mix_text_image = 0.0;
    cfg.train.tile_options = {1};
    cfg.train.sample_steps = 2;
    cfg.train.eval_seeds = 1;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("lapflow_trainer_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("assemble_sample conditioning positions per mode") {
    RunConfig cfg = tiny_run();
    Vocabulary vocab;
    Dataset ds = generate_dataset(cfg.dataset, 1);
    const DatasetSample& s = ds.samples[0];

    AssembledSample text = assemble_sample(s, BatchMode::Text, cfg.system_text, 1, cfg.encoder, vocab);
    const int64_t rew = static_cast<int64_t>(s.long_caption.size());
    CHECK(static_cast<int64_t>(text.cond_positions.size()) == rew);
    for (int p : text.cond_positions)
        CHECK(text.sequence.entries[static_cast<size_t>(p)].role == Role::Rewritten);

    AssembledSample img = assemble_sample(s, BatchMode::Image, cfg.system_text, 1, cfg.encoder, vocab);
    CHECK(!img.cond_positions.empty());
    for (int p : img.cond_positions)
        CHECK(img.sequence.entries[static_cast<size_t>(p)].role == Role::Image);

    AssembledSample both =
        assemble_sample(s, BatchMode::TextImage, cfg.system_text, 1, cfg.encoder, vocab);
    CHECK(static_cast<int64_t>(both.cond_positions.size()) ==
          rew + static_cast<int64_t>(img.cond_positions.size()));
}

TEST_CASE("train_step with zero learning rate leaves parameters bitwise unchanged") {
    RunConfig cfg = tiny_run();
    cfg.train.lr = 0.0;
    Dataset ds = generate_dataset(cfg.dataset, 2);
    Rng erng(1);
    EncoderWeights enc = EncoderWeights::randomized(cfg.encoder, erng);
    Trainer tr(cfg, ds, enc);

    std::vector<std::vector<double>> before;
    for (const auto& p : trainable_params(tr.model())) before.push_back(p.tensor->data);
    tr.train_step(0);
    size_t i = 0;
    for (const auto& p : trainable_params(tr.model())) {
        CHECK(std::memcmp(p.tensor->data.data(), before[i].data(),
                          before[i].size() * sizeof(double)) == 0);
        ++i;
    }
}

TEST_CASE("overfit probe: loss strictly decreases on one sample at fixed t") {
    RunConfig cfg = tiny_run();
    cfg.dataset.count = 1;
    cfg.train.batch = 1;
    cfg.train.lr = 3e-3;
    cfg.train.steps = 50;
    Dataset ds = generate_dataset(cfg.dataset, 3);
    Rng erng(2);
    EncoderWeights enc = EncoderWeights::randomized(cfg.encoder, erng);
    Trainer tr(cfg, ds, enc);

    // fixed time and fixed per-step seed 0 noise: the only parameter path is
    // гdescent, so each step must reduce the loss
    double prev = 1e300;
    for (int s = 0; s < 50; ++s) {
        // reuse step index 0 so the noise draw is identical every step
        const double loss = tr.train_step(0, 0.5);
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("training is deterministic across identical seeded runs") {
    RunConfig cfg = tiny_run();
    Dataset ds = generate_dataset(cfg.dataset, 4);
    Rng e1(3), e2(3);
    EncoderWeights enc1 = EncoderWeights::randomized(cfg.encoder, e1);
    EncoderWeights enc2 = EncoderWeights::randomized(cfg.encoder, e2);
    Trainer a(cfg, ds, enc1), b(cfg, ds, enc2);
    a.train();
    b.train();
    REQUIRE(a.losses().size() == b.losses().size());
    for (size_t i = 0; i < a.losses().size(); ++i)
        CHECK(std::memcmp(&a.losses()[i], &b.losses()[i], sizeof(double)) == 0);
}

TEST_CASE("thread count does not change results") {
    RunConfig cfg = tiny_run();
    cfg.train.batch = 3;
    Dataset ds = generate_dataset(cfg.dataset, 4);
    Rng e1(3), e2(3);
    EncoderWeights enc1 = EncoderWeights::randomized(cfg.encoder, e1);
    RunConfig cfg1 = cfg;
    cfg1.threads = 1;
    EncoderWeights enc2 = EncoderWeights::randomized(cfg.encoder, e2);
    Trainer a(cfg, ds, enc1), b(cfg1, ds, enc2);
    const double la = a.train_step(0);
    const double lb = b.train_step(0);
    CHECK(std::memcmp(&la, &lb, sizeof(double)) == 0);
}

TEST_CASE("schedule hooks land exactly at configured fractions") {
    RunConfig cfg = tiny_run();
    cfg.train.steps = 200;
    cfg.train.schedule = {{0.15, BatchMode::Image}, {1.0, BatchMode::Text}};
    Dataset ds = generate_dataset(cfg.dataset, 5);
    Rng erng(4);
    EncoderWeights enc = EncoderWeights::randomized(cfg.encoder, erng);
    Trainer tr(cfg, ds, enc);

    for (int64_t s = 0; s < 30; ++s) CHECK(tr.scheduled_mode(s) == BatchMode::Image);
    for (int64_t s = 30; s < 200; ++s) CHECK(tr.scheduled_mode(s) == BatchMode::Text);
}

TEST_CASE("handoff swaps the adapter and keeps the generator") {
    RunConfig cfg = tiny_run();
    cfg.train.steps = 10;
    cfg.train.handoff_fraction = 0.4;
    Dataset ds = generate_dataset(cfg.dataset, 6);
    Rng erng(5);
    EncoderWeights enc = EncoderWeights::randomized(cfg.encoder, erng);
    Trainer tr(cfg, ds, enc);
    CHECK(tr.handoff_step() == 4);
    CHECK(tr.model().variant.kind == FusionKind::LastLayer);

    std::vector<double> dit_before = tr.model().dit.blocks[0].wq.data;
    tr.apply_handoff();
    CHECK(tr.model().variant.kind == FusionKind::LAP);
    CHECK(tr.model().variant.use_refiner);
    CHECK(std::memcmp(tr.model().dit.blocks[0].wq.data.data(), dit_before.data(),
                      dit_before.size() * sizeof(double)) == 0);
}

TEST_CASE("resumed run reproduces the uninterrupted loss curve") {
    fs::path d1 = temp_dir("resume_a"), d2 = temp_dir("resume_b");
    RunConfig cfg = tiny_run(d1.string());
    cfg.train.steps = 6;
    Dataset ds = generate_dataset(cfg.dataset, 7);
    Rng e1(6), e2(6);
    EncoderWeights enc1 = EncoderWeights::randomized(cfg.encoder, e1);
    EncoderWeights enc2 = EncoderWeights::randomized(cfg.encoder, e2);

    Trainer full(cfg, ds, enc1);
    full.train();

    RunConfig cfg_half = cfg;
    cfg_half.out_dir = d2.string();
    cfg_half.train.steps = 3;
    Trainer half(cfg_half, ds, enc2);
    half.train();
    // resume from the checkpoint for the remaining steps
    RunConfig cfg_rest = cfg;
    cfg_rest.out_dir = d2.string();
    Trainer rest(cfg_rest, ds, enc2);
    rest.load_state((d2 / "model.ckpt").string());
    rest.train(3);

    CHECK(slurp(d1 / "loss.csv") == slurp(d2 / "loss.csv"));
}

TEST_CASE("trainer writes loss csv and checkpoint, and the frozen encoder stays frozen") {
    fs::path dir = temp_dir("artifacts");
    RunConfig cfg = tiny_run(dir.string());
    Dataset ds = generate_dataset(cfg.dataset, 8);
    Rng erng(7);
    EncoderWeights enc = EncoderWeights::randomized(cfg.encoder, erng);
    const uint64_t before = enc.checksum();
    Trainer tr(cfg, ds, enc);
    tr.train();
    CHECK(enc.checksum() == before);
    CHECK(fs::exists(dir / "loss.csv"));
    CHECK(fs::exists(dir / "model.ckpt"));
    std::string csv = slurp(dir / "loss.csv");
    CHECK(csv.rfind("step,loss\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + cfg.train.steps);
}

TEST_CASE("encoder pretrainer reduces loss and keeps determinism") {
    RunConfig cfg = tiny_run();
    cfg.train.steps = 8;
    cfg.train.batch = 4;
    cfg.train.lr = 3e-3;
    Dataset ds = generate_dataset(cfg.dataset, 9);
    EncoderPretrainer p1(cfg, {&ds});
    EncoderPretrainer p2(cfg, {&ds});
    double first = 0.0, last = 0.0;
    for (int64_t s = 0; s < cfg.train.steps; ++s) {
        const double l1 = p1.train_step(s);
        const double l2 = p2.train_step(s);
        CHECK(std::memcmp(&l1, &l2, sizeof(double)) == 0);
        if (s == 0) first = l1;
        last = l1;
    }
    CHECK(last < first);
}

TEST_CASE("pretraining gradients match finite differences on a mixed sequence") {
    RunConfig cfg = tiny_run();
    cfg.train.batch = 1;
    Dataset ds = generate_dataset(cfg.dataset, 10);
    EncoderPretrainer pt(cfg, {&ds});

    TokenSequence seq = pt.make_sequence(ds.samples[0], true, 1);
    EncoderWeights grads = EncoderWeights::sized(cfg.encoder);
    pt.sequence_loss_and_backward(seq, grads, 1.0);
    auto objective = [&] {
        EncoderWeights tmp = EncoderWeights::sized(cfg.encoder);
        return pt.sequence_loss_and_backward(seq, tmp, 1.0);
    };
    ParamRefs wp = pt.weights().params(), gp = grads.params();
    // spot-check a few parameter groups to keep the runtime reasonable
    ParamRefs wf, gf;
    for (size_t i = 0; i < wp.size(); ++i) {
        if (wp[i].name == "enc.patch_embed" || wp[i].name == "enc.patch_head" ||
            wp[i].name == "enc.block0.wq" || wp[i].name == "enc.block1.ff_out") {
            wf.push_back(wp[i]);
            gf.push_back(gp[i]);
        }
    }
    CHECK(grad_check_many(objective, wf, gf, 1e-5) <= 1e-4);
}
