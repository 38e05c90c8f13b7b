#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#ifndef LAPFLOW_CLI_PATH
#define LAPFLOW_CLI_PATH "lapflow"
#endif

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(LAPFLOW_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
}

std::string run_cli_capture(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(LAPFLOW_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    std::system(cmd.c_str());
    std::ifstream f(log);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

fs::path work_dir() {
    static fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "lapflow_cli_tests";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

fs::path write_config(const std::string& name, const nlohmann::json& j) {
    fs::path p = work_dir() / name;
    std::ofstream f(p);
    f << j.dump(2);
    return p;
}

nlohmann::json base_config(const std::string& out) {
    return nlohmann::json{
        {"seed", 17},
        {"out_dir", out},
        {"threads", 2},
        {"dataset",
         {{"kind", "shapes"},
          {"image_h", 8},
          {"image_w", 8},
          {"count", 8},
          {"shapes", {"square", "disc"}},
          {"colors", {"red", "blue"}}}},
        {"encoder", {{"layers", 4}, {"hidden", 16}, {"heads", 2}, {"max_seq", 96}}},
        {"dit", {{"layers", 2}, {"hidden", 16}, {"heads", 2}, {"max_latent", 16}}},
        {"fusion", {{"kind", "lap"}, {"stride", 2}, {"use_refiner", true}}},
        {"train",
         {{"steps", 3},
          {"batch", 2},
          {"lr", 1e-3},
          {"sample_steps", 2},
          {"eval_seeds", 1},
          {"mix", {{"text", 1.0}, {"image", 0.0}, {"text_image", 0.0}}}}},
    };
}

}  // namespace

TEST_CASE("gen-data writes byte-identical output for identical seeded runs") {
    fs::path d1 = work_dir() / "ds1", d2 = work_dir() / "ds2";
    fs::path cfg = write_config("gen.json", base_config(d1.string()));
    REQUIRE(run_cli("gen-data --config " + cfg.string()) == 0);
    REQUIRE(run_cli("gen-data --config " + cfg.string() + " --out " + d2.string()) == 0);
    CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
    CHECK(slurp(d1 / "images/000000.pnm") == slurp(d2 / "images/000000.pnm"));
}

TEST_CASE("config typos are rejected before touching the filesystem") {
    nlohmann::json bad = base_config((work_dir() / "never").string());
    bad["trian"] = 1;
    fs::path cfg = write_config("bad.json", bad);
    CHECK(run_cli("gen-data --config " + cfg.string()) != 0);
    CHECK(!fs::exists(work_dir() / "never"));
}

TEST_CASE("train then eval round trip on a tiny run") {
    fs::path out = work_dir() / "run1";
    fs::path cfg = write_config("train.json", base_config(out.string()));
    REQUIRE(run_cli("train --config " + cfg.string() + " --random-encoder") == 0);
    CHECK(fs::exists(out / "loss.csv"));
    CHECK(fs::exists(out / "model.ckpt"));

    fs::path eval_out = work_dir() / "eval1";
    REQUIRE(run_cli("eval --config " + cfg.string() + " --random-encoder --ckpt " +
                    (out / "model.ckpt").string() + " --out " + eval_out.string()) == 0);
    CHECK(fs::exists(eval_out / "eval.csv"));
    CHECK(fs::exists(eval_out / "eval_summary.json"));
    CHECK(fs::exists(eval_out / "sample_class00.pnm"));
}

TEST_CASE("aggregate matches the hand fixture exactly") {
    fs::path csv = work_dir() / "scores.csv";
    {
        std::ofstream f(csv);
        f << "prompt_id,category,seed,score\n";
        // category a: prompts p0 (0.2, 0.6), p1 (1.0, 0.0); category b: q0 (0.5, 0.5)
        f << "p0,a,0,0.2\np0,a,1,0.6\np1,a,0,1.0\np1,a,1,0.0\nq0,b,0,0.5\nq0,b,1,0.5\n";
    }
    fs::path out = work_dir() / "agg.json";
    std::string text = run_cli_capture(
        "aggregate --csv " + csv.string() + " --top-k 2 --out " + out.string(), work_dir() / "agg.log");
    nlohmann::json j = nlohmann::json::parse(slurp(out));
    CHECK(j["per_category"]["a"]["avg"].get<double>() == 0.45);
    CHECK(j["per_category"]["a"]["top_k"].get<double>() == 0.8);  // (0.6 + 1.0) / 2
    CHECK(j["per_category"]["b"]["avg"].get<double>() == 0.5);
    CHECK(j["macro_avg"].get<double>() == 0.475);
    CHECK(j["micro_avg"].get<double>() == Catch::Approx((0.2 + 0.6 + 1.0 + 0.0 + 0.5 + 0.5) / 6.0));

    std::string buggy = run_cli_capture("aggregate --csv " + csv.string() + " --buggy",
                                        work_dir() / "buggy.log");
    nlohmann::json jb = nlohmann::json::parse(buggy);
    CHECK(jb["per_category"]["a"].get<double>() == 0.0);  // last row of category a
    CHECK(jb["per_category"]["b"].get<double>() == 0.5);

    // malformed csv is a clean failure
    fs::path badcsv = work_dir() / "bad.csv";
    {
        std::ofstream f(badcsv);
        f << "nope\n";
    }
    CHECK(run_cli("aggregate --csv " + badcsv.string()) != 0);
}

TEST_CASE("rewrite emits the selection report") {
    fs::path cfg = write_config("rw.json", base_config((work_dir() / "rw").string()));
    std::string out = run_cli_capture(
        "rewrite --config " + cfg.string() + " --random-encoder --prompt \"red disc\" --max-new 4",
        work_dir() / "rw.log");
    nlohmann::json j = nlohmann::json::parse(out);
    CHECK(j.contains("rewritten"));
    CHECK(j.contains("selected_positions"));
    CHECK(j["selected_count"].get<int>() == j["selected_positions"].size());
}

TEST_CASE("analyze probes write their reports") {
    fs::path out = work_dir() / "probe_out";
    nlohmann::json cfgj = base_config(out.string());
    fs::path cfg = write_config("probe.json", cfgj);
    REQUIRE(run_cli("analyze --config " + cfg.string() + " --random-encoder --probe pooling-weights") ==
            0);
    CHECK(fs::exists(out / "pooling_weights.json"));
    REQUIRE(run_cli("analyze --config " + cfg.string() + " --random-encoder --probe position-bias") ==
            0);
    CHECK(fs::exists(out / "position_bias.csv"));
    std::string csv = slurp(out / "position_bias.csv");
    CHECK(csv.rfind("marker_pos,early_off,early_on,total_off,total_on\n", 0) == 0);
    REQUIRE(run_cli("analyze --config " + cfg.string() + " --random-encoder --probe layer-similarity") ==
            0);
    CHECK(fs::exists(out / "layer_similarity.csv"));
}
