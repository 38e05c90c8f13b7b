#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lapflow/image.hpp"

namespace lapflow {

// Desk-scale synthetic corpora. "shapes" renders one colored glyph per class
// on a black canvas with a deterministic caption pair per class; "textures"
// renders block mosaics with fine speckles for the reconstruction task.
struct SyntheticDatasetSpec {
    std::string kind = "shapes";  // shapes | textures
    int64_t image_h = 16, image_w = 16;
    int64_t channels = 3;
    std::vector<std::string> shapes = {"square", "disc", "triangle", "cross"};
    std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
    int64_t count = 256;
    int64_t speckles = 12;  // textures only

    int64_t num_classes() const {
        return static_cast<int64_t>(shapes.size()) * static_cast<int64_t>(colors.size());
    }
};

struct SceneRecord {
    std::string shape, color;
};

struct DatasetSample {
    int64_t id = 0;
    int64_t class_id = -1;  // -1 for textures
    SceneRecord scene;
    std::string short_caption, long_caption;
    LatentImage image;
};

struct Dataset {
    SyntheticDatasetSpec spec;
    std::vector<DatasetSample> samples;
};

inline std::array<double, 3> color_rgb(const std::string& name) {
    static const std::map<std::string, std::array<double, 3>> table = {
        {"red", {1, -1, -1}},    {"green", {-1, 1, -1}},  {"blue", {-1, -1, 1}},
        {"yellow", {1, 1, -1}},  {"magenta", {1, -1, 1}}, {"cyan", {-1, 1, 1}},
        {"white", {1, 1, 1}},    {"orange", {1, 0, -1}},
    };
    auto it = table.find(name);
    require(it != table.end(), "dataset: unknown color " + name);
    return it->second;
}

inline bool shape_hit(const std::string& shape, int64_t y, int64_t x, int64_t h, int64_t w) {
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double ry = static_cast<double>(h) * 0.28;
    const double rx = static_cast<double>(w) * 0.28;
    const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
    if (shape == "square") return std::abs(dy) <= ry && std::abs(dx) <= rx;
    if (shape == "disc") return (dy * dy) / (ry * ry) + (dx * dx) / (rx * rx) <= 1.0;
    if (shape == "triangle")
        return dy >= -ry && dy <= ry && std::abs(dx) <= rx * (dy + ry) / (2.0 * ry);
    if (shape == "cross") return std::abs(dy) <= ry * 0.4 || std::abs(dx) <= rx * 0.4;
    throw std::invalid_argument("dataset: unknown shape " + shape);
}

// Deterministic canonical image for one (shape, color) class.
inline LatentImage render_template(const SceneRecord& scene, const SyntheticDatasetSpec& spec) {
    LatentImage img(spec.image_h, spec.image_w, spec.channels);
    const auto rgb = color_rgb(scene.color);
    for (int64_t y = 0; y < spec.image_h; ++y)
        for (int64_t x = 0; x < spec.image_w; ++x) {
            const bool hit = shape_hit(scene.shape, y, x, spec.image_h, spec.image_w);
            for (int64_t c = 0; c < spec.channels; ++c)
                img.at(y, x, c) = hit ? rgb[static_cast<size_t>(c % 3)] : -1.0;
        }
    return img;
}

inline SceneRecord scene_of_class(int64_t class_id, const SyntheticDatasetSpec& spec) {
    const int64_t n_colors = static_cast<int64_t>(spec.colors.size());
    return {spec.shapes[static_cast<size_t>(class_id / n_colors)],
            spec.colors[static_cast<size_t>(class_id % n_colors)]};
}

inline std::string short_caption(const SceneRecord& s) { return s.color + " " + s.shape; }
inline std::string long_caption(const SceneRecord& s) {
    return "a " + s.color + " " + s.shape + " on black";
}

inline LatentImage render_texture(const SyntheticDatasetSpec& spec, Rng& rng) {
    static const char* palette[8] = {"red", "green", "blue", "yellow", "magenta", "cyan", "white", "orange"};
    LatentImage img(spec.image_h, spec.image_w, spec.channels);
    const int64_t block = 8;
    require(spec.image_h % block == 0 && spec.image_w % block == 0,
            "dataset: texture dims must divide by 8");
    for (int64_t by = 0; by < spec.image_h / block; ++by)
        for (int64_t bx = 0; bx < spec.image_w / block; ++bx) {
            const auto rgb = color_rgb(palette[rng.below(8)]);
            for (int64_t y = 0; y < block; ++y)
                for (int64_t x = 0; x < block; ++x)
                    for (int64_t c = 0; c < spec.channels; ++c)
                        img.at(by * block + y, bx * block + x, c) = rgb[static_cast<size_t>(c % 3)];
        }
    for (int64_t s = 0; s < spec.speckles; ++s) {
        const int64_t y = static_cast<int64_t>(rng.below(static_cast<uint64_t>(spec.image_h)));
        const int64_t x = static_cast<int64_t>(rng.below(static_cast<uint64_t>(spec.image_w)));
        const auto rgb = color_rgb(palette[rng.below(8)]);
        for (int64_t c = 0; c < spec.channels; ++c) img.at(y, x, c) = rgb[static_cast<size_t>(c % 3)];
    }
    return img;
}

// Balanced class assignment (round-robin plus shuffle) keeps class counts
// within one sample of uniform at any dataset size.
inline Dataset generate_dataset(const SyntheticDatasetSpec& spec, uint64_t seed) {
    Dataset ds;
    ds.spec = spec;
    Rng rng = Rng::stream(seed, "data-gen");
    if (spec.kind == "shapes") {
        std::vector<int64_t> classes(static_cast<size_t>(spec.count));
        for (int64_t i = 0; i < spec.count; ++i) classes[static_cast<size_t>(i)] = i % spec.num_classes();
        for (int64_t i = spec.count - 1; i > 0; --i)
            std::swap(classes[static_cast<size_t>(i)], classes[rng.below(static_cast<uint64_t>(i + 1))]);
        for (int64_t i = 0; i < spec.count; ++i) {
            DatasetSample s;
            s.id = i;
            s.class_id = classes[static_cast<size_t>(i)];
            s.scene = scene_of_class(s.class_id, spec);
            s.short_caption = short_caption(s.scene);
            s.long_caption = long_caption(s.scene);
            s.image = render_template(s.scene, spec);
            ds.samples.push_back(std::move(s));
        }
    } else if (spec.kind == "textures") {
        for (int64_t i = 0; i < spec.count; ++i) {
            DatasetSample s;
            s.id = i;
            s.scene = {"texture", "mixed"};
            s.image = render_texture(spec, rng);
            ds.samples.push_back(std::move(s));
        }
    } else {
        throw std::invalid_argument("dataset: unknown kind " + spec.kind);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk form: manifest.json plus one PNM file per sample.

inline void write_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    nlohmann::ordered_json manifest;
    manifest["kind"] = ds.spec.kind;
    manifest["image_h"] = ds.spec.image_h;
    manifest["image_w"] = ds.spec.image_w;
    manifest["channels"] = ds.spec.channels;
    manifest["shapes"] = ds.spec.shapes;
    manifest["colors"] = ds.spec.colors;
    manifest["count"] = ds.spec.count;
    manifest["speckles"] = ds.spec.speckles;
    manifest["samples"] = nlohmann::ordered_json::array();
    for (const auto& s : ds.samples) {
        char name[32];
        std::snprintf(name, sizeof(name), "images/%06lld.pnm", static_cast<long long>(s.id));
        write_pnm(s.image, (fs::path(dir) / name).string());
        nlohmann::ordered_json row;
        row["id"] = s.id;
        row["class_id"] = s.class_id;
        row["shape"] = s.scene.shape;
        row["color"] = s.scene.color;
        row["short_caption"] = s.short_caption;
        row["long_caption"] = s.long_caption;
        row["image"] = name;
        manifest["samples"].push_back(row);
    }
    std::ofstream f(fs::path(dir) / "manifest.json");
    require_io(f.good(), "dataset: cannot write manifest in " + dir);
    f << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream f(fs::path(dir) / "manifest.json");
    require_io(f.good(), "dataset: cannot open manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(f);
    Dataset ds;
    ds.spec.kind = manifest.at("kind").get<std::string>();
    ds.spec.image_h = manifest.at("image_h").get<int64_t>();
    ds.spec.image_w = manifest.at("image_w").get<int64_t>();
    ds.spec.channels = manifest.at("channels").get<int64_t>();
    ds.spec.shapes = manifest.at("shapes").get<std::vector<std::string>>();
    ds.spec.colors = manifest.at("colors").get<std::vector<std::string>>();
    ds.spec.count = manifest.at("count").get<int64_t>();
    ds.spec.speckles = manifest.at("speckles").get<int64_t>();
    for (const auto& row : manifest.at("samples")) {
        DatasetSample s;
        s.id = row.at("id").get<int64_t>();
        s.class_id = row.at("class_id").get<int64_t>();
        s.scene.shape = row.at("shape").get<std::string>();
        s.scene.color = row.at("color").get<std::string>();
        s.short_caption = row.at("short_caption").get<std::string>();
        s.long_caption = row.at("long_caption").get<std::string>();
        s.image = read_pnm((fs::path(dir) / row.at("image").get<std::string>()).string());
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace lapflow
