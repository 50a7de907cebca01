#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hvdet/loss.hpp"
#include "hvdet/rng.hpp"
#include "hvdet/serialize.hpp"
#include "hvdet/tensor.hpp"

namespace hvdet {

struct DatasetSpec {
    std::size_t count = 2000;
    std::size_t image_size = 64;
    std::size_t min_objects = 1;
    std::size_t max_objects = 4;
    std::size_t num_classes = 3;
    double min_size = 0.1;
    double max_size = 0.5;
    std::uint64_t seed = 1;

    void validate() const {
        if (count == 0) throw std::invalid_argument("DatasetSpec: count must be positive");
        if (image_size < 8) throw std::invalid_argument("DatasetSpec: image too small");
        if (min_objects < 1 || min_objects > max_objects)
            throw std::invalid_argument("DatasetSpec: bad object count range");
        if (num_classes < 1) throw std::invalid_argument("DatasetSpec: need >= 1 class");
        if (min_size <= 0 || max_size >= 1 || min_size > max_size)
            throw std::invalid_argument("DatasetSpec: size range must lie within (0,1)");
    }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
    j = {{"count", s.count},           {"image_size", s.image_size},
         {"min_objects", s.min_objects}, {"max_objects", s.max_objects},
         {"num_classes", s.num_classes}, {"min_size", s.min_size},
         {"max_size", s.max_size},     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
    j.at("count").get_to(s.count);
    j.at("image_size").get_to(s.image_size);
    j.at("min_objects").get_to(s.min_objects);
    j.at("max_objects").get_to(s.max_objects);
    j.at("num_classes").get_to(s.num_classes);
    j.at("min_size").get_to(s.min_size);
    j.at("max_size").get_to(s.max_size);
    j.at("seed").get_to(s.seed);
}

struct Scene {
    Tensor image;  // [3, H0, W0], values in [0,1]
    std::vector<GroundTruthObject> objects;
    std::uint64_t seed = 0;
};

namespace detail {

/// Per-class color prior: three canonical primaries, further classes derived
/// from the seeded mixer so they stay distinct and reproducible.
inline void class_color(std::size_t cls, double rgb[3]) {
    static const double base[3][3] = {{0.85, 0.2, 0.2}, {0.2, 0.85, 0.2}, {0.2, 0.25, 0.85}};
    if (cls < 3) {
        for (int c = 0; c < 3; ++c) rgb[c] = base[cls][c];
        return;
    }
    std::uint64_t h = Rng::splitmix64(0xC01Dull + cls);
    for (int c = 0; c < 3; ++c) {
        rgb[c] = 0.2 + 0.65 * double((h >> (16 * c)) & 0xFFFF) / 65535.0;
    }
}

inline bool inside_shape(std::size_t shape, double x, double y, double x0, double y0,
                         double x1, double y1) {
    switch (shape % 3) {
        case 0:  // rectangle fills its box
            return true;
        case 1: {  // inscribed ellipse
            const double cx = (x0 + x1) / 2, cy = (y0 + y1) / 2;
            const double rx = (x1 - x0) / 2, ry = (y1 - y0) / 2;
            const double dx = (x - cx) / rx, dy = (y - cy) / ry;
            return dx * dx + dy * dy <= 1.0;
        }
        default: {  // triangle: apex top-center, base corners bottom
            if (y1 == y0) return false;
            const double t = (y - y0) / (y1 - y0);  // 0 at apex row, 1 at base
            const double cx = (x0 + x1) / 2;
            const double half = t * (x1 - x0) / 2;
            return x >= cx - half && x <= cx + half;
        }
    }
}

} // namespace detail

/// Deterministic scene: a noisy background with 1..max_objects filled shapes
/// (rectangle / ellipse / triangle per class), tight ground-truth boxes.
/// The per-scene stream is seeded as splitmix64(spec.seed) ^ splitmix64(index+1).
inline Scene generate_scene(const DatasetSpec& spec, std::size_t index) {
    spec.validate();
    if (index >= spec.count) throw std::out_of_range("generate_scene: index out of range");
    Scene scene;
    scene.seed = Rng::splitmix64(spec.seed) ^ Rng::splitmix64(index + 1);
    Rng rng(scene.seed);

    const std::size_t n = spec.image_size;
    scene.image = Tensor({3, n, n});
    for (std::size_t i = 0; i < scene.image.numel(); ++i) scene.image[i] = rng.uniform(0.0, 0.25);

    const std::size_t count =
        spec.min_objects + rng.uniform_int(spec.max_objects - spec.min_objects + 1);
    for (std::size_t obj = 0; obj < count; ++obj) {
        const std::size_t cls = rng.uniform_int(spec.num_classes);
        const double w = rng.uniform(spec.min_size, spec.max_size);
        const double h = rng.uniform(spec.min_size, spec.max_size);
        const double cx = rng.uniform(w / 2, 1.0 - w / 2);
        const double cy = rng.uniform(h / 2, 1.0 - h / 2);
        double rgb[3];
        detail::class_color(cls, rgb);
        const double jitter = rng.uniform(-0.1, 0.1);

        const double x0 = cx - w / 2, x1 = cx + w / 2;
        const double y0 = cy - h / 2, y1 = cy + h / 2;
        for (std::size_t py = 0; py < n; ++py) {
            const double y = (double(py) + 0.5) / double(n);
            if (y < y0 || y > y1) continue;
            for (std::size_t px = 0; px < n; ++px) {
                const double x = (double(px) + 0.5) / double(n);
                if (x < x0 || x > x1) continue;
                if (!detail::inside_shape(cls, x, y, x0, y0, x1, y1)) continue;
                for (std::size_t c = 0; c < 3; ++c)
                    scene.image.at(c, py, px) = std::clamp(rgb[c] + jitter, 0.0, 1.0);
            }
        }
        scene.objects.push_back({static_cast<int>(cls), {cx, cy, w, h}});
    }
    return scene;
}

// ---------------------------------------------------------------------------
// JSON-lines interchange (ground truths and detections share the format)
// ---------------------------------------------------------------------------

struct SceneRecord {
    int scene_id = 0;
    std::vector<Box> boxes;
    std::vector<int> classes;
    std::vector<double> scores;  // 1.0 for ground truths
};

inline nlohmann::json to_json_record(const SceneRecord& r) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const Box& b : r.boxes) boxes.push_back({b.cx, b.cy, b.w, b.h});
    return {{"scene_id", r.scene_id}, {"boxes", boxes}, {"classes", r.classes},
            {"scores", r.scores}};
}

inline SceneRecord from_json_record(const nlohmann::json& j) {
    SceneRecord r;
    j.at("scene_id").get_to(r.scene_id);
    for (const auto& b : j.at("boxes"))
        r.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                           b.at(3).get<double>()});
    j.at("classes").get_to(r.classes);
    j.at("scores").get_to(r.scores);
    if (r.classes.size() != r.boxes.size() || r.scores.size() != r.boxes.size())
        throw std::runtime_error("scene record: ragged boxes/classes/scores");
    return r;
}

inline void write_jsonl(const std::string& path, const std::vector<SceneRecord>& records) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("write_jsonl: cannot open " + path);
    for (const auto& r : records) os << to_json_record(r).dump() << '\n';
}

inline std::vector<SceneRecord> read_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_jsonl: cannot open " + path);
    std::vector<SceneRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.push_back(from_json_record(nlohmann::json::parse(line)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optional dataset cache ("HVDS"): spec JSON, then per scene the raw f32
// image plus a JSON annotation block. Regeneration from (spec, seed) must be
// bitwise identical, so the cache is a convenience, not a source of truth.
// ---------------------------------------------------------------------------

inline void save_dataset(const std::string& path, const DatasetSpec& spec,
                         const std::vector<Scene>& scenes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_dataset: cannot open " + path);
    os.write(kDatasetMagic, 4);
    io::write_u32(os, kDatasetVersion);
    io::write_string(os, nlohmann::json(spec).dump());
    io::write_u64(os, scenes.size());
    for (const auto& s : scenes) {
        io::write_u64(os, s.seed);
        io::write_u64(os, s.image.size(1));
        io::write_u64(os, s.image.size(2));
        for (std::size_t i = 0; i < s.image.numel(); ++i)
            io::write_f32(os, static_cast<float>(s.image[i]));
        nlohmann::json ann = nlohmann::json::array();
        for (const auto& o : s.objects)
            ann.push_back({{"class", o.class_id},
                           {"box", {o.box.cx, o.box.cy, o.box.w, o.box.h}}});
        io::write_string(os, ann.dump());
    }
    if (!os) throw std::runtime_error("save_dataset: write failed: " + path);
}

inline std::pair<DatasetSpec, std::vector<Scene>> load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_dataset: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kDatasetMagic, 4) != 0)
        throw std::runtime_error("load_dataset: bad magic in " + path);
    if (io::read_u32(is) != kDatasetVersion)
        throw std::runtime_error("load_dataset: unsupported version");
    DatasetSpec spec = nlohmann::json::parse(io::read_string(is)).get<DatasetSpec>();
    const std::uint64_t count = io::read_u64(is);
    std::vector<Scene> scenes;
    for (std::uint64_t si = 0; si < count; ++si) {
        Scene s;
        s.seed = io::read_u64(is);
        const std::size_t h = io::read_u64(is);
        const std::size_t w = io::read_u64(is);
        s.image = Tensor({3, h, w});
        for (std::size_t i = 0; i < s.image.numel(); ++i)
            s.image[i] = static_cast<double>(io::read_f32(is));
        for (const auto& a : nlohmann::json::parse(io::read_string(is))) {
            GroundTruthObject o;
            o.class_id = a.at("class").get<int>();
            const auto& b = a.at("box");
            o.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                     b.at(3).get<double>()};
            s.objects.push_back(o);
        }
        scenes.push_back(std::move(s));
    }
    return {spec, std::move(scenes)};
}

} // namespace hvdet
