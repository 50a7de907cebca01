#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hvdet/model.hpp"
#include "hvdet/synthdata.hpp"

namespace hvdet {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    nlohmann::json anchors = nlohmann::json::array();
    for (auto [w, h] : c.anchors.scales) anchors.push_back({w, h});
    j = {{"d", c.d},
         {"heads", c.heads},
         {"ffn_hidden", c.ffn_hidden},
         {"n_enc", c.n_enc},
         {"n_dec", c.n_dec},
         {"num_queries", c.num_queries},
         {"attention_kind", to_string(c.attention_kind)},
         {"anchors", anchors},
         {"content_init", to_string(c.content_init)},
         {"query_mode", to_string(c.query_mode)},
         {"dropout", c.dropout},
         {"num_classes", c.num_classes}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("d").get_to(c.d);
    j.at("heads").get_to(c.heads);
    j.at("ffn_hidden").get_to(c.ffn_hidden);
    j.at("n_enc").get_to(c.n_enc);
    j.at("n_dec").get_to(c.n_dec);
    j.at("num_queries").get_to(c.num_queries);
    c.attention_kind = attention_kind_from(j.at("attention_kind").get<std::string>());
    c.anchors.scales.clear();
    for (const auto& a : j.at("anchors"))
        c.anchors.scales.emplace_back(a.at(0).get<double>(), a.at(1).get<double>());
    c.content_init = content_init_from(j.at("content_init").get<std::string>());
    c.query_mode = query_mode_from(j.at("query_mode").get<std::string>());
    j.at("dropout").get_to(c.dropout);
    j.at("num_classes").get_to(c.num_classes);
}

struct OptimConfig {
    double lr = 2.5e-4;
    double stem_lr = 2.5e-5;
    double weight_decay = 1e-4;
    std::size_t epochs = 10;
    std::size_t lr_drop_epoch = 8;  // 0-based epoch at which lr is multiplied
    double lr_drop_factor = 0.1;
    double clip_norm = 0.5;

    void validate() const {
        if (lr <= 0 || stem_lr <= 0) throw std::invalid_argument("OptimConfig: lr must be > 0");
        if (weight_decay < 0) throw std::invalid_argument("OptimConfig: negative weight decay");
        if (clip_norm <= 0) throw std::invalid_argument("OptimConfig: clip_norm must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const OptimConfig& c) {
    j = {{"lr", c.lr},
         {"stem_lr", c.stem_lr},
         {"weight_decay", c.weight_decay},
         {"epochs", c.epochs},
         {"lr_drop_epoch", c.lr_drop_epoch},
         {"lr_drop_factor", c.lr_drop_factor},
         {"clip_norm", c.clip_norm}};
}

inline void from_json(const nlohmann::json& j, OptimConfig& c) {
    j.at("lr").get_to(c.lr);
    j.at("stem_lr").get_to(c.stem_lr);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("epochs").get_to(c.epochs);
    j.at("lr_drop_epoch").get_to(c.lr_drop_epoch);
    j.at("lr_drop_factor").get_to(c.lr_drop_factor);
    j.at("clip_norm").get_to(c.clip_norm);
}

struct RunConfig {
    ModelConfig model;
    DatasetSpec train_data;        // defaults: 2000 scenes, seed 1
    DatasetSpec eval_data;         // defaults: 200 scenes, seed 2
    OptimConfig optim;
    std::uint64_t seed = 1;
    std::string out_dir = "out";
    std::size_t threads = 1;

    RunConfig() {
        eval_data.count = 200;
        eval_data.seed = 2;
    }

    void validate() const {
        model.validate();
        train_data.validate();
        eval_data.validate();
        optim.validate();
        if (train_data.num_classes > model.num_classes ||
            eval_data.num_classes > model.num_classes)
            throw std::invalid_argument(
                "RunConfig: dataset has more classes than the model predicts");
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"model", c.model},   {"train_data", c.train_data}, {"eval_data", c.eval_data},
         {"optim", c.optim},   {"seed", c.seed},             {"out_dir", c.out_dir},
         {"threads", c.threads}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    j.at("model").get_to(c.model);
    j.at("train_data").get_to(c.train_data);
    j.at("eval_data").get_to(c.eval_data);
    j.at("optim").get_to(c.optim);
    j.at("seed").get_to(c.seed);
    j.at("out_dir").get_to(c.out_dir);
    j.at("threads").get_to(c.threads);
}

/// Canonical form: nlohmann objects iterate keys sorted, so a plain dump of
/// the normalized document is stable.
inline std::string canonical_json(const nlohmann::json& j) { return j.dump(); }

template <typename T>
inline std::string canonical_config(const T& cfg) {
    return canonical_json(nlohmann::json(cfg));
}

/// FNV-1a 64-bit over the canonical serialization, as a hex string.
inline std::string config_hash(const nlohmann::json& j) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : canonical_json(j)) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Apply one `--set path.to.key=value` override. The value is parsed as JSON
/// when possible, otherwise taken as a string.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("override needs key=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    nlohmann::json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (key.empty()) throw std::invalid_argument("bad override path: " + path);
        if (dot == std::string::npos) {
            nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
            (*node)[key] = value.is_discarded() ? nlohmann::json(raw) : value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides) {
    nlohmann::json doc = nlohmann::json(RunConfig{});  // defaults
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw std::invalid_argument("config file not found: " + path);
        nlohmann::json user = nlohmann::json::parse(is);
        doc.update(user, /*merge_objects=*/true);
    }
    for (const auto& o : overrides) apply_override(doc, o);
    RunConfig cfg = doc.get<RunConfig>();
    cfg.validate();
    return cfg;
}

} // namespace hvdet
