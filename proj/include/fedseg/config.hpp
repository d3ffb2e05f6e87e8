#pragma once

// Experiment configuration: one JSON document that pins every knob of the
// pipeline. Command-line overrides address fields by dotted path
// ("trainer.lr"). Unknown keys are rejected so typos fail before any work.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "data.hpp"
#include "model.hpp"
#include "trainer.hpp"

namespace fedseg {

struct ExperimentConfig {
    // model
    std::string variant = "mini_b"; // mini_b | mini_l
    bool adapters = true;
    int num_classes = 2;
    // federation
    int clients = 4;
    int rounds = 30;
    uint64_t seed = 2024;
    // trainer (local optimization on every client)
    TrainerConfig trainer{2e-3, 6, 1, 0.9, 0.999, 1e-8};
    // data
    int input_size = 64;
    int n_per_client = 32;
    // pooled-corpus pretraining stage
    int pretrain_epochs = 150;
    int pretrain_samples = 96;
    double pretrain_lr = 1e-3;
    // evaluation
    double val_ratio = 0.25;
    bool group_by_volume = false;
    // protocol
    TrainMode mode = TrainMode::AdapterDecoder;
    bool pretrained = true;
    int threads = 0; // 0 = one worker per hardware thread
    std::string out_dir = "runs";

    ModelConfig model_config() const {
        ModelConfig m = variant == "mini_l" ? ModelConfig::mini_l() : ModelConfig::mini_b();
        m.input_size = input_size;
        m.num_classes = num_classes;
        return m;
    }

    FederationSpec federation_spec() const {
        return FederationSpec::defaults(clients, input_size, num_classes, seed);
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
        if (variant != "mini_b" && variant != "mini_l")
            fail("model.variant must be mini_b or mini_l, got '" + variant + "'");
        if (mode == TrainMode::AdapterDecoder && !adapters)
            fail("mode 'adapter' requires model.adapters = true");
        if (clients < 1) fail("federation.clients must be >= 1");
        if (rounds < 1) fail("federation.rounds must be >= 1");
        if (n_per_client < 10) fail("data.n_per_client must be >= 10");
        if (pretrain_epochs < 0) fail("pretrain.epochs must be >= 0");
        if (pretrain_samples < 10) fail("pretrain.samples must be >= 10");
        if (!(pretrain_lr > 0)) fail("pretrain.lr must be positive");
        if (!(val_ratio > 0 && val_ratio < 1)) fail("eval.val_ratio must be in (0,1)");
        if (threads < 0) fail("threads must be >= 0");
        if (out_dir.empty()) fail("out_dir must not be empty");
        model_config().validate();   // input size / class count rules
        trainer.validate();          // lr / batch / epoch rules
        federation_spec().validate();
    }
};

namespace detail {
inline const nlohmann::json& config_schema() {
    // Default document; doubles as the set of known keys.
    static const nlohmann::json schema = {
        {"model", {{"variant", "mini_b"}, {"adapters", true}, {"num_classes", 2}}},
        {"federation", {{"clients", 4}, {"rounds", 30}, {"seed", 2024}}},
        {"trainer", {{"lr", 2e-3}, {"batch_size", 6}, {"local_epochs", 1}}},
        {"data", {{"input_size", 64}, {"n_per_client", 32}}},
        {"pretrain", {{"epochs", 150}, {"samples", 96}, {"lr", 1e-3}}},
        {"eval", {{"val_ratio", 0.25}, {"group_by_volume", false}}},
        {"mode", "adapter"},
        {"pretrained", true},
        {"threads", 0},
        {"out_dir", "runs"},
    };
    return schema;
}

inline void reject_unknown_keys(const nlohmann::json& doc, const nlohmann::json& schema,
                                const std::string& prefix) {
    for (const auto& [key, value] : doc.items()) {
        if (!schema.contains(key))
            throw ConfigError("config: unknown key '" + prefix + key + "'");
        if (value.is_object() && schema.at(key).is_object())
            reject_unknown_keys(value, schema.at(key), prefix + key + ".");
    }
}
} // namespace detail

inline nlohmann::json config_json(const ExperimentConfig& c) {
    return {
        {"model",
         {{"variant", c.variant}, {"adapters", c.adapters}, {"num_classes", c.num_classes}}},
        {"federation", {{"clients", c.clients}, {"rounds", c.rounds}, {"seed", c.seed}}},
        {"trainer",
         {{"lr", c.trainer.lr},
          {"batch_size", c.trainer.batch_size},
          {"local_epochs", c.trainer.local_epochs}}},
        {"data", {{"input_size", c.input_size}, {"n_per_client", c.n_per_client}}},
        {"pretrain",
         {{"epochs", c.pretrain_epochs},
          {"samples", c.pretrain_samples},
          {"lr", c.pretrain_lr}}},
        {"eval", {{"val_ratio", c.val_ratio}, {"group_by_volume", c.group_by_volume}}},
        {"mode", c.mode == TrainMode::AdapterDecoder ? "adapter" : "full"},
        {"pretrained", c.pretrained},
        {"threads", c.threads},
        {"out_dir", c.out_dir},
    };
}

// Parses a (possibly partial) JSON document over the defaults; every field is
// optional, unknown fields are an error, and the result is validated.
inline ExperimentConfig config_from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("config: document must be a JSON object");
    detail::reject_unknown_keys(doc, detail::config_schema(), "");

    ExperimentConfig c;
    try {
        if (doc.contains("model")) {
            const auto& m = doc.at("model");
            c.variant = m.value("variant", c.variant);
            c.adapters = m.value("adapters", c.adapters);
            c.num_classes = m.value("num_classes", c.num_classes);
        }
        if (doc.contains("federation")) {
            const auto& f = doc.at("federation");
            c.clients = f.value("clients", c.clients);
            c.rounds = f.value("rounds", c.rounds);
            c.seed = f.value("seed", c.seed);
        }
        if (doc.contains("trainer")) {
            const auto& t = doc.at("trainer");
            c.trainer.lr = t.value("lr", c.trainer.lr);
            c.trainer.batch_size = t.value("batch_size", c.trainer.batch_size);
            c.trainer.local_epochs = t.value("local_epochs", c.trainer.local_epochs);
        }
        if (doc.contains("data")) {
            const auto& d = doc.at("data");
            c.input_size = d.value("input_size", c.input_size);
            c.n_per_client = d.value("n_per_client", c.n_per_client);
        }
        if (doc.contains("pretrain")) {
            const auto& p = doc.at("pretrain");
            c.pretrain_epochs = p.value("epochs", c.pretrain_epochs);
            c.pretrain_samples = p.value("samples", c.pretrain_samples);
            c.pretrain_lr = p.value("lr", c.pretrain_lr);
        }
        if (doc.contains("eval")) {
            const auto& e = doc.at("eval");
            c.val_ratio = e.value("val_ratio", c.val_ratio);
            c.group_by_volume = e.value("group_by_volume", c.group_by_volume);
        }
        if (doc.contains("mode")) {
            std::string m = doc.at("mode").get<std::string>();
            if (m == "adapter") c.mode = TrainMode::AdapterDecoder;
            else if (m == "full") c.mode = TrainMode::FullFineTune;
            else throw ConfigError("config: mode must be 'full' or 'adapter', got '" + m + "'");
        }
        c.pretrained = doc.value("pretrained", c.pretrained);
        c.threads = doc.value("threads", c.threads);
        c.out_dir = doc.value("out_dir", c.out_dir);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return config_from_json(doc);
}

inline void save_config(const ExperimentConfig& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config file: " + path);
    out << config_json(c).dump(2) << '\n';
    if (!out) throw IoError("failed writing config file: " + path);
}

// Sets one field by dotted path; the value string is parsed as JSON when
// possible ("0.01", "true") and taken as a string otherwise ("mini_l").
inline void apply_override(nlohmann::json& doc, const std::string& path,
                           const std::string& value) {
    if (path.empty()) throw ConfigError("config: empty override path");
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
        parsed = value;
    }
    nlohmann::json* node = &doc;
    size_t start = 0;
    for (size_t dot = path.find('.'); dot != std::string::npos;
         start = dot + 1, dot = path.find('.', start)) {
        std::string key = path.substr(start, dot - start);
        if (key.empty()) throw ConfigError("config: bad override path '" + path + "'");
        node = &(*node)[key];
    }
    std::string leaf = path.substr(start);
    if (leaf.empty()) throw ConfigError("config: bad override path '" + path + "'");
    (*node)[leaf] = parsed;
}

} // namespace fedseg
