// fedseg: desk-scale federated fine-tuning for ViT segmentation models.
//
// Commands: gen-data, pretrain, train-fed, train-central, eval, report.
// Configuration is one JSON document; flags override fields by dotted path.
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedseg/experiments.hpp"

namespace fs = std::filesystem;
using namespace fedseg;

namespace {

struct CommonFlags {
    std::string config_path;
    std::vector<std::string> sets; // dotted overrides: path=value
    uint64_t seed = 0;
    std::string mode;
    bool no_pretrained = false;
    std::string test_client;
    int threads = -1;
    std::string out_dir;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "JSON config file (defaults used if omitted)");
    cmd->add_option("--set", f.sets,
                    "Override a config field by dotted path, e.g. --set trainer.lr=0.01");
    cmd->add_option("--seed", f.seed, "Override federation.seed");
    cmd->add_option("--mode", f.mode, "Training mode: full | adapter")
        ->check(CLI::IsMember({"full", "adapter"}));
    cmd->add_flag("--no-pretrained", f.no_pretrained,
                  "Start from random initialization (the ablation arm)");
    cmd->add_option("--test-client", f.test_client,
                    "Held-out client id (default: every client in turn)");
    cmd->add_option("--threads", f.threads, "Client worker threads (0 = logical cores)");
    cmd->add_option("--out", f.out_dir, "Output directory root");
}

ExperimentConfig effective_config(const CLI::App* cmd, const CommonFlags& f) {
    nlohmann::json doc = f.config_path.empty() ? config_json(ExperimentConfig{})
                                               : nlohmann::json();
    if (!f.config_path.empty()) {
        std::ifstream in(f.config_path);
        if (!in) throw ConfigError("cannot open config file: " + f.config_path);
        try {
            in >> doc;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: " + f.config_path + " is not valid JSON: " + e.what());
        }
    }
    for (const std::string& kv : f.sets) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("--set expects path=value, got '" + kv + "'");
        apply_override(doc, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (cmd->count("--seed")) apply_override(doc, "federation.seed", std::to_string(f.seed));
    if (cmd->count("--mode")) doc["mode"] = f.mode;
    if (f.no_pretrained) doc["pretrained"] = false;
    if (cmd->count("--threads")) doc["threads"] = f.threads;
    if (cmd->count("--out")) doc["out_dir"] = f.out_dir;
    return config_from_json(doc);
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

fs::path pretrained_path(const ExperimentConfig& cfg) {
    return fs::path(cfg.out_dir) / "pretrained.ffms";
}

// Loads the pretraining checkpoint when the config asks for one.
std::unique_ptr<ParamContainer> load_pretrained_if_needed(const ExperimentConfig& cfg) {
    if (!cfg.pretrained) return nullptr;
    fs::path p = pretrained_path(cfg);
    if (!fs::exists(p))
        throw IoError("missing pretrained checkpoint: " + p.string() +
                      " (run the pretrain command first, or pass --no-pretrained)");
    return std::make_unique<ParamContainer>(load_container(p.string()));
}

std::string run_dir_name(const ExperimentConfig& cfg, const std::string& arm,
                         const std::string& test_client) {
    return arm + "-" + (cfg.mode == TrainMode::AdapterDecoder ? "adapter" : "full") + "-" +
           (cfg.pretrained ? "pt" : "scratch") + "-seed" + std::to_string(cfg.seed) + "-" +
           test_client;
}

nlohmann::json efficiency_json(const EfficiencyRow& row) {
    return {{"label", row.label},
            {"total_params", row.total_params},
            {"trainable_params", row.trainable_params},
            {"train_flops_per_sample", row.train_flops_per_sample},
            {"seconds_per_round", row.seconds_per_round},
            {"bytes_per_round", row.bytes_per_round}};
}

void write_arm_artifacts(const ExperimentConfig& cfg, const ArmResult& run,
                         const fs::path& dir) {
    fs::create_directories(dir);
    save_config(cfg, (dir / "config.json").string());
    write_text(dir / "metrics.csv", metrics_csv(run.eval_report));
    write_text(dir / "report.json", report_json(run.eval_report).dump(2) + "\n");
    write_text(dir / "efficiency.json",
               efficiency_json(efficiency_row(cfg, run)).dump(2) + "\n");
    save_container(run.final_params, (dir / "final.ffms").string());
    if (run.arm == "federated") {
        write_text(dir / "history.csv", history_csv(run.training, run.ledger));
        save_container(run.training.best_checkpoint, (dir / "best.ffms").string());
    } else {
        std::ostringstream os;
        os << "step,loss\n";
        for (size_t i = 0; i < run.central_losses.size(); ++i)
            os << i << ',' << run.central_losses[i] << '\n';
        write_text(dir / "losses.csv", os.str());
    }
    std::printf("%s: test %s dice %.4f iou %.4f, overall dice %.4f -> %s\n",
                run.arm.c_str(), run.test_client.c_str(), run.test_dice, run.test_iou,
                run.eval_report.dice_avg, dir.string().c_str());
}

std::vector<std::string> test_clients_to_run(const ExperimentConfig& cfg,
                                             const std::string& requested) {
    if (!requested.empty()) return {requested};
    std::vector<std::string> all;
    for (int k = 0; k < cfg.clients; ++k) all.push_back(client_name(k));
    return all;
}

int cmd_gen_data(const ExperimentConfig& cfg) {
    auto federation = generate_federation(cfg.federation_spec(), cfg.n_per_client);
    fs::path dir = fs::path(cfg.out_dir) / "data";
    fs::create_directories(dir);
    // The echo stamps data identity into the files; where they are written and
    // how many worker threads ran are not part of that identity.
    nlohmann::json echo_doc = config_json(cfg);
    echo_doc.erase("out_dir");
    echo_doc.erase("threads");
    std::string echo = echo_doc.dump();

    nlohmann::json manifest_clients = nlohmann::json::array();
    for (const auto& ds : federation) {
        fs::path file = dir / (ds.client_id + ".fseg");
        save_client_corpus(ds, file.string(), echo);
        manifest_clients.push_back({{"client_id", ds.client_id},
                                    {"file", file.filename().string()},
                                    {"count", ds.samples.size()}});
        std::printf("%s: %zu samples -> %s\n", ds.client_id.c_str(), ds.samples.size(),
                    file.string().c_str());
    }
    nlohmann::json manifest = {{"clients", manifest_clients},
                               {"config", echo_doc}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    std::printf("manifest: %s\n", (dir / "manifest.json").string().c_str());
    return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg) {
    PretrainResult pt = run_pretrain(cfg);
    fs::path p = pretrained_path(cfg);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    save_container(pt.checkpoint, p.string());
    double first = pt.losses.empty() ? 0.0 : pt.losses.front();
    double last = pt.losses.empty() ? 0.0 : pt.losses.back();
    std::printf("pretrained %d epochs on %d samples (loss %.4f -> %.4f): %s\n",
                cfg.pretrain_epochs, cfg.pretrain_samples, first, last,
                p.string().c_str());
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& requested_test_client,
              bool federated) {
    auto pretrained = load_pretrained_if_needed(cfg);
    for (const std::string& tc : test_clients_to_run(cfg, requested_test_client)) {
        ArmResult run = federated
                            ? run_federated(cfg, tc, cfg.seed, pretrained.get())
                            : run_centralized(cfg, tc, cfg.seed, pretrained.get());
        fs::path dir = fs::path(cfg.out_dir) /
                       run_dir_name(cfg, federated ? "fed" : "central", tc);
        write_arm_artifacts(cfg, run, dir);
    }
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint, bool oracle) {
    auto federation = generate_federation(cfg.federation_spec(), cfg.n_per_client);
    std::vector<SegSample> data;
    for (const auto& ds : federation)
        for (const auto& s : ds.samples) data.push_back(s);

    ReportMeta meta{oracle ? "oracle" : "eval",
                    cfg.mode == TrainMode::AdapterDecoder ? "adapter" : "full",
                    cfg.pretrained, cfg.seed};
    MetricsReport report;
    if (oracle) {
        // Reference fixture: the prediction is the ground truth itself.
        LogitFn echo = [](const SegSample& s) {
            Tensor<float> t(s.mask.shape);
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = s.mask[i] * 2.f - 1.f;
            return t;
        };
        report = evaluate(echo, data, cfg.group_by_volume, meta);
    } else {
        if (checkpoint.empty())
            throw ConfigError("eval needs --checkpoint PATH (or --oracle)");
        ViTSegModel model(cfg.model_config(), cfg.adapters,
                          mix_seed(cfg.seed, hash_name("init")));
        apply_pretrained(model, load_container(checkpoint));
        model.set_train_mode(cfg.mode);
        report = evaluate(model, data, cfg.group_by_volume, meta);
    }

    fs::path dir(cfg.out_dir);
    write_text(dir / "metrics.csv", metrics_csv(report));
    write_text(dir / "metrics.md", metrics_markdown({report}) );
    std::printf("%s\n", metrics_markdown({report}).c_str());
    std::printf("overall dice %.4f iou %.4f -> %s\n", report.dice_avg, report.iou_avg,
                (dir / "metrics.csv").string().c_str());
    return 0;
}

int cmd_report(const ExperimentConfig& cfg) {
    std::vector<MetricsReport> reports;
    std::vector<EfficiencyRow> rows;
    fs::path root(cfg.out_dir);
    if (!fs::exists(root)) throw IoError("no run directory: " + root.string());

    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());

    for (const auto& dir : dirs) {
        fs::path rj = dir / "report.json";
        if (fs::exists(rj)) {
            std::ifstream in(rj);
            nlohmann::json j;
            try {
                in >> j;
            } catch (const nlohmann::json::exception& e) {
                throw DataError("malformed " + rj.string() + ": " + e.what());
            }
            reports.push_back(report_from_json(j));
        }
        fs::path ej = dir / "efficiency.json";
        if (fs::exists(ej)) {
            std::ifstream in(ej);
            nlohmann::json j;
            try {
                in >> j;
                EfficiencyRow row;
                row.label = j.at("label").get<std::string>();
                row.total_params = j.at("total_params").get<int64_t>();
                row.trainable_params = j.at("trainable_params").get<int64_t>();
                row.train_flops_per_sample = j.at("train_flops_per_sample").get<double>();
                row.seconds_per_round = j.at("seconds_per_round").get<double>();
                row.bytes_per_round = j.at("bytes_per_round").get<int64_t>();
                rows.push_back(std::move(row));
            } catch (const nlohmann::json::exception& e) {
                throw DataError("malformed " + ej.string() + ": " + e.what());
            }
        }
    }
    if (reports.empty())
        throw DataError("no report.json files under " + root.string() +
                        " (run train-fed / train-central first)");

    std::string md = "# Segmentation quality\n\n" + metrics_markdown(reports) + "\n";
    if (!rows.empty()) md += "# Efficiency\n\n" + efficiency_markdown(rows) + "\n";
    write_text(root / "report.md", md);
    std::printf("%s", md.c_str());
    std::printf("report over %zu runs -> %s\n", reports.size(),
                (root / "report.md").string().c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale federated fine-tuning for ViT segmentation"};
    app.require_subcommand(1);

    struct Cmd {
        CLI::App* sub = nullptr;
        CommonFlags flags;
    };
    Cmd gen, pre, fed, central, eval, report;
    std::string eval_checkpoint;
    bool eval_oracle = false;

    gen.sub = app.add_subcommand("gen-data", "Write per-client corpus files and a manifest");
    pre.sub = app.add_subcommand("pretrain", "Train the pooled-corpus initialization");
    fed.sub = app.add_subcommand("train-fed",
                                 "Federated leave-one-client-out training runs");
    central.sub = app.add_subcommand("train-central",
                                     "Centralized counterpart on the pooled data");
    eval.sub = app.add_subcommand("eval", "Score a checkpoint (or the oracle fixture)");
    report.sub = app.add_subcommand("report", "Merge finished runs into report.md");
    for (Cmd* c : {&gen, &pre, &fed, &central, &eval, &report})
        add_common_flags(c->sub, c->flags);
    eval.sub->add_option("--checkpoint", eval_checkpoint, "Parameter container to score");
    eval.sub->add_flag("--oracle", eval_oracle,
                       "Score a perfect predictor instead of a checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e); // prints help or the parse error
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen.sub->parsed()) return cmd_gen_data(effective_config(gen.sub, gen.flags));
        if (pre.sub->parsed()) return cmd_pretrain(effective_config(pre.sub, pre.flags));
        if (fed.sub->parsed())
            return cmd_train(effective_config(fed.sub, fed.flags), fed.flags.test_client,
                             /*federated=*/true);
        if (central.sub->parsed())
            return cmd_train(effective_config(central.sub, central.flags),
                             central.flags.test_client, /*federated=*/false);
        if (eval.sub->parsed())
            return cmd_eval(effective_config(eval.sub, eval.flags), eval_checkpoint,
                            eval_oracle);
        if (report.sub->parsed())
            return cmd_report(effective_config(report.sub, report.flags));
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    }
    return 2; // no subcommand (require_subcommand makes this unreachable)
}
