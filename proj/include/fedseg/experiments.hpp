#pragma once

// Experiment orchestration shared by the CLI and the acceptance suite:
// pretraining, leave-one-client-out federated and centralized runs on the
// same data and initialization, paired evaluation, and efficiency accounting.

#include <chrono>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "config.hpp"
#include "cost.hpp"
#include "metrics.hpp"
#include "pretrain.hpp"
#include "server.hpp"

namespace fedseg {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// ---------------------------------------------------------------------------
// Pretraining stage. Uses the experiment's base seed, not the per-repetition
// run seed: one pretrained checkpoint plays the role of the one public
// foundation-model release that every run starts from.

inline PretrainResult run_pretrain(const ExperimentConfig& cfg) {
    cfg.validate();
    auto corpus = generate_generic_corpus(cfg.pretrain_samples, cfg.input_size,
                                          cfg.num_classes,
                                          mix_seed(cfg.seed, hash_name("pretrain_data")));
    TrainerConfig tc = cfg.trainer;
    tc.lr = cfg.pretrain_lr;
    return pseudo_pretrain(cfg.model_config(), corpus.samples, cfg.pretrain_epochs,
                           mix_seed(cfg.seed, hash_name("pretrain")), tc);
}

// ---------------------------------------------------------------------------
// One experiment arm. Federated and centralized arms share the federation,
// the leave-one-out split, and the initial weights, so their comparison
// isolates the protocol itself.

struct ArmResult {
    std::string arm;        // "federated" | "centralized"
    std::string test_client;
    TrainingRunResult training; // per-round history (federated only)
    ParamContainer final_params;
    MetricsReport eval_report; // train-client val slices + the unseen client
    double test_dice = 0, test_iou = 0; // the unseen client's row
    CommLedger ledger;                  // federated only
    std::vector<float> central_losses;  // centralized only
    double seconds_total = 0;
    double seconds_per_round = 0;
    int64_t trainable_scalars = 0;
};

namespace detail {
struct ArmSetup {
    LeaveOneOutSplit split;
    std::vector<SegSample> eval_samples; // every client appears exactly once
    ViTSegModel model;
};

inline ArmSetup arm_setup(const ExperimentConfig& cfg, const std::string& test_client,
                          uint64_t run_seed, const ParamContainer* pretrained) {
    cfg.validate();
    auto federation = generate_federation(cfg.federation_spec(), cfg.n_per_client);
    // The split is part of the data story: it depends on the experiment seed
    // only, so every repetition trains and tests on identical slices.
    auto split = partition_leave_one_out(federation, test_client, cfg.val_ratio, cfg.seed);

    std::vector<SegSample> eval_samples = split.val; // held-out slices, train clients
    for (const auto& s : split.test.samples) eval_samples.push_back(s);

    ViTSegModel model(cfg.model_config(), cfg.adapters,
                      mix_seed(run_seed, hash_name("init")));
    if (pretrained) apply_pretrained(model, *pretrained);
    model.set_train_mode(cfg.mode);
    return {std::move(split), std::move(eval_samples), std::move(model)};
}
} // namespace detail

inline ArmResult run_federated(const ExperimentConfig& cfg, const std::string& test_client,
                               uint64_t run_seed, const ParamContainer* pretrained) {
    auto setup = detail::arm_setup(cfg, test_client, run_seed, pretrained);

    GlobalState state(std::move(setup.model));
    auto clients = make_clients(state, setup.split.train_clients, cfg.trainer, run_seed);
    EvalHook hook = [&](const ViTSegModel& m) {
        MetricsReport r = evaluate(m, setup.split.val, cfg.group_by_volume);
        return std::pair<double, double>{r.dice_avg, r.iou_avg};
    };
    FedOptions opt;
    opt.threads = resolve_threads(cfg.threads);

    ArmResult out;
    out.arm = "federated";
    out.test_client = test_client;
    auto t0 = std::chrono::steady_clock::now();
    out.training = run_training(state, clients, cfg.trainer, cfg.rounds, hook, opt);
    out.seconds_total =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.seconds_per_round = out.seconds_total / cfg.rounds;
    out.ledger = state.ledger;
    out.trainable_scalars = state.model.params().trainable_scalars();

    out.final_params = registry_container(state.model.params(), false, false);
    ReportMeta meta{"federated", cfg.mode == TrainMode::AdapterDecoder ? "adapter" : "full",
                    pretrained != nullptr, run_seed};
    out.eval_report = evaluate(state.model, setup.eval_samples, cfg.group_by_volume, meta);
    for (const auto& c : out.eval_report.clients)
        if (c.client_id == test_client) {
            out.test_dice = c.dice_avg;
            out.test_iou = c.iou_avg;
        }
    return out;
}

// Same data, same split, same initial weights; the pooled train slices are
// optimized serially for rounds x local_epochs epochs.
inline ArmResult run_centralized(const ExperimentConfig& cfg, const std::string& test_client,
                                 uint64_t run_seed, const ParamContainer* pretrained) {
    auto setup = detail::arm_setup(cfg, test_client, run_seed, pretrained);

    std::vector<SegSample> pooled;
    for (const auto& ds : setup.split.train_clients)
        for (const auto& s : ds.samples) pooled.push_back(s);

    ArmResult out;
    out.arm = "centralized";
    out.test_client = test_client;
    int epochs = cfg.rounds * cfg.trainer.local_epochs;
    auto t0 = std::chrono::steady_clock::now();
    train_centralized(setup.model, pooled, cfg.trainer, epochs,
                      mix_seed(run_seed, hash_name("central")), &out.central_losses);
    out.seconds_total =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.seconds_per_round = cfg.rounds > 0 ? out.seconds_total / cfg.rounds : 0;
    out.trainable_scalars = setup.model.params().trainable_scalars();

    out.final_params = registry_container(setup.model.params(), false, false);
    ReportMeta meta{"centralized",
                    cfg.mode == TrainMode::AdapterDecoder ? "adapter" : "full",
                    pretrained != nullptr, run_seed};
    out.eval_report = evaluate(setup.model, setup.eval_samples, cfg.group_by_volume, meta);
    for (const auto& c : out.eval_report.clients)
        if (c.client_id == test_client) {
            out.test_dice = c.dice_avg;
            out.test_iou = c.iou_avg;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Efficiency accounting (learnable parameters, analytic FLOPs, measured
// wall-clock, ledger bytes).

struct EfficiencyRow {
    std::string label;
    int64_t total_params = 0;
    int64_t trainable_params = 0;
    double train_flops_per_sample = 0; // analytic
    double seconds_per_round = 0;      // measured
    int64_t bytes_per_round = 0;       // ledger, all clients, one round
};

inline EfficiencyRow efficiency_row(const ExperimentConfig& cfg, const ArmResult& arm) {
    EfficiencyRow row;
    row.label = (cfg.mode == TrainMode::AdapterDecoder ? "adapter" : "full") +
                std::string("/") + arm.arm;
    CostEstimate est = estimate_cost(cfg.model_config(), cfg.adapters, cfg.mode);
    row.total_params = est.total_params;
    row.trainable_params = est.trainable_params;
    row.train_flops_per_sample = est.train_flops();
    row.seconds_per_round = arm.seconds_per_round;
    if (!arm.ledger.rows().empty()) row.bytes_per_round = arm.ledger.round_bytes(0);
    return row;
}

inline std::string efficiency_markdown(const std::vector<EfficiencyRow>& rows) {
    std::ostringstream os;
    os << "| run | total params | trainable params | train GFLOPs/sample | "
          "s/round | bytes/round |\n|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        os << "| " << r.label << " | " << r.total_params << " | " << r.trainable_params
           << " | ";
        os.precision(4);
        os << std::fixed << r.train_flops_per_sample / 1e9 << " | " << r.seconds_per_round
           << " | ";
        os.unsetf(std::ios_base::floatfield);
        os << r.bytes_per_round << " |\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Persistence of evaluation reports, so separate CLI invocations can be
// merged into one comparison grid.

inline nlohmann::json report_json(const MetricsReport& r) {
    nlohmann::json clients = nlohmann::json::array();
    for (const auto& c : r.clients) {
        nlohmann::json pc = nlohmann::json::array();
        for (const auto& m : c.per_class) pc.push_back({{"dice", m.dice}, {"iou", m.iou}});
        nlohmann::json vols = nlohmann::json::array();
        for (const auto& v : c.volumes) {
            nlohmann::json vpc = nlohmann::json::array();
            for (const auto& m : v.per_class)
                vpc.push_back({{"dice", m.dice}, {"iou", m.iou}});
            vols.push_back({{"volume_id", v.volume_id}, {"per_class", vpc}});
        }
        clients.push_back({{"client_id", c.client_id},
                           {"dice_avg", c.dice_avg},
                           {"iou_avg", c.iou_avg},
                           {"per_class", pc},
                           {"volumes", vols}});
    }
    return {{"meta",
             {{"variant", r.meta.variant},
              {"mode", r.meta.mode},
              {"pretrained", r.meta.pretrained},
              {"seed", r.meta.seed}}},
            {"grouped_by_volume", r.grouped_by_volume},
            {"dice_avg", r.dice_avg},
            {"iou_avg", r.iou_avg},
            {"clients", clients}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    try {
        MetricsReport r;
        const auto& meta = j.at("meta");
        r.meta.variant = meta.at("variant").get<std::string>();
        r.meta.mode = meta.at("mode").get<std::string>();
        r.meta.pretrained = meta.at("pretrained").get<bool>();
        r.meta.seed = meta.at("seed").get<uint64_t>();
        r.grouped_by_volume = j.at("grouped_by_volume").get<bool>();
        r.dice_avg = j.at("dice_avg").get<double>();
        r.iou_avg = j.at("iou_avg").get<double>();
        for (const auto& cj : j.at("clients")) {
            ClientMetrics c;
            c.client_id = cj.at("client_id").get<std::string>();
            c.dice_avg = cj.at("dice_avg").get<double>();
            c.iou_avg = cj.at("iou_avg").get<double>();
            for (const auto& m : cj.at("per_class"))
                c.per_class.push_back(
                    {m.at("dice").get<double>(), m.at("iou").get<double>()});
            for (const auto& vj : cj.at("volumes")) {
                VolumeMetrics v;
                v.volume_id = vj.at("volume_id").get<std::string>();
                for (const auto& m : vj.at("per_class"))
                    v.per_class.push_back(
                        {m.at("dice").get<double>(), m.at("iou").get<double>()});
                c.volumes.push_back(std::move(v));
            }
            r.clients.push_back(std::move(c));
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed report document: ") + e.what());
    }
}

} // namespace fedseg
