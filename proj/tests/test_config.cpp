#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstring>
#include <fstream>

#include "fedseg/experiments.hpp"

using namespace fedseg;

namespace {

// Small enough to train in milliseconds, big enough to exercise every path.
ExperimentConfig micro_cfg() {
    ExperimentConfig cfg;
    cfg.clients = 3;
    cfg.rounds = 2;
    cfg.seed = 404;
    cfg.input_size = 16;
    cfg.n_per_client = 12;
    cfg.pretrain_epochs = 1;
    cfg.pretrain_samples = 10;
    cfg.val_ratio = 0.2; // 12 samples -> 2 validation slices per client
    cfg.threads = 1;
    return cfg;
}

bool bytes_equal(const ParamContainer& a, const ParamContainer& b) {
    auto sa = serialize(a), sb = serialize(b);
    return sa.size() == sb.size() && std::memcmp(sa.data(), sb.data(), sa.size()) == 0;
}

} // namespace

TEST_CASE("default configuration is valid and round-trips through JSON") {
    ExperimentConfig c;
    REQUIRE_NOTHROW(c.validate());
    ExperimentConfig back = config_from_json(config_json(c));
    REQUIRE(back.variant == c.variant);
    REQUIRE(back.clients == c.clients);
    REQUIRE(back.rounds == c.rounds);
    REQUIRE(back.seed == c.seed);
    REQUIRE(back.trainer.lr == c.trainer.lr);
    REQUIRE(back.trainer.batch_size == c.trainer.batch_size);
    REQUIRE(back.input_size == c.input_size);
    REQUIRE(back.n_per_client == c.n_per_client);
    REQUIRE(back.pretrain_epochs == c.pretrain_epochs);
    REQUIRE(back.val_ratio == c.val_ratio);
    REQUIRE(back.mode == c.mode);
    REQUIRE(back.pretrained == c.pretrained);
    REQUIRE(back.out_dir == c.out_dir);
}

TEST_CASE("partial documents inherit defaults") {
    nlohmann::json doc = {{"trainer", {{"lr", 0.01}}}, {"mode", "full"}};
    ExperimentConfig c = config_from_json(doc);
    REQUIRE(c.trainer.lr == 0.01);
    REQUIRE(c.mode == TrainMode::FullFineTune);
    REQUIRE(c.clients == 4);                  // untouched defaults
    REQUIRE(c.trainer.batch_size == 6);
    REQUIRE(config_from_json(nlohmann::json::object()).rounds == 30);
}

TEST_CASE("unknown keys and invalid values are rejected before any work") {
    REQUIRE_THROWS_AS(config_from_json({{"trainer", {{"lrate", 1.0}}}}), ConfigError);
    REQUIRE_THROWS_AS(config_from_json({{"modee", "full"}}), ConfigError);
    REQUIRE_THROWS_AS(config_from_json({{"mode", "both"}}), ConfigError);
    REQUIRE_THROWS_AS(config_from_json({{"model", {{"variant", "vit_h"}}}}), ConfigError);
    REQUIRE_THROWS_AS(config_from_json({{"federation", {{"rounds", 0}}}}), ConfigError);
    REQUIRE_THROWS_AS(config_from_json({{"data", {{"n_per_client", 3}}}}), ConfigError);
    REQUIRE_THROWS_AS(config_from_json({{"eval", {{"val_ratio", 1.5}}}}), ConfigError);
    REQUIRE_THROWS_AS(config_from_json({{"trainer", {{"lr", "fast"}}}}), ConfigError);
    // Cross-field rule: adapter mode needs adapters in the model.
    nlohmann::json doc = {{"model", {{"adapters", false}}}, {"mode", "adapter"}};
    REQUIRE_THROWS_AS(config_from_json(doc), ConfigError);
    doc["mode"] = "full";
    REQUIRE_NOTHROW(config_from_json(doc));

    try {
        config_from_json({{"trainer", {{"lrate", 1.0}}}});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("trainer.lrate") != std::string::npos);
    }
}

TEST_CASE("dotted-path overrides update nested fields") {
    nlohmann::json doc = config_json(ExperimentConfig{});
    apply_override(doc, "trainer.lr", "0.5");
    apply_override(doc, "model.variant", "mini_l");
    apply_override(doc, "pretrained", "false");
    apply_override(doc, "federation.seed", "7");
    ExperimentConfig c = config_from_json(doc);
    REQUIRE(c.trainer.lr == 0.5);
    REQUIRE(c.variant == "mini_l");
    REQUIRE(!c.pretrained);
    REQUIRE(c.seed == 7);

    // Overrides on an empty document create the path.
    nlohmann::json empty = nlohmann::json::object();
    apply_override(empty, "data.input_size", "32");
    REQUIRE(config_from_json(empty).input_size == 32);

    REQUIRE_THROWS_AS(apply_override(doc, "", "1"), ConfigError);
    REQUIRE_THROWS_AS(apply_override(doc, "trainer.", "1"), ConfigError);
    REQUIRE_THROWS_AS(apply_override(doc, ".lr", "1"), ConfigError);
    // A typo'd override is caught at parse time by the unknown-key check.
    apply_override(doc, "trainer.lrx", "1");
    REQUIRE_THROWS_AS(config_from_json(doc), ConfigError);
}

TEST_CASE("config files load and save") {
    std::string path = "test_config_roundtrip.json";
    ExperimentConfig c = micro_cfg();
    save_config(c, path);
    ExperimentConfig back = load_config(path);
    REQUIRE(back.clients == 3);
    REQUIRE(back.seed == 404);
    REQUIRE(back.input_size == 16);
    std::remove(path.c_str());

    REQUIRE_THROWS_AS(load_config("no_such_config.json"), IoError);
    std::ofstream bad("test_config_bad.json");
    bad << "{not json";
    bad.close();
    REQUIRE_THROWS_AS(load_config("test_config_bad.json"), ConfigError);
    std::remove("test_config_bad.json");
}

TEST_CASE("pretraining stage is deterministic and seed-scoped") {
    ExperimentConfig cfg = micro_cfg();
    PretrainResult a = run_pretrain(cfg);
    PretrainResult b = run_pretrain(cfg);
    REQUIRE(bytes_equal(a.checkpoint, b.checkpoint));
    cfg.seed = 405;
    PretrainResult c = run_pretrain(cfg);
    REQUIRE(!bytes_equal(a.checkpoint, c.checkpoint));
}

TEST_CASE("federated arm produces a complete, reproducible result") {
    ExperimentConfig cfg = micro_cfg();
    PretrainResult pt = run_pretrain(cfg);

    ArmResult run = run_federated(cfg, "client_01", 11, &pt.checkpoint);
    REQUIRE(run.arm == "federated");
    REQUIRE(run.test_client == "client_01");
    REQUIRE(run.training.history.size() == 2);
    REQUIRE(run.ledger.rows().size() == 4); // 2 train clients x 2 rounds
    REQUIRE(run.eval_report.clients.size() == 3);
    REQUIRE(run.eval_report.meta.variant == "federated");
    REQUIRE(run.eval_report.meta.pretrained);
    REQUIRE(run.test_dice >= 0.0);
    REQUIRE(run.test_dice <= 1.0);
    REQUIRE(run.test_iou <= run.test_dice);
    REQUIRE(run.trainable_scalars > 0);
    REQUIRE(run.seconds_per_round > 0.0);

    // Bitwise reproducible under the same run seed; different otherwise.
    ArmResult again = run_federated(cfg, "client_01", 11, &pt.checkpoint);
    REQUIRE(bytes_equal(run.final_params, again.final_params));
    REQUIRE(run.eval_report.dice_avg == again.eval_report.dice_avg);
    ArmResult other = run_federated(cfg, "client_01", 12, &pt.checkpoint);
    REQUIRE(!bytes_equal(run.final_params, other.final_params));

    // The scratch ablation really starts somewhere else.
    ArmResult scratch = run_federated(cfg, "client_01", 11, nullptr);
    REQUIRE(!bytes_equal(run.final_params, scratch.final_params));
    REQUIRE(!scratch.eval_report.meta.pretrained);
}

TEST_CASE("centralized arm shares data, split, and initialization") {
    ExperimentConfig cfg = micro_cfg();
    PretrainResult pt = run_pretrain(cfg);

    ArmResult central = run_centralized(cfg, "client_02", 31, &pt.checkpoint);
    REQUIRE(central.arm == "centralized");
    REQUIRE(central.ledger.rows().empty());
    REQUIRE(central.eval_report.clients.size() == 3);
    REQUIRE(central.eval_report.meta.variant == "centralized");
    // 2 train clients x 12 samples, minus 2x2 val slices = 20 pooled samples;
    // batch 6 -> 4 steps/epoch, rounds(2) x local_epochs(1) epochs -> 8.
    REQUIRE(central.central_losses.size() == 8);

    ArmResult fed = run_federated(cfg, "client_02", 31, &pt.checkpoint);
    // Identical evaluation client set, paired row for row.
    REQUIRE(fed.eval_report.clients.size() == central.eval_report.clients.size());
    for (size_t i = 0; i < fed.eval_report.clients.size(); ++i)
        REQUIRE(fed.eval_report.clients[i].client_id ==
                central.eval_report.clients[i].client_id);
    REQUIRE_NOTHROW(paired_compare(fed.eval_report, central.eval_report));
}

TEST_CASE("efficiency rows carry the analytic and measured story") {
    ExperimentConfig cfg = micro_cfg();
    ArmResult fed = run_federated(cfg, "client_00", 5, nullptr);
    EfficiencyRow ad = efficiency_row(cfg, fed);
    REQUIRE(ad.label == "adapter/federated");
    REQUIRE(ad.bytes_per_round > 0);
    REQUIRE(ad.trainable_params == fed.trainable_scalars);
    REQUIRE(ad.seconds_per_round > 0);

    ExperimentConfig full = cfg;
    full.mode = TrainMode::FullFineTune;
    ArmResult fed_full = run_federated(full, "client_00", 5, nullptr);
    EfficiencyRow fr = efficiency_row(full, fed_full);
    REQUIRE(fr.trainable_params > ad.trainable_params);
    REQUIRE(fr.train_flops_per_sample > ad.train_flops_per_sample);
    REQUIRE(fr.bytes_per_round > ad.bytes_per_round);

    std::string md = efficiency_markdown({ad, fr});
    REQUIRE(md.find("| adapter/federated |") != std::string::npos);
    REQUIRE(md.find("| full/federated |") != std::string::npos);
    REQUIRE(md.find("bytes/round") != std::string::npos);
}

TEST_CASE("evaluation reports round-trip through JSON") {
    ExperimentConfig cfg = micro_cfg();
    ArmResult run = run_federated(cfg, "client_00", 3, nullptr);
    nlohmann::json j = report_json(run.eval_report);
    MetricsReport back = report_from_json(j);
    REQUIRE(back.meta.variant == run.eval_report.meta.variant);
    REQUIRE(back.meta.seed == run.eval_report.meta.seed);
    REQUIRE(back.dice_avg == run.eval_report.dice_avg);
    REQUIRE(back.iou_avg == run.eval_report.iou_avg);
    REQUIRE(back.clients.size() == run.eval_report.clients.size());
    for (size_t i = 0; i < back.clients.size(); ++i) {
        REQUIRE(back.clients[i].client_id == run.eval_report.clients[i].client_id);
        REQUIRE(back.clients[i].dice_avg == run.eval_report.clients[i].dice_avg);
        REQUIRE(back.clients[i].per_class.size() ==
                run.eval_report.clients[i].per_class.size());
    }
    REQUIRE_THROWS_AS(report_from_json(nlohmann::json{{"meta", 1}}), DataError);
}
