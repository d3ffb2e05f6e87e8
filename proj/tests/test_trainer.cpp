// Client-side optimization: Adam correctness against closed forms, exact
// trainable-set coverage, frozen-parameter immutability, and the
// round/epoch shuffle alignment that makes serial and single-client
// federated training coincide.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <map>

#include "fedseg/trainer.hpp"

using namespace fedseg;

namespace {

ModelConfig small_cfg() {
    ModelConfig c;
    c.input_size = 16;
    c.in_channels = 3;
    c.patch_size = 4;
    c.embed_dim = 8;
    c.depth = 1;
    c.num_heads = 2;
    c.mlp_ratio = 2;
    c.adapter_dim = 4;
    c.num_classes = 2;
    return c;
}

std::vector<SegSample> small_dataset(int n, uint64_t seed) {
    FederationSpec s = FederationSpec::defaults(1, 16, 2, seed);
    return generate_federation(s, n).front().samples;
}

bool values_equal(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * 4) == 0;
}

ParamRegistry scalar_registry(float w) {
    ParamRegistry r;
    r.insert("w", ParamRole::Head, Tensor<float>::scalar(w));
    return r;
}

} // namespace

TEST_CASE("trainer config validation") {
    TrainerConfig tc;
    REQUIRE_NOTHROW(tc.validate());
    SECTION("defaults match the training protocol") {
        REQUIRE(tc.batch_size == 6);
        REQUIRE(tc.local_epochs == 1);
        REQUIRE(tc.beta1 == 0.9);
        REQUIRE(tc.beta2 == 0.999);
    }
    SECTION("rejections") {
        tc.lr = 0;
        REQUIRE_THROWS_AS(tc.validate(), ConfigError);
        tc = {};
        tc.batch_size = 0;
        REQUIRE_THROWS_AS(tc.validate(), ConfigError);
        tc = {};
        tc.local_epochs = -1;
        REQUIRE_THROWS_AS(tc.validate(), ConfigError);
        tc = {};
        tc.beta2 = 1.0;
        REQUIRE_THROWS_AS(tc.validate(), ConfigError);
    }
}

TEST_CASE("first Adam step matches the closed form") {
    // With g=1 the bias-corrected moments are exactly 1, so the first step
    // moves the parameter by -lr/(1+eps).
    TrainerConfig tc;
    tc.lr = 0.1;
    ParamRegistry params = scalar_registry(1.0f);
    AdamState adam(tc);
    std::map<std::string, Tensor<float>> grads{{"w", Tensor<float>::scalar(1.f)}};
    adam.step(params, grads);
    REQUIRE(adam.steps() == 1);
    REQUIRE(params.at("w").value[0] == Catch::Approx(1.0 - 0.1).margin(1e-6));

    // second identical step keeps moving in the same direction
    adam.step(params, grads);
    REQUIRE(adam.steps() == 2);
    REQUIRE(params.at("w").value[0] < 0.9f);
}

TEST_CASE("zero gradients leave parameters bitwise unchanged") {
    TrainerConfig tc;
    ParamRegistry params;
    params.insert("a", ParamRole::Decoder, Tensor<float>::from({3}, {0.1f, -2.5f, 7.f}));
    params.insert("b", ParamRole::Head, Tensor<float>::from({2}, {1e-30f, 3.25f}));
    Tensor<float> a0 = params.at("a").value;
    Tensor<float> b0 = params.at("b").value;

    AdamState adam(tc);
    std::map<std::string, Tensor<float>> grads{{"a", Tensor<float>({3})},
                                               {"b", Tensor<float>({2})}};
    adam.step(params, grads);
    REQUIRE(adam.steps() == 1);
    REQUIRE(values_equal(params.at("a").value, a0));
    REQUIRE(values_equal(params.at("b").value, b0));
}

TEST_CASE("two Adam steps descend a quadratic") {
    TrainerConfig tc;
    tc.lr = 0.05;
    ParamRegistry params = scalar_registry(5.0f);
    AdamState adam(tc);
    auto loss = [&] {
        double d = params.at("w").value[0] - 3.0;
        return d * d;
    };
    double l0 = loss();
    for (int i = 0; i < 2; ++i) {
        double g = 2.0 * (params.at("w").value[0] - 3.0);
        std::map<std::string, Tensor<float>> grads{
            {"w", Tensor<float>::scalar(static_cast<float>(g))}};
        adam.step(params, grads);
    }
    REQUIRE(loss() < l0);
}

TEST_CASE("gradient coverage must match the trainable set exactly") {
    TrainerConfig tc;
    ParamRegistry params;
    params.insert("train_me", ParamRole::Head, Tensor<float>::scalar(1.f), true);
    params.insert("frozen", ParamRole::Encoder, Tensor<float>::scalar(2.f), false);
    AdamState adam(tc);

    SECTION("missing gradient") {
        std::map<std::string, Tensor<float>> grads;
        REQUIRE_THROWS_AS(adam.step(params, grads), StateError);
    }
    SECTION("gradient for a frozen parameter") {
        std::map<std::string, Tensor<float>> grads{
            {"train_me", Tensor<float>::scalar(0.f)},
            {"frozen", Tensor<float>::scalar(0.f)}};
        REQUIRE_THROWS_AS(adam.step(params, grads), StateError);
    }
    SECTION("gradient for an unknown name") {
        std::map<std::string, Tensor<float>> grads{
            {"train_me", Tensor<float>::scalar(0.f)},
            {"stranger", Tensor<float>::scalar(0.f)}};
        REQUIRE_THROWS_AS(adam.step(params, grads), StateError);
    }
    SECTION("shape mismatch") {
        std::map<std::string, Tensor<float>> grads{
            {"train_me", Tensor<float>({2})}};
        REQUIRE_THROWS_AS(adam.step(params, grads), DimensionError);
    }
    SECTION("frozen values never move") {
        std::map<std::string, Tensor<float>> grads{
            {"train_me", Tensor<float>::scalar(10.f)}};
        Tensor<float> frozen0 = params.at("frozen").value;
        adam.step(params, grads);
        REQUIRE(values_equal(params.at("frozen").value, frozen0));
        REQUIRE(params.at("train_me").value[0] != 1.f);
    }
}

TEST_CASE("local training basics") {
    ModelConfig cfg = small_cfg();
    auto data = small_dataset(12, 3);
    TrainerConfig tc;
    tc.lr = 1e-3;

    SECTION("empty dataset rejected") {
        ViTSegModel model(cfg, true, 1);
        AdamState adam(tc);
        REQUIRE_THROWS_AS(train_local(model, adam, {}, tc, 1, "c0"), DataError);
    }

    SECTION("zero epochs returns the initialization values") {
        ViTSegModel model(cfg, true, 1);
        ClientUpdate init = snapshot_trainable(model.params(), "c0", 0, 12);
        AdamState adam(tc);
        TrainerConfig tc0 = tc;
        tc0.local_epochs = 0;
        ClientUpdate u = train_local(model, adam, data, tc0, 1, "c0");
        REQUIRE(adam.steps() == 0);
        REQUIRE(u.values.size() == init.values.size());
        for (size_t i = 0; i < u.values.size(); ++i) {
            REQUIRE(u.values[i].first == init.values[i].first);
            REQUIRE(values_equal(u.values[i].second, init.values[i].second));
        }
        REQUIRE(u.n_local == 12);
    }

    SECTION("same seed and init give a bit-identical update") {
        ViTSegModel m1(cfg, true, 7), m2(cfg, true, 7);
        AdamState a1(tc), a2(tc);
        ClientUpdate u1 = train_local(m1, a1, data, tc, 99, "c0");
        ClientUpdate u2 = train_local(m2, a2, data, tc, 99, "c0");
        REQUIRE(u1.values.size() == u2.values.size());
        for (size_t i = 0; i < u1.values.size(); ++i)
            REQUIRE(values_equal(u1.values[i].second, u2.values[i].second));
        // and a different shuffle seed diverges
        ViTSegModel m3(cfg, true, 7);
        AdamState a3(tc);
        ClientUpdate u3 = train_local(m3, a3, data, tc, 100, "c0");
        bool any_diff = false;
        for (size_t i = 0; i < u1.values.size(); ++i)
            any_diff = any_diff || !values_equal(u1.values[i].second, u3.values[i].second);
        REQUIRE(any_diff);
    }

    SECTION("adam steps once per batch") {
        ViTSegModel model(cfg, true, 7);
        AdamState adam(tc);
        TrainerConfig tc2 = tc;
        tc2.local_epochs = 2;
        tc2.batch_size = 5; // 12 samples -> batches of 5,5,2 per epoch
        std::vector<float> losses;
        train_local(model, adam, data, tc2, 1, "c0", 0, 0, &losses);
        REQUIRE(adam.steps() == 6);
        REQUIRE(losses.size() == 6);
    }
}

TEST_CASE("update key set equals the trainable set") {
    ModelConfig cfg = small_cfg();
    auto data = small_dataset(10, 5);
    TrainerConfig tc;

    ViTSegModel model(cfg, true, 2);
    model.set_train_mode(TrainMode::AdapterDecoder);
    AdamState adam(tc);
    ClientUpdate u = train_local(model, adam, data, tc, 4, "c0");

    std::vector<std::string> expected = model.params().names(true);
    REQUIRE(u.values.size() == expected.size());
    for (size_t i = 0; i < expected.size(); ++i)
        REQUIRE(u.values[i].first == expected[i]);
    for (const auto& [name, value] : u.values) {
        REQUIRE(model.params().at(name).role != ParamRole::Encoder);
        REQUIRE(value.shape == model.params().at(name).value.shape);
    }
}

TEST_CASE("adapter-mode training conserves every encoder parameter bitwise") {
    ModelConfig cfg = small_cfg();
    auto data = small_dataset(12, 8);
    TrainerConfig tc;
    tc.lr = 1e-3;
    tc.local_epochs = 3;

    ViTSegModel model(cfg, true, 3);
    model.set_train_mode(TrainMode::AdapterDecoder);
    std::map<std::string, Tensor<float>> before;
    for (const auto& e : model.params().entries()) before[e.name] = e.value;

    AdamState adam(tc);
    train_local(model, adam, data, tc, 11, "c0");

    bool any_trainable_moved = false;
    for (const auto& e : model.params().entries()) {
        INFO(e.name);
        if (e.role == ParamRole::Encoder)
            REQUIRE(values_equal(e.value, before.at(e.name)));
        else if (!values_equal(e.value, before.at(e.name)))
            any_trainable_moved = true;
    }
    REQUIRE(any_trainable_moved);
}

TEST_CASE("rounds of one epoch replay a multi-epoch run exactly") {
    // Epoch i uses the shuffle stream keyed by (seed, epoch_offset + i), so
    // four 1-epoch rounds with offsets 0..3 must reproduce one 4-epoch run.
    ModelConfig cfg = small_cfg();
    auto data = small_dataset(11, 13);
    TrainerConfig tc;
    tc.lr = 1e-3;

    ViTSegModel serial(cfg, true, 21);
    AdamState adam_serial(tc);
    TrainerConfig tc4 = tc;
    tc4.local_epochs = 4;
    train_local(serial, adam_serial, data, tc4, 55, "c0", 0, 0);

    ViTSegModel rounds(cfg, true, 21);
    AdamState adam_rounds(tc);
    for (int r = 0; r < 4; ++r)
        train_local(rounds, adam_rounds, data, tc, 55, "c0", r, r);

    for (const auto& e : serial.params().entries()) {
        INFO(e.name);
        REQUIRE(values_equal(rounds.params().at(e.name).value, e.value));
    }
    REQUIRE(adam_serial.steps() == adam_rounds.steps());
}

TEST_CASE("training reduces the loss on synthetic data") {
    // median batch loss over the last tenth of batches must fall below the
    // median over the first tenth, in at least 2 of 3 seeds
    ModelConfig cfg = small_cfg();
    TrainerConfig tc;
    tc.lr = 1e-3;
    tc.local_epochs = 10;

    auto median = [](std::vector<float> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };

    int wins = 0;
    for (uint64_t seed : {101ull, 202ull, 303ull}) {
        auto data = small_dataset(18, seed);
        ViTSegModel model(cfg, true, seed);
        AdamState adam(tc);
        std::vector<float> losses;
        train_local(model, adam, data, tc, seed, "c0", 0, 0, &losses);
        size_t tenth = std::max<size_t>(1, losses.size() / 10);
        std::vector<float> first(losses.begin(), losses.begin() + static_cast<long>(tenth));
        std::vector<float> last(losses.end() - static_cast<long>(tenth), losses.end());
        if (median(last) < median(first)) ++wins;
    }
    REQUIRE(wins >= 2);
}
