#pragma once

// One client's local optimization: Adam over the trainable parameter subset,
// mini-batch BCE epochs, producing a snapshot of the trainable values.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace fedseg {

struct TrainerConfig {
    double lr = 1e-4;
    int batch_size = 6;
    int local_epochs = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (lr <= 0) throw ConfigError("learning rate must be positive");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (local_epochs < 0) throw ConfigError("epoch count must be >= 0");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
            throw ConfigError("Adam betas must lie in [0,1)");
        if (eps <= 0) throw ConfigError("Adam eps must be positive");
    }
};

// ---------------------------------------------------------------------------

// Per-client Adam state. Moment slots appear lazily on the first step and
// persist for the client's lifetime (across federated rounds).
class AdamState {
public:
    AdamState() = default;
    explicit AdamState(const TrainerConfig& tc)
        : lr_(tc.lr), b1_(tc.beta1), b2_(tc.beta2), eps_(tc.eps) {}

    int64_t steps() const { return t_; }

    void reset() {
        t_ = 0;
        slots_.clear();
    }

    // One Adam update over the trainable subset of `params`. `grads` must
    // hold exactly the trainable names. Frozen parameters are not touched.
    void step(ParamRegistry& params, const std::map<std::string, Tensor<float>>& grads) {
        size_t n_trainable = 0;
        for (const auto& e : params.entries())
            if (e.trainable) ++n_trainable;
        for (const auto& e : params.entries())
            if (e.trainable && !grads.count(e.name))
                throw StateError("missing gradient for trainable parameter: " + e.name);
        if (grads.size() != n_trainable)
            throw StateError("gradients cover " + std::to_string(grads.size()) +
                             " names but the trainable set has " +
                             std::to_string(n_trainable));

        ++t_;
        double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));

        for (auto& e : params.entries()) {
            if (!e.trainable) continue;
            const Tensor<float>& g = grads.at(e.name);
            if (g.shape != e.value.shape)
                throw DimensionError("gradient for " + e.name + " has shape " +
                                     shape_str(g.shape) + ", parameter is " +
                                     shape_str(e.value.shape));
            Slot& s = slots_[e.name];
            if (s.m.data.empty()) {
                s.m = Tensor<float>(e.value.shape);
                s.v = Tensor<float>(e.value.shape);
            } else if (s.m.shape != e.value.shape) {
                throw StateError("optimizer slot shape drifted for " + e.name);
            }
            for (int64_t i = 0; i < e.value.numel(); ++i) {
                double gi = static_cast<double>(g[i]);
                double m = b1_ * static_cast<double>(s.m[i]) + (1.0 - b1_) * gi;
                double v = b2_ * static_cast<double>(s.v[i]) + (1.0 - b2_) * gi * gi;
                s.m[i] = static_cast<float>(m);
                s.v[i] = static_cast<float>(v);
                double update = lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
                e.value[i] = static_cast<float>(static_cast<double>(e.value[i]) - update);
            }
        }
    }

private:
    struct Slot {
        Tensor<float> m, v;
    };
    double lr_ = 1e-4, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
    std::map<std::string, Slot> slots_;
};

// ---------------------------------------------------------------------------

// Snapshot of one client's trainable parameters after local training.
struct ClientUpdate {
    std::string client_id;
    int round = 0;
    int64_t n_local = 0;
    // (name, value) in registry order — exactly the trainable set.
    std::vector<std::pair<std::string, Tensor<float>>> values;
};

inline ClientUpdate snapshot_trainable(const ParamRegistry& params,
                                       const std::string& client_id, int round,
                                       int64_t n_local) {
    ClientUpdate u;
    u.client_id = client_id;
    u.round = round;
    u.n_local = n_local;
    for (const auto& e : params.entries())
        if (e.trainable) u.values.emplace_back(e.name, e.value);
    return u;
}

// Mini-batch local training. Epoch i shuffles with a stream keyed by
// (seed, epoch_offset + i), so R sequential rounds of E epochs each visit
// the data in exactly the same order as one run of R*E epochs — serial and
// federated single-client training coincide batch for batch.
inline ClientUpdate train_local(ViTSegModel& model, AdamState& adam,
                                const std::vector<SegSample>& data,
                                const TrainerConfig& tc, uint64_t seed,
                                const std::string& client_id, int round = 0,
                                int64_t epoch_offset = 0,
                                std::vector<float>* batch_losses = nullptr) {
    tc.validate();
    if (data.empty()) throw DataError("cannot train on an empty dataset");

    for (int epoch = 0; epoch < tc.local_epochs; ++epoch) {
        std::vector<size_t> order(data.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(mix_seed(seed, static_cast<uint64_t>(epoch_offset + epoch)));
        rng.shuffle(order);

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tc.batch_size)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(tc.batch_size));
            std::map<std::string, Tensor<float>> grads;
            double batch_loss = 0;
            for (size_t s = start; s < stop; ++s) {
                const SegSample& smp = data[order[s]];
                batch_loss += model.loss_and_grads(smp.image, smp.mask, grads);
            }
            float inv = 1.f / static_cast<float>(stop - start);
            for (auto& [name, g] : grads)
                for (auto& v : g.data) v *= inv;
            adam.step(model.params(), grads);
            if (batch_losses)
                batch_losses->push_back(static_cast<float>(batch_loss) * inv);
        }
    }
    return snapshot_trainable(model.params(), client_id, round,
                              static_cast<int64_t>(data.size()));
}

} // namespace fedseg
