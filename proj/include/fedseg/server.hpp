#pragma once

// Synchronous federated orchestration: distribute the global trainable
// subset, train clients (optionally on a worker pool), collect updates,
// FedAvg-aggregate in 64-bit, account every transmitted byte, iterate.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "tensor.hpp"
#include "trainer.hpp"
#include "wire.hpp"

namespace fedseg {

// ---------------------------------------------------------------------------
// Communication ledger. Per-round rows cover trainable traffic only (n
// scalars down + n scalars up per client per round); the one-time round-0
// distribution of frozen parameters is accounted separately so the per-round
// invariant "2n scalars per client" holds for every row.

struct LedgerRow {
    int round = 0;
    std::string client_id;
    size_t down_bytes = 0, up_bytes = 0;
    int64_t down_scalars = 0, up_scalars = 0;
};

class CommLedger {
public:
    void record_initial_sync(size_t bytes, int64_t scalars) {
        initial_sync_bytes_ += bytes;
        initial_sync_scalars_ += scalars;
    }

    void record_round(int round, const std::string& client_id, size_t down_bytes,
                      int64_t down_scalars, size_t up_bytes, int64_t up_scalars) {
        rows_.push_back({round, client_id, down_bytes, up_bytes, down_scalars, up_scalars});
    }

    const std::vector<LedgerRow>& rows() const { return rows_; }
    size_t initial_sync_bytes() const { return initial_sync_bytes_; }
    int64_t initial_sync_scalars() const { return initial_sync_scalars_; }

    size_t total_bytes() const {
        size_t n = 0;
        for (const auto& r : rows_) n += r.down_bytes + r.up_bytes;
        return n;
    }

    int64_t total_scalars() const {
        int64_t n = 0;
        for (const auto& r : rows_) n += r.down_scalars + r.up_scalars;
        return n;
    }

    size_t round_bytes(int round) const {
        size_t n = 0;
        for (const auto& r : rows_)
            if (r.round == round) n += r.down_bytes + r.up_bytes;
        return n;
    }

private:
    std::vector<LedgerRow> rows_;
    size_t initial_sync_bytes_ = 0;
    int64_t initial_sync_scalars_ = 0;
};

// ---------------------------------------------------------------------------
// Container plumbing between the registry and the wire format.

inline ParamContainer registry_container(const ParamRegistry& params, bool trainable_only,
                                         bool is_update) {
    ParamContainer c;
    c.is_update = is_update;
    c.trainable_only = trainable_only;
    for (const auto& e : params.entries()) {
        if (trainable_only && !e.trainable) continue;
        c.entries.push_back({e.name, static_cast<uint8_t>(e.role), e.value});
    }
    return c;
}

// The frozen complement, sent once at round 0.
inline ParamContainer frozen_container(const ParamRegistry& params) {
    ParamContainer c;
    for (const auto& e : params.entries())
        if (!e.trainable)
            c.entries.push_back({e.name, static_cast<uint8_t>(e.role), e.value});
    return c;
}

inline int64_t container_scalars(const ParamContainer& c) {
    int64_t n = 0;
    for (const auto& e : c.entries) n += e.value.numel();
    return n;
}

inline void apply_container(ParamRegistry& params, const ParamContainer& c) {
    for (const auto& e : c.entries) {
        if (!params.contains(e.name))
            throw ProtocolError("received unknown parameter: " + e.name);
        params.set(e.name, e.value);
    }
}

// ---------------------------------------------------------------------------
// FedAvg. Weights are computed first (lambda_k = N_k / sum N, in double), so
// scaling every N_k by a constant gives bit-identical output, and a single
// client passes through exactly.

inline std::vector<std::pair<std::string, Tensor<float>>> fedavg(
    std::vector<ClientUpdate> updates) {
    if (updates.empty()) throw ProtocolError("fedavg needs at least one update");
    std::sort(updates.begin(), updates.end(),
              [](const ClientUpdate& a, const ClientUpdate& b) {
                  return a.client_id < b.client_id;
              });
    const ClientUpdate& ref = updates.front();
    int64_t total_n = 0;
    for (size_t i = 0; i < updates.size(); ++i) {
        const ClientUpdate& u = updates[i];
        if (i > 0 && u.client_id == updates[i - 1].client_id)
            throw ProtocolError("duplicate update from client " + u.client_id);
        if (u.round != ref.round)
            throw ProtocolError("updates span rounds " + std::to_string(ref.round) +
                                " and " + std::to_string(u.round));
        if (u.n_local <= 0)
            throw ProtocolError("client " + u.client_id + " reports sample count " +
                                std::to_string(u.n_local));
        if (u.values.size() != ref.values.size())
            throw ProtocolError("client " + u.client_id + " sent " +
                                std::to_string(u.values.size()) + " parameters, expected " +
                                std::to_string(ref.values.size()));
        for (size_t p = 0; p < u.values.size(); ++p) {
            if (u.values[p].first != ref.values[p].first)
                throw ProtocolError("parameter key mismatch: client " + u.client_id +
                                    " sent '" + u.values[p].first + "' where '" +
                                    ref.values[p].first + "' was expected");
            if (u.values[p].second.shape != ref.values[p].second.shape)
                throw ProtocolError("shape mismatch for " + u.values[p].first +
                                    " from client " + u.client_id);
        }
        total_n += u.n_local;
    }
    if (total_n <= 0) throw ProtocolError("total sample count is zero");

    std::vector<double> lambda(updates.size());
    for (size_t i = 0; i < updates.size(); ++i)
        lambda[i] = static_cast<double>(updates[i].n_local) / static_cast<double>(total_n);

    std::vector<std::pair<std::string, Tensor<float>>> out;
    out.reserve(ref.values.size());
    for (size_t p = 0; p < ref.values.size(); ++p) {
        Tensor<float> agg(ref.values[p].second.shape);
        for (int64_t i = 0; i < agg.numel(); ++i) {
            // Seed with the first term rather than 0.0: a zero seed would
            // turn a lone -0.0 into +0.0 and break single-client exactness.
            double acc = lambda[0] * static_cast<double>(updates[0].values[p].second[i]);
            for (size_t k = 1; k < updates.size(); ++k)
                acc += lambda[k] * static_cast<double>(updates[k].values[p].second[i]);
            agg[i] = static_cast<float>(acc);
        }
        out.emplace_back(ref.values[p].first, std::move(agg));
    }
    return out;
}

// ---------------------------------------------------------------------------

struct FedClient {
    std::string id;
    std::vector<SegSample> data; // local train split
    ViTSegModel model;
    AdamState adam;
    uint64_t seed = 0; // base of this client's shuffle stream
};

struct GlobalState {
    int round = 0;
    ViTSegModel model;
    CommLedger ledger;

    GlobalState(ModelConfig cfg, bool with_adapters, uint64_t seed)
        : model(cfg, with_adapters, seed) {}
    explicit GlobalState(ViTSegModel m) : model(std::move(m)) {}
};

struct FedOptions {
    int threads = 1;
    bool reset_adam_each_round = false;
};

// Builds one client per dataset. Client models start as copies of the
// global parameters in the same train mode; the round-0 distribution
// re-sends them through the accounted path anyway.
inline std::vector<FedClient> make_clients(const GlobalState& state,
                                           const std::vector<ClientDataset>& datasets,
                                           const TrainerConfig& tc, uint64_t run_seed) {
    std::vector<FedClient> out;
    for (const auto& ds : datasets) {
        if (ds.samples.empty())
            throw DataError("client " + ds.client_id + " has no training data");
        FedClient c{ds.client_id, ds.samples, state.model, AdamState(tc),
                    mix_seed(run_seed, hash_name(ds.client_id))};
        out.push_back(std::move(c));
    }
    return out;
}

// One synchronous round: distribute -> local train -> collect -> aggregate.
// Any client failure aborts the round before aggregation touches the global
// registry.
inline void run_round(GlobalState& state, std::vector<FedClient>& clients,
                      const TrainerConfig& tc, const FedOptions& opt = {}) {
    if (clients.empty()) throw ConfigError("a round needs at least one client");
    for (size_t i = 0; i < clients.size(); ++i)
        for (size_t j = i + 1; j < clients.size(); ++j)
            if (clients[i].id == clients[j].id)
                throw ProtocolError("duplicate client id: " + clients[i].id);

    // One-time distribution of the frozen complement (empty under full
    // fine-tuning) — accounted separately from per-round trainable traffic.
    if (state.round == 0) {
        ParamContainer frozen = frozen_container(state.model.params());
        if (!frozen.entries.empty()) {
            size_t bytes = measure_bytes(frozen);
            int64_t scalars = container_scalars(frozen);
            for (auto& c : clients) {
                apply_container(c.model.params(), frozen);
                state.ledger.record_initial_sync(bytes, scalars);
            }
        }
    }

    // Distribute the current trainable subset.
    ParamContainer down = registry_container(state.model.params(), true, false);
    size_t down_bytes = measure_bytes(down);
    int64_t down_scalars = container_scalars(down);
    for (auto& c : clients) apply_container(c.model.params(), down);

    // Local training, fanned out over a fixed-size pool. Results land in
    // slots indexed by client position, so thread timing cannot reorder
    // anything downstream.
    std::vector<ClientUpdate> updates(clients.size());
    std::vector<std::exception_ptr> failures(clients.size());
    auto train_one = [&](size_t i) {
        FedClient& c = clients[i];
        try {
            if (opt.reset_adam_each_round) c.adam.reset();
            updates[i] = train_local(c.model, c.adam, c.data, tc, c.seed, c.id,
                                     state.round,
                                     static_cast<int64_t>(state.round) * tc.local_epochs);
        } catch (...) {
            failures[i] = std::current_exception();
        }
    };
    int threads = std::max(1, std::min<int>(opt.threads,
                                            static_cast<int>(clients.size())));
    if (threads == 1) {
        for (size_t i = 0; i < clients.size(); ++i) train_one(i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(threads));
        for (int t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < clients.size();
                     i = next.fetch_add(1))
                    train_one(i);
            });
        for (auto& th : pool) th.join();
    }
    for (size_t i = 0; i < clients.size(); ++i) {
        if (!failures[i]) continue;
        try {
            std::rethrow_exception(failures[i]);
        } catch (const std::exception& e) {
            throw RoundError("client " + clients[i].id + " failed in round " +
                             std::to_string(state.round) + ": " + e.what());
        }
    }

    // Collect: account upload traffic per client.
    for (size_t i = 0; i < clients.size(); ++i) {
        ParamContainer up = registry_container(clients[i].model.params(), true, true);
        state.ledger.record_round(state.round, clients[i].id, down_bytes, down_scalars,
                                  measure_bytes(up), container_scalars(up));
    }

    auto aggregated = fedavg(updates);
    for (const auto& [name, value] : aggregated) state.model.params().set(name, value);
    state.round += 1;
}

// ---------------------------------------------------------------------------

struct RoundHistory {
    int round = 0; // round index this row describes (post-aggregation)
    double val_dice = std::numeric_limits<double>::quiet_NaN();
    double val_iou = std::numeric_limits<double>::quiet_NaN();
    size_t round_bytes = 0; // down+up across clients this round
};

struct TrainingRunResult {
    std::vector<RoundHistory> history;
    double best_val_dice = -1.0;
    int best_round = -1;
    ParamContainer best_checkpoint; // full parameter snapshot at best round
};

// (dice, iou) on the validation split, given the current global model.
using EvalHook = std::function<std::pair<double, double>(const ViTSegModel&)>;

inline TrainingRunResult run_training(GlobalState& state, std::vector<FedClient>& clients,
                                      const TrainerConfig& tc, int rounds,
                                      const EvalHook& eval_hook,
                                      const FedOptions& opt = {}) {
    if (rounds < 1) throw ConfigError("training needs at least one round");
    TrainingRunResult res;
    for (int r = 0; r < rounds; ++r) {
        int this_round = state.round;
        run_round(state, clients, tc, opt);
        RoundHistory h;
        h.round = this_round;
        h.round_bytes = state.ledger.round_bytes(this_round);
        if (eval_hook) {
            auto [dice, iou] = eval_hook(state.model);
            h.val_dice = dice;
            h.val_iou = iou;
            if (dice > res.best_val_dice) {
                res.best_val_dice = dice;
                res.best_round = this_round;
                res.best_checkpoint = registry_container(state.model.params(), false, false);
            }
        }
        res.history.push_back(h);
    }
    if (res.best_round < 0) { // no eval hook: keep the final parameters
        res.best_round = state.round - 1;
        res.best_checkpoint = registry_container(state.model.params(), false, false);
    }
    return res;
}

// Plain serial training on pooled data with the same hyperparameters; the
// non-federated comparison arm. `seed` must match the corresponding
// federated client's stream for the single-client equivalence to hold.
inline ClientUpdate train_centralized(ViTSegModel& model, const std::vector<SegSample>& data,
                                      const TrainerConfig& tc, int epochs, uint64_t seed,
                                      std::vector<float>* batch_losses = nullptr) {
    if (epochs < 0) throw ConfigError("epoch count must be >= 0");
    AdamState adam(tc);
    TrainerConfig serial = tc;
    serial.local_epochs = epochs;
    return train_local(model, adam, data, serial, seed, "centralized", 0, 0, batch_losses);
}

// ---------------------------------------------------------------------------
// CSV export: one row per round with per-client traffic and validation
// metrics.

inline std::string history_csv(const TrainingRunResult& res, const CommLedger& ledger) {
    // stable client column order: first appearance in the ledger
    std::vector<std::string> ids;
    for (const auto& r : ledger.rows())
        if (std::find(ids.begin(), ids.end(), r.client_id) == ids.end())
            ids.push_back(r.client_id);

    std::ostringstream os;
    os << "round";
    for (const auto& id : ids) os << ",down_bytes_" << id << ",up_bytes_" << id;
    os << ",round_bytes,val_dice,val_iou\n";
    for (const auto& h : res.history) {
        os << h.round;
        for (const auto& id : ids) {
            size_t down = 0, up = 0;
            for (const auto& r : ledger.rows())
                if (r.round == h.round && r.client_id == id) {
                    down += r.down_bytes;
                    up += r.up_bytes;
                }
            os << ',' << down << ',' << up;
        }
        os << ',' << h.round_bytes << ',' << h.val_dice << ',' << h.val_iou << '\n';
    }
    return os.str();
}

} // namespace fedseg
