#pragma once

// Pseudo-pretraining: trains the adapter-free model on a pooled generic
// corpus so its encoder+decoder weights can seed later fine-tuning runs.
// The checkpoint is a full-registry container in the binary wire format.

#include <cstdint>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "server.hpp"
#include "trainer.hpp"
#include "wire.hpp"

namespace fedseg {

struct PretrainResult {
    ViTSegModel model;         // the trained adapter-free model
    ParamContainer checkpoint; // every parameter, full values
    std::vector<float> losses; // one mean loss per optimizer step
};

// Trains an adapter-free model from random init on the pooled corpus.
// epochs == 0 returns the untouched random init for `seed`; the result is a
// pure function of (cfg, corpus, epochs, seed, tc).
inline PretrainResult pseudo_pretrain(const ModelConfig& cfg,
                                      const std::vector<SegSample>& corpus, int epochs,
                                      uint64_t seed, const TrainerConfig& tc = {}) {
    if (corpus.empty()) throw DataError("pretraining corpus is empty");
    PretrainResult out{ViTSegModel(cfg, /*with_adapters=*/false, seed), {}, {}};
    out.model.set_train_mode(TrainMode::FullFineTune);
    train_centralized(out.model, corpus, tc, epochs, seed, &out.losses);
    out.checkpoint =
        registry_container(out.model.params(), /*trainable_only=*/false, /*is_update=*/false);
    return out;
}

// Copies checkpoint values into `target` by name. An adapter-bearing target
// keeps its zero-initialized adapters, so right after loading it computes the
// same function as the adapter-free pretrained model.
inline void apply_pretrained(ViTSegModel& target, const ParamContainer& checkpoint) {
    apply_container(target.params(), checkpoint);
}

} // namespace fedseg
