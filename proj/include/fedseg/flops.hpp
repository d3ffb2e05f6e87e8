#pragma once

// Analytic per-sample FLOP estimates for the segmentation model. The walk
// mirrors build_seg_graph layer by layer and applies the same rule the tape
// uses at runtime: d-activation work happens only above the lowest trainable
// layer, d-weight work only for trainable layers. Counts are estimates
// (multiply-add = 2 FLOPs, small constants for transcendentals), meant for
// relative comparisons and reports rather than cycle accounting.

#include <cstdint>
#include <map>

#include "model.hpp"

namespace fedseg {

struct FlopsEstimate {
    int64_t forward = 0;
    int64_t backward = 0;
    int64_t total() const { return forward + backward; }
};

namespace detail {

struct FlopsWalk {
    FlopsEstimate est;
    bool act_needs = false; // becomes true above the lowest trainable layer

    void linear(int64_t rows, int64_t in, int64_t out, bool trainable) {
        int64_t mm = 2 * rows * in * out;
        est.forward += mm + rows * out;
        if (act_needs) est.backward += mm;
        if (trainable) {
            est.backward += mm + rows * out;
            act_needs = true;
        }
    }

    void elementwise(int64_t n, int64_t fw, int64_t bw) {
        est.forward += fw * n;
        if (act_needs) est.backward += bw * n;
    }

    void norm(int64_t rows, int64_t d, bool trainable) {
        est.forward += 8 * rows * d;
        if (act_needs) est.backward += 9 * rows * d;
        if (trainable) {
            est.backward += 3 * rows * d;
            act_needs = true;
        }
    }

    void attention(int64_t n, int64_t d, int64_t h) {
        est.forward += 4 * n * n * d + 5 * h * n * n;
        if (act_needs) est.backward += 8 * n * n * d + 4 * h * n * n;
    }
};

} // namespace detail

// Cost of one forward + backward on a single sample under the given mode.
// `forward` alone is the inference cost.
inline FlopsEstimate estimate_step_flops(const ModelConfig& cfg, bool with_adapters,
                                         TrainMode mode) {
    cfg.validate();
    const bool enc_t = mode == TrainMode::FullFineTune;
    const int64_t N = cfg.tokens(), D = cfg.embed_dim, A = cfg.adapter_dim;
    const int64_t H = cfg.num_heads, R = cfg.mlp_ratio;

    detail::FlopsWalk w;
    w.linear(N, static_cast<int64_t>(cfg.patch_size) * cfg.patch_size * cfg.in_channels, D,
             enc_t);
    w.elementwise(N * D, 1, 0); // + pos_embed

    auto adapter = [&] {
        w.linear(N, D, A, true);
        w.elementwise(N * A, 1, 1); // relu
        w.linear(N, A, D, true);
        w.elementwise(N * D, 1, 0); // joins the residual stream
    };

    for (int b = 0; b < cfg.depth; ++b) {
        w.norm(N, D, enc_t);
        for (int p = 0; p < 3; ++p) w.linear(N, D, D, enc_t); // q, k, v
        w.attention(N, D, H);
        w.linear(N, D, D, enc_t); // out projection
        w.elementwise(N * D, 1, 0);
        if (with_adapters) adapter(); // post-attention
        w.norm(N, D, enc_t);
        w.linear(N, D, R * D, enc_t);
        w.elementwise(N * R * D, 10, 12); // gelu
        w.linear(N, R * D, D, enc_t);
        if (with_adapters) adapter(); // parallel to the mlp
        w.elementwise(N * D, 1, 0);
    }
    w.norm(N, D, enc_t);

    std::vector<int> ch = cfg.dec_channels();
    int64_t rows = static_cast<int64_t>(cfg.grid()) * cfg.grid();
    for (int s = 0; s < cfg.dec_stages(); ++s) {
        w.linear(rows, ch[s], 4 * ch[s + 1], true);
        rows *= 4; // pixel shuffle: free, quadruples row count
        w.elementwise(rows * ch[s + 1], 10, 12);
    }
    w.linear(rows, ch.back(), ch.back(), true);
    w.elementwise(rows * ch.back(), 10, 12);
    w.linear(rows, ch.back(), cfg.num_classes, true);
    w.elementwise(rows * cfg.num_classes, 10, 5); // bce

    return w.est;
}

inline std::map<ParamRole, int64_t> scalars_by_role(const ParamRegistry& reg) {
    std::map<ParamRole, int64_t> out;
    for (const auto& e : reg.entries()) out[e.role] += e.value.numel();
    return out;
}

} // namespace fedseg
