#pragma once

// Analytic compute-cost model: closed-form parameter and FLOP counts for the
// segmentation network, mirroring the forward graph layer by layer. Backward
// cost is estimated over the trainable subgraph the way a dependency-aware
// engine would run it: activation gradients are counted only on paths from
// the loss down to some trainable tensor, weight gradients only for trainable
// tensors. Matrix products dominate; elementwise ops are counted with small
// fixed per-element constants.

#include <cstdint>

#include "errors.hpp"
#include "model.hpp"

namespace fedseg {

struct CostEstimate {
    int64_t total_params = 0;
    int64_t trainable_params = 0;
    double forward_flops = 0;  // one sample, inference
    double backward_flops = 0; // one sample, gradient pass
    double train_flops() const { return forward_flops + backward_flops; }
};

// Per-sample cost of the model under a training mode. Matches the live
// network exactly on parameter counts (checked by tests against the
// registry), so the estimate cannot drift from the architecture silently.
inline CostEstimate estimate_cost(const ModelConfig& cfg, bool with_adapters,
                                  TrainMode mode) {
    cfg.validate();
    if (mode == TrainMode::AdapterDecoder && !with_adapters)
        throw ConfigError("AdapterDecoder needs a model built with adapters");

    const bool full = mode == TrainMode::FullFineTune;
    const double T = cfg.tokens();
    const double D = cfg.embed_dim;
    const double A = cfg.adapter_dim;
    const double R = cfg.mlp_ratio;
    const double H = cfg.num_heads;

    CostEstimate est;

    // One matmul+bias of shape [M,K]x[K,N]. dx: gradient w.r.t. the input
    // (2MKN); dw: gradient w.r.t. weight and bias (2MKN + MN).
    auto linear = [&](double M, double K, double N, bool dx, bool dw) {
        est.total_params += static_cast<int64_t>(K * N + N);
        if (dw) est.trainable_params += static_cast<int64_t>(K * N + N);
        est.forward_flops += 2 * M * K * N + M * N;
        if (dx) est.backward_flops += 2 * M * K * N;
        if (dw) est.backward_flops += 2 * M * K * N + M * N;
    };
    auto elementwise = [&](double n, double per_fwd, double per_bwd, bool dx) {
        est.forward_flops += per_fwd * n;
        if (dx) est.backward_flops += per_bwd * n;
    };
    auto layer_norm = [&](double M, bool dx, bool dw) {
        est.total_params += static_cast<int64_t>(2 * D);
        if (dw) est.trainable_params += static_cast<int64_t>(2 * D);
        est.forward_flops += 8 * M * D;
        if (dx) est.backward_flops += 8 * M * D;
        if (dw) est.backward_flops += 2 * M * D;
    };

    // Patch embedding and learned positional table. Nothing below them ever
    // needs activation gradients (the image is data).
    linear(T, double(cfg.patch_size) * cfg.patch_size * cfg.in_channels, D,
           /*dx=*/false, /*dw=*/full);
    est.total_params += static_cast<int64_t>(T * D); // pos_embed
    if (full) {
        est.trainable_params += static_cast<int64_t>(T * D);
        est.backward_flops += T * D; // gradient is a pass-through copy
    }
    elementwise(T * D, 1, 0, false); // the add itself

    for (int b = 0; b < cfg.depth; ++b) {
        // In AdapterDecoder mode the gradient path ends at the first block's
        // post-attention adapter: in that block, the attention stack below it
        // does no backward work at all, and nothing propagates into the
        // block's input.
        const bool lowest = b == 0;
        const bool enc_dx = full || !lowest;  // frozen encoder math on the grad path
        const bool enc_dw = full;

        layer_norm(T, enc_dx, enc_dw);                       // ln1
        for (int i = 0; i < 3; ++i) linear(T, D, D, enc_dx, enc_dw); // q,k,v
        // Attention scores and mixing: two [T,T]x[.,D/H] products per head
        // plus the softmax.
        est.forward_flops += 2 * T * T * D + 2 * T * T * D + 5 * H * T * T;
        if (enc_dx) est.backward_flops += 2 * (2 * T * T * D + 2 * T * T * D) + 5 * H * T * T;
        linear(T, D, D, enc_dx, enc_dw); // attn.out
        elementwise(T * D, 1, 0, false); // residual add

        if (with_adapters) {
            // adapter1 (post-attention). Its down-projection's input gradient
            // is the block-input gradient: only needed when enc_dx is.
            bool adw = full || mode == TrainMode::AdapterDecoder;
            linear(T, D, A, enc_dx, adw);       // down
            elementwise(T * A, 1, 1, adw);      // relu
            linear(T, A, D, adw, adw);          // up
            elementwise(T * D, 1, 0, false);    // residual add
        }

        // The MLP branch: in the lowest AdapterDecoder block its gradients
        // lead only to frozen tensors, so it too is skipped there.
        layer_norm(T, enc_dx, enc_dw); // ln2
        linear(T, D, R * D, enc_dx, enc_dw);
        elementwise(T * R * D, 10, 10, enc_dx); // gelu
        linear(T, R * D, D, enc_dx, enc_dw);

        if (with_adapters) {
            // adapter2, parallel to the MLP on the normalized input.
            bool adw = full || mode == TrainMode::AdapterDecoder;
            linear(T, D, A, enc_dx, adw);
            elementwise(T * A, 1, 1, adw);
            linear(T, A, D, adw, adw);
            elementwise(T * D, 1, 0, false);
        }
        elementwise(T * D, 1, 0, false); // block residual add
    }

    // Final norm feeds the decoder; decoder and head are trainable in both
    // modes, and their gradients always travel back into the encoder unless
    // the whole encoder path is frozen with no adapters (never a mode here).
    layer_norm(T, /*dx=*/true, /*dw=*/full);

    auto ch = cfg.dec_channels();
    double grid = cfg.grid();
    for (int s = 0; s < cfg.dec_stages(); ++s) {
        linear(grid * grid, ch[static_cast<size_t>(s)],
               4.0 * ch[static_cast<size_t>(s) + 1], /*dx=*/true, /*dw=*/true);
        grid *= 2; // pixel shuffle: free data movement
        elementwise(grid * grid * ch[static_cast<size_t>(s) + 1], 10, 10, true);
    }
    double cl = ch.back();
    double m = cfg.mask_size();
    linear(m * m, cl, cl, true, true); // refine
    elementwise(m * m * cl, 10, 10, true);
    linear(m * m, cl, cfg.num_classes, true, true); // head

    // Mean BCE over the logit map.
    elementwise(m * m * cfg.num_classes, 8, 4, true);

    return est;
}

} // namespace fedseg
