#pragma once

// Segmentation model: ViT encoder with optional bottleneck adapters, a
// pixel-shuffle upsampling decoder, and a 1x1-conv mask head. Parameters
// live in a ParamRegistry keyed by hierarchical names; the forward graph is
// built on a GradTape so float training and double gradient checking share
// one definition.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace fedseg {

// ---------------------------------------------------------------------------

enum class ParamRole : uint8_t { Encoder = 0, Adapter = 1, Decoder = 2, Head = 3 };

inline const char* role_name(ParamRole r) {
    switch (r) {
        case ParamRole::Encoder: return "encoder";
        case ParamRole::Adapter: return "adapter";
        case ParamRole::Decoder: return "decoder";
        case ParamRole::Head: return "head";
    }
    return "?";
}

// Which parameter groups receive local updates.
enum class TrainMode {
    FullFineTune,   // everything, encoder included
    AdapterDecoder, // adapters + decoder + head; encoder frozen
};

inline const char* train_mode_name(TrainMode m) {
    return m == TrainMode::FullFineTune ? "full" : "adapter";
}

// ---------------------------------------------------------------------------

struct ModelConfig {
    int input_size = 64; // square input, 3 channels by default
    int in_channels = 3;
    int patch_size = 8;
    int embed_dim = 64;
    int depth = 2;
    int num_heads = 4;
    int mlp_ratio = 4;
    int adapter_dim = 16;
    int num_classes = 2; // output mask channels

    static ModelConfig mini_b() { return ModelConfig{}; }

    static ModelConfig mini_l() {
        ModelConfig c;
        c.embed_dim = 96;
        c.depth = 3;
        return c;
    }

    int mask_size() const { return input_size / 4; } // labels are 4x coarser
    int grid() const { return input_size / patch_size; }
    int tokens() const { return grid() * grid(); }

    // Each decoder stage doubles resolution; patch p needs log2(p/4) stages
    // to land on the mask grid.
    int dec_stages() const {
        int s = 0;
        for (int p = patch_size; p > 4; p /= 2) ++s;
        return s;
    }

    // Channel widths after each decoder stage (dec_channels().back() feeds
    // the head; equals embed_dim when there are no stages).
    std::vector<int> dec_channels() const {
        std::vector<int> ch{embed_dim};
        for (int s = 0; s < dec_stages(); ++s)
            ch.push_back(std::max(ch.back() / 2, 8));
        return ch;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
        if (input_size <= 0 || input_size % 4 != 0)
            fail("input_size must be a positive multiple of 4");
        if (in_channels <= 0) fail("in_channels must be positive");
        if (patch_size < 4 || (patch_size & (patch_size - 1)) != 0)
            fail("patch_size must be a power of two >= 4");
        if (input_size % patch_size != 0) fail("patch_size must tile input_size");
        if (embed_dim <= 0 || depth <= 0 || num_heads <= 0 || mlp_ratio <= 0 ||
            adapter_dim <= 0)
            fail("embed_dim, depth, num_heads, mlp_ratio, adapter_dim must be positive");
        if (num_classes < 1) fail("num_classes must be >= 1");
        if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
    }
};

// ---------------------------------------------------------------------------

struct ParamEntry {
    std::string name;
    ParamRole role = ParamRole::Encoder;
    bool trainable = true;
    Tensor<float> value;
};

// Ordered parameter store; insertion order is the canonical serialization
// and aggregation order.
class ParamRegistry {
public:
    void insert(std::string name, ParamRole role, Tensor<float> value, bool trainable = true) {
        if (index_.count(name)) throw StateError("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back({std::move(name), role, trainable, std::move(value)});
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    ParamEntry& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw StateError("unknown parameter: " + name);
        return entries_[it->second];
    }
    const ParamEntry& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw StateError("unknown parameter: " + name);
        return entries_[it->second];
    }

    // Overwrites a value; the shape must not change.
    void set(const std::string& name, const Tensor<float>& v) {
        ParamEntry& e = at(name);
        if (e.value.shape != v.shape)
            throw DimensionError("parameter " + name + " has shape " +
                                 shape_str(e.value.shape) + ", got " + shape_str(v.shape));
        e.value = v;
    }

    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::vector<ParamEntry>& entries() { return entries_; }
    size_t size() const { return entries_.size(); }

    int64_t total_scalars() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

    int64_t trainable_scalars() const {
        int64_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.value.numel();
        return n;
    }

    std::vector<std::string> names(bool trainable_only = false) const {
        std::vector<std::string> out;
        for (const auto& e : entries_)
            if (!trainable_only || e.trainable) out.push_back(e.name);
        return out;
    }

private:
    std::vector<ParamEntry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Forward graph, shared by training (float) and gradient checking (double).
// `param` resolves a name to a tape leaf.

template <typename T>
typename GradTape<T>::Var build_seg_graph(
    GradTape<T>& tape, const ModelConfig& cfg, bool with_adapters,
    const std::function<typename GradTape<T>::Var(const std::string&)>& param,
    typename GradTape<T>::Var image) {
    using Var = typename GradTape<T>::Var;
    const Tensor<T>& img = tape.value(image);
    if (img.shape != std::vector<int>{cfg.input_size, cfg.input_size, cfg.in_channels})
        throw DimensionError("model expects input " +
                             shape_str({cfg.input_size, cfg.input_size, cfg.in_channels}) +
                             ", got " + shape_str(img.shape));

    auto linear = [&](Var x, const std::string& prefix) {
        return tape.add_bias(tape.matmul(x, param(prefix + ".weight")),
                             param(prefix + ".bias"));
    };

    // Bottleneck adapter body: up(relu(down(x))). Zero at init because the
    // up-projection starts at zero.
    auto adapter = [&](Var x, const std::string& prefix) {
        return linear(tape.relu(linear(x, prefix + ".down")), prefix + ".up");
    };

    Var x = tape.patchify(image, cfg.patch_size);
    x = linear(x, "patch_embed");
    x = tape.add(x, param("pos_embed"));

    for (int b = 0; b < cfg.depth; ++b) {
        std::string bp = "blocks." + std::to_string(b);
        Var h = tape.layer_norm(x, param(bp + ".ln1.gamma"), param(bp + ".ln1.beta"));
        Var q = linear(h, bp + ".attn.q");
        Var k = linear(h, bp + ".attn.k");
        Var v = linear(h, bp + ".attn.v");
        Var att = tape.softmax_attention(q, k, v, cfg.num_heads);
        x = tape.add(x, linear(att, bp + ".attn.out"));
        // First adapter: residual on the post-attention stream.
        if (with_adapters) x = tape.add(x, adapter(x, bp + ".adapter1"));

        Var h2 = tape.layer_norm(x, param(bp + ".ln2.gamma"), param(bp + ".ln2.beta"));
        Var m = tape.gelu(linear(h2, bp + ".mlp.fc1"));
        m = linear(m, bp + ".mlp.fc2");
        // Second adapter runs in parallel with the MLP on the normalized
        // input; both join the residual stream (scale fixed at 1).
        if (with_adapters) m = tape.add(m, adapter(h2, bp + ".adapter2"));
        x = tape.add(x, m);
    }

    x = tape.layer_norm(x, param("ln_final.gamma"), param("ln_final.beta"));

    int g = cfg.grid();
    Var feat = tape.reshape(x, {g, g, cfg.embed_dim});
    std::vector<int> ch = cfg.dec_channels();
    for (int s = 0; s < cfg.dec_stages(); ++s) {
        std::string sp = "decoder.stage" + std::to_string(s);
        feat = tape.conv1x1(feat, param(sp + ".weight"), param(sp + ".bias"));
        feat = tape.pixel_shuffle2(feat);
        feat = tape.gelu(feat);
    }
    feat = tape.gelu(tape.conv1x1(feat, param("decoder.refine.weight"),
                                  param("decoder.refine.bias")));
    return tape.conv1x1(feat, param("head.weight"), param("head.bias"));
}

// One (name, value, wants-grad) binding for the generic loss entry point.
template <typename T>
struct ParamBinding {
    std::string name;
    const Tensor<T>* value = nullptr;
    bool grad = false;
};

// Builds the graph, evaluates mean BCE against `target`, optionally runs
// backward and accumulates parameter gradients into `grads` (keyed by name,
// += into existing tensors). Returns the loss.
template <typename T>
T seg_loss(const ModelConfig& cfg, bool with_adapters,
           const std::vector<ParamBinding<T>>& params, const Tensor<T>& image,
           const Tensor<T>& target, std::map<std::string, Tensor<T>>* grads) {
    GradTape<T> tape;
    std::unordered_map<std::string, typename GradTape<T>::Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves[p.name] = tape.leaf(*p.value, p.grad);
    auto getter = [&](const std::string& name) {
        auto it = leaves.find(name);
        if (it == leaves.end()) throw StateError("model graph needs parameter: " + name);
        return it->second;
    };
    auto img = tape.leaf(image, false);
    auto logits = build_seg_graph<T>(tape, cfg, with_adapters, getter, img);
    auto loss = tape.bce_with_logits(logits, tape.leaf(target, false));
    T out = tape.value(loss)[0];
    if (grads) {
        tape.backward(loss);
        for (const auto& p : params) {
            if (!p.grad) continue;
            const Tensor<T>* g = tape.grad(leaves[p.name]);
            if (!g) continue;
            auto it = grads->find(p.name);
            if (it == grads->end()) {
                (*grads)[p.name] = *g;
            } else {
                if (it->second.shape != g->shape)
                    throw DimensionError("gradient shape changed for " + p.name);
                for (int64_t i = 0; i < g->numel(); ++i) it->second[i] += (*g)[i];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

class ViTSegModel {
public:
    ViTSegModel(ModelConfig cfg, bool with_adapters, uint64_t seed)
        : cfg_(cfg), with_adapters_(with_adapters) {
        cfg_.validate();
        init_params(seed);
    }

    const ModelConfig& config() const { return cfg_; }
    bool with_adapters() const { return with_adapters_; }
    TrainMode mode() const { return mode_; }
    ParamRegistry& params() { return params_; }
    const ParamRegistry& params() const { return params_; }

    // Marks the trainable set; returns how many scalars remain trainable.
    int64_t set_train_mode(TrainMode mode) {
        if (mode == TrainMode::AdapterDecoder && !with_adapters_)
            throw ConfigError("adapter train mode requires a model built with adapters");
        mode_ = mode;
        for (auto& e : params_.entries())
            e.trainable = mode == TrainMode::FullFineTune || e.role != ParamRole::Encoder;
        return params_.trainable_scalars();
    }

    // Number of adapter bottlenecks (two per block when present).
    int num_adapters() const {
        int n = 0;
        for (const auto& e : params_.entries())
            if (e.role == ParamRole::Adapter && e.name.ends_with(".down.weight")) ++n;
        return n;
    }

    Tensor<float> forward(const Tensor<float>& image) const {
        GradTape<float> tape;
        auto out = build_seg_graph<float>(tape, cfg_, with_adapters_, getter(tape),
                                          tape.leaf(image, false));
        return tape.value(out);
    }

    float loss_on(const Tensor<float>& image, const Tensor<float>& target) const {
        std::vector<ParamBinding<float>> binds = bindings(false);
        return seg_loss<float>(cfg_, with_adapters_, binds, image, target, nullptr);
    }

    // Accumulates gradients for the trainable parameters into `grads`.
    float loss_and_grads(const Tensor<float>& image, const Tensor<float>& target,
                         std::map<std::string, Tensor<float>>& grads) const {
        std::vector<ParamBinding<float>> binds = bindings(true);
        return seg_loss<float>(cfg_, with_adapters_, binds, image, target, &grads);
    }

    std::vector<ParamBinding<float>> bindings(bool grads_for_trainable) const {
        std::vector<ParamBinding<float>> binds;
        binds.reserve(params_.size());
        for (const auto& e : params_.entries())
            binds.push_back({e.name, &e.value, grads_for_trainable && e.trainable});
        return binds;
    }

private:
    ModelConfig cfg_;
    bool with_adapters_;
    TrainMode mode_ = TrainMode::FullFineTune;
    ParamRegistry params_;

    std::function<GradTape<float>::Var(const std::string&)> getter(
        GradTape<float>& tape) const {
        auto cache = std::make_shared<std::unordered_map<std::string, GradTape<float>::Var>>();
        return [this, &tape, cache](const std::string& name) {
            auto it = cache->find(name);
            if (it != cache->end()) return it->second;
            auto v = tape.leaf(params_.at(name).value, false);
            (*cache)[name] = v;
            return v;
        };
    }

    enum class Init { TruncNormal, Zeros, Ones };

    void add(const std::string& name, ParamRole role, std::vector<int> shape, Init init,
             uint64_t seed) {
        Tensor<float> v(std::move(shape));
        switch (init) {
            case Init::Zeros: break;
            case Init::Ones: v.fill(1.f); break;
            case Init::TruncNormal: {
                // Per-name stream: init does not depend on insertion order,
                // so shared names match across adapter/no-adapter builds.
                Rng rng(mix_seed(seed, hash_name(name)));
                for (auto& x : v.data) x = static_cast<float>(rng.trunc_normal(0.02));
                break;
            }
        }
        params_.insert(name, role, std::move(v));
    }

    void init_params(uint64_t seed) {
        const int D = cfg_.embed_dim;
        const int P = cfg_.patch_size;
        const int A = cfg_.adapter_dim;

        add("patch_embed.weight", ParamRole::Encoder, {P * P * cfg_.in_channels, D},
            Init::TruncNormal, seed);
        add("patch_embed.bias", ParamRole::Encoder, {D}, Init::Zeros, seed);
        add("pos_embed", ParamRole::Encoder, {cfg_.tokens(), D}, Init::TruncNormal, seed);

        for (int b = 0; b < cfg_.depth; ++b) {
            std::string bp = "blocks." + std::to_string(b);
            add(bp + ".ln1.gamma", ParamRole::Encoder, {D}, Init::Ones, seed);
            add(bp + ".ln1.beta", ParamRole::Encoder, {D}, Init::Zeros, seed);
            for (const char* proj : {"q", "k", "v", "out"}) {
                add(bp + ".attn." + proj + ".weight", ParamRole::Encoder, {D, D},
                    Init::TruncNormal, seed);
                add(bp + ".attn." + proj + ".bias", ParamRole::Encoder, {D}, Init::Zeros,
                    seed);
            }
            if (with_adapters_) {
                for (const char* ap : {"adapter1", "adapter2"}) {
                    // Up-projection starts at exactly zero so a fresh adapter
                    // is the identity function.
                    add(bp + "." + ap + ".down.weight", ParamRole::Adapter, {D, A},
                        Init::TruncNormal, seed);
                    add(bp + "." + ap + ".down.bias", ParamRole::Adapter, {A}, Init::Zeros,
                        seed);
                    add(bp + "." + ap + ".up.weight", ParamRole::Adapter, {A, D},
                        Init::Zeros, seed);
                    add(bp + "." + ap + ".up.bias", ParamRole::Adapter, {D}, Init::Zeros,
                        seed);
                }
            }
            add(bp + ".ln2.gamma", ParamRole::Encoder, {D}, Init::Ones, seed);
            add(bp + ".ln2.beta", ParamRole::Encoder, {D}, Init::Zeros, seed);
            add(bp + ".mlp.fc1.weight", ParamRole::Encoder, {D, cfg_.mlp_ratio * D},
                Init::TruncNormal, seed);
            add(bp + ".mlp.fc1.bias", ParamRole::Encoder, {cfg_.mlp_ratio * D}, Init::Zeros,
                seed);
            add(bp + ".mlp.fc2.weight", ParamRole::Encoder, {cfg_.mlp_ratio * D, D},
                Init::TruncNormal, seed);
            add(bp + ".mlp.fc2.bias", ParamRole::Encoder, {D}, Init::Zeros, seed);
        }

        add("ln_final.gamma", ParamRole::Encoder, {D}, Init::Ones, seed);
        add("ln_final.beta", ParamRole::Encoder, {D}, Init::Zeros, seed);

        std::vector<int> ch = cfg_.dec_channels();
        for (int s = 0; s < cfg_.dec_stages(); ++s) {
            std::string sp = "decoder.stage" + std::to_string(s);
            add(sp + ".weight", ParamRole::Decoder, {ch[s], 4 * ch[s + 1]},
                Init::TruncNormal, seed);
            add(sp + ".bias", ParamRole::Decoder, {4 * ch[s + 1]}, Init::Zeros, seed);
        }
        int cl = ch.back();
        add("decoder.refine.weight", ParamRole::Decoder, {cl, cl}, Init::TruncNormal, seed);
        add("decoder.refine.bias", ParamRole::Decoder, {cl}, Init::Zeros, seed);
        add("head.weight", ParamRole::Head, {cl, cfg_.num_classes}, Init::TruncNormal, seed);
        add("head.bias", ParamRole::Head, {cfg_.num_classes}, Init::Zeros, seed);
    }
};

// Copies every value whose name exists in both registries (shapes must
// match). Names private to `dst` — e.g. adapters when loading an
// adapter-free snapshot — keep their current values. Returns the number of
// parameters copied.
inline int copy_matching_params(ParamRegistry& dst, const ParamRegistry& src) {
    int copied = 0;
    for (const auto& e : src.entries()) {
        if (!dst.contains(e.name)) continue;
        dst.set(e.name, e.value);
        ++copied;
    }
    return copied;
}

} // namespace fedseg
