#pragma once

// Synthetic multi-client segmentation data, the preprocessing transforms
// used for real scans, and the leave-one-client-out partition protocol.
//
// Every sample is derived from an explicit recipe (background intensity +
// shape list), and image and mask are rasterized from the same recipe, so
// "re-rasterize the recipe" is an exact oracle for the stored mask.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bytes.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace fedseg {

// ---------------------------------------------------------------------------

struct SegSample {
    Tensor<float> image; // [S,S,3], values in [0,1]
    Tensor<float> mask;  // [m,m,c], one-hot or all-zero per pixel
    std::string volume_id; // empty when the sample is not part of a volume
    std::string client_id;
};

struct ClientDataset {
    std::string client_id;
    std::vector<SegSample> samples;
    int64_t n_local() const { return static_cast<int64_t>(samples.size()); }
};

enum class ShapeFamily : uint8_t { Blob = 0, Ellipse = 1, Ring = 2, Mixed = 3 };

inline const char* family_name(ShapeFamily f) {
    switch (f) {
        case ShapeFamily::Blob: return "blob";
        case ShapeFamily::Ellipse: return "ellipse";
        case ShapeFamily::Ring: return "ring";
        case ShapeFamily::Mixed: return "mixed";
    }
    return "?";
}

struct ClientGenParams {
    ShapeFamily family = ShapeFamily::Blob;
    float bg_lo = 0.1f, bg_hi = 0.2f; // background intensity range
    float fg_lo = 0.6f, fg_hi = 0.8f; // shape intensity range
    float noise = 0.03f;              // per-pixel gaussian texture noise
    std::vector<float> class_freq;    // appearance probability per class

    bool operator==(const ClientGenParams&) const = default;
};

struct FederationSpec {
    int clients = 4;
    int input_size = 64;
    int num_classes = 2;
    uint64_t seed = 0;
    std::vector<ClientGenParams> client_params;

    int mask_size() const { return input_size / 4; }

    void validate() const {
        if (clients < 1) throw ConfigError("federation needs at least one client");
        if (static_cast<int>(client_params.size()) != clients)
            throw ConfigError("client_params size must equal the client count");
        if (input_size <= 0 || input_size % 4 != 0)
            throw ConfigError("input_size must be a positive multiple of 4");
        if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
        for (const auto& p : client_params) {
            if (!(0.f <= p.bg_lo && p.bg_lo < p.bg_hi && p.bg_hi <= 1.f))
                throw ConfigError("background intensity range must satisfy 0<=lo<hi<=1");
            if (!(0.f <= p.fg_lo && p.fg_lo < p.fg_hi && p.fg_hi <= 1.f))
                throw ConfigError("foreground intensity range must satisfy 0<=lo<hi<=1");
            if (p.noise < 0.f) throw ConfigError("noise level must be non-negative");
            if (static_cast<int>(p.class_freq.size()) != num_classes)
                throw ConfigError("class_freq must have one entry per class");
            for (float f : p.class_freq)
                if (!(0.f <= f && f <= 1.f))
                    throw ConfigError("class frequencies must lie in [0,1]");
        }
        // Clients must be distinguishable — that is the whole point.
        for (size_t i = 0; i < client_params.size(); ++i)
            for (size_t j = i + 1; j < client_params.size(); ++j)
                if (client_params[i] == client_params[j])
                    throw ConfigError("client generative parameters must be pairwise distinct");
    }

    // Staggered per-client parameters: disjoint intensity bands, rotating
    // shape families, drifting noise and class skew.
    static FederationSpec defaults(int K, int input_size, int num_classes, uint64_t seed) {
        FederationSpec s;
        s.clients = K;
        s.input_size = input_size;
        s.num_classes = num_classes;
        s.seed = seed;
        const ShapeFamily fams[3] = {ShapeFamily::Blob, ShapeFamily::Ellipse,
                                     ShapeFamily::Ring};
        for (int k = 0; k < K; ++k) {
            ClientGenParams p;
            p.family = fams[k % 3];
            float t = K > 1 ? static_cast<float>(k) / static_cast<float>(K - 1) : 0.5f;
            float bg = 0.08f + 0.62f * t; // centers spread over [0.08, 0.70]
            p.bg_lo = bg - 0.04f;
            p.bg_hi = bg + 0.04f;
            // Foreground sits on the opposite side of mid-gray for contrast.
            float fg = bg < 0.45f ? bg + 0.35f : bg - 0.35f;
            p.fg_lo = fg - 0.05f;
            p.fg_hi = fg + 0.05f;
            p.noise = 0.02f + 0.01f * static_cast<float>(k % 4);
            p.class_freq.assign(num_classes, 0.f);
            for (int c = 0; c < num_classes; ++c)
                p.class_freq[c] = std::min(1.f, 0.9f - 0.12f * c + 0.03f * k);
            s.client_params.push_back(std::move(p));
        }
        return s;
    }
};

// ---------------------------------------------------------------------------
// Shape recipes. Coordinates are normalized to [0,1]^2.

struct ShapeSpec {
    int cls = 0;
    ShapeFamily family = ShapeFamily::Blob;
    double cx = 0.5, cy = 0.5;
    double r = 0.2;
    double aspect = 1.0, angle = 0.0;  // ellipse
    double inner = 0.5;                // ring: inner radius fraction of r
    double w1 = 0, w2 = 0, p1 = 0, p2 = 0; // blob boundary wobble
    float fg = 0.7f;

    bool contains(double x, double y) const {
        double dx = x - cx, dy = y - cy;
        switch (family) {
            case ShapeFamily::Ellipse: {
                double ca = std::cos(angle), sa = std::sin(angle);
                double u = dx * ca + dy * sa;
                double v = -dx * sa + dy * ca;
                double ry = r * aspect;
                return (u * u) / (r * r) + (v * v) / (ry * ry) <= 1.0;
            }
            case ShapeFamily::Ring: {
                double d2 = dx * dx + dy * dy;
                double ri = r * inner;
                return d2 <= r * r && d2 >= ri * ri;
            }
            case ShapeFamily::Blob:
            default: {
                double d = std::sqrt(dx * dx + dy * dy);
                double th = std::atan2(dy, dx);
                double rb = r * (1.0 + w1 * std::sin(3 * th + p1) + w2 * std::sin(5 * th + p2));
                return d <= rb;
            }
        }
    }
};

struct SampleRecipe {
    float bg = 0.1f;
    std::vector<ShapeSpec> shapes; // in class order; later shapes paint over
};

inline std::string client_name(int k) {
    return "client_" + std::string(k < 10 ? "0" : "") + std::to_string(k);
}

// Deterministic recipe for sample `index` of client `client`. All draws come
// from a stream keyed by (seed, client, index), so recipes never depend on
// how many other samples exist.
inline SampleRecipe sample_recipe(const FederationSpec& spec, int client, int index) {
    const ClientGenParams& p = spec.client_params.at(static_cast<size_t>(client));
    Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(client), static_cast<uint64_t>(index)));
    SampleRecipe rec;
    rec.bg = static_cast<float>(rng.uniform(p.bg_lo, p.bg_hi));
    const ShapeFamily fams[3] = {ShapeFamily::Blob, ShapeFamily::Ellipse, ShapeFamily::Ring};
    for (int c = 0; c < spec.num_classes; ++c) {
        // One uniform per class regardless of outcome keeps the stream
        // aligned: adding a class never reshuffles earlier classes.
        bool present = rng.uniform() < p.class_freq[static_cast<size_t>(c)];
        if (!present) continue;
        ShapeSpec s;
        s.cls = c;
        s.family = p.family == ShapeFamily::Mixed
                       ? fams[static_cast<size_t>(rng.uniform_int(0, 2))]
                       : p.family;
        s.cx = rng.uniform(0.25, 0.75);
        s.cy = rng.uniform(0.25, 0.75);
        s.r = rng.uniform(0.10, 0.28);
        s.aspect = rng.uniform(0.45, 0.9);
        s.angle = rng.uniform(0.0, 3.14159265358979323846);
        s.inner = rng.uniform(0.35, 0.6);
        s.w1 = rng.uniform(0.08, 0.22);
        s.w2 = rng.uniform(0.04, 0.12);
        s.p1 = rng.uniform(0.0, 6.283185307179586);
        s.p2 = rng.uniform(0.0, 6.283185307179586);
        s.fg = static_cast<float>(rng.uniform(p.fg_lo, p.fg_hi));
        rec.shapes.push_back(s);
    }
    return rec;
}

// Index of the shape owning a normalized point: last containing shape wins,
// -1 means background.
inline int shape_index_at(const SampleRecipe& rec, double x, double y) {
    int win = -1;
    for (size_t i = 0; i < rec.shapes.size(); ++i)
        if (rec.shapes[i].contains(x, y)) win = static_cast<int>(i);
    return win;
}

// Class label at a normalized point, -1 means background.
inline int label_at(const SampleRecipe& rec, double x, double y) {
    int win = shape_index_at(rec, x, y);
    return win < 0 ? -1 : rec.shapes[static_cast<size_t>(win)].cls;
}

// Exact one-hot rasterization of the recipe on the mask grid. Mask pixel
// (i,j) samples the input-resolution pixel (4i+2, 4j+2) — nearest-neighbor
// label downsampling by 4.
inline Tensor<float> rasterize_mask(const SampleRecipe& rec, int input_size,
                                    int num_classes) {
    int m = input_size / 4;
    Tensor<float> mask({m, m, num_classes});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
            double y = (4.0 * i + 2 + 0.5) / input_size;
            double x = (4.0 * j + 2 + 0.5) / input_size;
            int label = label_at(rec, x, y);
            if (label >= 0) mask.at(i, j, label) = 1.f;
        }
    return mask;
}

// Renders one sample: shared-recipe image and mask, plus client-specific
// texture noise on the image.
inline SegSample render_sample(const FederationSpec& spec, int client, int index) {
    const ClientGenParams& p = spec.client_params.at(static_cast<size_t>(client));
    SampleRecipe rec = sample_recipe(spec, client, index);
    int S = spec.input_size;

    SegSample out;
    out.client_id = client_name(client);
    // Group consecutive samples into small pseudo-volumes so volume-level
    // metric pooling has something to pool.
    out.volume_id = out.client_id + "_vol" + std::to_string(index / 4);
    out.image = Tensor<float>({S, S, 3});
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
            double y = (i + 0.5) / S, x = (j + 0.5) / S;
            int win = shape_index_at(rec, x, y);
            float base = win >= 0 ? rec.shapes[static_cast<size_t>(win)].fg : rec.bg;
            out.image.at(i, j, 0) = base;
            out.image.at(i, j, 1) = base;
            out.image.at(i, j, 2) = base;
        }
    // Noise stream is separate from the recipe stream so the recipe alone
    // fully determines the mask.
    Rng nrng(mix_seed(spec.seed ^ 0x9e37u, static_cast<uint64_t>(client),
                      static_cast<uint64_t>(index)));
    if (p.noise > 0.f) {
        for (auto& v : out.image.data) {
            v += static_cast<float>(nrng.normal(0.0, p.noise));
            v = std::clamp(v, 0.f, 1.f);
        }
    }
    out.mask = rasterize_mask(rec, S, spec.num_classes);
    return out;
}

inline std::vector<ClientDataset> generate_federation(const FederationSpec& spec,
                                                      int n_per_client) {
    spec.validate();
    if (n_per_client < 10)
        throw ConfigError("n_per_client must be at least 10, got " +
                          std::to_string(n_per_client));
    std::vector<ClientDataset> out;
    for (int k = 0; k < spec.clients; ++k) {
        ClientDataset ds;
        ds.client_id = client_name(k);
        ds.samples.reserve(static_cast<size_t>(n_per_client));
        for (int i = 0; i < n_per_client; ++i) ds.samples.push_back(render_sample(spec, k, i));
        out.push_back(std::move(ds));
    }
    return out;
}

// Pooled mixed-family corpus for pretraining: one synthetic "site" whose
// intensity ranges span everything the federation defaults use.
inline ClientDataset generate_generic_corpus(int n, int input_size, int num_classes,
                                             uint64_t seed) {
    FederationSpec s;
    s.clients = 1;
    s.input_size = input_size;
    s.num_classes = num_classes;
    s.seed = seed;
    ClientGenParams p;
    p.family = ShapeFamily::Mixed;
    p.bg_lo = 0.05f;
    p.bg_hi = 0.75f;
    p.fg_lo = 0.15f;
    p.fg_hi = 0.95f;
    p.noise = 0.03f;
    p.class_freq.assign(static_cast<size_t>(num_classes), 0.85f);
    s.client_params.push_back(std::move(p));
    if (n < 10) throw ConfigError("pretraining corpus needs at least 10 samples");
    ClientDataset ds = generate_federation(s, n).front();
    ds.client_id = "pretrain";
    for (auto& smp : ds.samples) smp.client_id = "pretrain";
    return ds;
}

// ---------------------------------------------------------------------------
// Transforms for volumetric/byte inputs.

// Splits a depth-stacked volume [h,w,d] with labels [h,w,d,c] into d
// single-slice samples (slice order preserved, shared volume id). Slice
// values are replicated across the three image channels.
inline std::vector<SegSample> slice_volume(const Tensor<float>& volume,
                                           const Tensor<float>& masks,
                                           const std::string& volume_id = "volume") {
    if (volume.rank() != 3) throw DataError("slice_volume: volume must be [h,w,d]");
    if (masks.rank() != 4) throw DataError("slice_volume: masks must be [h,w,d,c]");
    int h = volume.shape[0], w = volume.shape[1], d = volume.shape[2];
    if (d < 1) throw DataError("slice_volume: depth must be >= 1");
    if (masks.shape[0] != h || masks.shape[1] != w || masks.shape[2] != d)
        throw DataError("slice_volume: mask dimensions " + shape_str(masks.shape) +
                        " do not match volume " + shape_str(volume.shape));
    int c = masks.shape[3];
    std::vector<SegSample> out;
    out.reserve(static_cast<size_t>(d));
    for (int z = 0; z < d; ++z) {
        SegSample s;
        s.volume_id = volume_id;
        s.client_id = "";
        s.image = Tensor<float>({h, w, 3});
        s.mask = Tensor<float>({h, w, c});
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                float v = volume.at(i, j, z);
                s.image.at(i, j, 0) = v;
                s.image.at(i, j, 1) = v;
                s.image.at(i, j, 2) = v;
                for (int ch = 0; ch < c; ++ch)
                    s.mask.at(i, j, ch) =
                        masks.data[((static_cast<size_t>(i) * w + j) * d + z) * c + ch];
            }
        out.push_back(std::move(s));
    }
    return out;
}

// Nearest-rank percentile: rank ceil(p/100 * n) of the ascending sort.
inline double nearest_rank_percentile(std::vector<double> v, double pct) {
    if (v.empty()) throw DataError("percentile of empty array");
    std::sort(v.begin(), v.end());
    size_t rank = static_cast<size_t>(std::ceil(pct / 100.0 * static_cast<double>(v.size())));
    if (rank < 1) rank = 1;
    if (rank > v.size()) rank = v.size();
    return v[rank - 1];
}

// Intensity normalization for scan volumes: the 99th percentile (the cutoff
// that clips the top 1% of high-intensity pixels) becomes the upper bound;
// values are clipped to [min, U] and mapped linearly to [0,1]. A constant
// input maps to all zeros.
inline std::vector<float> percentile_normalize(const std::vector<float>& v) {
    if (v.empty()) throw DataError("percentile_normalize: empty input");
    std::vector<double> d(v.begin(), v.end());
    double lo = *std::min_element(d.begin(), d.end());
    double hi = nearest_rank_percentile(d, 99.0);
    std::vector<float> out(v.size());
    if (hi <= lo) return out; // constant (or upper bound == min): all zeros
    double scale = 1.0 / (hi - lo);
    for (size_t i = 0; i < v.size(); ++i) {
        double x = std::clamp(static_cast<double>(v[i]), lo, hi);
        out[i] = static_cast<float>((x - lo) * scale);
    }
    return out;
}

// Byte-image normalization: divide by 255.
inline Tensor<float> rgb_normalize(const Tensor<float>& bytes) {
    Tensor<float> out = bytes;
    for (auto& v : out.data) {
        if (!(v >= 0.f && v <= 255.f))
            throw DataError("rgb_normalize: value " + std::to_string(v) +
                            " outside [0,255]");
        v /= 255.f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Leave-one-client-out partition.

struct LeaveOneOutSplit {
    std::vector<ClientDataset> train_clients; // train part of each remaining client
    std::vector<SegSample> val;               // pooled validation samples
    ClientDataset test;                       // the whole held-out client
};

inline LeaveOneOutSplit partition_leave_one_out(const std::vector<ClientDataset>& federation,
                                                const std::string& test_client,
                                                double val_ratio, uint64_t seed) {
    if (federation.size() < 2)
        throw ConfigError("leave-one-out needs at least two clients");
    if (!(val_ratio > 0.0 && val_ratio < 1.0))
        throw ConfigError("val_ratio must lie in (0,1)");
    const ClientDataset* held = nullptr;
    for (const auto& c : federation)
        if (c.client_id == test_client) held = &c;
    if (!held) throw ConfigError("unknown test client: " + test_client);

    LeaveOneOutSplit out;
    out.test = *held;
    for (const auto& c : federation) {
        if (c.client_id == test_client) continue;
        if (c.samples.empty()) throw DataError("client " + c.client_id + " has no samples");
        std::vector<size_t> idx(c.samples.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng rng(mix_seed(seed, hash_name(c.client_id)));
        rng.shuffle(idx);
        size_t n_val = static_cast<size_t>(
            std::floor(val_ratio * static_cast<double>(c.samples.size())));
        if (n_val < 1) n_val = 1;
        if (n_val >= c.samples.size()) n_val = c.samples.size() - 1;
        ClientDataset train;
        train.client_id = c.client_id;
        for (size_t i = 0; i < idx.size(); ++i) {
            if (i < idx.size() - n_val)
                train.samples.push_back(c.samples[idx[i]]);
            else
                out.val.push_back(c.samples[idx[i]]);
        }
        out.train_clients.push_back(std::move(train));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Corpus files: one per client. Layout: "FSEG" magic, u32 header length,
// JSON text header (ids, counts, shapes, generator echo), then raw
// little-endian f32 image/mask blocks per sample in order.

inline void save_client_corpus(const ClientDataset& ds, const std::string& path,
                               const std::string& spec_echo_json = "{}") {
    if (ds.samples.empty()) throw DataError("refusing to save empty client dataset");
    const auto& first = ds.samples.front();
    std::string header = "{\"client_id\":\"" + ds.client_id +
                         "\",\"count\":" + std::to_string(ds.samples.size()) +
                         ",\"image_shape\":" + shape_str(first.image.shape) +
                         ",\"mask_shape\":" + shape_str(first.mask.shape) +
                         ",\"volume_ids\":[";
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        if (i) header += ',';
        header += '"' + ds.samples[i].volume_id + '"';
    }
    header += "],\"generator\":" + spec_echo_json + "}";

    ByteWriter w;
    w.raw("FSEG", 4);
    w.u32(static_cast<uint32_t>(header.size()));
    w.raw(header.data(), header.size());
    for (const auto& s : ds.samples) {
        if (s.image.shape != first.image.shape || s.mask.shape != first.mask.shape)
            throw DataError("client " + ds.client_id + " has mixed sample shapes");
        for (float v : s.image.data) w.f32(v);
        for (float v : s.mask.data) w.f32(v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(w.bytes().data()),
            static_cast<std::streamsize>(w.size()));
    if (!f) throw IoError("short write: " + path);
}

namespace detail {
// Minimal extraction of known scalar/array fields from the corpus header.
// (The header is produced by save_client_corpus, so the structure is fixed;
// real config parsing uses a JSON library at the CLI layer.)
inline std::string header_field(const std::string& h, const std::string& key) {
    std::string pat = '"' + key + "\":";
    size_t at = h.find(pat);
    if (at == std::string::npos)
        throw DataError("corpus header missing field '" + key + "'");
    size_t start = at + pat.size();
    size_t end = start;
    int depth = 0;
    bool in_str = false;
    for (; end < h.size(); ++end) {
        char c = h[end];
        if (in_str) {
            if (c == '"') in_str = false;
            continue;
        }
        if (c == '"') in_str = true;
        else if (c == '[' || c == '{') ++depth;
        else if (c == ']' || c == '}') {
            if (depth == 0) break;
            --depth;
        } else if (c == ',' && depth == 0)
            break;
    }
    return h.substr(start, end - start);
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    int cur = 0;
    bool have = false;
    for (char c : s) {
        if (c >= '0' && c <= '9') {
            cur = cur * 10 + (c - '0');
            have = true;
        } else if (have) {
            out.push_back(cur);
            cur = 0;
            have = false;
        }
    }
    if (have) out.push_back(cur);
    return out;
}

inline std::vector<std::string> parse_str_list(const std::string& s) {
    std::vector<std::string> out;
    size_t i = 0;
    while ((i = s.find('"', i)) != std::string::npos) {
        size_t j = s.find('"', i + 1);
        if (j == std::string::npos) break;
        out.push_back(s.substr(i + 1, j - i - 1));
        i = j + 1;
    }
    return out;
}
} // namespace detail

inline ClientDataset load_client_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open corpus file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    try {
        ByteReader r(bytes);
        if (r.str(4) != "FSEG") throw DataError("not a corpus file: " + path);
        uint32_t hlen = r.u32();
        std::string header = r.str(hlen);

        ClientDataset ds;
        std::vector<std::string> cid =
            detail::parse_str_list(detail::header_field(header, "client_id"));
        ds.client_id = cid.empty() ? "" : cid.front();
        std::vector<int> counts =
            detail::parse_int_list(detail::header_field(header, "count"));
        std::vector<int> ishape =
            detail::parse_int_list(detail::header_field(header, "image_shape"));
        std::vector<int> mshape =
            detail::parse_int_list(detail::header_field(header, "mask_shape"));
        std::vector<std::string> vols =
            detail::parse_str_list(detail::header_field(header, "volume_ids"));
        if (counts.size() != 1 || counts[0] <= 0 || ishape.size() != 3 ||
            mshape.size() != 3 || static_cast<int>(vols.size()) != counts[0])
            throw DataError("corrupt corpus header: " + path);
        int count = counts[0];

        int64_t ipix = shape_numel(ishape), mpix = shape_numel(mshape);
        for (int i = 0; i < count; ++i) {
            SegSample s;
            s.client_id = ds.client_id;
            s.volume_id = vols[static_cast<size_t>(i)];
            s.image = Tensor<float>(ishape);
            s.mask = Tensor<float>(mshape);
            for (int64_t k = 0; k < ipix; ++k) s.image[k] = r.f32();
            for (int64_t k = 0; k < mpix; ++k) s.mask[k] = r.f32();
            ds.samples.push_back(std::move(s));
        }
        if (r.remaining() != 0) throw DataError("trailing bytes in corpus: " + path);
        return ds;
    } catch (const TruncationError&) {
        throw DataError("corpus file truncated: " + path);
    } catch (const DimensionError&) {
        throw DataError("corrupt corpus header: " + path);
    }
}

} // namespace fedseg
