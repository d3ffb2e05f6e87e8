#pragma once

// Overlap metrics (Dice / IoU) per slice and per pooled volume, per-client
// evaluation reports, and a paired two-sided t-test for comparing two runs
// over the same clients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace fedseg {

// ---------------------------------------------------------------------------
// Binary mask arithmetic. Masks are float tensors whose entries are exactly
// 0 or 1.

namespace detail {
struct MaskCounts {
    double inter = 0, pred = 0, gt = 0;
};

inline MaskCounts mask_counts(const Tensor<float>& pred, const Tensor<float>& gt) {
    if (pred.shape != gt.shape)
        throw DimensionError("mask shapes differ: " + shape_str(pred.shape) + " vs " +
                             shape_str(gt.shape));
    MaskCounts c;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        float p = pred[i], g = gt[i];
        if ((p != 0.f && p != 1.f) || (g != 0.f && g != 1.f))
            throw DomainError("masks must be binary (entries 0 or 1)");
        c.pred += p;
        c.gt += g;
        c.inter += p * g;
    }
    return c;
}

// Both-empty pairs count as a perfect (empty) prediction: 1.0.
inline double dice_from_counts(const MaskCounts& c) {
    double denom = c.pred + c.gt;
    return denom == 0 ? 1.0 : 2.0 * c.inter / denom;
}

inline double iou_from_counts(const MaskCounts& c) {
    double uni = c.pred + c.gt - c.inter;
    return uni == 0 ? 1.0 : c.inter / uni;
}

// Order-independent mean: summing the sorted values makes the result a pure
// function of the multiset, so shuffling a dataset cannot move a report even
// by one ulp.
inline double mean_sorted(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}
} // namespace detail

inline double dice(const Tensor<float>& pred, const Tensor<float>& gt) {
    return detail::dice_from_counts(detail::mask_counts(pred, gt));
}

inline double iou(const Tensor<float>& pred, const Tensor<float>& gt) {
    return detail::iou_from_counts(detail::mask_counts(pred, gt));
}

// Per-class thresholding at sigmoid(x) > 0.5, i.e. strictly positive logits.
inline Tensor<float> binarize(const Tensor<float>& logits) {
    Tensor<float> out(logits.shape);
    for (int64_t i = 0; i < logits.numel(); ++i) out[i] = logits[i] > 0.f ? 1.f : 0.f;
    return out;
}

// ---------------------------------------------------------------------------
// Reports.

struct ClassMetrics {
    double dice = 0, iou = 0;
};

struct VolumeMetrics {
    std::string volume_id;
    std::vector<ClassMetrics> per_class;
};

struct ClientMetrics {
    std::string client_id;
    std::vector<ClassMetrics> per_class;
    double dice_avg = 0, iou_avg = 0; // mean over classes
    std::vector<VolumeMetrics> volumes; // filled when grouped by volume
};

struct ReportMeta {
    std::string variant;   // e.g. "federated", "centralized"
    std::string mode;      // "full" / "adapter"
    bool pretrained = false;
    uint64_t seed = 0;
};

struct MetricsReport {
    ReportMeta meta;
    bool grouped_by_volume = false;
    std::vector<ClientMetrics> clients; // ascending client_id
    double dice_avg = 0, iou_avg = 0;   // unweighted mean of client averages
};

// Evaluation core over an arbitrary logit predictor; the model-based
// overload below is the production entry point.
using LogitFn = std::function<Tensor<float>(const SegSample&)>;

inline MetricsReport evaluate(const LogitFn& predict, const std::vector<SegSample>& data,
                              bool group_by_volume, const ReportMeta& meta = {}) {
    if (data.empty()) throw DataError("cannot evaluate an empty dataset");

    std::map<std::string, std::vector<const SegSample*>> by_client;
    for (const auto& s : data) by_client[s.client_id].push_back(&s);

    MetricsReport report;
    report.meta = meta;
    report.grouped_by_volume = group_by_volume;

    std::vector<double> client_dice, client_iou;
    for (const auto& [client_id, samples] : by_client) {
        int num_classes = -1;
        // per class: list of per-unit (slice or volume) metric values
        std::vector<std::vector<double>> dices, ious;
        // grouped mode: pooled pixel counts per volume per class
        std::map<std::string, std::vector<detail::MaskCounts>> pools;

        for (const SegSample* s : samples) {
            Tensor<float> logits = predict(*s);
            if (logits.shape != s->mask.shape)
                throw DimensionError("prediction shape " + shape_str(logits.shape) +
                                     " does not match mask " + shape_str(s->mask.shape));
            if (logits.rank() != 3)
                throw DimensionError("expected [h,w,c] masks, got " +
                                     shape_str(logits.shape));
            int h = logits.shape[0], w = logits.shape[1], c = logits.shape[2];
            if (num_classes < 0) {
                num_classes = c;
                dices.resize(static_cast<size_t>(c));
                ious.resize(static_cast<size_t>(c));
            } else if (c != num_classes) {
                throw DimensionError("class count changes within client " + client_id);
            }

            Tensor<float> pred = binarize(logits);
            for (int cls = 0; cls < c; ++cls) {
                detail::MaskCounts counts;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        float p = pred.at(i, j, cls);
                        float g = s->mask.at(i, j, cls);
                        if (g != 0.f && g != 1.f)
                            throw DomainError("ground-truth mask is not binary");
                        counts.pred += p;
                        counts.gt += g;
                        counts.inter += p * g;
                    }
                if (group_by_volume) {
                    if (s->volume_id.empty())
                        throw DataError("volume pooling needs a volume id on every "
                                        "sample (client " + client_id + ")");
                    auto& pool = pools[s->volume_id];
                    pool.resize(static_cast<size_t>(c));
                    pool[static_cast<size_t>(cls)].inter += counts.inter;
                    pool[static_cast<size_t>(cls)].pred += counts.pred;
                    pool[static_cast<size_t>(cls)].gt += counts.gt;
                } else {
                    dices[static_cast<size_t>(cls)].push_back(
                        detail::dice_from_counts(counts));
                    ious[static_cast<size_t>(cls)].push_back(
                        detail::iou_from_counts(counts));
                }
            }
        }

        ClientMetrics cm;
        cm.client_id = client_id;
        if (group_by_volume) {
            for (const auto& [volume_id, pool] : pools) {
                VolumeMetrics vm;
                vm.volume_id = volume_id;
                for (size_t cls = 0; cls < pool.size(); ++cls) {
                    double d = detail::dice_from_counts(pool[cls]);
                    double u = detail::iou_from_counts(pool[cls]);
                    vm.per_class.push_back({d, u});
                    dices[cls].push_back(d);
                    ious[cls].push_back(u);
                }
                cm.volumes.push_back(std::move(vm));
            }
        }
        for (size_t cls = 0; cls < dices.size(); ++cls)
            cm.per_class.push_back(
                {detail::mean_sorted(dices[cls]), detail::mean_sorted(ious[cls])});

        std::vector<double> cd, ci;
        for (const auto& m : cm.per_class) {
            cd.push_back(m.dice);
            ci.push_back(m.iou);
        }
        cm.dice_avg = detail::mean_sorted(cd);
        cm.iou_avg = detail::mean_sorted(ci);
        client_dice.push_back(cm.dice_avg);
        client_iou.push_back(cm.iou_avg);
        report.clients.push_back(std::move(cm));
    }

    report.dice_avg = detail::mean_sorted(client_dice);
    report.iou_avg = detail::mean_sorted(client_iou);
    return report;
}

inline MetricsReport evaluate(const ViTSegModel& model, const std::vector<SegSample>& data,
                              bool group_by_volume, const ReportMeta& meta = {}) {
    return evaluate([&](const SegSample& s) { return model.forward(s.image); }, data,
                    group_by_volume, meta);
}

// ---------------------------------------------------------------------------
// Student-t machinery for the paired comparison.

namespace detail {
inline double beta_cont_frac(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16, kFpMin = 1e-300;
    double qab = a + b, qap = a + 1, qam = a - 1;
    double c = 1, d = 1 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) return h;
    }
    throw NumericError("incomplete beta continued fraction did not converge");
}

inline double reg_inc_beta(double a, double b, double x) {
    if (!(x >= 0.0 && x <= 1.0)) throw DomainError("incomplete beta needs x in [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                         a * std::log(x) + b * std::log1p(-x));
    if (x < (a + 1) / (a + b + 2)) return bt * beta_cont_frac(a, b, x) / a;
    return 1.0 - bt * beta_cont_frac(b, a, 1 - x) / b;
}
} // namespace detail

// Two-sided tail probability of Student's t with `df` degrees of freedom.
inline double t_two_sided_p(double t, double df) {
    if (df < 1) throw StatError("t distribution needs df >= 1");
    return detail::reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct PairedCompareResult {
    double mean_gap = 0; // mean of (a - b) per-client Dice
    double t_stat = 0;
    double p_value = 1;
    double df = 0;
};

// Paired two-sided t-test over per-client Dice averages. The variance floor
// keeps identical reports at t = 0 (p = 1) instead of 0/0.
inline PairedCompareResult paired_compare(const MetricsReport& a, const MetricsReport& b) {
    if (a.clients.size() != b.clients.size())
        throw StatError("reports cover different client sets");
    size_t K = a.clients.size();
    if (K < 2) throw StatError("paired comparison needs at least two clients");

    std::vector<double> diffs(K);
    for (size_t i = 0; i < K; ++i) {
        if (a.clients[i].client_id != b.clients[i].client_id)
            throw StatError("reports cover different client sets: '" +
                            a.clients[i].client_id + "' vs '" +
                            b.clients[i].client_id + "'");
        diffs[i] = a.clients[i].dice_avg - b.clients[i].dice_avg;
    }
    double mean = 0;
    for (double d : diffs) mean += d;
    mean /= static_cast<double>(K);
    double var = 0;
    for (double d : diffs) var += (d - mean) * (d - mean);
    var /= static_cast<double>(K - 1);
    var = std::max(var, 1e-12);

    PairedCompareResult res;
    res.mean_gap = mean;
    res.df = static_cast<double>(K - 1);
    res.t_stat = mean / std::sqrt(var / static_cast<double>(K));
    res.p_value = t_two_sided_p(res.t_stat, res.df);
    return res;
}

// ---------------------------------------------------------------------------
// Emission.

inline std::string report_label(const MetricsReport& r) {
    std::string s = r.meta.variant.empty() ? "run" : r.meta.variant;
    if (!r.meta.mode.empty()) s += "/" + r.meta.mode;
    s += r.meta.pretrained ? "/pretrained" : "/scratch";
    return s;
}

// Long-form CSV: one row per client per class, plus average rows.
inline std::string metrics_csv(const MetricsReport& r) {
    std::ostringstream os;
    os << "client,class,dice,iou\n";
    for (const auto& c : r.clients) {
        for (size_t cls = 0; cls < c.per_class.size(); ++cls)
            os << c.client_id << ',' << cls << ',' << c.per_class[cls].dice << ','
               << c.per_class[cls].iou << '\n';
        os << c.client_id << ",avg," << c.dice_avg << ',' << c.iou_avg << '\n';
    }
    os << "all,avg," << r.dice_avg << ',' << r.iou_avg << '\n';
    return os.str();
}

// Grid with clients as columns (Dice/IoU sub-columns) and one row per run.
inline std::string metrics_markdown(const std::vector<MetricsReport>& reports) {
    std::vector<std::string> ids;
    for (const auto& r : reports)
        for (const auto& c : r.clients)
            if (std::find(ids.begin(), ids.end(), c.client_id) == ids.end())
                ids.push_back(c.client_id);
    std::sort(ids.begin(), ids.end());

    std::ostringstream os;
    os << "| run |";
    for (const auto& id : ids) os << ' ' << id << " Dice | " << id << " IoU |";
    os << " Avg Dice | Avg IoU |\n|---|";
    for (size_t i = 0; i < 2 * ids.size() + 2; ++i) os << "---|";
    os << '\n';
    os.precision(4);
    os << std::fixed;
    for (const auto& r : reports) {
        os << "| " << report_label(r) << " |";
        for (const auto& id : ids) {
            const ClientMetrics* found = nullptr;
            for (const auto& c : r.clients)
                if (c.client_id == id) found = &c;
            if (found)
                os << ' ' << found->dice_avg << " | " << found->iou_avg << " |";
            else
                os << " - | - |";
        }
        os << ' ' << r.dice_avg << " | " << r.iou_avg << " |\n";
    }
    return os.str();
}

} // namespace fedseg
