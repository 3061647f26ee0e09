#pragma once

// Evaluation metrics: accuracy, F1 (positive class = bad outcome), AUC via the
// Mann-Whitney rank statistic with half-credit ties, and percentile bootstrap
// confidence intervals.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "transop/dataset.hpp"
#include "transop/error.hpp"
#include "transop/model.hpp"
#include "transop/rng.hpp"

namespace transop {

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size()) throw ContractError("accuracy: length mismatch");
    if (preds.empty()) throw ContractError("accuracy: empty input");
    size_t hit = 0;
    for (size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

// F1 for the positive (bad-outcome) class; 0 when precision+recall is 0.
inline double f1_score(const std::vector<int>& preds, const std::vector<int>& labels,
                       int positive = 1) {
    if (preds.size() != labels.size()) throw ContractError("f1: length mismatch");
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        bool p = preds[i] == positive, l = labels[i] == positive;
        tp += (p && l) ? 1 : 0;
        fp += (p && !l) ? 1 : 0;
        fn += (!p && l) ? 1 : 0;
    }
    double denom = 2.0 * tp + fp + fn; // equals precision+recall scaled; 2PR/(P+R)
    if (denom == 0.0) return 0.0;
    return 2.0 * static_cast<double>(tp) / denom;
}

// Mann-Whitney AUC: over all (positive, negative) pairs, mean of
// [score_pos > score_neg] + 0.5*[tie]. Computed via average ranks, which is
// exactly the pairwise statistic.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ContractError("auc: length mismatch");
    size_t npos = 0;
    for (int l : labels) npos += l == 1 ? 1 : 0;
    size_t nneg = labels.size() - npos;
    if (npos == 0 || nneg == 0)
        throw UndefinedMetricError("auc: both classes must be present (got " +
                                   std::to_string(npos) + " positive of " +
                                   std::to_string(labels.size()) + ")");
    std::vector<size_t> idx(scores.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        double avg_rank = 0.5 * static_cast<double>(i + 1 + j); // ranks are 1-based
        for (size_t k = i; k < j; ++k)
            if (labels[idx[k]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    double u = rank_sum_pos - static_cast<double>(npos) * (static_cast<double>(npos) + 1.0) / 2.0;
    return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

struct Ci {
    double lo = 0.0, hi = 0.0;
};

// Percentile bootstrap: resample n cases with replacement, recompute the
// metric, take the 2.5th/97.5th percentiles. Resamples where the metric is
// undefined are redrawn. Substream for resample r derives from (seed, r), so
// results are independent of evaluation order. The interval is widened to
// bracket the full-sample point estimate if a discrete edge case leaves it
// outside.
inline Ci bootstrap_ci(const std::function<double(const std::vector<size_t>&)>& metric, size_t n,
                       double point_estimate, int resamples = 2000, uint64_t seed = 0) {
    if (n < 10) throw ContractError("bootstrap_ci: need at least 10 samples");
    if (resamples < 2) throw ContractError("bootstrap_ci: need at least 2 resamples");
    std::vector<double> stats;
    stats.reserve(static_cast<size_t>(resamples));
    std::vector<size_t> draw(n);
    for (int r = 0; r < resamples; ++r) {
        Rng rng(mix_seed({seed, static_cast<uint64_t>(r), 0xB005ull}));
        bool ok = false;
        for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
            for (size_t i = 0; i < n; ++i) draw[i] = static_cast<size_t>(rng.below(n));
            try {
                stats.push_back(metric(draw));
                ok = true;
            } catch (const UndefinedMetricError&) {
                // single-class draw: redraw
            }
        }
        if (!ok) throw UndefinedMetricError("bootstrap_ci: metric undefined on repeated resamples");
    }
    std::sort(stats.begin(), stats.end());
    auto quantile = [&](double q) {
        double pos = q * static_cast<double>(stats.size() - 1);
        size_t lo = static_cast<size_t>(std::floor(pos));
        size_t hi = std::min(lo + 1, stats.size() - 1);
        double frac = pos - std::floor(pos);
        return stats[lo] + frac * (stats[hi] - stats[lo]);
    };
    Ci ci;
    ci.lo = std::min(quantile(0.025), point_estimate);
    ci.hi = std::max(quantile(0.975), point_estimate);
    return ci;
}

struct EvalReport {
    size_t n = 0;
    double acc = 0, f1 = 0, auc = 0;
    Ci acc_ci, f1_ci, auc_ci;
    int resamples = 2000;
    uint64_t seed = 0;
};

struct SampleResult {
    std::string patient_id;
    double score; // positive-class (bad outcome) probability
    int pred, label;
};

// Metrics + bootstrap CIs from per-sample scores/preds/labels.
inline EvalReport eval_report(const std::vector<double>& scores, const std::vector<int>& preds,
                              const std::vector<int>& labels, int resamples = 2000,
                              uint64_t seed = 0) {
    EvalReport r;
    r.n = labels.size();
    r.resamples = resamples;
    r.seed = seed;
    r.acc = accuracy(preds, labels);
    r.f1 = f1_score(preds, labels);
    r.auc = auc(scores, labels);
    auto subset = [&](const std::vector<size_t>& idx, auto& from) {
        std::vector<typename std::decay_t<decltype(from)>::value_type> out;
        out.reserve(idx.size());
        for (size_t i : idx) out.push_back(from[i]);
        return out;
    };
    r.acc_ci = bootstrap_ci(
        [&](const std::vector<size_t>& idx) { return accuracy(subset(idx, preds), subset(idx, labels)); },
        r.n, r.acc, resamples, mix_seed({seed, 1}));
    r.f1_ci = bootstrap_ci(
        [&](const std::vector<size_t>& idx) { return f1_score(subset(idx, preds), subset(idx, labels)); },
        r.n, r.f1, resamples, mix_seed({seed, 2}));
    r.auc_ci = bootstrap_ci(
        [&](const std::vector<size_t>& idx) { return auc(subset(idx, scores), subset(idx, labels)); },
        r.n, r.auc, resamples, mix_seed({seed, 3}));
    return r;
}

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string report_text(const EvalReport& r) {
    std::string s;
    s += "# n=" + std::to_string(r.n) + " resamples=" + std::to_string(r.resamples) +
         " seed=" + std::to_string(r.seed) + " positive_class=bad\n";
    s += "metric,value,ci_lo,ci_hi\n";
    s += "acc," + format_metric(r.acc) + "," + format_metric(r.acc_ci.lo) + "," +
         format_metric(r.acc_ci.hi) + "\n";
    s += "f1," + format_metric(r.f1) + "," + format_metric(r.f1_ci.lo) + "," +
         format_metric(r.f1_ci.hi) + "\n";
    s += "auc," + format_metric(r.auc) + "," + format_metric(r.auc_ci.lo) + "," +
         format_metric(r.auc_ci.hi) + "\n";
    return s;
}

inline void write_report(const std::string& path, const EvalReport& r) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path);
    out << report_text(r);
}

inline void write_sample_dump(const std::string& path, const std::vector<SampleResult>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write prediction dump: " + path);
    out << "patient_id,score,pred,label\n";
    for (const SampleResult& s : rows)
        out << s.patient_id << "," << format_metric(s.score) << "," << s.pred << "," << s.label
            << "\n";
}

// Infer-mode scores/preds/labels over a list of patient ids.
inline void score_split(Model& m, const Dataset& ds, const std::vector<std::string>& ids,
                        std::vector<double>& scores, std::vector<int>& preds,
                        std::vector<int>& labels) {
    scores.clear();
    preds.clear();
    labels.clear();
    for (const std::string& id : ids) {
        size_t i = ds.index_of(id);
        Prediction p = predict_one(m, &ds.volumes[i], &ds.records[i].features);
        scores.push_back(p.probs[1]);
        preds.push_back(p.label);
        labels.push_back(ds.records[i].bad_outcome() ? 1 : 0);
    }
}

// Infer-mode evaluation of a model over a split: all three metrics with
// bootstrap CIs plus the per-sample dump rows.
inline std::pair<EvalReport, std::vector<SampleResult>> evaluate_split(
    Model& m, const Dataset& ds, const std::vector<std::string>& ids, int resamples = 2000,
    uint64_t seed = 0) {
    if (ids.empty()) throw ContractError("evaluate: empty split");
    std::vector<double> scores;
    std::vector<int> preds, labels;
    score_split(m, ds, ids, scores, preds, labels);
    std::vector<SampleResult> rows;
    for (size_t i = 0; i < ids.size(); ++i)
        rows.push_back(SampleResult{ids[i], scores[i], preds[i], labels[i]});
    return {eval_report(scores, preds, labels, resamples, seed), std::move(rows)};
}

} // namespace transop
