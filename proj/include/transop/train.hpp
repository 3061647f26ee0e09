#pragma once

// Training recipe: softmax cross-entropy, Adam with decoupled weight decay,
// cosine learning-rate schedule stepped per optimizer step, seeded shuffling
// and augmentation, per-epoch validation metrics, best-val-AUC checkpointing.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "transop/checkpoint.hpp"
#include "transop/dataset.hpp"
#include "transop/error.hpp"
#include "transop/eval.hpp"
#include "transop/keyval.hpp"
#include "transop/model.hpp"
#include "transop/preprocess.hpp"
#include "transop/rng.hpp"
#include "transop/tensor.hpp"

namespace transop {

// Mean over the batch of -log softmax(logits)[label], log-sum-exp stabilized.
// Gradient per row is (softmax(row) - onehot(label)) / B.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                            Tape* tape = nullptr) {
    if (logits.rank() != 2)
        throw DimensionError("cross_entropy: logits must be [B,C], got " + shape_str(logits.shape));
    const int B = logits.shape[0], C = logits.shape[1];
    if (static_cast<int>(labels.size()) != B)
        throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(B) + " rows");
    for (int y : labels)
        if (y < 0 || y >= C)
            throw DataError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                            std::to_string(C) + ")");
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
        const double* row = logits.data() + static_cast<size_t>(b) * C;
        double mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (int c = 0; c < C; ++c) z += std::exp(row[c] - mx);
        total += mx + std::log(z) - row[labels[static_cast<size_t>(b)]];
    }
    Tensor out = Tensor::scalar(total / B);
    if (tape && logits.requires_grad) {
        int il = tape->input_id(logits);
        auto ls = logits.store;
        auto labs = labels;
        out.node = tape->emit({il}, [=](const std::vector<double>& g, Tape& t) {
            auto& gl = t.grad_buf(il, static_cast<size_t>(B) * C);
            const double* lv = ls->data();
            for (int b = 0; b < B; ++b) {
                const double* row = lv + static_cast<size_t>(b) * C;
                double mx = row[0];
                for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
                double z = 0.0;
                for (int c = 0; c < C; ++c) z += std::exp(row[c] - mx);
                for (int c = 0; c < C; ++c) {
                    double p = std::exp(row[c] - mx) / z;
                    double onehot = c == labs[static_cast<size_t>(b)] ? 1.0 : 0.0;
                    gl[static_cast<size_t>(b) * C + c] += g[0] * (p - onehot) / B;
                }
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// lr_t = 0.5 * lr0 * (1 + cos(pi * t / T)); lr(0) = lr0, lr(T) = 0.
inline double cosine_lr(long t, long T, double lr0 = 3e-4) {
    if (t < 0 || t > T) throw ContractError("cosine_lr: step " + std::to_string(t) +
                                            " outside [0," + std::to_string(T) + "]");
    if (T == 0) return lr0;
    return 0.5 * lr0 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) /
                                       static_cast<double>(T)));
}

struct OptimState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 1e-4;
    long t = 0;
    std::vector<std::vector<double>> m, v; // parameter order = visit order

    static OptimState init(Model& model, double weight_decay = 1e-4) {
        OptimState s;
        s.weight_decay = weight_decay;
        model.visit_params([&](const std::string&, Tensor& p) {
            s.m.emplace_back(p.size(), 0.0);
            s.v.emplace_back(p.size(), 0.0);
        });
        return s;
    }
};

// One bias-corrected Adam update over a flat parameter array, with decoupled
// weight decay (p -= lr*wd*p alongside the moment update). `t` is the
// 1-based step count.
inline void adam_apply(double* p, const double* g, double* m, double* v, size_t n, long t,
                       double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                       double eps = 1e-8) {
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        double mhat = m[i] / c1;
        double vhat = v[i] / c2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        p[i] -= lr * weight_decay * p[i];
    }
}

inline void adam_step(Model& model, const Tape& tape, OptimState& s, double lr) {
    s.t += 1;
    size_t pi = 0;
    model.visit_params([&](const std::string& name, Tensor& p) {
        if (pi >= s.m.size()) throw ContractError("adam_step: optimizer state too short");
        std::vector<double> g = tape.grad(p);
        std::vector<double>& m = s.m[pi];
        std::vector<double>& v = s.v[pi];
        if (m.size() != p.size())
            throw ContractError("adam_step: state/parameter shape mismatch at " + name);
        adam_apply(p.data(), g.data(), m.data(), v.data(), p.size(), s.t, lr, s.weight_decay,
                   s.beta1, s.beta2, s.eps);
        ++pi;
    });
    if (pi != s.m.size()) throw ContractError("adam_step: optimizer state too long");
}

struct TrainConfig {
    int epochs = 500;
    int batch_size = 24;
    uint64_t seed = 1;
    double lr0 = 3e-4;
    double weight_decay = 1e-4;
    bool augment = true;
    double p_flip = 0.5;
    double noise_sigma = 0.05;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (lr0 <= 0) throw ConfigError("lr must be positive");
        if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    }

    KeyVal to_kv() const {
        KeyVal kv;
        kv.set("epochs", std::to_string(epochs));
        kv.set("batch_size", std::to_string(batch_size));
        kv.set("seed", std::to_string(seed));
        kv.set("lr", format_double(lr0));
        kv.set("weight_decay", format_double(weight_decay));
        kv.set("augment", augment ? "true" : "false");
        kv.set("p_flip", format_double(p_flip));
        kv.set("noise_sigma", format_double(noise_sigma));
        return kv;
    }

    static TrainConfig from_kv(const KeyVal& kv) {
        TrainConfig c;
        if (kv.has("epochs")) c.epochs = static_cast<int>(kv.get_int("epochs"));
        if (kv.has("batch_size")) c.batch_size = static_cast<int>(kv.get_int("batch_size"));
        if (kv.has("seed")) c.seed = static_cast<uint64_t>(kv.get_int("seed"));
        if (kv.has("lr")) c.lr0 = kv.get_double("lr");
        if (kv.has("weight_decay")) c.weight_decay = kv.get_double("weight_decay");
        if (kv.has("augment")) c.augment = kv.get_bool("augment");
        if (kv.has("p_flip")) c.p_flip = kv.get_double("p_flip");
        if (kv.has("noise_sigma")) c.noise_sigma = kv.get_double("noise_sigma");
        c.validate();
        return c;
    }
};

struct EpochRecord {
    int epoch;
    double lr, train_loss, val_acc, val_f1, val_auc;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = -1;
    double best_val_auc = -1.0;
};

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write history: " + path);
    out << "epoch,lr,train_loss,val_acc,val_f1,val_auc\n";
    for (const EpochRecord& r : history)
        out << r.epoch << "," << format_double(r.lr) << "," << format_double(r.train_loss) << ","
            << format_double(r.val_acc) << "," << format_double(r.val_f1) << ","
            << format_double(r.val_auc) << "\n";
}

// Full training loop. Mutates `model`; returns the history and leaves the
// best-validation-AUC parameters in `best` (cloned snapshot) when non-null.
inline TrainResult train_loop(Model& model, const Dataset& ds, const DatasetSplit& split,
                              const TrainConfig& tc, Model* best = nullptr) {
    tc.validate();
    if (split.train.empty() || split.val.empty())
        throw ContractError("train_loop: train and val splits must be non-empty");
    // clinical normalization is fitted on the train split only
    if (model.cfg.uses_clinical()) {
        FeatureStats st = feature_stats(ds, split.train);
        model.clin_mean = st.mean;
        model.clin_std = st.stdev;
    }
    std::vector<size_t> train_idx;
    for (const std::string& id : split.train) train_idx.push_back(ds.index_of(id));

    const long steps_per_epoch = (static_cast<long>(train_idx.size()) + tc.batch_size - 1) / tc.batch_size;
    const long total_steps = static_cast<long>(tc.epochs) * steps_per_epoch;
    const long sched_T = std::max(total_steps - 1, 1L);

    OptimState opt = OptimState::init(model, tc.weight_decay);
    TrainResult result;
    long step = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        std::vector<size_t> order = train_idx;
        Rng shuffle_rng(mix_seed({tc.seed, 0x50FFull, static_cast<uint64_t>(epoch)}));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        size_t seen = 0;
        double last_lr = 0.0;
        for (long b = 0; b * tc.batch_size < static_cast<long>(order.size()); ++b) {
            size_t lo = static_cast<size_t>(b) * tc.batch_size;
            size_t hi = std::min(order.size(), lo + tc.batch_size);
            double lr = cosine_lr(step, sched_T, tc.lr0);

            std::vector<Volume> aug_storage;
            Batch batch;
            std::vector<int> labels;
            Rng aug_rng(mix_seed({tc.seed, 0xA7ull, static_cast<uint64_t>(epoch), static_cast<uint64_t>(b)}));
            for (size_t i = lo; i < hi; ++i) {
                size_t di = order[i];
                if (model.cfg.uses_image()) {
                    if (tc.augment)
                        aug_storage.push_back(augment(ds.volumes[di], aug_rng, tc.p_flip, tc.noise_sigma));
                    else
                        aug_storage.push_back(ds.volumes[di]);
                }
                labels.push_back(ds.records[di].bad_outcome() ? 1 : 0);
            }
            for (size_t i = lo; i < hi; ++i) {
                size_t di = order[i];
                if (model.cfg.uses_image()) batch.volumes.push_back(&aug_storage[i - lo]);
                if (model.cfg.uses_clinical()) batch.features.push_back(&ds.records[di].features);
            }
            Rng drop_rng(mix_seed({tc.seed, 0xD0ull, static_cast<uint64_t>(epoch), static_cast<uint64_t>(b)}));
            Tape tape;
            ForwardTrace tr = forward_trace(model, batch, Mode::train, &drop_rng, &tape);
            Tensor loss = cross_entropy(tr.logits, labels, &tape);
            double lv = loss.item();
            if (std::isnan(lv))
                throw TrainAbortError("NaN loss at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(b) + ", lr " + format_double(lr));
            tape.backward(loss);
            adam_step(model, tape, opt, lr);
            loss_sum += lv * static_cast<double>(hi - lo);
            seen += hi - lo;
            last_lr = lr;
            ++step;
        }
        std::vector<double> scores;
        std::vector<int> preds, labels;
        score_split(model, ds, split.val, scores, preds, labels);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = last_lr;
        rec.train_loss = loss_sum / static_cast<double>(seen);
        rec.val_acc = accuracy(preds, labels);
        rec.val_f1 = f1_score(preds, labels);
        rec.val_auc = auc(scores, labels);
        result.history.push_back(rec);
        if (rec.val_auc > result.best_val_auc) {
            result.best_val_auc = rec.val_auc;
            result.best_epoch = epoch;
            if (best) *best = model.clone();
        }
    }
    return result;
}

} // namespace transop
