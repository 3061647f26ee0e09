#pragma once

// The finite-difference suite behind the gradcheck command: every tensor op,
// every layer, and the full tiny model with every parameter probed by central
// differences. Probes are read-only forwards, parallelized over parameter
// elements with per-worker model clones; results do not depend on the worker
// count.

#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "transop/dataset.hpp"
#include "transop/gradcheck.hpp"
#include "transop/model.hpp"
#include "transop/nn.hpp"
#include "transop/preprocess.hpp"
#include "transop/rng.hpp"
#include "transop/tensor.hpp"
#include "transop/train.hpp"

namespace transop {

struct GradCheckEntry {
    std::string component;
    double max_rel_err = 0.0;
    double tolerance = 1e-6;

    bool passed() const { return max_rel_err < tolerance; }
};

namespace detail {

inline Tensor gc_random(Rng& rng, Shape s, double scale = 1.0) {
    Tensor t(std::move(s));
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
    return t;
}

// Max FD deviation of a forward closure under a fixed random output weighting.
inline double gc_check(Rng& rng, const std::function<Tensor(Tape*)>& fwd,
                       std::vector<Tensor*> inputs, double h = 1e-6) {
    Tape tape;
    for (Tensor* t : inputs) t->requires_grad = true;
    Tensor out = fwd(&tape);
    Tensor w = gc_random(rng, out.shape);
    Tensor loss = sum_all(mul(out, w, &tape), &tape);
    tape.backward(loss);
    auto eval = [&]() {
        Tensor o = fwd(nullptr);
        double s = 0.0;
        for (size_t i = 0; i < o.size(); ++i) s += o[i] * w[i];
        return s;
    };
    double worst = 0.0;
    for (Tensor* t : inputs) {
        std::vector<double> fd = fd_grad(eval, *t, h);
        worst = std::max(worst, max_rel_err(tape.grad(*t), fd));
    }
    return worst;
}

// Every-parameter finite differences through the full tiny model on one
// preprocessed synthetic sample.
inline GradCheckEntry gc_full_model(uint64_t seed, int threads) {
    TranSOPConfig cfg = TranSOPConfig::tiny();
    cfg.p_drop = 0.0; // dropout has its own fixed-mask check
    Rng rng(mix_seed({seed, 0xF117ull}));
    Model model = build_model(cfg, rng);

    SynthOptions so;
    so.n = 10;
    so.d = cfg.crop_d;
    so.w = cfg.crop_w;
    so.h = cfg.crop_h;
    so.seed = mix_seed({seed, 0xDA7Aull});
    SynthDataset sd = synth_generate(so);
    PreprocessOptions po;
    po.crop_d = cfg.crop_d;
    po.crop_w = cfg.crop_w;
    po.crop_h = cfg.crop_h;
    Volume vol = preprocess(sd.volumes[0], po);
    std::vector<double> feats = sd.records[0].features;
    std::vector<int> labels = {sd.records[0].bad_outcome() ? 1 : 0};

    auto loss_of = [&](Model& m) {
        Batch b;
        b.volumes.push_back(&vol);
        b.features.push_back(&feats);
        ForwardTrace tr = forward_trace(m, b, Mode::infer, nullptr);
        return cross_entropy(tr.logits, labels).item();
    };

    // analytic gradients
    Tape tape;
    Batch b;
    b.volumes.push_back(&vol);
    b.features.push_back(&feats);
    ForwardTrace tr = forward_trace(model, b, Mode::infer, nullptr, &tape);
    Tensor loss = cross_entropy(tr.logits, labels, &tape);
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    std::vector<size_t> sizes, offsets;
    size_t total = 0;
    model.visit_params([&](const std::string&, Tensor& p) {
        analytic.push_back(tape.grad(p));
        sizes.push_back(p.size());
        offsets.push_back(total);
        total += p.size();
    });

    std::vector<double> fd(total, 0.0);
    const double h = 1e-5;
    int workers = std::max(1, threads);
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            Model clone = model.clone();
            std::vector<Tensor*> params;
            clone.visit_params([&](const std::string&, Tensor& p) { params.push_back(&p); });
            for (size_t flat = static_cast<size_t>(w); flat < total; flat += static_cast<size_t>(workers)) {
                size_t pi = 0;
                while (pi + 1 < offsets.size() && offsets[pi + 1] <= flat) ++pi;
                size_t e = flat - offsets[pi];
                Tensor& p = *params[pi];
                double keep = p[e];
                p[e] = keep + h;
                double up = loss_of(clone);
                p[e] = keep - h;
                double down = loss_of(clone);
                p[e] = keep;
                fd[flat] = (up - down) / (2.0 * h);
            }
        });
    }
    for (auto& th : pool) th.join();

    double worst = 0.0;
    for (size_t pi = 0; pi < sizes.size(); ++pi) {
        std::vector<double> slice(fd.begin() + static_cast<long>(offsets[pi]),
                                  fd.begin() + static_cast<long>(offsets[pi] + sizes[pi]));
        worst = std::max(worst, max_rel_err(analytic[pi], slice));
    }
    return GradCheckEntry{"full_model", worst, 1e-4};
}

} // namespace detail

// Runs the whole suite. `corrupt_for_test` deliberately breaks one analytic
// gradient so harnesses can verify the failure path.
inline std::vector<GradCheckEntry> gradcheck_suite(uint64_t seed = 1, bool corrupt_for_test = false,
                                                   int threads = default_thread_count()) {
    std::vector<GradCheckEntry> out;
    Rng rng(mix_seed({seed, 0x6CADull}));
    auto op = [&](const std::string& name, const std::function<Tensor(Tape*)>& fwd,
                  std::vector<Tensor*> inputs) {
        out.push_back(GradCheckEntry{name, detail::gc_check(rng, fwd, std::move(inputs)), 1e-6});
    };

    { // tensor ops
        Tensor a = detail::gc_random(rng, {3, 4}), b2 = detail::gc_random(rng, {3, 4});
        op("add", [&](Tape* t) { return add(a, b2, t); }, {&a, &b2});
        op("sub", [&](Tape* t) { return sub(a, b2, t); }, {&a, &b2});
        op("mul", [&](Tape* t) { return mul(a, b2, t); }, {&a, &b2});
        op("scale", [&](Tape* t) { return scale(a, -1.7, t); }, {&a});
        op("add_scalar", [&](Tape* t) { return add_scalar(a, 0.4, t); }, {&a});
        op("gelu", [&](Tape* t) { return gelu(a, t); }, {&a});
        Tensor s = Tensor::scalar(0.8);
        op("smul", [&](Tape* t) { return smul(s, a, t); }, {&s, &a});
        Tensor ma = detail::gc_random(rng, {3, 5}), mb = detail::gc_random(rng, {5, 2});
        op("matmul", [&](Tape* t) { return matmul(ma, mb, t); }, {&ma, &mb});
        Tensor ba = detail::gc_random(rng, {2, 3, 4}), bb = detail::gc_random(rng, {2, 4, 3});
        op("bmm", [&](Tape* t) { return bmm(ba, bb, t); }, {&ba, &bb});
        Tensor bias = detail::gc_random(rng, {4});
        op("add_row_bias", [&](Tape* t) { return add_row_bias(a, bias, t); }, {&a, &bias});
        Tensor x3 = detail::gc_random(rng, {2, 3, 4});
        op("softmax", [&](Tape* t) { return softmax(x3, 2, t); }, {&x3});
        op("reshape", [&](Tape* t) { return reshape(x3, {6, 4}, t); }, {&x3});
        op("transpose", [&](Tape* t) { return transpose(x3, 0, 2, t); }, {&x3});
        op("concat", [&](Tape* t) { return concat({a, b2}, 1, t); }, {&a, &b2});
        op("slice", [&](Tape* t) { return slice(x3, 1, 1, 2, t); }, {&x3});
        op("mean", [&](Tape* t) { return mean(x3, 1, t); }, {&x3});
        op("var", [&](Tape* t) { return var(x3, 1, t); }, {&x3});
        op("sum", [&](Tape* t) { return sum_all(x3, t); }, {&x3});
        op("tile", [&](Tape* t) { return tile0(a, 3, t); }, {&a});
        Tensor u = detail::gc_random(rng, {2, 4, 5, 4});
        op("unfold3d", [&](Tape* t) { return unfold3d(u, 3, 3, 3, 2, 2, 2, 1, 1, 1, t); }, {&u});
    }
    { // layers
        LinearParams lin{detail::gc_random(rng, {5, 3}), detail::gc_random(rng, {3})};
        Tensor lx = detail::gc_random(rng, {4, 5});
        Tape probe;
        for (Tensor* t : {&lx, &lin.W, &lin.b}) t->requires_grad = true;
        Tensor lout = linear(lx, lin, &probe);
        Tensor lw = detail::gc_random(rng, lout.shape);
        Tensor lloss = sum_all(mul(lout, lw, &probe), &probe);
        probe.backward(lloss);
        auto leval = [&]() {
            Tensor o = linear(lx, lin);
            double sum = 0.0;
            for (size_t i = 0; i < o.size(); ++i) sum += o[i] * lw[i];
            return sum;
        };
        double worst = 0.0;
        bool first = true;
        for (Tensor* t : {&lx, &lin.W, &lin.b}) {
            std::vector<double> fd = fd_grad(leval, *t, 1e-6);
            std::vector<double> an = probe.grad(*t);
            if (corrupt_for_test && first) an[0] += 1e-2; // test hook: broken rule
            first = false;
            worst = std::max(worst, max_rel_err(an, fd));
        }
        out.push_back(GradCheckEntry{"linear", worst, 1e-6});

        LayerNormParams ln{detail::gc_random(rng, {6}), detail::gc_random(rng, {6})};
        Tensor nx = detail::gc_random(rng, {4, 6});
        op("layer_norm", [&](Tape* t) { return layer_norm(nx, ln, t); }, {&nx, &ln.gamma, &ln.beta});

        MHSAParams att;
        att.wq = detail::gc_random(rng, {6, 6}, 0.4);
        att.wk = detail::gc_random(rng, {6, 6}, 0.4);
        att.wv = detail::gc_random(rng, {6, 6}, 0.4);
        att.wo = detail::gc_random(rng, {6, 6}, 0.4);
        att.heads = 2;
        Tensor ax = detail::gc_random(rng, {2, 3, 6});
        op("mhsa", [&](Tape* t) { return mhsa(ax, att, t); },
           {&ax, &att.wq, &att.wk, &att.wv, &att.wo});

        MlpParams mlp;
        mlp.fc1 = LinearParams{detail::gc_random(rng, {5, 8}), detail::gc_random(rng, {8})};
        mlp.fc2 = LinearParams{detail::gc_random(rng, {8, 5}), detail::gc_random(rng, {5})};
        Tensor mx = detail::gc_random(rng, {2, 3, 5});
        op("mlp_block", [&](Tape* t) { return mlp_block(mx, mlp, t); },
           {&mx, &mlp.fc1.W, &mlp.fc1.b, &mlp.fc2.W, &mlp.fc2.b});

        Tensor dx = detail::gc_random(rng, {5, 4});
        op("dropout", [&](Tape* t) {
            Rng mask_rng(mix_seed({seed, 0xD120ull})); // fixed mask across probes
            return dropout(dx, 0.4, Mode::train, &mask_rng, t);
        }, {&dx});

        PatchEmbedParams pe;
        pe.patch = 2;
        pe.channels = 1;
        pe.projection = detail::gc_random(rng, {8, 5});
        pe.bias = detail::gc_random(rng, {5});
        Tensor px = detail::gc_random(rng, {1, 4, 4, 6});
        op("patch_embed", [&](Tape* t) { return patch_embed(px, pe, t); },
           {&px, &pe.projection, &pe.bias});

        ConvBlockParams cb;
        cb.kernel = detail::gc_random(rng, {27, 3}, 0.3);
        cb.bias = detail::gc_random(rng, {3}, 0.3);
        cb.norm.gamma = Tensor::full({3}, 1.0);
        cb.norm.beta = Tensor({3});
        Tensor cx = detail::gc_random(rng, {1, 4, 5, 4});
        op("conv_block", [&](Tape* t) { return conv_block(cx, cb, t); },
           {&cx, &cb.kernel, &cb.bias, &cb.norm.gamma, &cb.norm.beta});

        Tensor logits = detail::gc_random(rng, {3, 2});
        op("cross_entropy", [&](Tape* t) { return cross_entropy(logits, {1, 0, 1}, t); }, {&logits});
    }
    out.push_back(detail::gc_full_model(seed, threads));
    return out;
}

inline bool gradcheck_passed(const std::vector<GradCheckEntry>& entries) {
    for (const auto& e : entries)
        if (!e.passed()) return false;
    return true;
}

} // namespace transop
