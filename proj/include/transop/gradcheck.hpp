#pragma once

// Central finite differences against tape gradients. The FD side never touches
// the tape: probes run the forward function with gradients disabled, so the
// comparison is independent of the backward path it checks.

#include <cmath>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "transop/tensor.hpp"

namespace transop {

// d loss / d t by central differences, perturbing t's buffer in place.
// `loss_fn` must re-read t on every call and must not itself use a tape.
template <typename F>
std::vector<double> fd_grad(const F& loss_fn, Tensor& t, double h = 1e-5) {
    std::vector<double> g(t.size());
    for (size_t i = 0; i < t.size(); ++i) {
        double keep = t[i];
        t[i] = keep + h;
        double up = loss_fn();
        t[i] = keep - h;
        double down = loss_fn();
        t[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// Max elementwise deviation normalized by the larger gradient magnitude,
// floored so that near-zero gradients compare absolutely.
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                          double floor_scale = 1e-3) {
    if (a.size() != b.size()) throw ContractError("max_rel_err: length mismatch");
    double scale = floor_scale;
    for (size_t i = 0; i < a.size(); ++i)
        scale = std::max({scale, std::fabs(a[i]), std::fabs(b[i])});
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]) / scale);
    return worst;
}

// Default worker count for embarrassingly parallel loops; TRANSOP_THREADS
// overrides. Results never depend on the value.
inline int default_thread_count() {
    if (const char* env = std::getenv("TRANSOP_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0,n) on `threads` workers over disjoint index ranges.
inline void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
    if (threads <= 1 || n < 2) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    size_t workers = std::min<size_t>(static_cast<size_t>(threads), n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

} // namespace transop
