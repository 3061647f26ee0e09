#pragma once

// Dense row-major double tensors plus a reverse-mode tape.
//
// Ops are free functions taking an optional Tape*. With a tape, any op whose
// inputs require gradients records a backward closure; Tape::backward walks
// the records in reverse creation order (creation order is topological by
// construction), visiting each node once. Tensors are value types sharing
// their element buffer; a Tape must stay on one thread for its whole
// forward+backward lifetime.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <vector>

#include "transop/error.hpp"

namespace transop {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline void check_shape_valid(const Shape& s, const char* op) {
    if (s.empty()) throw DimensionError(std::string(op) + ": empty shape");
    for (int d : s)
        if (d < 1) throw DimensionError(std::string(op) + ": non-positive dim in shape " + shape_str(s));
}

inline std::vector<size_t> row_major_strides(const Shape& s) {
    std::vector<size_t> str(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
        str[i] = str[i + 1] * static_cast<size_t>(s[i + 1]);
    return str;
}

class Tape;

class Tensor {
public:
    Shape shape;
    std::shared_ptr<std::vector<double>> store;
    bool requires_grad = false;
    Tape* tape = nullptr; // tape that produced this tensor (outputs only)
    int node = -1;        // tape node id, -1 for leaves/constants

    Tensor() : shape{1}, store(std::make_shared<std::vector<double>>(1, 0.0)) {}

    explicit Tensor(Shape s)
        : shape(std::move(s)), store(std::make_shared<std::vector<double>>()) {
        check_shape_valid(shape, "Tensor");
        store->assign(shape_numel(shape), 0.0);
    }

    Tensor(Shape s, std::vector<double> values)
        : shape(std::move(s)), store(std::make_shared<std::vector<double>>(std::move(values))) {
        check_shape_valid(shape, "Tensor");
        if (store->size() != shape_numel(shape))
            throw DimensionError("Tensor: " + std::to_string(store->size()) +
                                 " elements do not fill shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, double v) {
        Tensor t(std::move(s));
        std::fill(t.store->begin(), t.store->end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    size_t size() const { return store->size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    double* data() { return store->data(); }
    const double* data() const { return store->data(); }
    double& operator[](size_t i) { return (*store)[i]; }
    double operator[](size_t i) const { return (*store)[i]; }

    double item() const {
        if (size() != 1) throw ContractError("item: tensor is not scalar, shape " + shape_str(shape));
        return (*store)[0];
    }

    Tensor& mark_grad(bool rg = true) {
        requires_grad = rg;
        return *this;
    }

    // Deep copy of values only (no tape linkage).
    Tensor copy_values() const {
        Tensor t(shape, *store);
        t.requires_grad = requires_grad;
        return t;
    }
};

using BackwardFn = std::function<void(const std::vector<double>& out_grad, Tape& tape)>;

class Tape {
public:
    // Registers an op record; parents are node ids (entries may be -1 for
    // constant inputs). Returns the new node id.
    int emit(std::vector<int> parents, BackwardFn backward) {
        nodes_.push_back(Node{std::move(parents), std::move(backward)});
        grads_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Node id for an op input: its producing node, a leaf registration for a
    // requires_grad tensor outside the tape, or -1 for a constant.
    int input_id(const Tensor& t) {
        if (t.node >= 0) {
            if (t.tape != this) throw ContractError("tensor belongs to a different tape");
            return t.node;
        }
        if (!t.requires_grad) return -1;
        const void* key = t.store.get();
        auto it = leaves_.find(key);
        if (it != leaves_.end()) return it->second;
        int id = emit({}, nullptr);
        leaves_.emplace(key, id);
        return id;
    }

    // Gradient buffer of a node, zero-initialized on first touch.
    std::vector<double>& grad_buf(int id, size_t n) {
        auto& g = grads_[static_cast<size_t>(id)];
        if (g.empty()) g.assign(n, 0.0);
        return g;
    }

    void backward(const Tensor& loss) {
        if (shape_numel(loss.shape) != 1)
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape));
        if (loss.tape != this || loss.node < 0)
            throw ContractError("backward: loss is not on this tape");
        if (ran_backward_) throw ContractError("backward: already run on this tape");
        ran_backward_ = true;
        grads_[static_cast<size_t>(loss.node)].assign(1, 1.0);
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            auto& n = nodes_[static_cast<size_t>(i)];
            if (!n.backward || grads_[static_cast<size_t>(i)].empty()) continue;
            n.backward(grads_[static_cast<size_t>(i)], *this);
        }
    }

    // Accumulated gradient for a tensor; zeros if it never joined the tape.
    std::vector<double> grad(const Tensor& t) const {
        int id = -1;
        if (t.node >= 0 && t.tape == this) {
            id = t.node;
        } else {
            auto it = leaves_.find(t.store.get());
            if (it != leaves_.end()) id = it->second;
        }
        if (id < 0 || grads_[static_cast<size_t>(id)].empty())
            return std::vector<double>(t.size(), 0.0);
        return grads_[static_cast<size_t>(id)];
    }

    size_t node_count() const { return nodes_.size(); }
    const std::vector<int>& parents_of(int id) const { return nodes_[static_cast<size_t>(id)].parents; }

private:
    struct Node {
        std::vector<int> parents;
        BackwardFn backward; // null for leaves
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    std::unordered_map<const void*, int> leaves_;
    bool ran_backward_ = false;
};

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
}

inline void check_axis(const char* op, const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for shape " + shape_str(x.shape));
}

// Splits shape around `axis` into outer * n * inner extents.
inline void axis_extents(const Shape& s, int axis, size_t& outer, size_t& n, size_t& inner) {
    outer = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s[i]);
    n = static_cast<size_t>(s[axis]);
    inner = 1;
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= static_cast<size_t>(s[i]);
}

} // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    detail::check_same_shape("add", a, b);
    Tensor out(a.shape);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
    if (tape && (a.requires_grad || b.requires_grad)) {
        int ia = tape->input_id(a), ib = tape->input_id(b);
        size_t n = out.size();
        out.node = tape->emit({ia, ib}, [=](const std::vector<double>& g, Tape& t) {
            if (ia >= 0) {
                auto& ga = t.grad_buf(ia, n);
                for (size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (ib >= 0) {
                auto& gb = t.grad_buf(ib, n);
                for (size_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    detail::check_same_shape("sub", a, b);
    Tensor out(a.shape);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
    if (tape && (a.requires_grad || b.requires_grad)) {
        int ia = tape->input_id(a), ib = tape->input_id(b);
        size_t n = out.size();
        out.node = tape->emit({ia, ib}, [=](const std::vector<double>& g, Tape& t) {
            if (ia >= 0) {
                auto& ga = t.grad_buf(ia, n);
                for (size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (ib >= 0) {
                auto& gb = t.grad_buf(ib, n);
                for (size_t i = 0; i < n; ++i) gb[i] -= g[i];
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    detail::check_same_shape("mul", a, b);
    Tensor out(a.shape);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
    if (tape && (a.requires_grad || b.requires_grad)) {
        int ia = tape->input_id(a), ib = tape->input_id(b);
        auto as = a.store;
        auto bs = b.store;
        size_t n = out.size();
        out.node = tape->emit({ia, ib}, [=](const std::vector<double>& g, Tape& t) {
            if (ia >= 0) {
                auto& ga = t.grad_buf(ia, n);
                const double* pbv = bs->data();
                for (size_t i = 0; i < n; ++i) ga[i] += g[i] * pbv[i];
            }
            if (ib >= 0) {
                auto& gb = t.grad_buf(ib, n);
                const double* pav = as->data();
                for (size_t i = 0; i < n; ++i) gb[i] += g[i] * pav[i];
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// out = s * x for a plain scalar s.
inline Tensor scale(const Tensor& x, double s, Tape* tape = nullptr) {
    Tensor out(x.shape);
    const double* px = x.data();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); ++i) po[i] = s * px[i];
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        size_t n = out.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, n);
            for (size_t i = 0; i < n; ++i) gx[i] += s * g[i];
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

inline Tensor add_scalar(const Tensor& x, double c, Tape* tape = nullptr) {
    Tensor out(x.shape);
    const double* px = x.data();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); ++i) po[i] = px[i] + c;
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        size_t n = out.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, n);
            for (size_t i = 0; i < n; ++i) gx[i] += g[i];
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// out = s * x where s is a trainable scalar tensor (fusion branch weights).
inline Tensor smul(const Tensor& s, const Tensor& x, Tape* tape = nullptr) {
    if (s.size() != 1) throw DimensionError("smul: scalar operand has shape " + shape_str(s.shape));
    Tensor out(x.shape);
    double sv = (*s.store)[0];
    const double* px = x.data();
    double* po = out.data();
    for (size_t i = 0; i < out.size(); ++i) po[i] = sv * px[i];
    if (tape && (s.requires_grad || x.requires_grad)) {
        int is = tape->input_id(s), ix = tape->input_id(x);
        auto ss = s.store;
        auto xs = x.store;
        size_t n = out.size();
        out.node = tape->emit({is, ix}, [=](const std::vector<double>& g, Tape& t) {
            if (is >= 0) {
                auto& gs = t.grad_buf(is, 1);
                const double* pxv = xs->data();
                double acc = 0.0;
                for (size_t i = 0; i < n; ++i) acc += g[i] * pxv[i];
                gs[0] += acc;
            }
            if (ix >= 0) {
                auto& gx = t.grad_buf(ix, n);
                double sval = (*ss)[0];
                for (size_t i = 0; i < n; ++i) gx[i] += sval * g[i];
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

inline Tensor gelu(const Tensor& x, Tape* tape = nullptr) {
    Tensor out(x.shape);
    const double* px = x.data();
    double* po = out.data();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (size_t i = 0; i < out.size(); ++i)
        po[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * inv_sqrt2));
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        auto xs = x.store;
        size_t n = out.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, n);
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            const double* pxv = xs->data();
            for (size_t i = 0; i < n; ++i) {
                double v = pxv[i];
                double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// ---- matrix products --------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                             shape_str(b.shape));
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out({m, n});
    const double* A = a.data();
    const double* B = b.data();
    double* C = out.data();
    for (int i = 0; i < m; ++i) {
        double* crow = C + static_cast<size_t>(i) * n;
        const double* arow = A + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            double av = arow[p];
            const double* brow = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    if (tape && (a.requires_grad || b.requires_grad)) {
        int ia = tape->input_id(a), ib = tape->input_id(b);
        auto as = a.store;
        auto bs = b.store;
        out.node = tape->emit({ia, ib}, [=](const std::vector<double>& g, Tape& t) {
            if (ia >= 0) { // dA = g . B^T
                auto& ga = t.grad_buf(ia, static_cast<size_t>(m) * k);
                const double* Bv = bs->data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g.data() + static_cast<size_t>(i) * n;
                    double* garow = ga.data() + static_cast<size_t>(i) * k;
                    for (int p = 0; p < k; ++p) {
                        const double* brow = Bv + static_cast<size_t>(p) * n;
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        garow[p] += s;
                    }
                }
            }
            if (ib >= 0) { // dB = A^T . g
                auto& gb = t.grad_buf(ib, static_cast<size_t>(k) * n);
                const double* Av = as->data();
                for (int i = 0; i < m; ++i) {
                    const double* arow = Av + static_cast<size_t>(i) * k;
                    const double* grow = g.data() + static_cast<size_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        double av = arow[p];
                        double* gbrow = gb.data() + static_cast<size_t>(p) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// Batched matmul over matching leading dim: [N,m,k] x [N,k,n] -> [N,m,n].
inline Tensor bmm(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    if (a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1])
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape) + " x " +
                             shape_str(b.shape));
    const int N = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2];
    Tensor out({N, m, n});
    const size_t astep = static_cast<size_t>(m) * k;
    const size_t bstep = static_cast<size_t>(k) * n;
    const size_t ostep = static_cast<size_t>(m) * n;
    for (int t = 0; t < N; ++t) {
        const double* A = a.data() + t * astep;
        const double* B = b.data() + t * bstep;
        double* C = out.data() + t * ostep;
        for (int i = 0; i < m; ++i) {
            double* crow = C + static_cast<size_t>(i) * n;
            const double* arow = A + static_cast<size_t>(i) * k;
            for (int p = 0; p < k; ++p) {
                double av = arow[p];
                const double* brow = B + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    if (tape && (a.requires_grad || b.requires_grad)) {
        int ia = tape->input_id(a), ib = tape->input_id(b);
        auto as = a.store;
        auto bs = b.store;
        out.node = tape->emit({ia, ib}, [=](const std::vector<double>& g, Tape& tp) {
            if (ia >= 0) {
                auto& ga = tp.grad_buf(ia, static_cast<size_t>(N) * astep);
                const double* Bv = bs->data();
                for (int t = 0; t < N; ++t) {
                    const double* G = g.data() + t * ostep;
                    const double* B = Bv + t * bstep;
                    double* GA = ga.data() + t * astep;
                    for (int i = 0; i < m; ++i) {
                        const double* grow = G + static_cast<size_t>(i) * n;
                        double* garow = GA + static_cast<size_t>(i) * k;
                        for (int p = 0; p < k; ++p) {
                            const double* brow = B + static_cast<size_t>(p) * n;
                            double s = 0.0;
                            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                            garow[p] += s;
                        }
                    }
                }
            }
            if (ib >= 0) {
                auto& gb = tp.grad_buf(ib, static_cast<size_t>(N) * bstep);
                const double* Av = as->data();
                for (int t = 0; t < N; ++t) {
                    const double* G = g.data() + t * ostep;
                    const double* A = Av + t * astep;
                    double* GB = gb.data() + t * bstep;
                    for (int i = 0; i < m; ++i) {
                        const double* arow = A + static_cast<size_t>(i) * k;
                        const double* grow = G + static_cast<size_t>(i) * n;
                        for (int p = 0; p < k; ++p) {
                            double av = arow[p];
                            double* gbrow = GB + static_cast<size_t>(p) * n;
                            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                        }
                    }
                }
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// Adds bias vector b[c] to each row of x[r,c] (the one sanctioned broadcast
// besides scalar-times-tensor).
inline Tensor add_row_bias(const Tensor& x, const Tensor& b, Tape* tape = nullptr) {
    if (x.rank() != 2 || b.rank() != 1 || x.shape[1] != b.shape[0])
        throw DimensionError("add_row_bias: incompatible shapes " + shape_str(x.shape) + " + " +
                             shape_str(b.shape));
    const int r = x.shape[0], c = x.shape[1];
    Tensor out({r, c});
    const double* px = x.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) po[static_cast<size_t>(i) * c + j] = px[static_cast<size_t>(i) * c + j] + pb[j];
    if (tape && (x.requires_grad || b.requires_grad)) {
        int ix = tape->input_id(x), ib = tape->input_id(b);
        out.node = tape->emit({ix, ib}, [=](const std::vector<double>& g, Tape& t) {
            if (ix >= 0) {
                auto& gx = t.grad_buf(ix, static_cast<size_t>(r) * c);
                for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
            }
            if (ib >= 0) {
                auto& gb = t.grad_buf(ib, static_cast<size_t>(c));
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * c + j];
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// ---- shape ops ---------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape, Tape* tape = nullptr) {
    check_shape_valid(new_shape, "reshape");
    if (shape_numel(new_shape) != x.size())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape) + " as " +
                             shape_str(new_shape));
    Tensor out(std::move(new_shape), *x.store);
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        size_t n = out.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, n);
            for (size_t i = 0; i < n; ++i) gx[i] += g[i];
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

namespace detail {

// Copies x into a buffer laid out with axes a0 and a1 swapped.
inline void transpose_copy(const Shape& in_shape, const double* src, int a0, int a1, double* dst) {
    const int rank = static_cast<int>(in_shape.size());
    Shape out_shape = in_shape;
    std::swap(out_shape[a0], out_shape[a1]);
    std::vector<size_t> istr = row_major_strides(in_shape);
    std::vector<size_t> map(static_cast<size_t>(rank)); // out axis -> in stride
    for (int r = 0; r < rank; ++r) map[static_cast<size_t>(r)] = istr[static_cast<size_t>(r)];
    std::swap(map[static_cast<size_t>(a0)], map[static_cast<size_t>(a1)]);
    std::vector<int> idx(static_cast<size_t>(rank), 0);
    size_t total = shape_numel(in_shape);
    size_t src_off = 0;
    for (size_t f = 0; f < total; ++f) {
        dst[f] = src[src_off];
        for (int r = rank - 1; r >= 0; --r) {
            idx[static_cast<size_t>(r)]++;
            src_off += map[static_cast<size_t>(r)];
            if (idx[static_cast<size_t>(r)] < out_shape[static_cast<size_t>(r)]) break;
            src_off -= map[static_cast<size_t>(r)] * static_cast<size_t>(out_shape[static_cast<size_t>(r)]);
            idx[static_cast<size_t>(r)] = 0;
        }
    }
}

} // namespace detail

inline Tensor transpose(const Tensor& x, int a0, int a1, Tape* tape = nullptr) {
    detail::check_axis("transpose", x, a0);
    detail::check_axis("transpose", x, a1);
    Shape os = x.shape;
    std::swap(os[a0], os[a1]);
    Tensor out(os);
    detail::transpose_copy(x.shape, x.data(), a0, a1, out.data());
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        Shape out_shape = os;
        size_t n = out.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, n);
            std::vector<double> gt(n);
            detail::transpose_copy(out_shape, g.data(), a0, a1, gt.data());
            for (size_t i = 0; i < n; ++i) gx[i] += gt[i];
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis, Tape* tape = nullptr) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Tensor& first = parts.front();
    detail::check_axis("concat", first, axis);
    Shape os = first.shape;
    int total_axis = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != first.rank())
            throw DimensionError("concat: rank mismatch " + shape_str(first.shape) + " vs " +
                                 shape_str(p.shape));
        for (int r = 0; r < first.rank(); ++r)
            if (r != axis && p.shape[r] != first.shape[r])
                throw DimensionError("concat: shape mismatch " + shape_str(first.shape) + " vs " +
                                     shape_str(p.shape));
        total_axis += p.shape[axis];
    }
    os[axis] = total_axis;
    Tensor out(os);
    size_t outer, n_out, inner;
    detail::axis_extents(os, axis, outer, n_out, inner);
    size_t at = 0;
    bool any_grad = false;
    std::vector<int> ids;
    std::vector<size_t> offsets, counts;
    for (const Tensor& p : parts) {
        size_t np = static_cast<size_t>(p.shape[axis]);
        for (size_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * n_out + at) * inner, p.data() + o * np * inner,
                        np * inner * sizeof(double));
        if (tape && p.requires_grad) any_grad = true;
        offsets.push_back(at);
        counts.push_back(np);
        at += np;
    }
    if (tape && any_grad) {
        for (const Tensor& p : parts) ids.push_back(tape->input_id(p));
        out.node = tape->emit(std::vector<int>(ids), [=](const std::vector<double>& g, Tape& t) {
            for (size_t pi = 0; pi < ids.size(); ++pi) {
                if (ids[pi] < 0) continue;
                size_t np = counts[pi];
                auto& gp = t.grad_buf(ids[pi], outer * np * inner);
                for (size_t o = 0; o < outer; ++o) {
                    const double* src = g.data() + (o * n_out + offsets[pi]) * inner;
                    double* dst = gp.data() + o * np * inner;
                    for (size_t i = 0; i < np * inner; ++i) dst[i] += src[i];
                }
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

inline Tensor slice(const Tensor& x, int axis, int start, int len, Tape* tape = nullptr) {
    detail::check_axis("slice", x, axis);
    if (start < 0 || len < 1 || start + len > x.shape[axis])
        throw DimensionError("slice: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of bounds for shape " +
                             shape_str(x.shape) + " axis " + std::to_string(axis));
    Shape os = x.shape;
    os[axis] = len;
    Tensor out(os);
    size_t outer, n_in, inner;
    detail::axis_extents(x.shape, axis, outer, n_in, inner);
    for (size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * static_cast<size_t>(len) * inner,
                    x.data() + (o * n_in + static_cast<size_t>(start)) * inner,
                    static_cast<size_t>(len) * inner * sizeof(double));
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        size_t xn = x.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, xn);
            for (size_t o = 0; o < outer; ++o) {
                const double* src = g.data() + o * static_cast<size_t>(len) * inner;
                double* dst = gx.data() + (o * n_in + static_cast<size_t>(start)) * inner;
                for (size_t i = 0; i < static_cast<size_t>(len) * inner; ++i) dst[i] += src[i];
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// Replicates x n times along a new leading axis: shape becomes [n, ...x].
inline Tensor tile0(const Tensor& x, int n, Tape* tape = nullptr) {
    if (n < 1) throw DimensionError("tile0: count must be positive");
    Shape os;
    os.push_back(n);
    for (int d : x.shape) os.push_back(d);
    Tensor out(os);
    size_t block = x.size();
    for (int i = 0; i < n; ++i)
        std::memcpy(out.data() + static_cast<size_t>(i) * block, x.data(), block * sizeof(double));
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, block);
            for (int i = 0; i < n; ++i) {
                const double* src = g.data() + static_cast<size_t>(i) * block;
                for (size_t j = 0; j < block; ++j) gx[j] += src[j];
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// ---- reductions ----------------------------------------------------------------

inline Tensor sum_all(const Tensor& x, Tape* tape = nullptr) {
    double s = 0.0;
    const double* px = x.data();
    for (size_t i = 0; i < x.size(); ++i) s += px[i];
    Tensor out = Tensor::scalar(s);
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        size_t n = x.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, n);
            for (size_t i = 0; i < n; ++i) gx[i] += g[0];
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

namespace detail {

inline Shape drop_axis(const Shape& s, int axis) {
    Shape os;
    for (int i = 0; i < static_cast<int>(s.size()); ++i)
        if (i != axis) os.push_back(s[i]);
    if (os.empty()) os.push_back(1);
    return os;
}

} // namespace detail

inline Tensor mean(const Tensor& x, int axis, Tape* tape = nullptr) {
    detail::check_axis("mean", x, axis);
    size_t outer, n, inner;
    detail::axis_extents(x.shape, axis, outer, n, inner);
    Tensor out(detail::drop_axis(x.shape, axis));
    const double* px = x.data();
    double* po = out.data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
            double s = 0.0;
            for (size_t j = 0; j < n; ++j) s += px[(o * n + j) * inner + i];
            po[o * inner + i] = s / static_cast<double>(n);
        }
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        size_t xn = x.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, xn);
            double invn = 1.0 / static_cast<double>(n);
            for (size_t o = 0; o < outer; ++o)
                for (size_t j = 0; j < n; ++j)
                    for (size_t i = 0; i < inner; ++i) gx[(o * n + j) * inner + i] += g[o * inner + i] * invn;
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// Population variance along an axis.
inline Tensor var(const Tensor& x, int axis, Tape* tape = nullptr) {
    detail::check_axis("var", x, axis);
    size_t outer, n, inner;
    detail::axis_extents(x.shape, axis, outer, n, inner);
    Tensor out(detail::drop_axis(x.shape, axis));
    const double* px = x.data();
    double* po = out.data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
            double s = 0.0;
            for (size_t j = 0; j < n; ++j) s += px[(o * n + j) * inner + i];
            double mu = s / static_cast<double>(n);
            double v = 0.0;
            for (size_t j = 0; j < n; ++j) {
                double d = px[(o * n + j) * inner + i] - mu;
                v += d * d;
            }
            po[o * inner + i] = v / static_cast<double>(n);
        }
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        auto xs = x.store;
        size_t xn = x.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, xn);
            const double* pxv = xs->data();
            double invn = 1.0 / static_cast<double>(n);
            for (size_t o = 0; o < outer; ++o)
                for (size_t i = 0; i < inner; ++i) {
                    double s = 0.0;
                    for (size_t j = 0; j < n; ++j) s += pxv[(o * n + j) * inner + i];
                    double mu = s * invn;
                    double go = g[o * inner + i];
                    for (size_t j = 0; j < n; ++j)
                        gx[(o * n + j) * inner + i] += go * 2.0 * (pxv[(o * n + j) * inner + i] - mu) * invn;
                }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// ---- softmax --------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, int axis, Tape* tape = nullptr) {
    detail::check_axis("softmax", x, axis);
    size_t outer, n, inner;
    detail::axis_extents(x.shape, axis, outer, n, inner);
    Tensor out(x.shape);
    const double* px = x.data();
    double* po = out.data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (size_t j = 0; j < n; ++j) mx = std::max(mx, px[(o * n + j) * inner + i]);
            double z = 0.0;
            for (size_t j = 0; j < n; ++j) {
                double e = std::exp(px[(o * n + j) * inner + i] - mx);
                po[(o * n + j) * inner + i] = e;
                z += e;
            }
            for (size_t j = 0; j < n; ++j) po[(o * n + j) * inner + i] /= z;
        }
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        auto os_store = out.store;
        size_t xn = x.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, xn);
            const double* y = os_store->data();
            for (size_t o = 0; o < outer; ++o)
                for (size_t i = 0; i < inner; ++i) {
                    double dot = 0.0;
                    for (size_t j = 0; j < n; ++j) dot += g[(o * n + j) * inner + i] * y[(o * n + j) * inner + i];
                    for (size_t j = 0; j < n; ++j) {
                        size_t at = (o * n + j) * inner + i;
                        gx[at] += y[at] * (g[at] - dot);
                    }
                }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

// ---- 3D patch extraction -----------------------------------------------------------

// Extracts sliding 3D blocks from x[C,D,W,H] into rows of a matrix:
// row r = output position (d-major, then w, then h); within a row, values are
// ordered channel-major then (kd, kw, kh). Out-of-bounds taps read zero.
inline Tensor unfold3d(const Tensor& x, int kd, int kw, int kh, int sd, int sw, int sh, int pd,
                       int pw, int ph, Tape* tape = nullptr) {
    if (x.rank() != 4)
        throw DimensionError("unfold3d: expected rank-4 [C,D,W,H], got " + shape_str(x.shape));
    if (kd < 1 || kw < 1 || kh < 1 || sd < 1 || sw < 1 || sh < 1 || pd < 0 || pw < 0 || ph < 0)
        throw ConfigError("unfold3d: invalid kernel/stride/padding");
    const int C = x.shape[0], D = x.shape[1], W = x.shape[2], H = x.shape[3];
    if (D + 2 * pd < kd || W + 2 * pw < kw || H + 2 * ph < kh)
        throw InputTooSmallError("unfold3d: input " + shape_str(x.shape) +
                                 " smaller than kernel (" + std::to_string(kd) + "," +
                                 std::to_string(kw) + "," + std::to_string(kh) + ")");
    const int od = (D + 2 * pd - kd) / sd + 1;
    const int ow = (W + 2 * pw - kw) / sw + 1;
    const int oh = (H + 2 * ph - kh) / sh + 1;
    const int rows = od * ow * oh;
    const int cols = C * kd * kw * kh;
    Tensor out({rows, cols});
    const double* px = x.data();
    double* po = out.data();
    auto xat = [&](int c, int d, int w, int h) {
        return px[((static_cast<size_t>(c) * D + d) * W + w) * H + h];
    };
    size_t r = 0;
    for (int zd = 0; zd < od; ++zd)
        for (int zw = 0; zw < ow; ++zw)
            for (int zh = 0; zh < oh; ++zh, ++r) {
                double* row = po + r * cols;
                size_t cidx = 0;
                for (int c = 0; c < C; ++c)
                    for (int id = 0; id < kd; ++id) {
                        int d = zd * sd - pd + id;
                        for (int iw = 0; iw < kw; ++iw) {
                            int w = zw * sw - pw + iw;
                            for (int ih = 0; ih < kh; ++ih, ++cidx) {
                                int h = zh * sh - ph + ih;
                                bool in = d >= 0 && d < D && w >= 0 && w < W && h >= 0 && h < H;
                                row[cidx] = in ? xat(c, d, w, h) : 0.0;
                            }
                        }
                    }
            }
    if (tape && x.requires_grad) {
        int ix = tape->input_id(x);
        size_t xn = x.size();
        out.node = tape->emit({ix}, [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad_buf(ix, xn);
            size_t r = 0;
            for (int zd = 0; zd < od; ++zd)
                for (int zw = 0; zw < ow; ++zw)
                    for (int zh = 0; zh < oh; ++zh, ++r) {
                        const double* row = g.data() + r * cols;
                        size_t cidx = 0;
                        for (int c = 0; c < C; ++c)
                            for (int id = 0; id < kd; ++id) {
                                int d = zd * sd - pd + id;
                                for (int iw = 0; iw < kw; ++iw) {
                                    int w = zw * sw - pw + iw;
                                    for (int ih = 0; ih < kh; ++ih, ++cidx) {
                                        int h = zh * sh - ph + ih;
                                        if (d >= 0 && d < D && w >= 0 && w < W && h >= 0 && h < H)
                                            gx[((static_cast<size_t>(c) * D + d) * W + w) * H + h] += row[cidx];
                                    }
                                }
                            }
                    }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

} // namespace transop
