#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "hvdet/rng.hpp"
#include "hvdet/tensor.hpp"

namespace hvdet::ad {

// ---------------------------------------------------------------------------
// Raw tensor kernels (no graph recording). Shared by forward and backward.
// ---------------------------------------------------------------------------

/// C = A[m,k] * B[k,n]
inline Tensor t_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) throw std::invalid_argument("matmul: inner dims mismatch");
    Tensor c({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = pa[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = pb + p * n;
            double* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    return c;
}

/// C = A[m,n] * B[k,n]^T -> [m,k]
inline Tensor t_matmul_nt(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), n = a.cols(), k = b.rows();
    if (b.cols() != n) throw std::invalid_argument("matmul_nt: dims mismatch");
    Tensor c({m, k});
    double* crow = c.data();
    for (std::size_t i = 0; i < m; ++i, crow += k) {
        const double* arow = a.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b.data() + p * n;
            // four independent accumulators so the dot product pipelines
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4) {
                s0 += arow[j] * brow[j];
                s1 += arow[j + 1] * brow[j + 1];
                s2 += arow[j + 2] * brow[j + 2];
                s3 += arow[j + 3] * brow[j + 3];
            }
            for (; j < n; ++j) s0 += arow[j] * brow[j];
            crow[p] = (s0 + s1) + (s2 + s3);
        }
    }
    return c;
}

/// C = A[k,m]^T * B[k,n] -> [m,n]
inline Tensor t_matmul_tn(const Tensor& a, const Tensor& b) {
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    if (b.rows() != k) throw std::invalid_argument("matmul_tn: dims mismatch");
    Tensor c({m, n});
    for (std::size_t i = 0; i < k; ++i) {
        const double* arow = a.data() + i * m;
        const double* brow = b.data() + i * n;
        for (std::size_t p = 0; p < m; ++p) {
            const double aip = arow[p];
            if (aip == 0.0) continue;
            double* crow = c.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;                 // allocated on first accumulation
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward;

    void accumulate(const Tensor& g) {
        if (!requires_grad) return;
        if (grad.numel() == 0) grad = Tensor(value.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) grad[i] += g[i];
    }
};

/// When set, ops compute values but record nothing (inference / benchmarks).
inline bool& no_grad_flag() {
    thread_local bool f = false;
    return f;
}

struct NoGradGuard {
    NoGradGuard() : prev_(no_grad_flag()) { no_grad_flag() = true; }
    ~NoGradGuard() { no_grad_flag() = prev_; }
    bool prev_;
};

/// Records the piecewise decisions of the non-smooth ops (relu gates, abs
/// signs, clamp/min/max selections) on one evaluation and replays them on
/// later evaluations. Finite-difference checks replay the tape so the probed
/// function is the smooth local linearization, whose exact gradient is what
/// the backward pass computes; without this, a difference step that crosses a
/// kink produces a spurious mismatch.
struct BranchTape {
    bool recording = true;
    std::vector<Tensor> records;
    std::size_t cursor = 0;

    /// Record `fresh` or return the previously recorded decision for this call.
    const Tensor& step(Tensor fresh) {
        if (recording) {
            records.push_back(std::move(fresh));
            return records.back();
        }
        if (cursor >= records.size()) throw std::runtime_error("branch tape exhausted");
        return records[cursor++];
    }

    void replay() {
        recording = false;
        cursor = 0;
    }
    void rewind() { cursor = 0; }
};

inline BranchTape*& branch_tape() {
    thread_local BranchTape* t = nullptr;
    return t;
}

struct BranchTapeGuard {
    explicit BranchTapeGuard(BranchTape* t) : prev_(branch_tape()) { branch_tape() = t; }
    ~BranchTapeGuard() { branch_tape() = prev_; }
    BranchTape* prev_;
};

inline Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

/// Trainable leaf.
inline Var leaf(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return n;
}

inline Var make(Tensor v, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    if (!no_grad_flag()) {
        for (const auto& p : parents)
            if (p->requires_grad) { n->requires_grad = true; break; }
        if (n->requires_grad) {
            n->parents = std::move(parents);
            n->backward = std::move(bw);
        }
    }
    return n;
}

/// Reverse-mode sweep from a scalar root.
inline void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    // iterative topological order
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.push_back({root.get(), 0});
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx == 0 && visited.count(n)) { stack.pop_back(); continue; }
        visited.insert(n);
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (!visited.count(p) && p->requires_grad) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->accumulate(Tensor::scalar(1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.numel() != 0) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise / arithmetic ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        n.parents[0]->accumulate(n.grad);
        n.parents[1]->accumulate(n.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        n.parents[0]->accumulate(n.grad);
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = -g[i];
        n.parents[1]->accumulate(g);
    });
}

inline Var mul(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        Tensor ga = n.grad, gb = n.grad;
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        for (std::size_t i = 0; i < ga.numel(); ++i) { ga[i] *= bv[i]; gb[i] *= av[i]; }
        n.parents[0]->accumulate(ga);
        n.parents[1]->accumulate(gb);
    });
}

inline Var div(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("div: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= b->value[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        Tensor ga = n.grad, gb = n.grad;
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        for (std::size_t i = 0; i < ga.numel(); ++i) {
            ga[i] /= bv[i];
            gb[i] *= -av[i] / (bv[i] * bv[i]);
        }
        n.parents[0]->accumulate(ga);
        n.parents[1]->accumulate(gb);
    });
}

inline Var scale(const Var& a, double c) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return make(std::move(out), {a}, [c](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= c;
        n.parents[0]->accumulate(g);
    });
}

inline Var add_scalar(const Var& a, double c) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c;
    return make(std::move(out), {a}, [](Node& n) { n.parents[0]->accumulate(n.grad); });
}

/// a[m,n] + broadcast row b[1,n]
inline Var add_rowvec(const Var& a, const Var& b) {
    const std::size_t m = a->value.rows(), n = a->value.cols();
    if (b->value.numel() != n) throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b->value[j];
    return make(std::move(out), {a, b}, [m, n](Node& node) {
        node.parents[0]->accumulate(node.grad);
        Tensor gb(node.parents[1]->value.shape());
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += node.grad[i * n + j];
        node.parents[1]->accumulate(gb);
    });
}

inline Var relu(const Var& a) {
    Tensor mask(a->value.shape());
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = a->value[i] > 0.0 ? 1.0 : 0.0;
    if (BranchTape* t = branch_tape()) mask = t->step(std::move(mask));
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
    return make(std::move(out), {a}, [mask](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= mask[i];
        n.parents[0]->accumulate(g);
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    Tensor saved = out;
    return make(std::move(out), {a}, [saved](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= saved[i] * (1.0 - saved[i]);
        n.parents[0]->accumulate(g);
    });
}

inline Var vlog(const Var& a) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    return make(std::move(out), {a}, [](Node& n) {
        Tensor g = n.grad;
        const Tensor& x = n.parents[0]->value;
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] /= x[i];
        n.parents[0]->accumulate(g);
    });
}

inline Var vabs(const Var& a) {
    Tensor sign(a->value.shape());
    for (std::size_t i = 0; i < sign.numel(); ++i)
        sign[i] = (a->value[i] > 0.0) ? 1.0 : (a->value[i] < 0.0 ? -1.0 : 0.0);
    if (BranchTape* t = branch_tape()) sign = t->step(std::move(sign));
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= sign[i];
    return make(std::move(out), {a}, [sign](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= sign[i];
        n.parents[0]->accumulate(g);
    });
}

/// Gradient passes through strictly inside [lo, hi], zero outside.
inline Var clamp(const Var& a, double lo, double hi) {
    Tensor mask(a->value.shape());
    for (std::size_t i = 0; i < mask.numel(); ++i)
        mask[i] = (a->value[i] > lo && a->value[i] < hi) ? 1.0 : 0.0;
    if (BranchTape* t = branch_tape()) mask = t->step(std::move(mask));
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i)
        if (mask[i] == 0.0) out[i] = std::min(hi, std::max(lo, out[i]));
    return make(std::move(out), {a}, [mask](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= mask[i];
        n.parents[0]->accumulate(g);
    });
}

/// Elementwise selection helper behind minimum/maximum: out = m*a + (1-m)*b.
inline Var select(const Var& a, const Var& b, Tensor mask) {
    if (BranchTape* t = branch_tape()) mask = t->step(std::move(mask));
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = mask[i] != 0.0 ? a->value[i] : b->value[i];
    return make(std::move(out), {a, b}, [mask](Node& n) {
        Tensor ga = n.grad, gb = n.grad;
        for (std::size_t i = 0; i < ga.numel(); ++i) {
            if (mask[i] != 0.0) gb[i] = 0.0; else ga[i] = 0.0;
        }
        n.parents[0]->accumulate(ga);
        n.parents[1]->accumulate(gb);
    });
}

inline Var minimum(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("minimum: shape mismatch");
    Tensor mask(a->value.shape());
    for (std::size_t i = 0; i < mask.numel(); ++i)
        mask[i] = a->value[i] <= b->value[i] ? 1.0 : 0.0;
    return select(a, b, std::move(mask));
}

inline Var maximum(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("maximum: shape mismatch");
    Tensor mask(a->value.shape());
    for (std::size_t i = 0; i < mask.numel(); ++i)
        mask[i] = a->value[i] >= b->value[i] ? 1.0 : 0.0;
    return select(a, b, std::move(mask));
}

// ---------------------------------------------------------------------------
// Matrix / structural ops
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    return make(t_matmul(a->value, b->value), {a, b}, [](Node& n) {
        n.parents[0]->accumulate(t_matmul_nt(n.grad, n.parents[1]->value));
        n.parents[1]->accumulate(t_matmul_tn(n.parents[0]->value, n.grad));
    });
}

/// A[m,k] * B[n,k]^T
inline Var matmul_nt(const Var& a, const Var& b) {
    return make(t_matmul_nt(a->value, b->value), {a, b}, [](Node& n) {
        n.parents[0]->accumulate(t_matmul(n.grad, n.parents[1]->value));
        n.parents[1]->accumulate(t_matmul_tn(n.grad, n.parents[0]->value));
    });
}

/// x[m,in] * w[out,in]^T + b[out], fused so the bias add costs no extra
/// full-size temporary.
inline Var affine(const Var& x, const Var& w, const Var& b) {
    const std::size_t m = x->value.rows(), n = x->value.cols(), k = w->value.rows();
    if (w->value.cols() != n) throw std::invalid_argument("affine: dims mismatch");
    if (b->value.numel() != k) throw std::invalid_argument("affine: bias width mismatch");
    Tensor c = t_matmul_nt(x->value, w->value);
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) crow[p] += b->value[p];
    }
    return make(std::move(c), {x, w, b}, [m, k](Node& n) {
        n.parents[0]->accumulate(t_matmul(n.grad, n.parents[1]->value));
        n.parents[1]->accumulate(t_matmul_tn(n.grad, n.parents[0]->value));
        Tensor gb(n.parents[2]->value.shape());
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) gb[p] += n.grad[i * k + p];
        n.parents[2]->accumulate(gb);
    });
}

inline Var softmax_rows(const Var& a) {
    const std::size_t m = a->value.rows(), n = a->value.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = a->value.data() + i * n;
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(x[j] - mx);
            z += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    Tensor saved;
    if (!no_grad_flag()) saved = out;  // backward needs the probabilities
    return make(std::move(out), {a}, [saved, m, n](Node& node) {
        Tensor g({m, n});
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                dot += node.grad[i * n + j] * saved[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                g[i * n + j] = saved[i * n + j] * (node.grad[i * n + j] - dot);
        }
        node.parents[0]->accumulate(g);
    });
}

inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
    return make(Tensor::scalar(s), {a}, [](Node& n) {
        Tensor g(n.parents[0]->value.shape(), n.grad[0]);
        n.parents[0]->accumulate(g);
    });
}

inline Var mean_all(const Var& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

/// Gather rows of a [m,n] matrix; backward scatter-adds.
inline Var rows(const Var& a, std::vector<std::size_t> idx) {
    const std::size_t n = a->value.cols();
    Tensor out({idx.size(), n});
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = a->value.at(idx[r], j);
    return make(std::move(out), {a}, [idx, n](Node& node) {
        Tensor g(node.parents[0]->value.shape());
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < n; ++j)
                g[idx[r] * n + j] += node.grad[r * n + j];
        node.parents[0]->accumulate(g);
    });
}

inline Var row(const Var& a, std::size_t i) { return rows(a, {i}); }

inline Var stack_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("stack_rows: empty");
    const std::size_t n = parts[0]->value.numel();
    Tensor out({parts.size(), n});
    for (std::size_t r = 0; r < parts.size(); ++r) {
        if (parts[r]->value.numel() != n) throw std::invalid_argument("stack_rows: width mismatch");
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = parts[r]->value[j];
    }
    return make(std::move(out), parts, [n](Node& node) {
        for (std::size_t r = 0; r < node.parents.size(); ++r) {
            Tensor g(node.parents[r]->value.shape());
            for (std::size_t j = 0; j < n; ++j) g[j] = node.grad[r * n + j];
            node.parents[r]->accumulate(g);
        }
    });
}

inline Var concat_cols(const Var& a, const Var& b) {
    const std::size_t m = a->value.rows(), na = a->value.cols(), nb = b->value.cols();
    if (b->value.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    Tensor out({m, na + nb});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < na; ++j) out[i * (na + nb) + j] = a->value[i * na + j];
        for (std::size_t j = 0; j < nb; ++j) out[i * (na + nb) + na + j] = b->value[i * nb + j];
    }
    return make(std::move(out), {a, b}, [m, na, nb](Node& node) {
        Tensor ga({m, na}), gb({m, nb});
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < na; ++j) ga[i * na + j] = node.grad[i * (na + nb) + j];
            for (std::size_t j = 0; j < nb; ++j) gb[i * nb + j] = node.grad[i * (na + nb) + na + j];
        }
        node.parents[0]->accumulate(ga);
        node.parents[1]->accumulate(gb);
    });
}

inline Var slice_cols(const Var& a, std::size_t j0, std::size_t w) {
    const std::size_t m = a->value.rows(), n = a->value.cols();
    if (j0 + w > n) throw std::invalid_argument("slice_cols: out of range");
    if (j0 == 0 && w == n) return a;  // full-width slice is the identity
    Tensor out({m, w});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a->value[i * n + j0 + j];
    return make(std::move(out), {a}, [m, n, j0, w](Node& node) {
        Tensor g({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * n + j0 + j] = node.grad[i * w + j];
        node.parents[0]->accumulate(g);
    });
}

inline Var reshape(const Var& a, std::vector<std::size_t> shape) {
    Tensor out(std::move(shape), std::vector<double>(a->value.data(),
                                                     a->value.data() + a->value.numel()));
    return make(std::move(out), {a}, [](Node& n) {
        Tensor g(n.parents[0]->value.shape(),
                 std::vector<double>(n.grad.data(), n.grad.data() + n.grad.numel()));
        n.parents[0]->accumulate(g);
    });
}

/// Mean over each row of an H x W grid (flattened row-major in axis 0): [H*W, d] -> [H, d]
inline Var pool_rows(const Var& a, std::size_t H, std::size_t W) {
    const std::size_t d = a->value.cols();
    Tensor out({H, d});
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
            for (std::size_t c = 0; c < d; ++c)
                out[i * d + c] += a->value[(i * W + j) * d + c] / static_cast<double>(W);
    return make(std::move(out), {a}, [H, W, d](Node& node) {
        Tensor g({H * W, d});
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
                for (std::size_t c = 0; c < d; ++c)
                    g[(i * W + j) * d + c] = node.grad[i * d + c] / static_cast<double>(W);
        node.parents[0]->accumulate(g);
    });
}

/// Mean over each column of the grid: [H*W, d] -> [W, d]
inline Var pool_cols(const Var& a, std::size_t H, std::size_t W) {
    const std::size_t d = a->value.cols();
    Tensor out({W, d});
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
            for (std::size_t c = 0; c < d; ++c)
                out[j * d + c] += a->value[(i * W + j) * d + c] / static_cast<double>(H);
    return make(std::move(out), {a}, [H, W, d](Node& node) {
        Tensor g({H * W, d});
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
                for (std::size_t c = 0; c < d; ++c)
                    g[(i * W + j) * d + c] = node.grad[j * d + c] / static_cast<double>(H);
        node.parents[0]->accumulate(g);
    });
}

/// [C,H,W] channel-first map -> [H*W, C] position-major matrix.
inline Var chw_to_positions(const Var& a) {
    const std::size_t C = a->value.size(0), H = a->value.size(1), W = a->value.size(2);
    Tensor out({H * W, C});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
                out[(i * W + j) * C + c] = a->value.at(c, i, j);
    return make(std::move(out), {a}, [C, H, W](Node& node) {
        Tensor g({C, H, W});
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    g.at(c, i, j) = node.grad[(i * W + j) * C + c];
        node.parents[0]->accumulate(g);
    });
}

/// Layer normalization over the last axis of a [m,n] matrix, with gain/bias [n].
inline Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    const std::size_t m = x->value.rows(), n = x->value.cols();
    Tensor out({m, n});
    Tensor xhat({m, n});
    Tensor inv_std({m});
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += x->value[i * n + j];
        mu /= n;
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double dmu = x->value[i * n + j] - mu;
            var += dmu * dmu;
        }
        var /= n;
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[i] = istd;
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (x->value[i * n + j] - mu) * istd;
            out[i * n + j] = gain->value[j] * xhat[i * n + j] + bias->value[j];
        }
    }
    return make(std::move(out), {x, gain, bias}, [xhat, inv_std, m, n](Node& node) {
        Tensor gx({m, n});
        Tensor gg(node.parents[1]->value.shape());
        Tensor gb(node.parents[2]->value.shape());
        const Tensor& gv = node.parents[1]->value;
        for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double dxh = node.grad[i * n + j] * gv[j];
                s1 += dxh;
                s2 += dxh * xhat[i * n + j];
                gg[j] += node.grad[i * n + j] * xhat[i * n + j];
                gb[j] += node.grad[i * n + j];
            }
            s1 /= n;
            s2 /= n;
            for (std::size_t j = 0; j < n; ++j) {
                const double dxh = node.grad[i * n + j] * gv[j];
                gx[i * n + j] = inv_std[i] * (dxh - s1 - xhat[i * n + j] * s2);
            }
        }
        node.parents[0]->accumulate(gx);
        node.parents[1]->accumulate(gg);
        node.parents[2]->accumulate(gb);
    });
}

/// 2-D convolution, channel-first, square kernel, zero padding.
inline Var conv2d(const Var& x, const Var& w, const Var& b,
                  std::size_t stride, std::size_t pad) {
    const std::size_t C = x->value.size(0), H = x->value.size(1), W = x->value.size(2);
    const std::size_t O = w->value.size(0), kh = w->value.size(2), kw = w->value.size(3);
    if (w->value.size(1) != C) throw std::invalid_argument("conv2d: channel mismatch");
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor out({O, Ho, Wo});
    const auto widx = [C, kh, kw](std::size_t o, std::size_t c, std::size_t u, std::size_t v) {
        return ((o * C + c) * kh + u) * kw + v;
    };
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j) {
                double s = b->value[o];
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t u = 0; u < kh; ++u) {
                        const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i * stride + u) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t v = 0; v < kw; ++v) {
                            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j * stride + v) -
                                                      static_cast<std::ptrdiff_t>(pad);
                            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                            s += w->value[widx(o, c, u, v)] *
                                 x->value.at(c, static_cast<std::size_t>(ii),
                                             static_cast<std::size_t>(jj));
                        }
                    }
                out.at(o, i, j) = s;
            }
    return make(std::move(out), {x, w, b}, [C, H, W, O, kh, kw, Ho, Wo, stride, pad,
                                            widx](Node& node) {
        Tensor gx({C, H, W}), gw(node.parents[1]->value.shape()), gb({O});
        const Tensor& xv = node.parents[0]->value;
        const Tensor& wv = node.parents[1]->value;
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) {
                    const double go = node.grad.at(o, i, j);
                    if (go == 0.0) continue;
                    gb[o] += go;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t u = 0; u < kh; ++u) {
                            const std::ptrdiff_t ii =
                                static_cast<std::ptrdiff_t>(i * stride + u) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t v = 0; v < kw; ++v) {
                                const std::ptrdiff_t jj =
                                    static_cast<std::ptrdiff_t>(j * stride + v) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                                gw[widx(o, c, u, v)] +=
                                    go * xv.at(c, static_cast<std::size_t>(ii),
                                               static_cast<std::size_t>(jj));
                                gx.at(c, static_cast<std::size_t>(ii),
                                      static_cast<std::size_t>(jj)) +=
                                    go * wv[widx(o, c, u, v)];
                            }
                        }
                }
        node.parents[0]->accumulate(gx);
        node.parents[1]->accumulate(gw);
        node.parents[2]->accumulate(gb);
    });
}

/// Inverted dropout with a caller-owned deterministic stream.
inline Var dropout(const Var& a, double rate, Rng& rng) {
    if (rate <= 0.0) return a;
    Tensor mask(a->value.shape());
    const double keep = 1.0 - rate;
    for (std::size_t i = 0; i < mask.numel(); ++i)
        mask[i] = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
    return make(std::move(out), {a}, [mask](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= mask[i];
        n.parents[0]->accumulate(g);
    });
}

} // namespace hvdet::ad
