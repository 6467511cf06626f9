// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "modseg/common.hpp"

// Minimal reverse-mode autodiff on dense 2-D double tensors. Nodes live on a
// tape in creation order (a topological order), so the backward sweep is a
// single reverse pass. Everything is single-threaded and allocation-order
// deterministic. Ops skip gradient work for subgraphs that do not require it.

namespace modseg::ad {

struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}
    Tensor(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != static_cast<std::size_t>(r) * c)
            throw ContractError("Tensor: data size does not match shape");
    }

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::size_t numel() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

using VarId = std::int32_t;

class Tape {
  public:
    VarId leaf(Tensor value, bool requires_grad) {
        nodes_.push_back({std::move(value), {}, nullptr, requires_grad});
        return static_cast<VarId>(nodes_.size() - 1);
    }

    VarId constant(Tensor value) { return leaf(std::move(value), false); }

    /// Pushes a computed node. `back` may be empty for constant subgraphs.
    VarId node(Tensor value, bool requires_grad, std::function<void(Tape&)> back) {
        nodes_.push_back({std::move(value), {}, std::move(back), requires_grad});
        return static_cast<VarId>(nodes_.size() - 1);
    }

    /// Id the next pushed node will get; ops capture it in their closures.
    VarId next_id() const { return static_cast<VarId>(nodes_.size()); }

    const Tensor& val(VarId id) const { return nodes_[id].value; }
    Tensor& grad(VarId id) { return nodes_[id].grad; }
    bool requires_grad(VarId id) const { return nodes_[id].requires_grad; }

    /// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. Root must
    /// be a scalar.
    void backward(VarId root) {
        if (nodes_[root].value.numel() != 1)
            throw ContractError("backward: root must be a scalar");
        for (auto& n : nodes_) n.grad = Tensor(n.value.rows, n.value.cols, 0.0);
        nodes_[root].grad.data[0] = 1.0;
        for (std::int64_t i = static_cast<std::int64_t>(nodes_.size()) - 1; i >= 0; --i) {
            if (nodes_[i].back && nodes_[i].requires_grad) nodes_[i].back(*this);
        }
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&)> back;
        bool requires_grad;
    };
    std::vector<Node> nodes_;
};

namespace detail {

// C (n x m) += A (n x k) * B (k x m)
inline void mm_nn(const double* a, const double* b, double* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * k;
        double* cr = c + static_cast<std::size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const double av = ar[p];
            const double* br = b + static_cast<std::size_t>(p) * m;
            for (int j = 0; j < m; ++j) cr[j] += av * br[j];
        }
    }
}

// C (n x m) += A (n x k) * B^T, B stored (m x k)
inline void mm_nt(const double* a, const double* b, double* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * k;
        double* cr = c + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const double* br = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
            cr[j] += acc;
        }
    }
}

// C (n x m) += A^T * B, A stored (k x n), B stored (k x m)
inline void mm_tn(const double* a, const double* b, double* c, int n, int k, int m) {
    for (int p = 0; p < k; ++p) {
        const double* ar = a + static_cast<std::size_t>(p) * n;
        const double* br = b + static_cast<std::size_t>(p) * m;
        for (int i = 0; i < n; ++i) {
            const double av = ar[i];
            double* cr = c + static_cast<std::size_t>(i) * m;
            for (int j = 0; j < m; ++j) cr[j] += av * br[j];
        }
    }
}

inline int reflect_index(int i, int n) {
    if (i < 0) return -i - 1;
    if (i >= n) return 2 * n - 1 - i;
    return i;
}

}  // namespace detail

// ---- arithmetic ----

inline VarId add(Tape& t, VarId a, VarId b) {
    if (!t.val(a).same_shape(t.val(b))) throw ContractError("ad::add: shape mismatch");
    Tensor out = t.val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += t.val(b).data[i];
    const bool req = t.requires_grad(a) || t.requires_grad(b);
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [a, b, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        if (tp.requires_grad(a))
            for (std::size_t i = 0; i < g.numel(); ++i) tp.grad(a).data[i] += g.data[i];
        if (tp.requires_grad(b))
            for (std::size_t i = 0; i < g.numel(); ++i) tp.grad(b).data[i] += g.data[i];
    });
}

inline VarId sub(Tape& t, VarId a, VarId b) {
    if (!t.val(a).same_shape(t.val(b))) throw ContractError("ad::sub: shape mismatch");
    Tensor out = t.val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= t.val(b).data[i];
    const bool req = t.requires_grad(a) || t.requires_grad(b);
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [a, b, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        if (tp.requires_grad(a))
            for (std::size_t i = 0; i < g.numel(); ++i) tp.grad(a).data[i] += g.data[i];
        if (tp.requires_grad(b))
            for (std::size_t i = 0; i < g.numel(); ++i) tp.grad(b).data[i] -= g.data[i];
    });
}

inline VarId mul(Tape& t, VarId a, VarId b) {
    if (!t.val(a).same_shape(t.val(b))) throw ContractError("ad::mul: shape mismatch");
    Tensor out = t.val(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= t.val(b).data[i];
    const bool req = t.requires_grad(a) || t.requires_grad(b);
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [a, b, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        if (tp.requires_grad(a))
            for (std::size_t i = 0; i < g.numel(); ++i)
                tp.grad(a).data[i] += g.data[i] * tp.val(b).data[i];
        if (tp.requires_grad(b))
            for (std::size_t i = 0; i < g.numel(); ++i)
                tp.grad(b).data[i] += g.data[i] * tp.val(a).data[i];
    });
}

inline VarId scale(Tape& t, VarId a, double c) {
    Tensor out = t.val(a);
    for (double& v : out.data) v *= c;
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, c, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        for (std::size_t i = 0; i < g.numel(); ++i) tp.grad(a).data[i] += c * g.data[i];
    });
}

inline VarId add_scalar(Tape& t, VarId a, double c) {
    Tensor out = t.val(a);
    for (double& v : out.data) v += c;
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        for (std::size_t i = 0; i < g.numel(); ++i) tp.grad(a).data[i] += g.data[i];
    });
}

// ---- matrix products ----

inline VarId matmul(Tape& t, VarId a, VarId b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    if (A.cols != B.rows) throw ContractError("ad::matmul: inner dimensions differ");
    Tensor out(A.rows, B.cols, 0.0);
    detail::mm_nn(A.data.data(), B.data.data(), out.data.data(), A.rows, A.cols, B.cols);
    const bool req = t.requires_grad(a) || t.requires_grad(b);
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [a, b, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& A2 = tp.val(a);
        const Tensor& B2 = tp.val(b);
        if (tp.requires_grad(a))
            detail::mm_nt(g.data.data(), B2.data.data(), tp.grad(a).data.data(), g.rows, g.cols,
                          A2.cols);
        if (tp.requires_grad(b))
            detail::mm_tn(A2.data.data(), g.data.data(), tp.grad(b).data.data(), B2.rows, A2.rows,
                          g.cols);
    });
}

/// A (n x k) times B^T where B is stored (m x k); result n x m.
inline VarId matmul_nt(Tape& t, VarId a, VarId b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    if (A.cols != B.cols) throw ContractError("ad::matmul_nt: inner dimensions differ");
    Tensor out(A.rows, B.rows, 0.0);
    detail::mm_nt(A.data.data(), B.data.data(), out.data.data(), A.rows, A.cols, B.rows);
    const bool req = t.requires_grad(a) || t.requires_grad(b);
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [a, b, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& A2 = tp.val(a);
        const Tensor& B2 = tp.val(b);
        if (tp.requires_grad(a))
            detail::mm_nn(g.data.data(), B2.data.data(), tp.grad(a).data.data(), g.rows, g.cols,
                          B2.cols);
        if (tp.requires_grad(b))
            detail::mm_tn(g.data.data(), A2.data.data(), tp.grad(b).data.data(), g.cols, g.rows,
                          A2.cols);
    });
}

// ---- broadcasts ----

/// M (n x k) + v (1 x k) per row.
inline VarId add_rowvec(Tape& t, VarId m, VarId v) {
    const Tensor& M = t.val(m);
    const Tensor& V = t.val(v);
    if (V.rows != 1 || V.cols != M.cols) throw ContractError("ad::add_rowvec: shape mismatch");
    Tensor out = M;
    for (int i = 0; i < M.rows; ++i)
        for (int j = 0; j < M.cols; ++j) out.at(i, j) += V.at(0, j);
    const bool req = t.requires_grad(m) || t.requires_grad(v);
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [m, v, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        if (tp.requires_grad(m))
            for (std::size_t i = 0; i < g.numel(); ++i) tp.grad(m).data[i] += g.data[i];
        if (tp.requires_grad(v)) {
            Tensor& gv = tp.grad(v);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gv.at(0, j) += g.at(i, j);
        }
    });
}

/// M (n x k) .* v (1 x k) per row.
inline VarId mul_rowvec(Tape& t, VarId m, VarId v) {
    const Tensor& M = t.val(m);
    const Tensor& V = t.val(v);
    if (V.rows != 1 || V.cols != M.cols) throw ContractError("ad::mul_rowvec: shape mismatch");
    Tensor out = M;
    for (int i = 0; i < M.rows; ++i)
        for (int j = 0; j < M.cols; ++j) out.at(i, j) *= V.at(0, j);
    const bool req = t.requires_grad(m) || t.requires_grad(v);
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [m, v, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& M2 = tp.val(m);
        const Tensor& V2 = tp.val(v);
        if (tp.requires_grad(m)) {
            Tensor& gm = tp.grad(m);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gm.at(i, j) += g.at(i, j) * V2.at(0, j);
        }
        if (tp.requires_grad(v)) {
            Tensor& gv = tp.grad(v);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gv.at(0, j) += g.at(i, j) * M2.at(i, j);
        }
    });
}

/// M (n x k) .* c (n x 1) per column.
inline VarId mul_colvec(Tape& t, VarId m, VarId c) {
    const Tensor& M = t.val(m);
    const Tensor& C = t.val(c);
    if (C.cols != 1 || C.rows != M.rows) throw ContractError("ad::mul_colvec: shape mismatch");
    Tensor out = M;
    for (int i = 0; i < M.rows; ++i)
        for (int j = 0; j < M.cols; ++j) out.at(i, j) *= C.at(i, 0);
    const bool req = t.requires_grad(m) || t.requires_grad(c);
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [m, c, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& M2 = tp.val(m);
        const Tensor& C2 = tp.val(c);
        if (tp.requires_grad(m)) {
            Tensor& gm = tp.grad(m);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gm.at(i, j) += g.at(i, j) * C2.at(i, 0);
        }
        if (tp.requires_grad(c)) {
            Tensor& gc = tp.grad(c);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gc.at(i, 0) += g.at(i, j) * M2.at(i, j);
        }
    });
}

// ---- reductions ----

inline VarId rowsum(Tape& t, VarId m) {
    const Tensor& M = t.val(m);
    Tensor out(M.rows, 1, 0.0);
    for (int i = 0; i < M.rows; ++i)
        for (int j = 0; j < M.cols; ++j) out.at(i, 0) += M.at(i, j);
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(m), [m, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor& gm = tp.grad(m);
        for (int i = 0; i < gm.rows; ++i)
            for (int j = 0; j < gm.cols; ++j) gm.at(i, j) += g.at(i, 0);
    });
}

inline VarId mean_rows(Tape& t, VarId m) {
    const Tensor& M = t.val(m);
    Tensor out(1, M.cols, 0.0);
    for (int i = 0; i < M.rows; ++i)
        for (int j = 0; j < M.cols; ++j) out.at(0, j) += M.at(i, j);
    for (double& v : out.data) v /= M.rows;
    const VarId id = t.next_id();
    const double inv = 1.0 / M.rows;
    return t.node(std::move(out), t.requires_grad(m), [m, id, inv](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor& gm = tp.grad(m);
        for (int i = 0; i < gm.rows; ++i)
            for (int j = 0; j < gm.cols; ++j) gm.at(i, j) += g.at(0, j) * inv;
    });
}

inline VarId sum_all(Tape& t, VarId m) {
    double s = 0.0;
    for (double v : t.val(m).data) s += v;
    const VarId id = t.next_id();
    return t.node(Tensor(1, 1, {s}), t.requires_grad(m), [m, id](Tape& tp) {
        const double g = tp.grad(id).data[0];
        for (double& v : tp.grad(m).data) v += g;
    });
}

inline VarId mean_all(Tape& t, VarId m) {
    const double inv = 1.0 / static_cast<double>(t.val(m).numel());
    double s = 0.0;
    for (double v : t.val(m).data) s += v;
    const VarId id = t.next_id();
    return t.node(Tensor(1, 1, {s * inv}), t.requires_grad(m), [m, id, inv](Tape& tp) {
        const double g = tp.grad(id).data[0] * inv;
        for (double& v : tp.grad(m).data) v += g;
    });
}

// ---- nonlinearities ----

inline VarId exp_op(Tape& t, VarId a) {
    Tensor out = t.val(a);
    for (double& v : out.data) v = std::exp(v);
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& y = tp.val(id);
        for (std::size_t i = 0; i < g.numel(); ++i)
            tp.grad(a).data[i] += g.data[i] * y.data[i];
    });
}

inline VarId log_op(Tape& t, VarId a) {
    Tensor out = t.val(a);
    for (double& v : out.data) v = std::log(v);
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& x = tp.val(a);
        for (std::size_t i = 0; i < g.numel(); ++i)
            tp.grad(a).data[i] += g.data[i] / x.data[i];
    });
}

inline VarId tanh_op(Tape& t, VarId a) {
    Tensor out = t.val(a);
    for (double& v : out.data) v = std::tanh(v);
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& y = tp.val(id);
        for (std::size_t i = 0; i < g.numel(); ++i)
            tp.grad(a).data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
    });
}

inline VarId gelu(Tape& t, VarId a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    Tensor out = t.val(a);
    for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& x = tp.val(a);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double v = x.data[i];
            const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double dens = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            tp.grad(a).data[i] += g.data[i] * (phi + v * dens);
        }
    });
}

/// sign(x) * sqrt(|x|); derivative treated as 0 at exactly 0.
inline VarId signed_sqrt(Tape& t, VarId a) {
    Tensor out = t.val(a);
    for (double& v : out.data) v = (v < 0 ? -1.0 : 1.0) * std::sqrt(std::abs(v));
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& x = tp.val(a);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double ax = std::abs(x.data[i]);
            if (ax > 0.0) tp.grad(a).data[i] += g.data[i] * 0.5 / std::sqrt(ax);
        }
    });
}

// ---- fused blocks ----

inline VarId softmax_rows(Tape& t, VarId a) {
    const Tensor& X = t.val(a);
    Tensor out = X;
    for (int i = 0; i < X.rows; ++i) {
        double mx = -1e300;
        for (int j = 0; j < X.cols; ++j) mx = std::max(mx, X.at(i, j));
        double denom = 0.0;
        for (int j = 0; j < X.cols; ++j) {
            out.at(i, j) = std::exp(X.at(i, j) - mx);
            denom += out.at(i, j);
        }
        for (int j = 0; j < X.cols; ++j) out.at(i, j) /= denom;
    }
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& p = tp.val(id);
        Tensor& ga = tp.grad(a);
        for (int i = 0; i < g.rows; ++i) {
            double dot = 0.0;
            for (int j = 0; j < g.cols; ++j) dot += g.at(i, j) * p.at(i, j);
            for (int j = 0; j < g.cols; ++j)
                ga.at(i, j) += p.at(i, j) * (g.at(i, j) - dot);
        }
    });
}

/// Per-row layer normalization with learned gain/bias (1 x k each).
inline VarId layernorm_rows(Tape& t, VarId x, VarId gain, VarId bias, double eps = 1e-6) {
    const Tensor& X = t.val(x);
    const Tensor& G = t.val(gain);
    const Tensor& B = t.val(bias);
    if (G.rows != 1 || G.cols != X.cols || B.rows != 1 || B.cols != X.cols)
        throw ContractError("ad::layernorm_rows: gain/bias shape mismatch");
    Tensor out(X.rows, X.cols);
    Tensor xhat(X.rows, X.cols);
    std::vector<double> inv_std(X.rows);
    for (int i = 0; i < X.rows; ++i) {
        double mean = 0.0;
        for (int j = 0; j < X.cols; ++j) mean += X.at(i, j);
        mean /= X.cols;
        double var = 0.0;
        for (int j = 0; j < X.cols; ++j) {
            const double z = X.at(i, j) - mean;
            var += z * z;
        }
        var /= X.cols;
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < X.cols; ++j) {
            xhat.at(i, j) = (X.at(i, j) - mean) * inv_std[i];
            out.at(i, j) = xhat.at(i, j) * G.at(0, j) + B.at(0, j);
        }
    }
    const bool req = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
    const VarId id = t.next_id();
    return t.node(std::move(out), req,
                  [x, gain, bias, id, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](Tape& tp) {
                      const Tensor& g = tp.grad(id);
                      const Tensor& G2 = tp.val(gain);
                      const int n = g.rows, k = g.cols;
                      if (tp.requires_grad(gain)) {
                          Tensor& gg = tp.grad(gain);
                          for (int i = 0; i < n; ++i)
                              for (int j = 0; j < k; ++j)
                                  gg.at(0, j) += g.at(i, j) * xhat.at(i, j);
                      }
                      if (tp.requires_grad(bias)) {
                          Tensor& gb = tp.grad(bias);
                          for (int i = 0; i < n; ++i)
                              for (int j = 0; j < k; ++j) gb.at(0, j) += g.at(i, j);
                      }
                      if (tp.requires_grad(x)) {
                          Tensor& gx = tp.grad(x);
                          for (int i = 0; i < n; ++i) {
                              double sum_gy = 0.0, sum_gyx = 0.0;
                              for (int j = 0; j < k; ++j) {
                                  const double gy = g.at(i, j) * G2.at(0, j);
                                  sum_gy += gy;
                                  sum_gyx += gy * xhat.at(i, j);
                              }
                              for (int j = 0; j < k; ++j) {
                                  const double gy = g.at(i, j) * G2.at(0, j);
                                  gx.at(i, j) += (gy - sum_gy / k - xhat.at(i, j) * sum_gyx / k) *
                                                 inv_std[i];
                              }
                          }
                      }
                  });
}

/// Rows scaled to unit L2 norm; zero rows pass through unchanged.
inline VarId l2norm_rows(Tape& t, VarId a) {
    const Tensor& X = t.val(a);
    Tensor out = X;
    std::vector<double> norms(X.rows, 0.0);
    for (int i = 0; i < X.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < X.cols; ++j) s += X.at(i, j) * X.at(i, j);
        norms[i] = std::sqrt(s);
        if (norms[i] > 0.0)
            for (int j = 0; j < X.cols; ++j) out.at(i, j) /= norms[i];
    }
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a),
                  [a, id, norms = std::move(norms)](Tape& tp) {
                      const Tensor& g = tp.grad(id);
                      const Tensor& y = tp.val(id);
                      Tensor& ga = tp.grad(a);
                      for (int i = 0; i < g.rows; ++i) {
                          if (norms[i] <= 0.0) {
                              for (int j = 0; j < g.cols; ++j) ga.at(i, j) += g.at(i, j);
                              continue;
                          }
                          double dot = 0.0;
                          for (int j = 0; j < g.cols; ++j) dot += g.at(i, j) * y.at(i, j);
                          for (int j = 0; j < g.cols; ++j)
                              ga.at(i, j) += (g.at(i, j) - y.at(i, j) * dot) / norms[i];
                      }
                  });
}

/// Mean binary cross-entropy over logits against a constant target in [0,1].
inline VarId bce_with_logits_mean(Tape& t, VarId logits, const Tensor& target) {
    const Tensor& X = t.val(logits);
    if (!X.same_shape(target)) throw ContractError("ad::bce: target shape mismatch");
    double loss = 0.0;
    for (std::size_t i = 0; i < X.numel(); ++i) {
        const double x = X.data[i];
        const double tt = target.data[i];
        loss += std::max(x, 0.0) - x * tt + std::log1p(std::exp(-std::abs(x)));
    }
    loss /= static_cast<double>(X.numel());
    const VarId id = t.next_id();
    return t.node(Tensor(1, 1, {loss}), t.requires_grad(logits),
                  [logits, id, target](Tape& tp) {
                      const double g = tp.grad(id).data[0] / target.numel();
                      const Tensor& X2 = tp.val(logits);
                      Tensor& gx = tp.grad(logits);
                      for (std::size_t i = 0; i < X2.numel(); ++i) {
                          const double s = 1.0 / (1.0 + std::exp(-X2.data[i]));
                          gx.data[i] += g * (s - target.data[i]);
                      }
                  });
}

// ---- shape ops ----

inline VarId reshape(Tape& t, VarId a, int rows, int cols) {
    const Tensor& X = t.val(a);
    if (static_cast<std::size_t>(rows) * cols != X.numel())
        throw ContractError("ad::reshape: element count mismatch");
    Tensor out(rows, cols, X.data);
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        for (std::size_t i = 0; i < g.numel(); ++i) tp.grad(a).data[i] += g.data[i];
    });
}

inline VarId slice_rows(Tape& t, VarId a, int r0, int r1) {
    const Tensor& X = t.val(a);
    if (r0 < 0 || r1 > X.rows || r0 >= r1) throw ContractError("ad::slice_rows: bad range");
    Tensor out(r1 - r0, X.cols);
    for (int i = r0; i < r1; ++i)
        for (int j = 0; j < X.cols; ++j) out.at(i - r0, j) = X.at(i, j);
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, r0, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor& ga = tp.grad(a);
        for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) ga.at(i + r0, j) += g.at(i, j);
    });
}

inline VarId slice_cols(Tape& t, VarId a, int c0, int c1) {
    const Tensor& X = t.val(a);
    if (c0 < 0 || c1 > X.cols || c0 >= c1) throw ContractError("ad::slice_cols: bad range");
    Tensor out(X.rows, c1 - c0);
    for (int i = 0; i < X.rows; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = X.at(i, j);
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(a), [a, c0, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor& ga = tp.grad(a);
        for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) ga.at(i, j + c0) += g.at(i, j);
    });
}

inline VarId concat_rows(Tape& t, const std::vector<VarId>& parts) {
    if (parts.empty()) throw ContractError("ad::concat_rows: empty");
    int rows = 0;
    const int cols = t.val(parts[0]).cols;
    bool req = false;
    for (VarId p : parts) {
        if (t.val(p).cols != cols) throw ContractError("ad::concat_rows: column mismatch");
        rows += t.val(p).rows;
        req = req || t.requires_grad(p);
    }
    Tensor out(rows, cols);
    int r = 0;
    for (VarId p : parts) {
        const Tensor& X = t.val(p);
        for (int i = 0; i < X.rows; ++i)
            for (int j = 0; j < cols; ++j) out.at(r + i, j) = X.at(i, j);
        r += X.rows;
    }
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [parts, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        int r2 = 0;
        for (VarId p : parts) {
            Tensor& gp = tp.grad(p);
            if (tp.requires_grad(p)) {
                for (int i = 0; i < gp.rows; ++i)
                    for (int j = 0; j < gp.cols; ++j) gp.at(i, j) += g.at(r2 + i, j);
            }
            r2 += gp.rows;
        }
    });
}

inline VarId concat_cols(Tape& t, const std::vector<VarId>& parts) {
    if (parts.empty()) throw ContractError("ad::concat_cols: empty");
    const int rows = t.val(parts[0]).rows;
    int cols = 0;
    bool req = false;
    for (VarId p : parts) {
        if (t.val(p).rows != rows) throw ContractError("ad::concat_cols: row mismatch");
        cols += t.val(p).cols;
        req = req || t.requires_grad(p);
    }
    Tensor out(rows, cols);
    int c = 0;
    for (VarId p : parts) {
        const Tensor& X = t.val(p);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < X.cols; ++j) out.at(i, c + j) = X.at(i, j);
        c += X.cols;
    }
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [parts, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        int c2 = 0;
        for (VarId p : parts) {
            Tensor& gp = tp.grad(p);
            if (tp.requires_grad(p)) {
                for (int i = 0; i < gp.rows; ++i)
                    for (int j = 0; j < gp.cols; ++j) gp.at(i, j) += g.at(i, c2 + j);
            }
            c2 += gp.cols;
        }
    });
}

// ---- image-shaped ops (tensors interpreted as H x W planes) ----

/// Cuts a stack of same-sized planes into P x P patches, flattened
/// channel-last: output (N x P*P*C) with N = (H/P)*(W/P).
inline VarId patchify_stack(Tape& t, const std::vector<VarId>& channels, int patch) {
    if (channels.empty()) throw ContractError("ad::patchify_stack: empty stack");
    const int h = t.val(channels[0]).rows;
    const int w = t.val(channels[0]).cols;
    if (h % patch != 0 || w % patch != 0)
        throw ContractError("ad::patchify_stack: dims not divisible by patch");
    bool req = false;
    for (VarId c : channels) {
        if (t.val(c).rows != h || t.val(c).cols != w)
            throw ContractError("ad::patchify_stack: plane shapes differ");
        req = req || t.requires_grad(c);
    }
    const int nc = static_cast<int>(channels.size());
    const int ny = h / patch, nx = w / patch;
    Tensor out(ny * nx, patch * patch * nc);
    for (int py = 0; py < ny; ++py)
        for (int px = 0; px < nx; ++px) {
            const int row = py * nx + px;
            int col = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int c = 0; c < nc; ++c)
                        out.at(row, col++) = t.val(channels[c]).at(py * patch + dy, px * patch + dx);
        }
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [channels, patch, ny, nx, nc, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        for (int py = 0; py < ny; ++py)
            for (int px = 0; px < nx; ++px) {
                const int row = py * nx + px;
                int col = 0;
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        for (int c = 0; c < nc; ++c) {
                            if (tp.requires_grad(channels[c]))
                                tp.grad(channels[c]).at(py * patch + dy, px * patch + dx) +=
                                    g.at(row, col);
                            ++col;
                        }
            }
    });
}

/// Inverse of patchify for one channel: rows (N x P*P) back to (H x W).
inline VarId depatchify(Tape& t, VarId rows_var, int patch, int h, int w) {
    const Tensor& R = t.val(rows_var);
    const int ny = h / patch, nx = w / patch;
    if (R.rows != ny * nx || R.cols != patch * patch)
        throw ContractError("ad::depatchify: shape mismatch");
    Tensor out(h, w);
    for (int py = 0; py < ny; ++py)
        for (int px = 0; px < nx; ++px) {
            const int row = py * nx + px;
            int col = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    out.at(py * patch + dy, px * patch + dx) = R.at(row, col++);
        }
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(rows_var),
                  [rows_var, patch, ny, nx, id](Tape& tp) {
                      const Tensor& g = tp.grad(id);
                      Tensor& gr = tp.grad(rows_var);
                      for (int py = 0; py < ny; ++py)
                          for (int px = 0; px < nx; ++px) {
                              const int row = py * nx + px;
                              int col = 0;
                              for (int dy = 0; dy < patch; ++dy)
                                  for (int dx = 0; dx < patch; ++dx)
                                      gr.at(row, col++) += g.at(py * patch + dy, px * patch + dx);
                          }
                  });
}

/// 2-D convolution of a single plane with an odd square kernel, reflect
/// boundary, differentiable in both arguments.
inline VarId conv2d(Tape& t, VarId img, VarId kernel) {
    const Tensor& I = t.val(img);
    const Tensor& K = t.val(kernel);
    if (K.rows != K.cols || K.rows % 2 == 0) throw ContractError("ad::conv2d: kernel must be odd square");
    if (K.rows > std::min(I.rows, I.cols)) throw ContractError("ad::conv2d: kernel larger than image");
    const int k = K.rows, c = k / 2;
    Tensor out(I.rows, I.cols, 0.0);
    for (int y = 0; y < I.rows; ++y)
        for (int x = 0; x < I.cols; ++x) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j)
                    acc += K.at(i, j) * I.at(detail::reflect_index(y - (i - c), I.rows),
                                             detail::reflect_index(x - (j - c), I.cols));
            out.at(y, x) = acc;
        }
    const bool req = t.requires_grad(img) || t.requires_grad(kernel);
    const VarId id = t.next_id();
    return t.node(std::move(out), req, [img, kernel, k, c, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& I2 = tp.val(img);
        const Tensor& K2 = tp.val(kernel);
        const bool need_img = tp.requires_grad(img);
        const bool need_ker = tp.requires_grad(kernel);
        Tensor& gi = tp.grad(img);
        Tensor& gk = tp.grad(kernel);
        for (int y = 0; y < g.rows; ++y)
            for (int x = 0; x < g.cols; ++x) {
                const double gv = g.at(y, x);
                if (gv == 0.0) continue;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) {
                        const int sy = detail::reflect_index(y - (i - c), g.rows);
                        const int sx = detail::reflect_index(x - (j - c), g.cols);
                        if (need_img) gi.at(sy, sx) += gv * K2.at(i, j);
                        if (need_ker) gk.at(i, j) += gv * I2.at(sy, sx);
                    }
            }
    });
}

/// Embeds a k x k kernel at the center of an H x W zero plane.
inline VarId pad_center(Tape& t, VarId kernel, int h, int w) {
    const Tensor& K = t.val(kernel);
    const int oy = (h - K.rows) / 2, ox = (w - K.cols) / 2;
    if (oy < 0 || ox < 0) throw ContractError("ad::pad_center: kernel larger than plane");
    Tensor out(h, w, 0.0);
    for (int i = 0; i < K.rows; ++i)
        for (int j = 0; j < K.cols; ++j) out.at(oy + i, ox + j) = K.at(i, j);
    const VarId id = t.next_id();
    return t.node(std::move(out), t.requires_grad(kernel), [kernel, oy, ox, id](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor& gk = tp.grad(kernel);
        for (int i = 0; i < gk.rows; ++i)
            for (int j = 0; j < gk.cols; ++j) gk.at(i, j) += g.at(oy + i, ox + j);
    });
}

}  // namespace modseg::ad
