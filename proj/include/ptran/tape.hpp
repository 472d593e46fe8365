#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "ptran/tensor.hpp"

namespace ptran {

// Reverse-mode tape over dense tensors. The op set is exactly what the
// inference updates and task losses need; no broadcasting beyond
// scalar*tensor and row-vector ops, so every gradient rule stays small.
//
// A tape is single-owner and not shareable across threads. Leaf values are
// copied in, so immutable source tensors may be read concurrently by many
// tapes.
template <class Real>
class Tape {
public:
    using Id = int;

    enum class Op {
        Leaf,
        MatMul,
        Add,
        AddRowVec,
        Scale,
        Mul,
        MulConst,
        MulRowVec,
        SoftmaxRows,
        GatherRows,
        StridedSlice,
        ConcatCols,
        SliceCols,
        Sum,
        SumSq,
        CrossEntropyRows,
    };

    Id leaf(Tensor<Real> v) {
        Node n;
        n.op = Op::Leaf;
        n.value = std::move(v);
        return push(std::move(n));
    }

    // a [m x k] * b [k x p], with optional transposes applied to the stored
    // operands before the product.
    Id matmul(Id a, Id b, bool ta = false, bool tb = false) {
        const auto& va = value(a);
        const auto& vb = value(b);
        if (va.rank() != 2 || vb.rank() != 2) throw DimensionError("matmul expects matrices");
        int64_t m = ta ? va.dim(1) : va.dim(0);
        int64_t k = ta ? va.dim(0) : va.dim(1);
        int64_t kb = tb ? vb.dim(1) : vb.dim(0);
        int64_t p = tb ? vb.dim(0) : vb.dim(1);
        if (k != kb)
            throw DimensionError("matmul inner extents differ: " + va.shape_str() + " vs " + vb.shape_str());
        Node n;
        n.op = Op::MatMul;
        n.inputs = {a, b};
        n.flag_a = ta;
        n.flag_b = tb;
        n.value = Tensor<Real>({m, p});
        matmul_into(n.value, va, vb, ta, tb, false);
        return push(std::move(n));
    }

    Id add(Id a, Id b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        if (!va.same_shape(vb)) throw DimensionError("add shape mismatch");
        Node n;
        n.op = Op::Add;
        n.inputs = {a, b};
        n.value = va;
        for (int64_t i = 0; i < n.value.numel(); ++i) n.value(i) += vb(i);
        return push(std::move(n));
    }

    // a [m x p] + row vector b [1 x p] broadcast over rows.
    Id add_rowvec(Id a, Id b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        if (va.rank() != 2 || vb.rank() != 2 || vb.dim(0) != 1 || vb.dim(1) != va.dim(1))
            throw DimensionError("add_rowvec expects [m x p] and [1 x p]");
        Node n;
        n.op = Op::AddRowVec;
        n.inputs = {a, b};
        n.value = va;
        for (int64_t i = 0; i < va.dim(0); ++i)
            for (int64_t j = 0; j < va.dim(1); ++j) n.value(i, j) += vb(0, j);
        return push(std::move(n));
    }

    Id scale(Id a, Real c) {
        Node n;
        n.op = Op::Scale;
        n.inputs = {a};
        n.scalar = c;
        n.value = value(a);
        for (auto& x : n.value.data) x *= c;
        return push(std::move(n));
    }

    Id mul(Id a, Id b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        if (!va.same_shape(vb)) throw DimensionError("mul shape mismatch");
        Node n;
        n.op = Op::Mul;
        n.inputs = {a, b};
        n.value = va;
        for (int64_t i = 0; i < n.value.numel(); ++i) n.value(i) *= vb(i);
        return push(std::move(n));
    }

    // Hadamard with a constant (bank masks, dropout masks). The constant is
    // not a node; its entries receive no gradient.
    Id mul_const(Id a, Tensor<Real> c) {
        const auto& va = value(a);
        if (!va.same_shape(c)) throw DimensionError("mul_const shape mismatch");
        Node n;
        n.op = Op::MulConst;
        n.inputs = {a};
        n.aux = std::move(c);
        n.value = va;
        for (int64_t i = 0; i < n.value.numel(); ++i) n.value(i) *= n.aux(i);
        return push(std::move(n));
    }

    // a [m x p] * row vector w [1 x p] broadcast over rows (diag scaling).
    Id mul_rowvec(Id a, Id w) {
        const auto& va = value(a);
        const auto& vw = value(w);
        if (va.rank() != 2 || vw.rank() != 2 || vw.dim(0) != 1 || vw.dim(1) != va.dim(1))
            throw DimensionError("mul_rowvec expects [m x p] and [1 x p]");
        Node n;
        n.op = Op::MulRowVec;
        n.inputs = {a, w};
        n.value = va;
        for (int64_t i = 0; i < va.dim(0); ++i)
            for (int64_t j = 0; j < va.dim(1); ++j) n.value(i, j) *= vw(0, j);
        return push(std::move(n));
    }

    // Row softmax of x/scale. mask (optional, 0/1 constant of the same
    // shape) marks admissible entries; masked entries are treated as -inf
    // before max subtraction and are exactly zero in the output.
    Id softmax_rows(Id x, const Tensor<Real>* mask, Real scale) {
        const auto& vx = value(x);
        if (vx.rank() != 2) throw DimensionError("softmax_rows expects a matrix");
        if (scale <= Real(0)) throw ContractError("softmax scale must be positive");
        if (mask && !mask->same_shape(vx)) throw DimensionError("softmax mask shape mismatch");
        Node n;
        n.op = Op::SoftmaxRows;
        n.inputs = {x};
        n.scalar = scale;
        if (mask) n.aux = *mask;
        n.value = Tensor<Real>(vx.shape);
        softmax_rows_into(n.value, vx, mask, scale);
        return push(std::move(n));
    }

    Id gather_rows(Id table, std::vector<int64_t> ids) {
        const auto& vt = value(table);
        if (vt.rank() != 2) throw DimensionError("gather_rows expects a matrix table");
        for (int64_t id : ids)
            if (id < 0 || id >= vt.dim(0)) throw IndexError("gather_rows id out of range");
        Node n;
        n.op = Op::GatherRows;
        n.inputs = {table};
        n.ids = std::move(ids);
        n.value = Tensor<Real>({int64_t(n.ids.size()), vt.dim(1)});
        for (size_t i = 0; i < n.ids.size(); ++i)
            for (int64_t j = 0; j < vt.dim(1); ++j) n.value(int64_t(i), j) = vt(n.ids[i], j);
        return push(std::move(n));
    }

    // 2-D strided view into the flat buffer of `src`: result(i,j) =
    // src.data[offset + i*row_stride + j*col_stride]. Used to address
    // per-(bank, channel) slices of stacked parameter tensors.
    Id strided_slice(Id src, int64_t offset, int64_t rows, int64_t cols, int64_t row_stride,
                     int64_t col_stride) {
        const auto& vs = value(src);
        int64_t last = offset + (rows - 1) * row_stride + (cols - 1) * col_stride;
        if (rows <= 0 || cols <= 0 || offset < 0 || last >= vs.numel())
            throw IndexError("strided_slice out of range");
        Node n;
        n.op = Op::StridedSlice;
        n.inputs = {src};
        n.ids = {offset, row_stride, col_stride};
        n.value = Tensor<Real>({rows, cols});
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < cols; ++j)
                n.value(i, j) = vs(offset + i * row_stride + j * col_stride);
        return push(std::move(n));
    }

    Id concat_cols(const std::vector<Id>& parts) {
        if (parts.empty()) throw ContractError("concat_cols needs at least one part");
        int64_t rows = value(parts[0]).dim(0);
        int64_t cols = 0;
        for (Id p : parts) {
            const auto& v = value(p);
            if (v.rank() != 2 || v.dim(0) != rows) throw DimensionError("concat_cols row mismatch");
            cols += v.dim(1);
        }
        Node n;
        n.op = Op::ConcatCols;
        n.inputs = parts;
        n.value = Tensor<Real>({rows, cols});
        int64_t c0 = 0;
        for (Id p : parts) {
            const auto& v = value(p);
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < v.dim(1); ++j) n.value(i, c0 + j) = v(i, j);
            c0 += v.dim(1);
        }
        return push(std::move(n));
    }

    Id slice_cols(Id a, int64_t c0, int64_t c1) {
        const auto& va = value(a);
        if (va.rank() != 2 || c0 < 0 || c1 > va.dim(1) || c0 >= c1)
            throw IndexError("slice_cols out of range");
        Node n;
        n.op = Op::SliceCols;
        n.inputs = {a};
        n.ids = {c0, c1};
        n.value = Tensor<Real>({va.dim(0), c1 - c0});
        for (int64_t i = 0; i < va.dim(0); ++i)
            for (int64_t j = c0; j < c1; ++j) n.value(i, j - c0) = va(i, j);
        return push(std::move(n));
    }

    Id sum(Id a) {
        Node n;
        n.op = Op::Sum;
        n.inputs = {a};
        n.value = Tensor<Real>({1});
        Real s = 0;
        for (Real x : value(a).data) s += x;
        n.value(0) = s;
        return push(std::move(n));
    }

    Id sum_sq(Id a) {
        Node n;
        n.op = Op::SumSq;
        n.inputs = {a};
        n.value = Tensor<Real>({1});
        Real s = 0;
        for (Real x : value(a).data) s += x * x;
        n.value(0) = s;
        return push(std::move(n));
    }

    // Weighted mean negative log-likelihood over rows of `logits`:
    //   loss = sum_i w_i * (logsumexp(row_i) - row_i[target_i]) / sum_i w_i
    // Rows with weight 0 are skipped entirely.
    Id cross_entropy_rows(Id logits, std::vector<int64_t> targets, std::vector<Real> weights) {
        const auto& vl = value(logits);
        if (vl.rank() != 2) throw DimensionError("cross_entropy_rows expects a matrix");
        if (int64_t(targets.size()) != vl.dim(0) || weights.size() != targets.size())
            throw DimensionError("cross_entropy_rows targets/weights length mismatch");
        Real wsum = 0;
        for (Real w : weights) wsum += w;
        if (wsum <= Real(0)) throw ContractError("cross_entropy_rows: total weight is zero");
        for (size_t i = 0; i < targets.size(); ++i)
            if (weights[i] > Real(0) && (targets[i] < 0 || targets[i] >= vl.dim(1)))
                throw IndexError("cross_entropy target out of range");
        Node n;
        n.op = Op::CrossEntropyRows;
        n.inputs = {logits};
        n.ids = std::move(targets);
        n.weights = std::move(weights);
        n.scalar = wsum;
        n.value = Tensor<Real>({1});
        Real loss = 0;
        for (int64_t i = 0; i < vl.dim(0); ++i) {
            if (n.weights[size_t(i)] <= Real(0)) continue;
            loss += n.weights[size_t(i)] * (row_logsumexp(vl, i) - vl(i, n.ids[size_t(i)]));
        }
        n.value(0) = loss / wsum;
        return push(std::move(n));
    }

    const Tensor<Real>& value(Id id) const { return nodes_[size_t(id)].value; }

    int size() const { return int(nodes_.size()); }

    // Reverse topological accumulation from a scalar loss. Gradients of
    // nodes unreachable from the loss stay zero.
    void backward(Id loss) {
        if (value(loss).numel() != 1) throw ContractError("backward requires a scalar loss");
        grads_.assign(nodes_.size(), Tensor<Real>());
        grad_at(loss)(0) = Real(1);
        for (int id = loss; id >= 0; --id) {
            Node& n = nodes_[size_t(id)];
            if (grads_[size_t(id)].data.empty()) continue;  // unreachable
            const Tensor<Real>& g = grads_[size_t(id)];
            backprop_node(n, g);
        }
    }

    // Gradient of a node after backward(); zero tensor if unreachable.
    Tensor<Real> grad(Id id) const {
        if (size_t(id) < grads_.size() && !grads_[size_t(id)].data.empty()) return grads_[size_t(id)];
        return Tensor<Real>(nodes_[size_t(id)].value.shape);
    }

private:
    struct Node {
        Op op{};
        std::vector<Id> inputs;
        Tensor<Real> value;
        Tensor<Real> aux;             // masks / constants
        std::vector<int64_t> ids;     // gather ids, slice bounds, CE targets
        std::vector<Real> weights;    // CE row weights
        Real scalar = Real(0);        // scale factors / softmax scale / CE weight sum
        bool flag_a = false, flag_b = false;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor<Real>> grads_;

    Id push(Node n) {
#ifndef NDEBUG
        n.value.check_finite("tape op output");
#endif
        nodes_.push_back(std::move(n));
        return Id(nodes_.size() - 1);
    }

    Tensor<Real>& grad_at(Id id) {
        auto& g = grads_[size_t(id)];
        if (g.data.empty()) g = Tensor<Real>(nodes_[size_t(id)].value.shape);
        return g;
    }

    static Real row_logsumexp(const Tensor<Real>& x, int64_t i) {
        Real m = x(i, 0);
        for (int64_t j = 1; j < x.dim(1); ++j) m = std::max(m, x(i, j));
        Real s = 0;
        for (int64_t j = 0; j < x.dim(1); ++j) s += std::exp(x(i, j) - m);
        return m + std::log(s);
    }

    static void matmul_into(Tensor<Real>& out, const Tensor<Real>& a, const Tensor<Real>& b, bool ta,
                            bool tb, bool accumulate) {
        int64_t m = out.dim(0), p = out.dim(1);
        int64_t k = ta ? a.dim(0) : a.dim(1);
        auto at = [&](int64_t i, int64_t j) { return ta ? a(j, i) : a(i, j); };
        auto bt = [&](int64_t i, int64_t j) { return tb ? b(j, i) : b(i, j); };
#pragma omp parallel for if (m * p * k > (1 << 16))
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < p; ++j) {
                Real s = accumulate ? out(i, j) : Real(0);
                for (int64_t l = 0; l < k; ++l) s += at(i, l) * bt(l, j);
                out(i, j) = s;
            }
        }
    }

    static void softmax_rows_into(Tensor<Real>& out, const Tensor<Real>& x, const Tensor<Real>* mask,
                                  Real scale) {
        int64_t rows = x.dim(0), cols = x.dim(1);
        for (int64_t i = 0; i < rows; ++i) {
            Real m = -std::numeric_limits<Real>::infinity();
            for (int64_t j = 0; j < cols; ++j)
                if (!mask || (*mask)(i, j) != Real(0)) m = std::max(m, x(i, j) / scale);
            if (m == -std::numeric_limits<Real>::infinity())
                throw DegenerateRowError("softmax_rows: fully masked row " + std::to_string(i));
            Real s = 0;
            for (int64_t j = 0; j < cols; ++j) {
                if (!mask || (*mask)(i, j) != Real(0)) {
                    out(i, j) = std::exp(x(i, j) / scale - m);
                    s += out(i, j);
                } else {
                    out(i, j) = Real(0);
                }
            }
            for (int64_t j = 0; j < cols; ++j) out(i, j) /= s;
        }
    }

    void accumulate(Id input, const Tensor<Real>& delta) {
        Tensor<Real>& g = grad_at(input);
        for (int64_t i = 0; i < g.numel(); ++i) g(i) += delta(i);
    }

    void backprop_node(const Node& n, const Tensor<Real>& g) {
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::MatMul: {
                const auto& a = value(n.inputs[0]);
                const auto& b = value(n.inputs[1]);
                Tensor<Real>& ga = grad_at(n.inputs[0]);
                Tensor<Real>& gb = grad_at(n.inputs[1]);
                // Four transpose cases, each reduced to a matmul into the
                // operand gradient.
                if (!n.flag_a && !n.flag_b) {
                    matmul_into(ga, g, b, false, true, true);
                    matmul_into(gb, a, g, true, false, true);
                } else if (n.flag_a && !n.flag_b) {
                    matmul_into(ga, b, g, false, true, true);
                    matmul_into(gb, a, g, false, false, true);
                } else if (!n.flag_a && n.flag_b) {
                    matmul_into(ga, g, b, false, false, true);
                    matmul_into(gb, g, a, true, false, true);
                } else {
                    matmul_into(ga, b, g, true, true, true);
                    matmul_into(gb, g, a, true, true, true);
                }
                break;
            }
            case Op::Add:
                accumulate(n.inputs[0], g);
                accumulate(n.inputs[1], g);
                break;
            case Op::AddRowVec: {
                accumulate(n.inputs[0], g);
                Tensor<Real>& gb = grad_at(n.inputs[1]);
                for (int64_t i = 0; i < g.dim(0); ++i)
                    for (int64_t j = 0; j < g.dim(1); ++j) gb(0, j) += g(i, j);
                break;
            }
            case Op::Scale: {
                Tensor<Real>& ga = grad_at(n.inputs[0]);
                for (int64_t i = 0; i < g.numel(); ++i) ga(i) += n.scalar * g(i);
                break;
            }
            case Op::Mul: {
                const auto& a = value(n.inputs[0]);
                const auto& b = value(n.inputs[1]);
                Tensor<Real>& ga = grad_at(n.inputs[0]);
                Tensor<Real>& gb = grad_at(n.inputs[1]);
                for (int64_t i = 0; i < g.numel(); ++i) {
                    ga(i) += g(i) * b(i);
                    gb(i) += g(i) * a(i);
                }
                break;
            }
            case Op::MulConst: {
                Tensor<Real>& ga = grad_at(n.inputs[0]);
                for (int64_t i = 0; i < g.numel(); ++i) ga(i) += g(i) * n.aux(i);
                break;
            }
            case Op::MulRowVec: {
                const auto& a = value(n.inputs[0]);
                const auto& w = value(n.inputs[1]);
                Tensor<Real>& ga = grad_at(n.inputs[0]);
                Tensor<Real>& gw = grad_at(n.inputs[1]);
                for (int64_t i = 0; i < g.dim(0); ++i)
                    for (int64_t j = 0; j < g.dim(1); ++j) {
                        ga(i, j) += g(i, j) * w(0, j);
                        gw(0, j) += g(i, j) * a(i, j);
                    }
                break;
            }
            case Op::SoftmaxRows: {
                const auto& y = n.value;
                Tensor<Real>& gx = grad_at(n.inputs[0]);
                const bool masked = !n.aux.data.empty();
                for (int64_t i = 0; i < y.dim(0); ++i) {
                    Real dot = 0;
                    for (int64_t j = 0; j < y.dim(1); ++j) dot += g(i, j) * y(i, j);
                    for (int64_t j = 0; j < y.dim(1); ++j) {
                        if (masked && n.aux(i, j) == Real(0)) continue;  // exact zero grad
                        gx(i, j) += (g(i, j) - dot) * y(i, j) / n.scalar;
                    }
                }
                break;
            }
            case Op::GatherRows: {
                Tensor<Real>& gt = grad_at(n.inputs[0]);
                for (size_t i = 0; i < n.ids.size(); ++i)
                    for (int64_t j = 0; j < g.dim(1); ++j) gt(n.ids[i], j) += g(int64_t(i), j);
                break;
            }
            case Op::StridedSlice: {
                Tensor<Real>& gs = grad_at(n.inputs[0]);
                int64_t offset = n.ids[0], rs = n.ids[1], cs = n.ids[2];
                for (int64_t i = 0; i < g.dim(0); ++i)
                    for (int64_t j = 0; j < g.dim(1); ++j) gs(offset + i * rs + j * cs) += g(i, j);
                break;
            }
            case Op::ConcatCols: {
                int64_t c0 = 0;
                for (Id p : n.inputs) {
                    Tensor<Real>& gp = grad_at(p);
                    for (int64_t i = 0; i < gp.dim(0); ++i)
                        for (int64_t j = 0; j < gp.dim(1); ++j) gp(i, j) += g(i, c0 + j);
                    c0 += gp.dim(1);
                }
                break;
            }
            case Op::SliceCols: {
                Tensor<Real>& ga = grad_at(n.inputs[0]);
                int64_t c0 = n.ids[0];
                for (int64_t i = 0; i < g.dim(0); ++i)
                    for (int64_t j = 0; j < g.dim(1); ++j) ga(i, c0 + j) += g(i, j);
                break;
            }
            case Op::Sum: {
                Tensor<Real>& ga = grad_at(n.inputs[0]);
                for (int64_t i = 0; i < ga.numel(); ++i) ga(i) += g(0);
                break;
            }
            case Op::SumSq: {
                const auto& a = value(n.inputs[0]);
                Tensor<Real>& ga = grad_at(n.inputs[0]);
                for (int64_t i = 0; i < ga.numel(); ++i) ga(i) += Real(2) * a(i) * g(0);
                break;
            }
            case Op::CrossEntropyRows: {
                const auto& x = value(n.inputs[0]);
                Tensor<Real>& gx = grad_at(n.inputs[0]);
                for (int64_t i = 0; i < x.dim(0); ++i) {
                    Real w = n.weights[size_t(i)];
                    if (w <= Real(0)) continue;
                    Real m = x(i, 0);
                    for (int64_t j = 1; j < x.dim(1); ++j) m = std::max(m, x(i, j));
                    Real s = 0;
                    for (int64_t j = 0; j < x.dim(1); ++j) s += std::exp(x(i, j) - m);
                    for (int64_t j = 0; j < x.dim(1); ++j) {
                        Real p = std::exp(x(i, j) - m) / s;
                        Real onehot = (j == n.ids[size_t(i)]) ? Real(1) : Real(0);
                        gx(i, j) += g(0) * w * (p - onehot) / n.scalar;
                    }
                }
                break;
            }
        }
    }
};

// Central-difference gradient check. `forward` recomputes the scalar loss
// from the current contents of `params`; `analytic` holds the reference
// gradients (same order as `params`). A random subsample of at least
// `min_coords` coordinates per tensor is probed.
template <class Real>
Real finite_diff_check(const std::function<Real()>& forward, std::vector<Tensor<Real>*> params,
                       std::vector<const Tensor<Real>*> analytic, Real epsilon, Rng& rng,
                       int64_t min_coords = 50) {
    if (epsilon <= Real(0)) throw ContractError("finite_diff_check: epsilon must be positive");
    Real max_rel = 0;
    for (size_t t = 0; t < params.size(); ++t) {
        Tensor<Real>& p = *params[t];
        const Tensor<Real>& a = *analytic[t];
        int64_t n = p.numel();
        std::vector<int64_t> coords;
        if (n <= min_coords) {
            coords.resize((size_t)n);
            for (int64_t i = 0; i < n; ++i) coords[size_t(i)] = i;
        } else {
            for (int64_t i = 0; i < min_coords; ++i) coords.push_back(int64_t(rng.below(uint64_t(n))));
        }
        for (int64_t c : coords) {
            Real saved = p(c);
            p(c) = saved + epsilon;
            Real fp = forward();
            p(c) = saved - epsilon;
            Real fm = forward();
            p(c) = saved;
            Real fd = (fp - fm) / (Real(2) * epsilon);
            Real an = a(c);
            Real denom = std::max(Real(1e-4), std::max(std::abs(fd), std::abs(an)));
            max_rel = std::max(max_rel, std::abs(fd - an) / denom);
        }
    }
    return max_rel;
}

}  // namespace ptran
