#pragma once

#include <vector>

#include "ptran/model.hpp"
#include "ptran/state.hpp"
#include "ptran/tape.hpp"

namespace ptran {

// Final products of inference on one sentence: unnormalized log-space word
// representations, the root marginal (a normalized distribution), and the
// final head posteriors for inspection.
template <class Real>
struct ContextualReps {
    Tensor<Real> reps;              // n x d
    Tensor<Real> root_rep;          // 1 x d_root (empty without root)
    std::vector<Tensor<Real>> Qh;   // h of n x cols
    HeadLayout layout;
};

namespace detail {

template <class Real>
void softmax_row_span(Real* row, const unsigned char* valid, int64_t cols, Real lambda) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int64_t j = 0; j < cols; ++j)
        if (valid[j]) mx = std::max(mx, row[j] / lambda);
    if (mx == -std::numeric_limits<Real>::infinity())
        throw DegenerateRowError("softmax over empty head domain");
    Real s = 0;
    for (int64_t j = 0; j < cols; ++j) {
        if (valid[j]) {
            row[j] = std::exp(row[j] / lambda - mx);
            s += row[j];
        } else {
            row[j] = Real(0);
        }
    }
    for (int64_t j = 0; j < cols; ++j) row[j] /= s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scalar reference path
// ---------------------------------------------------------------------------
//
// Serial implementation over materialized score banks. Kept as the
// readable reference the tensorized kernels are verified against; also the
// path the exact-oracle stepper is compared with state-for-state.

template <class Real>
class ScalarEngine {
public:
    ScalarEngine(const Parameters<Real>& params) : p_(params), cfg_(params.config) {
        const int K = cfg_.banks();
        banks_.resize(size_t(K) * size_t(cfg_.h));
        for (int k = 0; k < K; ++k)
            for (int c = 0; c < cfg_.h; ++c) banks_[size_t(k * cfg_.h + c)] = materialize_ternary(p_, c, k);
    }

    // One full MFVI iteration (same pinned semantics as the oracle stepper).
    PosteriorState<Real> step(const PosteriorState<Real>& prev, const std::vector<int64_t>& ids) const {
        const int64_t n = int64_t(ids.size());
        const HeadLayout lay = prev.layout;
        const int64_t cols = lay.cols();
        const Real lamZ = Real(cfg_.lambda_Z);
        const Real lamH = Real(cfg_.effective_lambda_H());
        PosteriorState<Real> next = prev;

        if (!prev.has_heads()) {
            update_isolated(prev, next, ids);
            return next;
        }

        // Products shared by the F and G messages: X[kc] = Qz * T_kc,
        // Y[kc] = Qz * T_kc^T (n x d each).
        const int K = cfg_.banks();
        std::vector<Tensor<Real>> X(size_t(K * cfg_.h)), Y((size_t)K * cfg_.h);
        for (int k = 0; k < K; ++k)
            for (int c = 0; c < cfg_.h; ++c) {
                const Tensor<Real>& T = banks_[size_t(k * cfg_.h + c)];
                Tensor<Real> x({n, cfg_.d}), y({n, cfg_.d});
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t a = 0; a < cfg_.d; ++a) {
                        Real sx = 0, sy = 0;
                        for (int64_t b = 0; b < cfg_.d; ++b) {
                            sx += prev.Qz(i, b) * T(b, a);  // (Qz T)(i,a)
                            sy += prev.Qz(i, b) * T(a, b);  // (Qz T^T)(i,a)
                        }
                        x(i, a) = sx;
                        y(i, a) = sy;
                    }
                X[size_t(k * cfg_.h + c)] = std::move(x);
                Y[size_t(k * cfg_.h + c)] = std::move(y);
            }
        // Root helper: rootvec[c](a) = sum_g Qroot(g) T_root(a,g,c).
        std::vector<std::vector<Real>> rootvec((size_t)cfg_.h);
        if (lay.has_root)
            for (int c = 0; c < cfg_.h; ++c) {
                rootvec[size_t(c)].assign(size_t(cfg_.d), Real(0));
                for (int64_t a = 0; a < cfg_.d; ++a)
                    for (int64_t g = 0; g < cfg_.d_root; ++g)
                        rootvec[size_t(c)][size_t(a)] += prev.Qroot(0, g) * p_.T_root(a, g, c);
            }

        // F messages and the H update.
        std::vector<unsigned char> valid((size_t)cols);
        for (int c = 0; c < cfg_.h; ++c) {
            Tensor<Real> F({n, cols});
            for (int64_t i = 0; i < n; ++i) {
                for (int64_t j = 0; j < n; ++j) {
                    if (j == i) continue;
                    // F(i,j) = Qz(i,:) T_k Qz(j,:)^T = <Qz(i,:), (Qz T_k^T)(j,:)>
                    const Tensor<Real>& y = Y[size_t(bank_of(i, j, cfg_) * cfg_.h + c)];
                    Real s = 0;
                    for (int64_t a = 0; a < cfg_.d; ++a) s += prev.Qz(i, a) * y(j, a);
                    F(i, j) = s;
                }
                if (lay.has_root) {
                    Real s = 0;
                    for (int64_t a = 0; a < cfg_.d; ++a)
                        s += prev.Qz(i, a) * rootvec[size_t(c)][size_t(a)];
                    F(i, lay.root_col()) = s;
                }
                for (int64_t kg = 0; kg < lay.n_global_cols; ++kg) {
                    Real s = 0;
                    for (int64_t a = 0; a < cfg_.d; ++a) s += prev.Qz(i, a) * p_.B(c, kg, a);
                    F(i, lay.global_col0() + kg) = s;
                }
            }
            for (int64_t i = 0; i < n; ++i) {
                std::vector<Real> row((size_t)cols);
                for (int64_t j = 0; j < cols; ++j) {
                    Real msg = (1 - Real(cfg_.beta_H)) * F(i, j) +
                               Real(cfg_.beta_H) * prev.Hmsg[size_t(c)](i, j);
                    if (j == i) msg = Real(0);  // never part of the domain
                    next.Hmsg[size_t(c)](i, j) = msg;
                    row[size_t(j)] = msg;
                    valid[size_t(j)] = (j != i);
                }
                detail::softmax_row_span(row.data(), valid.data(), cols, lamH);
                for (int64_t j = 0; j < cols; ++j)
                    next.Qh[size_t(c)](i, j) = Real(cfg_.alpha_H) * row[size_t(j)] +
                                               (1 - Real(cfg_.alpha_H)) * prev.Qh[size_t(c)](i, j);
            }
        }

        // Split-variant global heads (plain softmax, no damping/step size).
        if (cfg_.global_variant == GlobalVariant::DepSplit ||
            cfg_.global_variant == GlobalVariant::SingleSplit) {
            const int reps = cfg_.global_variant == GlobalVariant::DepSplit ? cfg_.h : 1;
            for (int c = 0; c < reps; ++c)
                for (int64_t i = 0; i < n; ++i) {
                    std::vector<Real> row((size_t)cfg_.m);
                    for (int64_t kg = 0; kg < cfg_.m; ++kg) {
                        Real s = 0;
                        for (int64_t a = 0; a < cfg_.d; ++a)
                            s += prev.Qz(i, a) * (cfg_.global_variant == GlobalVariant::DepSplit
                                                      ? p_.B(c, kg, a)
                                                      : p_.B(kg, a));
                        row[size_t(kg)] = s;
                    }
                    std::vector<unsigned char> all1(size_t(cfg_.m), 1);
                    detail::softmax_row_span(row.data(), all1.data(), cfg_.m, Real(1));
                    for (int64_t kg = 0; kg < cfg_.m; ++kg) next.Qg[size_t(c)](i, kg) = row[size_t(kg)];
                }
        }

        const auto& qh = cfg_.use_async ? next.Qh : prev.Qh;
        const auto& qg = cfg_.use_async ? next.Qg : prev.Qg;

        // G message and the Z update.
        for (int64_t i = 0; i < n; ++i) {
            std::vector<Real> row((size_t)cfg_.d);
            for (int64_t a = 0; a < cfg_.d; ++a) {
                Real g = 0;
                for (int c = 0; c < cfg_.h; ++c) {
                    for (int64_t j = 0; j < n; ++j) {
                        if (j == i) continue;
                        const int kij = bank_of(i, j, cfg_);
                        const int kji = bank_of(j, i, cfg_);
                        g += qh[size_t(c)](i, j) * Y[size_t(kij * cfg_.h + c)](j, a);
                        g += qh[size_t(c)](j, i) * X[size_t(kji * cfg_.h + c)](j, a);
                    }
                    if (lay.has_root)
                        g += qh[size_t(c)](i, lay.root_col()) * rootvec[size_t(c)][size_t(a)];
                    for (int64_t kg = 0; kg < lay.n_global_cols; ++kg)
                        g += qh[size_t(c)](i, lay.global_col0() + kg) * p_.B(c, kg, a);
                    if (cfg_.global_variant == GlobalVariant::DepSplit)
                        for (int64_t kg = 0; kg < cfg_.m; ++kg)
                            g += qg[size_t(c)](i, kg) * p_.B(c, kg, a);
                }
                if (cfg_.global_variant == GlobalVariant::SingleSplit)
                    for (int64_t kg = 0; kg < cfg_.m; ++kg) g += qg[0](i, kg) * p_.B(kg, a);
                Real msg = (1 - Real(cfg_.beta_Z)) * (p_.S(ids[size_t(i)], a) + g) +
                           Real(cfg_.beta_Z) * prev.Zmsg(i, a);
                next.Zmsg(i, a) = msg;
                row[size_t(a)] = msg;
            }
            std::vector<unsigned char> all1(size_t(cfg_.d), 1);
            detail::softmax_row_span(row.data(), all1.data(), cfg_.d, lamZ);
            for (int64_t a = 0; a < cfg_.d; ++a)
                next.Qz(i, a) =
                    Real(cfg_.alpha_Z) * row[size_t(a)] + (1 - Real(cfg_.alpha_Z)) * prev.Qz(i, a);
        }

        // Root label update (reads the same snapshots as the Z update).
        if (lay.has_root) {
            std::vector<Real> row((size_t)cfg_.d_root);
            for (int64_t g = 0; g < cfg_.d_root; ++g) {
                Real s = 0;
                for (int c = 0; c < cfg_.h; ++c)
                    for (int64_t i = 0; i < n; ++i) {
                        Real qa = 0;
                        for (int64_t a = 0; a < cfg_.d; ++a) qa += prev.Qz(i, a) * p_.T_root(a, g, c);
                        s += qh[size_t(c)](i, lay.root_col()) * qa;
                    }
                Real msg = (1 - Real(cfg_.beta_Z)) * s + Real(cfg_.beta_Z) * prev.RootMsg(0, g);
                next.RootMsg(0, g) = msg;
                row[size_t(g)] = msg;
            }
            std::vector<unsigned char> all1(size_t(cfg_.d_root), 1);
            detail::softmax_row_span(row.data(), all1.data(), cfg_.d_root, lamZ);
            for (int64_t g = 0; g < cfg_.d_root; ++g)
                next.Qroot(0, g) =
                    Real(cfg_.alpha_Z) * row[size_t(g)] + (1 - Real(cfg_.alpha_Z)) * prev.Qroot(0, g);
        }
        return next;
    }

    // Full T-iteration inference. `trajectory`, when given, receives the
    // state after every iteration (for state-for-state equivalence tests).
    ContextualReps<Real> run(const std::vector<int64_t>& ids,
                             std::vector<PosteriorState<Real>>* trajectory = nullptr) const {
        require(!ids.empty(), "run_inference: empty sentence");
        Tensor<Real> unary = unary_scores(p_, ids);
        PosteriorState<Real> st = init_state(unary, cfg_);
        for (int t = 0; t < cfg_.T_iters; ++t) {
            st = step(st, ids);
            if (trajectory) trajectory->push_back(st);
        }
        ContextualReps<Real> out;
        out.layout = st.layout;
        out.reps = st.Zmsg;
        for (auto& x : out.reps.data) x /= Real(cfg_.lambda_Z);
        if (cfg_.use_root) out.root_rep = st.Qroot;
        if (st.has_heads()) out.Qh = st.Qh;
        return out;
    }

private:
    const Parameters<Real>& p_;
    const ModelConfig& cfg_;
    std::vector<Tensor<Real>> banks_;  // [k * h + c] -> d x d

    void update_isolated(const PosteriorState<Real>& prev, PosteriorState<Real>& next,
                         const std::vector<int64_t>& ids) const {
        // Head domain is empty (single word, no root/globals): Z keeps its
        // unary message.
        const int64_t n = int64_t(ids.size());
        for (int64_t i = 0; i < n; ++i) {
            std::vector<Real> row((size_t)cfg_.d);
            for (int64_t a = 0; a < cfg_.d; ++a) {
                Real msg = (1 - Real(cfg_.beta_Z)) * p_.S(ids[size_t(i)], a) +
                           Real(cfg_.beta_Z) * prev.Zmsg(i, a);
                next.Zmsg(i, a) = msg;
                row[size_t(a)] = msg;
            }
            std::vector<unsigned char> all1(size_t(cfg_.d), 1);
            detail::softmax_row_span(row.data(), all1.data(), cfg_.d, Real(cfg_.lambda_Z));
            for (int64_t a = 0; a < cfg_.d; ++a)
                next.Qz(i, a) =
                    Real(cfg_.alpha_Z) * row[size_t(a)] + (1 - Real(cfg_.alpha_Z)) * prev.Qz(i, a);
        }
    }
};

template <class Real>
ContextualReps<Real> run_inference(const Parameters<Real>& params, const std::vector<int64_t>& ids,
                                   std::vector<PosteriorState<Real>>* trajectory = nullptr) {
    return ScalarEngine<Real>(params).run(ids, trajectory);
}

// ---------------------------------------------------------------------------
// Tensorized (tape) path
// ---------------------------------------------------------------------------

template <class Real>
struct ParamNodes {
    typename Tape<Real>::Id S = -1, T = -1, U = -1, V = -1, W = -1, T_root = -1, B = -1;
};

template <class Real>
ParamNodes<Real> bind_parameters(Tape<Real>& tape, const Parameters<Real>& p) {
    ParamNodes<Real> out;
    out.S = tape.leaf(p.S);
    if (p.config.decomposition == Decomposition::Full) out.T = tape.leaf(p.T);
    else {
        out.U = tape.leaf(p.U);
        out.V = tape.leaf(p.V);
        if (p.config.decomposition == Decomposition::UVW) out.W = tape.leaf(p.W);
    }
    if (p.config.use_root) out.T_root = tape.leaf(p.T_root);
    if (p.config.global_variant != GlobalVariant::None) out.B = tape.leaf(p.B);
    return out;
}

// After tape.backward(), fold the leaf gradients into the parameter
// gradient slots.
template <class Real>
void accumulate_param_grads(const Tape<Real>& tape, const ParamNodes<Real>& nodes,
                            Parameters<Real>& p) {
    auto addinto = [&](typename Tape<Real>::Id id, Tensor<Real>& dst) {
        if (id < 0) return;
        Tensor<Real> g = tape.grad(id);
        for (int64_t i = 0; i < dst.numel(); ++i) dst(i) += g(i);
    };
    addinto(nodes.S, p.gS);
    addinto(nodes.T, p.gT);
    addinto(nodes.U, p.gU);
    addinto(nodes.V, p.gV);
    addinto(nodes.W, p.gW);
    addinto(nodes.T_root, p.gT_root);
    addinto(nodes.B, p.gB);
}

// Differentiable inference graph for one sentence.
template <class Real>
struct SentenceGraph {
    typename Tape<Real>::Id reps = -1;       // n x d
    typename Tape<Real>::Id root_rep = -1;   // 1 x d_root
    std::vector<typename Tape<Real>::Id> qh; // per channel
    HeadLayout layout;
};

// Builds the general tensorized inference graph; numerically identical to
// the scalar path. `dropout_mask` (optional, n x d, entries 0 or 1/(1-p))
// is applied to the G message; pass nullptr outside training.
template <class Real>
SentenceGraph<Real> build_inference_graph(Tape<Real>& tape, const ParamNodes<Real>& pn,
                                          const ModelConfig& cfg, int64_t vocab_size,
                                          const std::vector<int64_t>& ids,
                                          const Tensor<Real>* dropout_mask = nullptr) {
    using Id = typename Tape<Real>::Id;
    (void)vocab_size;
    require(!ids.empty(), "build_inference_graph: empty sentence");
    if (cfg.path == EnginePath::TransformerForm)
        throw ContractError("build_inference_graph handles the general path only");
    const int64_t n = int64_t(ids.size());
    const HeadLayout lay = HeadLayout::of(n, cfg);
    const int64_t cols = lay.cols();
    const Real lamZ = Real(cfg.lambda_Z);
    const Real lamH = Real(cfg.effective_lambda_H());
    const int K = cfg.banks();
    const int64_t d = cfg.d, r = cfg.rank, h = cfg.h, m = cfg.m, d_root = cfg.d_root;

    SentenceGraph<Real> out;
    out.layout = lay;

    Id S_rows = tape.gather_rows(pn.S, ids);
    Id Qz = tape.softmax_rows(S_rows, nullptr, lamZ);
    Id Zmsg = S_rows;

    if (lay.head_domain_empty()) {
        // Isolated word: reps stay at the (damped) unary message.
        for (int t = 0; t < cfg.T_iters; ++t)
            if (cfg.beta_Z > 0) Zmsg = tape.add(tape.scale(S_rows, Real(1 - cfg.beta_Z)),
                                                tape.scale(Zmsg, Real(cfg.beta_Z)));
        out.reps = tape.scale(Zmsg, Real(1) / lamZ);
        return out;
    }

    // Constant masks.
    std::vector<Tensor<Real>> bank_mask(size_t(K), Tensor<Real>({n, n}));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            if (i != j) bank_mask[size_t(bank_of(i, j, cfg))](i, j) = Real(1);
    Tensor<Real> offdiag = Tensor<Real>::full({n, cols}, Real(1));
    for (int64_t i = 0; i < n && i < cols; ++i) offdiag(i, i) = Real(0);

    // Parameter slices per (bank, channel).
    auto slice_U = [&](int k, int c) -> Id {
        if (cfg.decomposition == Decomposition::UV)
            return tape.strided_slice(pn.U, (int64_t(k) * d * h + c) * r, d, r, h * r, 1);
        return tape.strided_slice(pn.U, int64_t(k) * d * r, d, r, r, 1);
    };
    auto slice_V = [&](int k, int c) -> Id {
        if (cfg.decomposition == Decomposition::UV)
            return tape.strided_slice(pn.V, (int64_t(k) * d * h + c) * r, d, r, h * r, 1);
        return tape.strided_slice(pn.V, int64_t(k) * d * r, d, r, r, 1);
    };
    auto slice_W = [&](int c) -> Id { return tape.strided_slice(pn.W, int64_t(c) * r, 1, r, r, 1); };
    auto slice_T = [&](int k, int c) -> Id {
        return tape.strided_slice(pn.T, (int64_t(k) * h + c) * d * d, d, d, d, 1);
    };
    auto slice_Troot = [&](int c) -> Id {
        return tape.strided_slice(pn.T_root, c, d, d_root, d_root * h, h);
    };
    auto slice_B = [&](int c) -> Id {
        if (cfg.global_variant == GlobalVariant::SingleSplit) return pn.B;
        return tape.strided_slice(pn.B, int64_t(c) * m * d, m, d, d, 1);
    };

    std::vector<Id> Troot_c(size_t(h), -1), B_c(size_t(h), -1);
    if (lay.has_root)
        for (int c = 0; c < h; ++c) Troot_c[size_t(c)] = slice_Troot(c);
    if (cfg.global_variant != GlobalVariant::None)
        for (int c = 0; c < h; ++c)
            B_c[size_t(c)] = (cfg.global_variant == GlobalVariant::SingleSplit && c > 0)
                                 ? B_c[0]
                                 : slice_B(c);

    // Initial distributions.
    Id Qroot = -1, RootMsg = -1;
    if (lay.has_root) {
        Qroot = tape.leaf(Tensor<Real>::full({1, d_root}, Real(1) / Real(d_root)));
        RootMsg = tape.leaf(Tensor<Real>({1, d_root}));
    }
    std::vector<Id> Qh(size_t(h), -1), Hmsg(size_t(h), -1);
    {
        Tensor<Real> uh({n, cols});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < cols; ++j)
                if (j != i) uh(i, j) = Real(1) / Real(cols - 1);
        for (int c = 0; c < h; ++c) {
            Qh[size_t(c)] = tape.leaf(uh);
            Hmsg[size_t(c)] = tape.leaf(Tensor<Real>({n, cols}));
        }
    }
    const int n_qg = cfg.global_variant == GlobalVariant::DepSplit
                         ? int(h)
                         : (cfg.global_variant == GlobalVariant::SingleSplit ? 1 : 0);
    std::vector<Id> Qg(size_t(std::max(n_qg, 0)), -1);
    for (int c = 0; c < n_qg; ++c)
        Qg[size_t(c)] = tape.leaf(Tensor<Real>::full({n, m}, Real(1) / Real(m)));

    for (int t = 0; t < cfg.T_iters; ++t) {
        const bool last = (t == cfg.T_iters - 1);

        // Shared per-(bank,channel) products for this iteration's Qz.
        // P = Qz*U-side, R = Qz*V-side (factored), or X = Qz*T, Y = Qz*T^T.
        struct KC { Id P = -1, R = -1, U = -1, V = -1, X = -1, Y = -1; };
        std::vector<KC> kc(size_t(K) * size_t(h));
        for (int k = 0; k < K; ++k) {
            Id QU_uvw = -1, QV_uvw = -1;
            if (cfg.decomposition == Decomposition::UVW) {
                QU_uvw = tape.matmul(Qz, slice_U(k, 0));
                QV_uvw = tape.matmul(Qz, slice_V(k, 0));
            }
            for (int c = 0; c < h; ++c) {
                KC& e = kc[size_t(k * h + c)];
                if (cfg.decomposition == Decomposition::Full) {
                    Id T = slice_T(k, c);
                    e.X = tape.matmul(Qz, T);
                    e.Y = tape.matmul(Qz, T, false, true);
                } else if (cfg.decomposition == Decomposition::UV) {
                    e.U = slice_U(k, c);
                    e.V = slice_V(k, c);
                    e.P = tape.matmul(Qz, e.U);
                    e.R = tape.matmul(Qz, e.V);
                } else {
                    e.P = tape.mul_rowvec(QU_uvw, slice_W(c));
                    e.R = QV_uvw;
                    e.U = slice_U(k, 0);  // factors, for the G back-projection
                    e.V = slice_V(k, 0);
                }
            }
        }
        auto F_word_kc = [&](int k, int c) -> Id {
            const KC& e = kc[size_t(k * h + c)];
            Id f = (cfg.decomposition == Decomposition::Full)
                       ? tape.matmul(e.X, Qz, false, true)
                       : tape.matmul(e.P, e.R, false, true);
            return tape.mul_const(f, bank_mask[size_t(k)]);
        };
        std::vector<Id> rootvec(size_t(h), -1);  // 1 x d: Qroot * T_root_c^T
        if (lay.has_root)
            for (int c = 0; c < h; ++c)
                rootvec[size_t(c)] = tape.matmul(Qroot, Troot_c[size_t(c)], false, true);

        // --- H update ---
        std::vector<Id> Qh_new((size_t)h);
        for (int c = 0; c < h; ++c) {
            Id Fw = F_word_kc(0, c);
            for (int k = 1; k < K; ++k) Fw = tape.add(Fw, F_word_kc(k, c));
            std::vector<Id> parts{Fw};
            if (lay.has_root) parts.push_back(tape.matmul(Qz, rootvec[size_t(c)], false, true));
            if (lay.n_global_cols > 0) parts.push_back(tape.matmul(Qz, B_c[size_t(c)], false, true));
            Id F = parts.size() == 1 ? parts[0] : tape.concat_cols(parts);
            Id msg = (cfg.beta_H > 0)
                         ? tape.add(tape.scale(F, Real(1 - cfg.beta_H)),
                                    tape.scale(Hmsg[size_t(c)], Real(cfg.beta_H)))
                         : F;
            Hmsg[size_t(c)] = msg;
            Id qstar = tape.softmax_rows(msg, &offdiag, lamH);
            Qh_new[size_t(c)] = (cfg.alpha_H < 1.0)
                                    ? tape.add(tape.scale(qstar, Real(cfg.alpha_H)),
                                               tape.scale(Qh[size_t(c)], Real(1 - cfg.alpha_H)))
                                    : qstar;
        }

        // --- split-variant global head update ---
        std::vector<Id> Qg_new(Qg);
        for (int c = 0; c < n_qg; ++c) {
            Id Hg = tape.matmul(Qz, B_c[size_t(c)], false, true);
            Qg_new[size_t(c)] = tape.softmax_rows(Hg, nullptr, Real(1));
        }

        const std::vector<Id>& qh_sel = cfg.use_async ? Qh_new : Qh;
        const std::vector<Id>& qg_sel = cfg.use_async ? Qg_new : Qg;

        // --- G message ---
        Id G = -1;
        auto addG = [&](Id term) { G = (G < 0) ? term : tape.add(G, term); };
        for (int c = 0; c < h; ++c) {
            Id qh_word = (cols > n) ? tape.slice_cols(qh_sel[size_t(c)], 0, n) : qh_sel[size_t(c)];
            for (int k = 0; k < K; ++k) {
                const KC& e = kc[size_t(k * h + c)];
                Id A = tape.mul_const(qh_word, bank_mask[size_t(k)]);
                if (cfg.decomposition == Decomposition::Full) {
                    addG(tape.matmul(A, e.Y));                 // Qh ⊙ M_k · (Qz T^T)
                    addG(tape.matmul(A, e.X, true, false));    // (Qh ⊙ M_k)^T · (Qz T)
                } else {
                    // term1: A (Qz V) diag(W) U^T ; term2: A^T (Qz U diag(W)) V^T
                    Id AR = tape.matmul(A, e.R);
                    if (cfg.decomposition == Decomposition::UVW)
                        AR = tape.mul_rowvec(AR, slice_W(c));
                    addG(tape.matmul(AR, e.U, false, true));
                    addG(tape.matmul(tape.matmul(A, e.P, true, false), e.V, false, true));
                }
            }
            if (lay.has_root) {
                Id colh = tape.slice_cols(qh_sel[size_t(c)], lay.root_col(), lay.root_col() + 1);
                addG(tape.matmul(colh, rootvec[size_t(c)]));
            }
            if (lay.n_global_cols > 0) {
                Id gblock = tape.slice_cols(qh_sel[size_t(c)], lay.global_col0(), cols);
                addG(tape.matmul(gblock, B_c[size_t(c)]));
            }
            if (cfg.global_variant == GlobalVariant::DepSplit)
                addG(tape.matmul(qg_sel[size_t(c)], B_c[size_t(c)]));
        }
        if (cfg.global_variant == GlobalVariant::SingleSplit) addG(tape.matmul(qg_sel[0], B_c[0]));

        if (dropout_mask) G = tape.mul_const(G, *dropout_mask);

        Id SG = tape.add(S_rows, G);
        Id Zmsg_new = (cfg.beta_Z > 0) ? tape.add(tape.scale(SG, Real(1 - cfg.beta_Z)),
                                                  tape.scale(Zmsg, Real(cfg.beta_Z)))
                                       : SG;

        // --- root label update (same Qz snapshot as G) ---
        if (lay.has_root) {
            Id Groot = -1;
            for (int c = 0; c < h; ++c) {
                Id colh = tape.slice_cols(qh_sel[size_t(c)], lay.root_col(), lay.root_col() + 1);
                Id term = tape.matmul(tape.matmul(colh, Qz, true, false), Troot_c[size_t(c)]);
                Groot = (Groot < 0) ? term : tape.add(Groot, term);
            }
            Id rmsg = (cfg.beta_Z > 0) ? tape.add(tape.scale(Groot, Real(1 - cfg.beta_Z)),
                                                  tape.scale(RootMsg, Real(cfg.beta_Z)))
                                       : Groot;
            RootMsg = rmsg;
            Id qstar = tape.softmax_rows(rmsg, nullptr, lamZ);
            Qroot = (cfg.alpha_Z < 1.0)
                        ? tape.add(tape.scale(qstar, Real(cfg.alpha_Z)),
                                   tape.scale(Qroot, Real(1 - cfg.alpha_Z)))
                        : qstar;
        }

        // --- Z update ---
        Zmsg = Zmsg_new;
        Id qstar = tape.softmax_rows(Zmsg, nullptr, lamZ);
        Qz = (cfg.alpha_Z < 1.0) ? tape.add(tape.scale(qstar, Real(cfg.alpha_Z)),
                                            tape.scale(Qz, Real(1 - cfg.alpha_Z)))
                                 : qstar;
        Qh = Qh_new;
        Qg = Qg_new;
        if (last) {
            out.reps = tape.scale(Zmsg, Real(1) / lamZ);
            out.root_rep = Qroot;
            out.qh = Qh;
        }
    }
    return out;
}

// Single-channel update (the attention-like kernel): returns
// softmax_offdiag(Qz U (Qz V)^T / lambda_H) * (Qz V), an n x r block.
template <class Real>
Tensor<Real> single_channel_update(const Tensor<Real>& Qz, const Tensor<Real>& U,
                                   const Tensor<Real>& V, Real lambda_H) {
    if (Qz.rank() != 2 || U.rank() != 2 || V.rank() != 2 || U.dim(0) != Qz.dim(1) ||
        !U.same_shape(V))
        throw DimensionError("single_channel_update expects Qz [n x d], U and V [d x r]");
    Tape<Real> tape;
    typename Tape<Real>::Id qz = tape.leaf(Qz);
    typename Tape<Real>::Id q = tape.matmul(qz, tape.leaf(U));
    typename Tape<Real>::Id kv = tape.matmul(qz, tape.leaf(V));
    typename Tape<Real>::Id logits = tape.matmul(q, kv, false, true);
    const int64_t n = Qz.dim(0);
    Tensor<Real> offdiag = Tensor<Real>::full({n, n}, Real(1));
    for (int64_t i = 0; i < n; ++i) offdiag(i, i) = Real(0);
    typename Tape<Real>::Id attn = tape.softmax_rows(logits, &offdiag, lambda_H);
    return tape.value(tape.matmul(attn, kv));
}

// Transformer-form fast path: T iterations of
//   Qz <- softmax((S + 2 sum_c channel_c U_c^T) / lambda_Z)
// with the softmax skipped in the last iteration. Only defined for the
// distance-insensitive uv model without root/global extensions and with
// the default schedule.
template <class Real>
SentenceGraph<Real> build_transformer_form_graph(Tape<Real>& tape, const ParamNodes<Real>& pn,
                                                 const ModelConfig& cfg,
                                                 const std::vector<int64_t>& ids) {
    using Id = typename Tape<Real>::Id;
    if (cfg.decomposition != Decomposition::UV)
        throw UnsupportedCombination("transformer_form requires the uv decomposition");
    if (cfg.use_distance)
        throw UnsupportedCombination("transformer_form requires distance banks to be disabled");
    if (cfg.use_root || cfg.global_variant != GlobalVariant::None)
        throw UnsupportedCombination("transformer_form does not support root or global variables");
    if (cfg.alpha_Z != 1.0 || cfg.alpha_H != 1.0 || cfg.beta_Z != 0.0 || cfg.beta_H != 0.0)
        throw UnsupportedCombination("transformer_form uses the plain schedule (alpha=1, beta=0)");
    require(ids.size() >= 2, "transformer_form requires at least two tokens");

    const int64_t n = int64_t(ids.size());
    const int64_t d = cfg.d, r = cfg.rank, h = cfg.h;
    const Real lamZ = Real(cfg.lambda_Z);
    const Real lamH = Real(cfg.effective_lambda_H());
    SentenceGraph<Real> out;
    out.layout = HeadLayout::of(n, cfg);

    Tensor<Real> offdiag = Tensor<Real>::full({n, n}, Real(1));
    for (int64_t i = 0; i < n; ++i) offdiag(i, i) = Real(0);

    Id S_rows = tape.gather_rows(pn.S, ids);
    Id Qz = tape.softmax_rows(S_rows, nullptr, lamZ);
    out.qh.assign(size_t(h), -1);
    for (int t = 0; t < cfg.T_iters; ++t) {
        Id acc = -1;
        for (int c = 0; c < h; ++c) {
            Id Uc = tape.strided_slice(pn.U, int64_t(c) * r, d, r, h * r, 1);
            Id Vc = tape.strided_slice(pn.V, int64_t(c) * r, d, r, h * r, 1);
            Id q = tape.matmul(Qz, Uc);
            Id kv = tape.matmul(Qz, Vc);
            Id attn = tape.softmax_rows(tape.matmul(q, kv, false, true), &offdiag, lamH);
            out.qh[size_t(c)] = attn;
            Id chan = tape.matmul(attn, kv);               // n x r
            Id contrib = tape.matmul(chan, Uc, false, true);  // n x d
            acc = (acc < 0) ? contrib : tape.add(acc, contrib);
        }
        Id SG = tape.add(S_rows, tape.scale(acc, Real(2)));
        if (t == cfg.T_iters - 1) out.reps = tape.scale(SG, Real(1) / lamZ);
        else Qz = tape.softmax_rows(SG, nullptr, lamZ);
    }
    return out;
}

// Forward-only tensorized inference (dispatches on cfg.path).
template <class Real>
ContextualReps<Real> run_inference_tensorized(const Parameters<Real>& params,
                                              const std::vector<int64_t>& ids) {
    Tape<Real> tape;
    ParamNodes<Real> pn = bind_parameters(tape, params);
    SentenceGraph<Real> g =
        params.config.path == EnginePath::TransformerForm
            ? build_transformer_form_graph(tape, pn, params.config, ids)
            : build_inference_graph(tape, pn, params.config, params.vocab_size, ids);
    ContextualReps<Real> out;
    out.layout = g.layout;
    out.reps = tape.value(g.reps);
    if (g.root_rep >= 0) out.root_rep = tape.value(g.root_rep);
    for (auto id : g.qh)
        if (id >= 0) out.Qh.push_back(tape.value(id));
    return out;
}

// Most probable head of each word per channel; ties break toward the
// smaller column index.
template <class Real>
struct HeadChoice {
    int64_t head;
    Real probability;
};

template <class Real>
std::vector<std::vector<HeadChoice<Real>>> extract_dependency_heads(
    const std::vector<Tensor<Real>>& Qh) {
    std::vector<std::vector<HeadChoice<Real>>> out;
    for (const auto& q : Qh) {
        std::vector<HeadChoice<Real>> per_word;
        for (int64_t i = 0; i < q.dim(0); ++i) {
            int64_t best = 0;
            for (int64_t j = 1; j < q.dim(1); ++j)
                if (q(i, j) > q(i, best)) best = j;
            per_word.push_back({best, q(i, best)});
        }
        out.push_back(std::move(per_word));
    }
    return out;
}

}  // namespace ptran
