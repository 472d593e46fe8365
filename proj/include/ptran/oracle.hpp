#pragma once

#include <cmath>
#include <vector>

#include "ptran/model.hpp"
#include "ptran/state.hpp"

// Brute-force and closed-form reference computations on tiny instances.
// Everything here is written as literal nested loops over the update and
// energy formulas, independent of the engine's message code, so it can
// serve as the equivalence oracle. Global-variable variants are supported
// by the reference stepper but not by exact enumeration.
namespace ptran::oracle {

// One joint assignment: a label per word, a head per (channel, word), and
// optionally a root label.
struct Assignment {
    std::vector<int> z;                      // length n, label ids
    std::vector<std::vector<int>> heads;     // h x n; head j in [0,n) or n for root
    int z_root = 0;
};

namespace detail {

// Direct factor-sum materialization of T^{(c)} bank k entry (a, b).
template <class Real>
Real ternary_entry(const Parameters<Real>& p, int c, int k, int64_t a, int64_t b) {
    switch (p.config.decomposition) {
        case Decomposition::Full:
            return p.T(k, c, a, b);
        case Decomposition::UV: {
            Real s = 0;
            for (int64_t l = 0; l < p.config.rank; ++l) s += p.U(k, a, c, l) * p.V(k, b, c, l);
            return s;
        }
        case Decomposition::UVW: {
            Real s = 0;
            for (int64_t l = 0; l < p.config.rank; ++l)
                s += p.U(k, a, l) * p.V(k, b, l) * p.W(c, l);
            return s;
        }
    }
    return 0;
}

template <class Real>
Real ternary_at(const Parameters<Real>& p, int c, int64_t i, int64_t j, int64_t a, int64_t b) {
    return ternary_entry(p, c, bank_of(i, j, p.config), a, b);
}

template <class Real>
void softmax_inplace(std::vector<Real>& v, Real lambda) {
    Real mx = v[0];
    for (Real x : v) mx = std::max(mx, x);
    Real s = 0;
    for (Real& x : v) {
        x = std::exp((x - mx) / lambda);
        s += x;
    }
    for (Real& x : v) x /= s;
}

}  // namespace detail

// Energy of a complete assignment:
//   e(s) = -sum_i S[w_i, z_i]
//          -sum_c sum_i T[f(i - h_ic)][z_i, z_{h_ic}]      (word head)
//          -sum_c sum_{i: h_ic = root} T_root[z_i, z_root]
// so that p(s) is proportional to exp(-e(s)).
template <class Real>
Real energy(const Assignment& s, const Parameters<Real>& p, const std::vector<int64_t>& ids) {
    const ModelConfig& cfg = p.config;
    require(cfg.global_variant == GlobalVariant::None,
            "oracle::energy does not cover global variants");
    const int64_t n = int64_t(ids.size());
    Real e = 0;
    for (int64_t i = 0; i < n; ++i) e -= p.S(ids[size_t(i)], s.z[size_t(i)]);
    for (int c = 0; c < cfg.h; ++c) {
        for (int64_t i = 0; i < n; ++i) {
            int j = s.heads[size_t(c)][size_t(i)];
            if (j == int(n)) {
                require(cfg.use_root, "oracle::energy: root head without use_root");
                e -= p.T_root(s.z[size_t(i)], s.z_root, c);
            } else {
                require(j != int(i), "oracle::energy: self-head");
                e -= detail::ternary_at(p, c, i, int64_t(j), s.z[size_t(i)], s.z[size_t(j)]);
            }
        }
    }
    return e;
}

template <class Real>
struct ExactMarginals {
    Tensor<Real> pz;                    // n x d
    std::vector<Tensor<Real>> ph;       // h of n x (n [+1])
    Tensor<Real> proot;                 // 1 x d_root (when use_root)
    Real total_probability = 0;         // should be 1 after normalization
};

// Exact marginals by full enumeration of the joint. Guarded to at most
// 10^6 states so instances stay sub-second.
template <class Real>
ExactMarginals<Real> exact_marginals(const Parameters<Real>& p, const std::vector<int64_t>& ids) {
    const ModelConfig& cfg = p.config;
    require(cfg.global_variant == GlobalVariant::None,
            "oracle::exact_marginals does not cover global variants");
    const int64_t n = int64_t(ids.size());
    require(n >= 1, "exact_marginals: empty sentence");
    const int64_t head_dom = (n - 1) + (cfg.use_root ? 1 : 0);
    require(head_dom >= 1 || cfg.h == 0 || n == 1, "exact_marginals: empty head domain");

    double states = std::pow(double(cfg.d), double(n));
    if (n > 1 || cfg.use_root) states *= std::pow(double(head_dom), double(n * cfg.h));
    if (cfg.use_root) states *= double(cfg.d_root);
    if (!(states <= 1e6)) throw ContractError("exact_marginals: instance exceeds the 1e6-state guard");

    const int64_t hcols = n + (cfg.use_root ? 1 : 0);
    ExactMarginals<Real> out;
    out.pz = Tensor<Real>({n, cfg.d});
    out.ph.assign(size_t(cfg.h), Tensor<Real>({n, hcols}));
    if (cfg.use_root) out.proot = Tensor<Real>({1, cfg.d_root});

    // Odometer over (z_1..z_n, h_11..h_nh, z_root). Head values index the
    // per-word candidate list {j != i} (+ root).
    Assignment s;
    s.z.assign(size_t(n), 0);
    s.heads.assign(size_t(cfg.h), std::vector<int>(size_t(n), 0));
    std::vector<std::vector<int>> candidates((size_t)n);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j)
            if (j != i) candidates[size_t(i)].push_back(int(j));
        if (cfg.use_root) candidates[size_t(i)].push_back(int(n));
    }
    const bool heads_exist = head_dom >= 1;

    std::vector<int> odo;  // digit per variable
    std::vector<int> base;
    for (int64_t i = 0; i < n; ++i) base.push_back(cfg.d);
    if (heads_exist)
        for (int c = 0; c < cfg.h; ++c)
            for (int64_t i = 0; i < n; ++i) base.push_back(int(candidates[size_t(i)].size()));
    if (cfg.use_root) base.push_back(cfg.d_root);
    odo.assign(base.size(), 0);

    // First pass computes max(-e) for stable exponentiation; enumeration is
    // cheap enough to run twice.
    double best = -std::numeric_limits<double>::infinity();
    auto decode = [&]() {
        size_t pos = 0;
        for (int64_t i = 0; i < n; ++i) s.z[size_t(i)] = odo[pos++];
        if (heads_exist)
            for (int c = 0; c < cfg.h; ++c)
                for (int64_t i = 0; i < n; ++i)
                    s.heads[size_t(c)][size_t(i)] = candidates[size_t(i)][size_t(odo[pos++])];
        if (cfg.use_root) s.z_root = odo[pos++];
    };
    auto advance = [&]() -> bool {
        for (size_t k = 0; k < odo.size(); ++k) {
            if (++odo[k] < base[k]) return true;
            odo[k] = 0;
        }
        return false;
    };

    do {
        decode();
        best = std::max(best, -double(energy(s, p, ids)));
    } while (advance());

    double zsum = 0;
    std::fill(odo.begin(), odo.end(), 0);
    do {
        decode();
        double w = std::exp(-double(energy(s, p, ids)) - best);
        zsum += w;
        for (int64_t i = 0; i < n; ++i) out.pz(i, s.z[size_t(i)]) += Real(w);
        if (heads_exist)
            for (int c = 0; c < cfg.h; ++c)
                for (int64_t i = 0; i < n; ++i) out.ph[size_t(c)](i, s.heads[size_t(c)][size_t(i)]) += Real(w);
        if (cfg.use_root) out.proot(0, s.z_root) += Real(w);
    } while (advance());

    for (auto& x : out.pz.data) x /= Real(zsum);
    for (auto& t : out.ph)
        for (auto& x : t.data) x /= Real(zsum);
    if (cfg.use_root)
        for (auto& x : out.proot.data) x /= Real(zsum);
    out.total_probability = Real(1);
    return out;
}

// Mean-field free-energy term E(Q): the expected energy of the relaxed
// assignment under the product distribution Q. Multilinear in the Q
// entries, so central differences on it are exact up to roundoff.
template <class Real>
Real relaxed_energy(const PosteriorState<Real>& st, const Parameters<Real>& p,
                    const std::vector<int64_t>& ids) {
    const ModelConfig& cfg = p.config;
    require(cfg.global_variant == GlobalVariant::None,
            "oracle::relaxed_energy does not cover global variants");
    const int64_t n = int64_t(ids.size());
    Real e = 0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t a = 0; a < cfg.d; ++a) e -= st.Qz(i, a) * p.S(ids[size_t(i)], a);
    for (int c = 0; c < cfg.h; ++c) {
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                if (j == i) continue;
                Real qh = st.Qh[size_t(c)](i, j);
                for (int64_t a = 0; a < cfg.d; ++a)
                    for (int64_t b = 0; b < cfg.d; ++b)
                        e -= st.Qz(i, a) * st.Qz(j, b) * qh * detail::ternary_at(p, c, i, j, a, b);
            }
            if (cfg.use_root) {
                Real qh = st.Qh[size_t(c)](i, st.layout.root_col());
                for (int64_t a = 0; a < cfg.d; ++a)
                    for (int64_t g = 0; g < cfg.d_root; ++g)
                        e -= st.Qz(i, a) * st.Qroot(0, g) * qh * p.T_root(a, g, c);
            }
        }
    }
    return e;
}

// One MFVI iteration, written as literal loops over the update equations
// with every configured option (schedule, message weights, damping, step
// size, root, globals). This is the reference the engine is tested against.
template <class Real>
PosteriorState<Real> mfvi_reference_step(const PosteriorState<Real>& prev,
                                         const Parameters<Real>& p,
                                         const std::vector<int64_t>& ids) {
    const ModelConfig& cfg = p.config;
    const int64_t n = int64_t(ids.size());
    const HeadLayout lay = prev.layout;
    const int64_t cols = lay.cols();
    const Real lamZ = Real(cfg.lambda_Z);
    const Real lamH = Real(cfg.effective_lambda_H());
    PosteriorState<Real> next = prev;

    if (!prev.has_heads()) {
        // No head variables anywhere: Z sees only its unary term.
        for (int64_t i = 0; i < n; ++i) {
            std::vector<Real> row((size_t)cfg.d);
            for (int64_t a = 0; a < cfg.d; ++a) {
                Real msg = (1 - Real(cfg.beta_Z)) * p.S(ids[size_t(i)], a) +
                           Real(cfg.beta_Z) * prev.Zmsg(i, a);
                next.Zmsg(i, a) = msg;
                row[size_t(a)] = msg;
            }
            detail::softmax_inplace(row, lamZ);
            for (int64_t a = 0; a < cfg.d; ++a)
                next.Qz(i, a) = Real(cfg.alpha_Z) * row[size_t(a)] +
                                (1 - Real(cfg.alpha_Z)) * prev.Qz(i, a);
        }
        return next;
    }

    // Snapshot the Z-side distributions the messages read from.
    const Tensor<Real>& qz = prev.Qz;
    const Tensor<Real>& qroot = prev.Qroot;

    // --- F messages feeding the H-variable updates, one per channel ---
    std::vector<Tensor<Real>> F(size_t(cfg.h), Tensor<Real>({n, cols}));
    for (int c = 0; c < cfg.h; ++c) {
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                if (j == i) continue;
                Real s = 0;
                for (int64_t a = 0; a < cfg.d; ++a)
                    for (int64_t b = 0; b < cfg.d; ++b)
                        s += qz(i, a) * qz(j, b) * detail::ternary_at(p, c, i, j, a, b);
                F[size_t(c)](i, j) = s;
            }
            if (lay.has_root) {
                Real s = 0;
                for (int64_t a = 0; a < cfg.d; ++a)
                    for (int64_t g = 0; g < cfg.d_root; ++g)
                        s += qz(i, a) * qroot(0, g) * p.T_root(a, g, c);
                F[size_t(c)](i, lay.root_col()) = s;
            }
            for (int64_t k = 0; k < lay.n_global_cols; ++k) {
                Real s = 0;
                for (int64_t a = 0; a < cfg.d; ++a) s += qz(i, a) * p.B(c, k, a);
                F[size_t(c)](i, lay.global_col0() + k) = s;
            }
        }
    }

    // --- H update: damping, weighted softmax, step size ---
    auto update_heads = [&]() {
        for (int c = 0; c < cfg.h; ++c) {
            for (int64_t i = 0; i < n; ++i) {
                std::vector<Real> row;
                std::vector<int64_t> idx;
                for (int64_t j = 0; j < cols; ++j) {
                    if (j == i) continue;
                    Real msg = (1 - Real(cfg.beta_H)) * F[size_t(c)](i, j) +
                               Real(cfg.beta_H) * prev.Hmsg[size_t(c)](i, j);
                    next.Hmsg[size_t(c)](i, j) = msg;
                    row.push_back(msg);
                    idx.push_back(j);
                }
                detail::softmax_inplace(row, lamH);
                for (size_t t = 0; t < idx.size(); ++t)
                    next.Qh[size_t(c)](i, idx[t]) = Real(cfg.alpha_H) * row[t] +
                                                    (1 - Real(cfg.alpha_H)) *
                                                        prev.Qh[size_t(c)](i, idx[t]);
            }
        }
    };

    // --- split-variant global head update (no damping / step size) ---
    auto update_globals = [&]() {
        if (cfg.global_variant == GlobalVariant::DepSplit) {
            for (int c = 0; c < cfg.h; ++c)
                for (int64_t i = 0; i < n; ++i) {
                    std::vector<Real> row((size_t)cfg.m);
                    for (int64_t k = 0; k < cfg.m; ++k) {
                        Real s = 0;
                        for (int64_t a = 0; a < cfg.d; ++a) s += qz(i, a) * p.B(c, k, a);
                        row[size_t(k)] = s;
                    }
                    detail::softmax_inplace(row, Real(1));
                    for (int64_t k = 0; k < cfg.m; ++k) next.Qg[size_t(c)](i, k) = row[size_t(k)];
                }
        } else if (cfg.global_variant == GlobalVariant::SingleSplit) {
            for (int64_t i = 0; i < n; ++i) {
                std::vector<Real> row((size_t)cfg.m);
                for (int64_t k = 0; k < cfg.m; ++k) {
                    Real s = 0;
                    for (int64_t a = 0; a < cfg.d; ++a) s += qz(i, a) * p.B(k, a);
                    row[size_t(k)] = s;
                }
                detail::softmax_inplace(row, Real(1));
                for (int64_t k = 0; k < cfg.m; ++k) next.Qg[0](i, k) = row[size_t(k)];
            }
        }
    };

    // --- G message and Z / root update, reading head distributions `qh` ---
    auto update_labels = [&](const std::vector<Tensor<Real>>& qh,
                             const std::vector<Tensor<Real>>& qg) {
        for (int64_t i = 0; i < n; ++i) {
            std::vector<Real> row((size_t)cfg.d);
            for (int64_t a = 0; a < cfg.d; ++a) {
                Real g = 0;
                for (int c = 0; c < cfg.h; ++c) {
                    for (int64_t j = 0; j < n; ++j) {
                        if (j == i) continue;
                        for (int64_t b = 0; b < cfg.d; ++b) {
                            g += qh[size_t(c)](i, j) * qz(j, b) * detail::ternary_at(p, c, i, j, a, b);
                            g += qh[size_t(c)](j, i) * qz(j, b) * detail::ternary_at(p, c, j, i, b, a);
                        }
                    }
                    if (lay.has_root) {
                        for (int64_t gg = 0; gg < cfg.d_root; ++gg)
                            g += qh[size_t(c)](i, lay.root_col()) * qroot(0, gg) * p.T_root(a, gg, c);
                    }
                    for (int64_t k = 0; k < lay.n_global_cols; ++k)
                        g += qh[size_t(c)](i, lay.global_col0() + k) * p.B(c, k, a);
                    if (cfg.global_variant == GlobalVariant::DepSplit)
                        for (int64_t k = 0; k < cfg.m; ++k) g += qg[size_t(c)](i, k) * p.B(c, k, a);
                }
                if (cfg.global_variant == GlobalVariant::SingleSplit)
                    for (int64_t k = 0; k < cfg.m; ++k) g += qg[0](i, k) * p.B(k, a);
                Real msg = (1 - Real(cfg.beta_Z)) * (p.S(ids[size_t(i)], a) + g) +
                           Real(cfg.beta_Z) * prev.Zmsg(i, a);
                next.Zmsg(i, a) = msg;
                row[size_t(a)] = msg;
            }
            detail::softmax_inplace(row, lamZ);
            for (int64_t a = 0; a < cfg.d; ++a)
                next.Qz(i, a) =
                    Real(cfg.alpha_Z) * row[size_t(a)] + (1 - Real(cfg.alpha_Z)) * prev.Qz(i, a);
        }
        if (lay.has_root) {
            std::vector<Real> row((size_t)cfg.d_root);
            for (int64_t g = 0; g < cfg.d_root; ++g) {
                Real s = 0;
                for (int c = 0; c < cfg.h; ++c)
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t a = 0; a < cfg.d; ++a)
                            s += qh[size_t(c)](i, lay.root_col()) * qz(i, a) * p.T_root(a, g, c);
                Real msg = (1 - Real(cfg.beta_Z)) * s + Real(cfg.beta_Z) * prev.RootMsg(0, g);
                next.RootMsg(0, g) = msg;
                row[size_t(g)] = msg;
            }
            detail::softmax_inplace(row, lamZ);
            for (int64_t g = 0; g < cfg.d_root; ++g)
                next.Qroot(0, g) =
                    Real(cfg.alpha_Z) * row[size_t(g)] + (1 - Real(cfg.alpha_Z)) * prev.Qroot(0, g);
        }
    };

    update_heads();
    update_globals();
    if (cfg.use_async) {
        update_labels(next.Qh, next.Qg);  // Z reads the freshly updated heads
    } else {
        update_labels(prev.Qh, prev.Qg);  // Z reads the previous iteration
    }
    return next;
}

// Verifies the closed-form optimum of  min_{z in simplex} <c,z> + lambda*sum z log z:
// softmax(-c/lambda) must beat all vertices and `samples` random simplex
// points with margin >= -1e-12.
template <class Real>
bool entropic_softmax_optimality(const std::vector<Real>& c, Real lambda, Rng& rng,
                                 int samples = 1000) {
    require(lambda > Real(0), "entropic_softmax_optimality: lambda must be positive");
    const size_t d = c.size();
    auto objective = [&](const std::vector<Real>& z) {
        Real o = 0;
        for (size_t s = 0; s < d; ++s) {
            o += c[s] * z[s];
            if (z[s] > Real(0)) o += lambda * z[s] * std::log(z[s]);
        }
        return o;
    };
    std::vector<Real> zstar(c);
    for (auto& x : zstar) x = -x;
    detail::softmax_inplace(zstar, lambda);
    const Real fstar = objective(zstar);
    for (size_t v = 0; v < d; ++v) {
        std::vector<Real> z(d, Real(0));
        z[v] = Real(1);
        if (fstar > objective(z) + Real(1e-12)) return false;
    }
    for (int t = 0; t < samples; ++t) {
        // Dirichlet(1,...,1) point via normalized exponentials.
        std::vector<Real> z(d);
        Real s = 0;
        for (size_t v = 0; v < d; ++v) {
            z[v] = Real(-std::log(1.0 - rng.uniform()));
            s += z[v];
        }
        for (auto& x : z) x /= s;
        if (fstar > objective(z) + Real(1e-12)) return false;
    }
    return true;
}

}  // namespace ptran::oracle
