#pragma once

#include <vector>

#include "ptran/config.hpp"
#include "ptran/tensor.hpp"

namespace ptran {

// Column layout of head distributions: word columns [0, n), then the root
// column (if use_root), then m global columns (all_dep only).
struct HeadLayout {
    int64_t n = 0;
    bool has_root = false;
    int64_t n_global_cols = 0;

    int64_t cols() const { return n + (has_root ? 1 : 0) + n_global_cols; }
    int64_t root_col() const { return n; }
    int64_t global_col0() const { return n + (has_root ? 1 : 0); }

    static HeadLayout of(int64_t n, const ModelConfig& cfg) {
        HeadLayout l;
        l.n = n;
        l.has_root = cfg.use_root;
        l.n_global_cols = (cfg.global_variant == GlobalVariant::AllDep) ? cfg.m : 0;
        return l;
    }

    // A word's head domain is empty iff it is alone with no root/globals.
    bool head_domain_empty() const { return cols() <= 1 && !has_root && n_global_cols == 0; }
};

// Per-sentence marginals plus the message caches damping needs.
template <class Real>
struct PosteriorState {
    HeadLayout layout;
    Tensor<Real> Qz;                // n x d, simplex rows
    std::vector<Tensor<Real>> Qh;   // h tensors, n x cols, row-stochastic, zero diagonal
    std::vector<Tensor<Real>> Qg;   // dep_split: h of n x m; single_split: one n x m
    Tensor<Real> Qroot;             // 1 x d_root
    Tensor<Real> Zmsg;              // n x d cache
    std::vector<Tensor<Real>> Hmsg; // h of n x cols cache
    Tensor<Real> RootMsg;           // 1 x d_root cache

    bool has_heads() const { return !layout.head_domain_empty() && layout.n >= 1; }
};

// Initial distributions: Qz = softmax(S / lambda_Z) rows, Qh uniform
// off-diagonal, Qg and Qroot uniform. Damping caches start at Zmsg = S,
// Hmsg = 0.
template <class Real>
PosteriorState<Real> init_state(const Tensor<Real>& unary, const ModelConfig& cfg) {
    const int64_t n = unary.dim(0);
    require(n >= 1, "init_state: empty sentence");
    PosteriorState<Real> st;
    st.layout = HeadLayout::of(n, cfg);
    const int64_t cols = st.layout.cols();

    st.Qz = Tensor<Real>({n, cfg.d});
    for (int64_t i = 0; i < n; ++i) {
        Real mx = unary(i, 0);
        for (int64_t a = 1; a < cfg.d; ++a) mx = std::max(mx, unary(i, a));
        Real s = 0;
        for (int64_t a = 0; a < cfg.d; ++a) {
            st.Qz(i, a) = std::exp((unary(i, a) - mx) / Real(cfg.lambda_Z));
            s += st.Qz(i, a);
        }
        for (int64_t a = 0; a < cfg.d; ++a) st.Qz(i, a) /= s;
    }

    st.Qh.assign(size_t(cfg.h), Tensor<Real>({n, cols}));
    st.Hmsg.assign(size_t(cfg.h), Tensor<Real>({n, cols}));
    // The asynchronous schedule never reads this before the first H update,
    // but the uniform fill gives the step-size blend a defined base there.
    if (!st.layout.head_domain_empty()) {
        for (auto& q : st.Qh)
            for (int64_t i = 0; i < n; ++i) {
                const Real u = Real(1) / Real(cols - 1);
                for (int64_t j = 0; j < cols; ++j) q(i, j) = (j == i) ? Real(0) : u;
            }
    }

    if (cfg.global_variant == GlobalVariant::DepSplit)
        st.Qg.assign(size_t(cfg.h), Tensor<Real>::full({n, cfg.m}, Real(1) / Real(cfg.m)));
    else if (cfg.global_variant == GlobalVariant::SingleSplit)
        st.Qg.assign(1, Tensor<Real>::full({n, cfg.m}, Real(1) / Real(cfg.m)));

    if (cfg.use_root) {
        st.Qroot = Tensor<Real>::full({1, cfg.d_root}, Real(1) / Real(cfg.d_root));
        st.RootMsg = Tensor<Real>({1, cfg.d_root});
    }

    st.Zmsg = unary;
    return st;
}

}  // namespace ptran
