#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ptran/config.hpp"
#include "ptran/tensor.hpp"
#include "ptran/vocab.hpp"

namespace ptran {

// Clipped signed-distance bank index for a (dependent i, head j) pair.
// Bank indices cover [0, 2*gamma+1].
inline int clip_distance(int64_t i, int64_t j, int gamma) {
    if (i == j) throw ContractError("clip_distance: self-distance is undefined");
    int64_t x = i - j;
    if (x < -gamma) return 0;
    if (x < 0) return int(x + gamma + 1);
    if (x <= gamma) return int(x + gamma);
    return 2 * gamma + 1;
}

// Bank index used by the engine: distance-clipped, or the single shared
// bank when distance banking is disabled.
inline int bank_of(int64_t i, int64_t j, const ModelConfig& cfg) {
    return cfg.use_distance ? clip_distance(i, j, cfg.gamma) : (i == j ? throw ContractError(
                                                                             "bank_of: i == j")
                                                                       : 0);
}

// All learnable score tensors, with gradient slots of identical shapes.
//
//   S      : |V| x d                 unary scores
//   full   : T  banks x h x d x d
//   uv     : U, V  banks x d x h x r
//   uvw    : U, V  banks x d x r;  W  h x r (shared across banks)
//   T_root : d x d_root x h          (never banked)
//   B      : h x m x d (all_dep / dep_split)  or  m x d (single_split)
template <class Real>
struct Parameters {
    ModelConfig config;
    int64_t vocab_size = 0;

    Tensor<Real> S, T, U, V, W, T_root, B;
    Tensor<Real> gS, gT, gU, gV, gW, gT_root, gB;

    // Named views over the tensors that exist under this config, in a fixed
    // order (checkpoint directory and optimizer slots follow it).
    std::vector<std::pair<std::string, Tensor<Real>*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor<Real>*>> out;
        out.emplace_back("S", &S);
        if (config.decomposition == Decomposition::Full) {
            out.emplace_back("T", &T);
        } else {
            out.emplace_back("U", &U);
            out.emplace_back("V", &V);
            if (config.decomposition == Decomposition::UVW) out.emplace_back("W", &W);
        }
        if (config.use_root) out.emplace_back("T_root", &T_root);
        if (config.global_variant != GlobalVariant::None) out.emplace_back("B", &B);
        return out;
    }

    std::vector<std::pair<std::string, Tensor<Real>*>> named_grads() {
        std::vector<std::pair<std::string, Tensor<Real>*>> out;
        out.emplace_back("S", &gS);
        if (config.decomposition == Decomposition::Full) {
            out.emplace_back("T", &gT);
        } else {
            out.emplace_back("U", &gU);
            out.emplace_back("V", &gV);
            if (config.decomposition == Decomposition::UVW) out.emplace_back("W", &gW);
        }
        if (config.use_root) out.emplace_back("T_root", &gT_root);
        if (config.global_variant != GlobalVariant::None) out.emplace_back("B", &gB);
        return out;
    }

    // Tensors the "L2 on ternary scores" regularizer applies to. Under
    // decomposition this is the factor tensors themselves.
    std::vector<std::pair<std::string, Tensor<Real>*>> ternary_tensors() {
        std::vector<std::pair<std::string, Tensor<Real>*>> out;
        if (config.decomposition == Decomposition::Full) {
            out.emplace_back("T", &T);
        } else {
            out.emplace_back("U", &U);
            out.emplace_back("V", &V);
            if (config.decomposition == Decomposition::UVW) out.emplace_back("W", &W);
        }
        return out;
    }

    void zero_grads() {
        gS = Tensor<Real>(S.shape);
        if (config.decomposition == Decomposition::Full) gT = Tensor<Real>(T.shape);
        else {
            gU = Tensor<Real>(U.shape);
            gV = Tensor<Real>(V.shape);
            if (config.decomposition == Decomposition::UVW) gW = Tensor<Real>(W.shape);
        }
        if (config.use_root) gT_root = Tensor<Real>(T_root.shape);
        if (config.global_variant != GlobalVariant::None) gB = Tensor<Real>(B.shape);
    }

    bool all_finite() const {
        for (const Tensor<Real>* t : {&S, &T, &U, &V, &W, &T_root, &B})
            if (!t->data.empty() && !t->all_finite()) return false;
        return true;
    }
};

// Fresh parameters, i.i.d. Normal(0, 0.02^2) except W in uvw, which is
// drawn at Normal(0, (0.02 / sqrt(r))^2) so materialized scores keep the
// same magnitude across decompositions.
template <class Real>
Parameters<Real> init_parameters(const ModelConfig& cfg, int64_t vocab_size, uint64_t seed) {
    cfg.validate();
    require(vocab_size >= 1, "init_parameters: empty vocabulary");
    const Real sd = Real(0.02);
    const int64_t K = cfg.banks();
    Parameters<Real> p;
    p.config = cfg;
    p.vocab_size = vocab_size;
    Rng rng(seed);
    p.S = Tensor<Real>::randn({vocab_size, cfg.d}, rng, sd);
    switch (cfg.decomposition) {
        case Decomposition::Full:
            p.T = Tensor<Real>::randn({K, cfg.h, cfg.d, cfg.d}, rng, sd);
            break;
        case Decomposition::UV:
            p.U = Tensor<Real>::randn({K, cfg.d, cfg.h, cfg.rank}, rng, sd);
            p.V = Tensor<Real>::randn({K, cfg.d, cfg.h, cfg.rank}, rng, sd);
            break;
        case Decomposition::UVW:
            p.U = Tensor<Real>::randn({K, cfg.d, cfg.rank}, rng, sd);
            p.V = Tensor<Real>::randn({K, cfg.d, cfg.rank}, rng, sd);
            p.W = Tensor<Real>::randn({cfg.h, cfg.rank}, rng,
                                      sd / Real(std::sqrt(double(cfg.rank))));
            break;
    }
    if (cfg.use_root) p.T_root = Tensor<Real>::randn({cfg.d, cfg.d_root, cfg.h}, rng, sd);
    if (cfg.global_variant == GlobalVariant::SingleSplit)
        p.B = Tensor<Real>::randn({cfg.m, cfg.d}, rng, sd);
    else if (cfg.global_variant != GlobalVariant::None)
        p.B = Tensor<Real>::randn({cfg.h, cfg.m, cfg.d}, rng, sd);
    p.zero_grads();
    return p;
}

// Zero-valued parameters with the shapes the config dictates (checkpoint
// loading fills them in).
template <class Real>
Parameters<Real> shaped_parameters(const ModelConfig& cfg, int64_t vocab_size) {
    cfg.validate();
    require(vocab_size >= 1, "shaped_parameters: empty vocabulary");
    const int64_t K = cfg.banks();
    Parameters<Real> p;
    p.config = cfg;
    p.vocab_size = vocab_size;
    p.S = Tensor<Real>({vocab_size, cfg.d});
    switch (cfg.decomposition) {
        case Decomposition::Full:
            p.T = Tensor<Real>({K, cfg.h, cfg.d, cfg.d});
            break;
        case Decomposition::UV:
            p.U = Tensor<Real>({K, cfg.d, cfg.h, cfg.rank});
            p.V = Tensor<Real>({K, cfg.d, cfg.h, cfg.rank});
            break;
        case Decomposition::UVW:
            p.U = Tensor<Real>({K, cfg.d, cfg.rank});
            p.V = Tensor<Real>({K, cfg.d, cfg.rank});
            p.W = Tensor<Real>({cfg.h, cfg.rank});
            break;
    }
    if (cfg.use_root) p.T_root = Tensor<Real>({cfg.d, cfg.d_root, cfg.h});
    if (cfg.global_variant == GlobalVariant::SingleSplit) p.B = Tensor<Real>({cfg.m, cfg.d});
    else if (cfg.global_variant != GlobalVariant::None) p.B = Tensor<Real>({cfg.h, cfg.m, cfg.d});
    p.zero_grads();
    return p;
}

// Ternary score matrix T^{(c)} for bank k, materialized from whichever
// storage the config selects. Pure function of the parameter values.
template <class Real>
Tensor<Real> materialize_ternary(const Parameters<Real>& p, int c, int k) {
    const ModelConfig& cfg = p.config;
    if (c < 0 || c >= cfg.h) throw IndexError("materialize_ternary: channel out of range");
    if (k < 0 || k >= cfg.banks()) throw IndexError("materialize_ternary: bank out of range");
    Tensor<Real> out({cfg.d, cfg.d});
    switch (cfg.decomposition) {
        case Decomposition::Full:
            for (int64_t a = 0; a < cfg.d; ++a)
                for (int64_t b = 0; b < cfg.d; ++b) out(a, b) = p.T(k, c, a, b);
            break;
        case Decomposition::UV:
            for (int64_t a = 0; a < cfg.d; ++a)
                for (int64_t b = 0; b < cfg.d; ++b) {
                    Real s = 0;
                    for (int64_t l = 0; l < cfg.rank; ++l) s += p.U(k, a, c, l) * p.V(k, b, c, l);
                    out(a, b) = s;
                }
            break;
        case Decomposition::UVW:
            for (int64_t a = 0; a < cfg.d; ++a)
                for (int64_t b = 0; b < cfg.d; ++b) {
                    Real s = 0;
                    for (int64_t l = 0; l < cfg.rank; ++l)
                        s += p.U(k, a, l) * p.V(k, b, l) * p.W(c, l);
                    out(a, b) = s;
                }
            break;
    }
    return out;
}

// Unary score rows S[w_i] for a token-id sequence (plain values; the
// differentiable version is a tape gather in the engine).
template <class Real>
Tensor<Real> unary_scores(const Parameters<Real>& p, const std::vector<int64_t>& token_ids) {
    Tensor<Real> out({int64_t(token_ids.size()), p.config.d});
    for (size_t i = 0; i < token_ids.size(); ++i) {
        if (token_ids[i] < 0 || token_ids[i] >= p.vocab_size)
            throw IndexError("unary_scores: token id out of range");
        for (int64_t a = 0; a < p.config.d; ++a) out(int64_t(i), a) = p.S(token_ids[i], a);
    }
    return out;
}

}  // namespace ptran
