#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "ptran/model.hpp"

using namespace ptran;
using D = double;

TEST_CASE("clip_distance examples and range") {
    // gamma = 3: x < -3 -> 0; -3 <= x < 0 -> x+4; 0 < x <= 3 -> x+3; x > 3 -> 7
    CHECK(clip_distance(0, 5, 3) == 0);   // x = -5
    CHECK(clip_distance(4, 5, 3) == 3);   // x = -1
    CHECK(clip_distance(7, 5, 3) == 5);   // x = 2
    CHECK(clip_distance(9, 0, 3) == 7);   // x = 9
    CHECK_THROWS_AS(clip_distance(2, 2, 3), ContractError);

    // every bank index in [0, 2*gamma+1] is reachable, none outside
    for (int gamma : {0, 1, 3}) {
        std::set<int> seen;
        for (int64_t i = 0; i < 30; ++i)
            for (int64_t j = 0; j < 30; ++j) {
                if (i == j) continue;
                int k = clip_distance(i, j, gamma);
                CHECK(k >= 0);
                CHECK(k <= 2 * gamma + 1);
                seen.insert(k);
            }
        CHECK(int(seen.size()) == 2 * gamma + 2);
    }
}

TEST_CASE("bank_of respects use_distance") {
    ModelConfig cfg;
    cfg.gamma = 3;
    cfg.use_distance = true;
    CHECK(bank_of(7, 5, cfg) == 5);
    CHECK(cfg.banks() == 8);
    cfg.use_distance = false;
    CHECK(bank_of(7, 5, cfg) == 0);
    CHECK(bank_of(0, 29, cfg) == 0);
    CHECK(cfg.banks() == 1);
}

TEST_CASE("materialize_ternary uv is the rank-sum of outer products") {
    ModelConfig cfg;
    cfg.d = 3;
    cfg.h = 2;
    cfg.gamma = 1;
    cfg.decomposition = Decomposition::UV;
    cfg.rank = 1;
    Parameters<D> p = init_parameters<D>(cfg, 5, 11);
    // rank 1: T(a,b) = U[k,a,c,0] * V[k,b,c,0]
    for (int k = 0; k < cfg.banks(); ++k)
        for (int c = 0; c < cfg.h; ++c) {
            Tensor<D> T = materialize_ternary(p, c, k);
            for (int64_t a = 0; a < 3; ++a)
                for (int64_t b = 0; b < 3; ++b)
                    CHECK(T(a, b) == doctest::Approx(p.U(k, a, c, 0) * p.V(k, b, c, 0)).epsilon(1e-14));
        }
}

TEST_CASE("materialize_ternary uvw applies the per-channel mixing row") {
    ModelConfig cfg;
    cfg.d = 4;
    cfg.h = 3;
    cfg.gamma = 1;
    cfg.decomposition = Decomposition::UVW;
    cfg.rank = 3;
    Parameters<D> p = init_parameters<D>(cfg, 5, 12);
    // one-hot W row selects a single rank component
    for (int64_t l = 0; l < cfg.rank; ++l) {
        for (int64_t c = 0; c < cfg.h; ++c)
            for (int64_t l2 = 0; l2 < cfg.rank; ++l2) p.W(c, l2) = (l2 == l) ? 1.0 : 0.0;
        Tensor<D> T = materialize_ternary(p, 1, 2);
        for (int64_t a = 0; a < 4; ++a)
            for (int64_t b = 0; b < 4; ++b)
                CHECK(T(a, b) == doctest::Approx(p.U(2, a, l) * p.V(2, b, l)).epsilon(1e-14));
    }
}

TEST_CASE("materialize_ternary matches a direct triple loop") {
    for (auto dec : {Decomposition::Full, Decomposition::UV, Decomposition::UVW}) {
        ModelConfig cfg;
        cfg.d = 5;
        cfg.h = 2;
        cfg.gamma = 2;
        cfg.decomposition = dec;
        cfg.rank = 4;
        Parameters<D> p = init_parameters<D>(cfg, 7, 13);
        for (int k = 0; k < cfg.banks(); ++k)
            for (int c = 0; c < cfg.h; ++c) {
                Tensor<D> T = materialize_ternary(p, c, k);
                for (int64_t a = 0; a < cfg.d; ++a)
                    for (int64_t b = 0; b < cfg.d; ++b) {
                        D want = 0;
                        if (dec == Decomposition::Full) {
                            want = p.T(k, c, a, b);
                        } else if (dec == Decomposition::UV) {
                            for (int64_t l = 0; l < cfg.rank; ++l) want += p.U(k, a, c, l) * p.V(k, b, c, l);
                        } else {
                            for (int64_t l = 0; l < cfg.rank; ++l) want += p.U(k, a, l) * p.V(k, b, l) * p.W(c, l);
                        }
                        CHECK(std::abs(T(a, b) - want) < 1e-12);
                    }
            }
        CHECK_THROWS_AS((void)materialize_ternary(p, cfg.h, 0), IndexError);
        CHECK_THROWS_AS((void)materialize_ternary(p, 0, cfg.banks()), IndexError);
    }
}

TEST_CASE("unary_scores gathers S rows") {
    ModelConfig cfg;
    cfg.d = 3;
    Parameters<D> p = init_parameters<D>(cfg, 6, 14);
    Tensor<D> s = unary_scores(p, {2, 2, 5});
    for (int64_t a = 0; a < 3; ++a) {
        CHECK(s(0, a) == p.S(2, a));
        CHECK(s(1, a) == p.S(2, a));
        CHECK(s(2, a) == p.S(5, a));
    }
    CHECK_THROWS_AS((void)unary_scores(p, {6}), IndexError);
    CHECK_THROWS_AS((void)unary_scores(p, {-1}), IndexError);
}

TEST_CASE("init_parameters is seed-deterministic and seed-sensitive") {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.h = 2;
    cfg.use_root = true;
    cfg.d_root = 4;
    cfg.global_variant = GlobalVariant::AllDep;
    cfg.m = 3;
    Parameters<D> a = init_parameters<D>(cfg, 20, 99);
    Parameters<D> b = init_parameters<D>(cfg, 20, 99);
    Parameters<D> c = init_parameters<D>(cfg, 20, 100);
    auto na = a.named_tensors(), nb = b.named_tensors(), nc = c.named_tensors();
    REQUIRE(na.size() == nb.size());
    bool any_diff = false;
    for (size_t t = 0; t < na.size(); ++t) {
        for (int64_t i = 0; i < na[t].second->numel(); ++i) {
            CHECK((*na[t].second)(i) == (*nb[t].second)(i));
            if ((*na[t].second)(i) != (*nc[t].second)(i)) any_diff = true;
        }
    }
    CHECK(any_diff);
}

TEST_CASE("init_parameters sample stddev is near the configured scale") {
    ModelConfig cfg;
    cfg.d = 64;
    cfg.h = 4;
    Parameters<D> p = init_parameters<D>(cfg, 400, 7);
    // S alone has 400*64 = 25600 entries
    double mean = 0, sq = 0;
    int64_t n = p.S.numel();
    REQUIRE(n >= 10000);
    for (int64_t i = 0; i < n; ++i) mean += p.S(i);
    mean /= double(n);
    for (int64_t i = 0; i < n; ++i) sq += (p.S(i) - mean) * (p.S(i) - mean);
    double sd = std::sqrt(sq / double(n - 1));
    CHECK(std::abs(mean) < 0.005);
    CHECK(sd > 0.02 * 0.8);
    CHECK(sd < 0.02 * 1.2);
}

TEST_CASE("parameter shapes across decompositions") {
    const int64_t V = 9;
    ModelConfig cfg;
    cfg.d = 6;
    cfg.h = 3;
    cfg.gamma = 2;
    cfg.rank = 4;
    cfg.use_root = true;
    cfg.d_root = 5;
    const int64_t K = 2 * 2 + 2;

    cfg.decomposition = Decomposition::Full;
    {
        Parameters<D> p = init_parameters<D>(cfg, V, 1);
        CHECK(p.S.shape == std::vector<int64_t>({V, 6}));
        CHECK(p.T.shape == std::vector<int64_t>({K, 3, 6, 6}));
        CHECK(p.T_root.shape == std::vector<int64_t>({6, 5, 3}));
        CHECK(p.U.numel() == 0);
    }
    cfg.decomposition = Decomposition::UV;
    {
        Parameters<D> p = init_parameters<D>(cfg, V, 1);
        CHECK(p.U.shape == std::vector<int64_t>({K, 6, 3, 4}));
        CHECK(p.V.shape == std::vector<int64_t>({K, 6, 3, 4}));
        CHECK(p.W.numel() == 0);
    }
    cfg.decomposition = Decomposition::UVW;
    cfg.use_distance = false;  // shared bank: K = 1
    {
        Parameters<D> p = init_parameters<D>(cfg, V, 1);
        CHECK(p.U.shape == std::vector<int64_t>({1, 6, 4}));
        CHECK(p.V.shape == std::vector<int64_t>({1, 6, 4}));
        CHECK(p.W.shape == std::vector<int64_t>({3, 4}));
    }
    cfg.global_variant = GlobalVariant::SingleSplit;
    cfg.m = 7;
    {
        Parameters<D> p = init_parameters<D>(cfg, V, 1);
        CHECK(p.B.shape == std::vector<int64_t>({7, 6}));
    }
    cfg.global_variant = GlobalVariant::DepSplit;
    {
        Parameters<D> p = init_parameters<D>(cfg, V, 1);
        CHECK(p.B.shape == std::vector<int64_t>({3, 7, 6}));
    }
    // shaped_parameters mirrors init shapes
    {
        Parameters<D> p = shaped_parameters<D>(cfg, V);
        CHECK(p.B.shape == std::vector<int64_t>({3, 7, 6}));
        CHECK(p.W.shape == std::vector<int64_t>({3, 4}));
        for (int64_t i = 0; i < p.S.numel(); ++i) CHECK(p.S(i) == 0.0);
    }
}

TEST_CASE("config validation rejects bad values") {
    ModelConfig cfg;
    cfg.validate();  // defaults are fine
    auto broken = [&](auto fix) {
        ModelConfig c;
        fix(c);
        CHECK_THROWS_AS(c.validate(), ContractError);
    };
    broken([](ModelConfig& c) { c.d = 0; });
    broken([](ModelConfig& c) { c.T_iters = 0; });
    broken([](ModelConfig& c) { c.gamma = -1; });
    broken([](ModelConfig& c) { c.lambda_Z = 0.0; });
    broken([](ModelConfig& c) { c.lambda_H = -0.5; });
    broken([](ModelConfig& c) { c.rank = 0; c.decomposition = Decomposition::UV; });
    broken([](ModelConfig& c) { c.alpha_Z = 0.0; });
    broken([](ModelConfig& c) { c.alpha_H = 1.5; });
    broken([](ModelConfig& c) { c.beta_Z = 1.0; });
    broken([](ModelConfig& c) { c.dropout = 1.0; });
    broken([](ModelConfig& c) { c.use_root = true; c.d_root = 0; });
    broken([](ModelConfig& c) { c.global_variant = GlobalVariant::AllDep; c.m = 0; });
    ModelConfig ok;
    ok.lambda_H = 0.0;  // selects the 1/d default
    ok.validate();
    CHECK(ok.effective_lambda_H() == doctest::Approx(1.0 / 64.0));
    ok.lambda_H = 0.25;
    CHECK(ok.effective_lambda_H() == 0.25);
}

TEST_CASE("config json round trip") {
    ModelConfig cfg;
    cfg.d = 12;
    cfg.decomposition = Decomposition::UVW;
    cfg.global_variant = GlobalVariant::DepSplit;
    cfg.use_distance = false;
    cfg.beta_H = 0.25;
    nlohmann::json j = cfg;
    ModelConfig back = j.get<ModelConfig>();
    nlohmann::json j2 = back;
    CHECK(j == j2);
    CHECK(back.d == 12);
    CHECK(back.decomposition == Decomposition::UVW);
    CHECK(back.use_distance == false);
}
