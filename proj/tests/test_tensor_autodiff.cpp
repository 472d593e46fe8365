#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ptran/tape.hpp"

using namespace ptran;
using D = double;
using TapeD = Tape<double>;

namespace {

Tensor<D> rand_tensor(std::vector<int64_t> shape, Rng& rng, double sd = 1.0) {
    return Tensor<D>::randn(std::move(shape), rng, sd);
}

}  // namespace

TEST_CASE("matmul basics") {
    TapeD t;
    Tensor<D> I = Tensor<D>::identity(2);
    Tensor<D> A({2, 2});
    A(0, 0) = 1; A(0, 1) = 2; A(1, 0) = 3; A(1, 1) = 4;
    auto out = t.value(t.matmul(t.leaf(I), t.leaf(A)));
    CHECK(out(0, 0) == 1);
    CHECK(out(0, 1) == 2);
    CHECK(out(1, 0) == 3);
    CHECK(out(1, 1) == 4);

    Tensor<D> r({1, 2});
    r(0, 0) = 1; r(0, 1) = 0;
    Tensor<D> c({2, 1});
    c(0, 0) = 0; c(1, 0) = 5;
    CHECK(t.value(t.matmul(t.leaf(r), t.leaf(c)))(0, 0) == 0);

    Tensor<D> bad({3, 3});
    CHECK_THROWS_AS((void)t.matmul(t.leaf(A), t.leaf(bad)), DimensionError);
}

TEST_CASE("matmul gradient vs finite differences") {
    Rng rng(1);
    Tensor<D> A = rand_tensor({3, 4}, rng), B = rand_tensor({4, 2}, rng);
    Tensor<D> gA, gB;
    {
        TapeD t;
        auto a = t.leaf(A), b = t.leaf(B);
        auto loss = t.sum_sq(t.matmul(a, b));
        t.backward(loss);
        gA = t.grad(a);
        gB = t.grad(b);
    }
    auto forward = [&]() {
        TapeD t;
        return t.value(t.sum_sq(t.matmul(t.leaf(A), t.leaf(B))))(0);
    };
    D err = finite_diff_check<D>(forward, {&A, &B}, {&gA, &gB}, 1e-6, rng);
    CHECK(err < 1e-6);
}

TEST_CASE("softmax_rows values") {
    TapeD t;
    Tensor<D> x({1, 2});  // [0, 0]
    auto out = t.value(t.softmax_rows(t.leaf(x), nullptr, 1.0));
    CHECK(out(0, 0) == doctest::Approx(0.5).epsilon(1e-14));

    // masked single survivor
    Tensor<D> y({1, 2});
    y(0, 0) = 3.0; y(0, 1) = 100.0;
    Tensor<D> mask({1, 2});
    mask(0, 0) = 1;  // second entry masked
    auto m = t.value(t.softmax_rows(t.leaf(y), &mask, 1.0));
    CHECK(m(0, 0) == 1.0);
    CHECK(m(0, 1) == 0.0);

    // direct-summation oracle on [1,2,3]
    Tensor<D> z({1, 3});
    z(0, 0) = 1; z(0, 1) = 2; z(0, 2) = 3;
    auto s = t.value(t.softmax_rows(t.leaf(z), nullptr, 1.0));
    const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int j = 0; j < 3; ++j)
        CHECK(s(0, j) == doctest::Approx(std::exp(1.0 + j) / denom).epsilon(1e-12));

    // fully masked row
    Tensor<D> allmask({1, 2});
    CHECK_THROWS_AS((void)t.softmax_rows(t.leaf(y), &allmask, 1.0), DegenerateRowError);
}

TEST_CASE("softmax_rows normalization and scale") {
    Rng rng(3);
    TapeD t;
    Tensor<D> x = rand_tensor({5, 7}, rng, 4.0);
    auto out = t.value(t.softmax_rows(t.leaf(x), nullptr, 2.5));
    for (int64_t i = 0; i < 5; ++i) {
        double s = 0;
        for (int64_t j = 0; j < 7; ++j) s += out(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    // scale divides logits
    TapeD t2;
    Tensor<D> xs = x;
    for (int64_t i = 0; i < xs.numel(); ++i) xs(i) /= 2.5;
    auto ref = t2.value(t2.softmax_rows(t2.leaf(xs), nullptr, 1.0));
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out(i) == doctest::Approx(ref(i)).epsilon(1e-12));
}

TEST_CASE("gather_rows") {
    TapeD t;
    Rng rng(4);
    Tensor<D> table = rand_tensor({4, 3}, rng);
    auto g = t.gather_rows(t.leaf(table), {0, 0});
    const auto& v = t.value(g);
    for (int64_t j = 0; j < 3; ++j) {
        CHECK(v(0, j) == table(0, j));
        CHECK(v(1, j) == table(0, j));
    }
    CHECK(t.value(t.gather_rows(t.leaf(table), {})).dim(0) == 0);
    CHECK_THROWS_AS((void)t.gather_rows(t.leaf(table), {4}), IndexError);

    // scatter-add gradient: sum(gather(t,[1,1])) has grad row 1 = 2
    TapeD t2;
    auto lt = t2.leaf(table);
    auto loss = t2.sum(t2.gather_rows(lt, {1, 1}));
    t2.backward(loss);
    auto grad = t2.grad(lt);
    for (int64_t j = 0; j < 3; ++j) {
        CHECK(grad(1, j) == 2.0);
        CHECK(grad(0, j) == 0.0);
    }
}

TEST_CASE("backward basics") {
    // loss = x*x at x=3 -> grad 6
    TapeD t;
    Tensor<D> x({1, 1});
    x(0, 0) = 3.0;
    auto lx = t.leaf(x);
    auto loss = t.sum(t.mul(lx, lx));
    t.backward(loss);
    CHECK(t.grad(lx)(0, 0) == doctest::Approx(6.0).epsilon(1e-14));

    // sum(softmax(x)) has zero gradient
    TapeD t2;
    Rng rng(5);
    Tensor<D> y = rand_tensor({3, 4}, rng);
    auto ly = t2.leaf(y);
    auto l2 = t2.sum(t2.softmax_rows(ly, nullptr, 1.0));
    t2.backward(l2);
    auto g = t2.grad(ly);
    for (int64_t i = 0; i < g.numel(); ++i) CHECK(std::abs(g(i)) < 1e-12);

    // non-scalar loss rejected
    TapeD t3;
    CHECK_THROWS_AS(t3.backward(t3.leaf(y)), ContractError);
}

TEST_CASE("elementwise and shaping ops match finite differences") {
    Rng rng(6);
    Tensor<D> A = rand_tensor({3, 6}, rng), B = rand_tensor({3, 6}, rng);
    Tensor<D> w = rand_tensor({1, 6}, rng);
    Tensor<D> mask({3, 6});
    for (int64_t i = 0; i < mask.numel(); ++i) mask(i) = (i % 3 == 0) ? 0.0 : 1.0;

    auto build = [&](TapeD& t, TapeD::Id a, TapeD::Id b, TapeD::Id wv) {
        auto m1 = t.mul(t.scale(a, 1.7), b);
        auto m2 = t.add_rowvec(m1, wv);
        auto m3 = t.mul_rowvec(m2, wv);
        auto m4 = t.mul_const(m3, mask);
        auto cat = t.concat_cols({m4, t.slice_cols(a, 1, 4)});
        auto soft = t.softmax_rows(cat, nullptr, 0.7);
        return t.sum_sq(t.add(soft, t.slice_cols(cat, 0, 9)));
    };
    Tensor<D> gA, gB, gw;
    {
        TapeD t;
        auto a = t.leaf(A), b = t.leaf(B), wv = t.leaf(w);
        auto loss = build(t, a, b, wv);
        t.backward(loss);
        gA = t.grad(a);
        gB = t.grad(b);
        gw = t.grad(wv);
    }
    auto forward = [&]() {
        TapeD t;
        return t.value(build(t, t.leaf(A), t.leaf(B), t.leaf(w)))(0);
    };
    D err = finite_diff_check<D>(forward, {&A, &B, &w}, {&gA, &gB, &gw}, 1e-6, rng, 60);
    CHECK(err < 1e-6);
}

TEST_CASE("strided_slice addresses and differentiates correctly") {
    Rng rng(7);
    // treat a [2,3,4] stack as raw storage; slice plane k=1 (3x4)
    Tensor<D> stack = rand_tensor({2, 3, 4}, rng);
    TapeD t;
    auto ls = t.leaf(stack);
    auto plane = t.strided_slice(ls, 12, 3, 4, 4, 1);
    const auto& v = t.value(plane);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 4; ++j) CHECK(v(i, j) == stack(1, i, j));

    auto loss = t.sum_sq(plane);
    t.backward(loss);
    auto g = t.grad(ls);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 4; ++j) CHECK(g(1, i, j) == doctest::Approx(2 * stack(1, i, j)));
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 4; ++j) CHECK(g(0, i, j) == 0.0);

    CHECK_THROWS_AS((void)t.strided_slice(ls, 20, 3, 4, 4, 1), IndexError);
}

TEST_CASE("cross_entropy_rows") {
    // uniform logits over 4 classes -> loss ln 4
    TapeD t;
    Tensor<D> logits({2, 4});
    auto loss = t.cross_entropy_rows(t.leaf(logits), {1, 3}, {1.0, 1.0});
    CHECK(t.value(loss)(0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // weights select rows
    TapeD t2;
    Tensor<D> l2({2, 3});
    l2(0, 0) = 50.0;  // row 0 confidently class 0
    auto sel = t2.cross_entropy_rows(t2.leaf(l2), {0, 0}, {1.0, 0.0});
    CHECK(t2.value(sel)(0) == doctest::Approx(0.0).epsilon(1e-12));

    // gradient vs finite differences
    Rng rng(8);
    Tensor<D> L = rand_tensor({4, 5}, rng);
    std::vector<int64_t> targets = {0, 2, 4, 1};
    std::vector<D> weights = {1.0, 0.0, 2.0, 1.0};
    Tensor<D> gL;
    {
        TapeD t3;
        auto ll = t3.leaf(L);
        auto ls = t3.cross_entropy_rows(ll, targets, weights);
        t3.backward(ls);
        gL = t3.grad(ll);
    }
    auto forward = [&]() {
        TapeD t3;
        return t3.value(t3.cross_entropy_rows(t3.leaf(L), targets, weights))(0);
    };
    D err = finite_diff_check<D>(forward, {&L}, {&gL}, 1e-6, rng);
    CHECK(err < 1e-8);

    CHECK_THROWS_AS((void)t.cross_entropy_rows(t.leaf(logits), {0, 9}, {1.0, 1.0}), IndexError);
    CHECK_THROWS_AS((void)t.cross_entropy_rows(t.leaf(logits), {0, 1}, {0.0, 0.0}), ContractError);
}

TEST_CASE("finite_diff_check on a quadratic is near exact") {
    Rng rng(9);
    Tensor<D> x({3, 3});
    for (int64_t i = 0; i < x.numel(); ++i) x(i) = 0.5 + 0.25 * double(i);  // keep |grad| well away from 0
    Tensor<D> gx;
    {
        TapeD t;
        auto lx = t.leaf(x);
        auto loss = t.sum_sq(lx);
        t.backward(loss);
        gx = t.grad(lx);
    }
    auto forward = [&]() {
        TapeD t;
        return t.value(t.sum_sq(t.leaf(x)))(0);
    };
    CHECK(finite_diff_check<D>(forward, {&x}, {&gx}, 1e-4, rng) < 1e-9);
}

TEST_CASE("tape replay is deterministic") {
    Rng rng(10);
    Tensor<D> A = rand_tensor({4, 4}, rng);
    auto run = [&]() {
        TapeD t;
        auto a = t.leaf(A);
        return t.value(t.softmax_rows(t.matmul(a, a), nullptr, 1.3));
    };
    Tensor<D> r1 = run(), r2 = run();
    for (int64_t i = 0; i < r1.numel(); ++i) CHECK(r1(i) == r2(i));
}

TEST_CASE("rng stream is stable and serializable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    auto st = a.state();
    std::vector<uint64_t> tail;
    for (int i = 0; i < 10; ++i) tail.push_back(a.next_u64());
    b.set_state(st);
    for (int i = 0; i < 10; ++i) CHECK(b.next_u64() == tail[size_t(i)]);
}
