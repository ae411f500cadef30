#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hybridlm/gradcheck.hpp"
#include "hybridlm/rng.hpp"
#include "hybridlm/tensor.hpp"

using namespace hybridlm;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double sd = 1.0) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (T& v : t.raw()) v = T(rng.normal(0.0, sd));
    return t;
}

}  // namespace

TEST_CASE("matmul hand-computable cases") {
    auto eye = Tensor<double>::from_vector({2, 2}, {1, 0, 0, 1});
    auto m = Tensor<double>::from_vector({2, 2}, {2, 3, 4, 5});
    auto prod = matmul(eye, m);
    CHECK(max_abs_diff(prod, m) == 0.0);

    auto a = Tensor<double>::from_vector({1, 2}, {1, 2});
    auto b = Tensor<double>::from_vector({2, 1}, {3, 4});
    CHECK(matmul(a, b).item() == doctest::Approx(11.0));

    CHECK_THROWS_AS(matmul(m, a), DimError);
}

TEST_CASE("matmul backward matches finite differences (5x4 @ 4x3)") {
    Rng rng(7);
    auto a = random_tensor<double>({5, 4}, rng);
    auto b = random_tensor<double>({4, 3}, rng);
    auto res = finite_difference_check<double>(
        {{"a", a, true}, {"b", b, true}}, [&] { return sum_all(matmul(a, b)); }, 1e-5);
    CHECK(res.max_err < 1e-5);
}

TEST_CASE("matmul batched against per-item products") {
    Rng rng(9);
    auto a = random_tensor<double>({3, 4, 5}, rng, false);
    auto b = random_tensor<double>({5, 6}, rng, false);
    auto c = matmul(a, b);
    for (int bi = 0; bi < 3; ++bi) {
        auto ai = Tensor<double>::from_vector(
            {4, 5}, {a.data().begin() + bi * 20, a.data().begin() + (bi + 1) * 20});
        auto ci = matmul(ai, b);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 6; ++j)
                CHECK(c.at({bi, i, j}) == doctest::Approx(ci.at({i, j})).epsilon(1e-12));
    }
}

TEST_CASE("matmul associativity") {
    Rng rng(11);
    auto af = random_tensor<float>({6, 5}, rng, false);
    auto bf = random_tensor<float>({5, 7}, rng, false);
    auto cf = random_tensor<float>({7, 4}, rng, false);
    CHECK(max_abs_diff(matmul(matmul(af, bf), cf), matmul(af, matmul(bf, cf))) < 1e-5f);

    auto ad = random_tensor<double>({6, 5}, rng, false);
    auto bd = random_tensor<double>({5, 7}, rng, false);
    auto cd = random_tensor<double>({7, 4}, rng, false);
    CHECK(max_abs_diff(matmul(matmul(ad, bd), cd), matmul(ad, matmul(bd, cd))) < 1e-10);
}

TEST_CASE("softmax analytic values and stability") {
    auto z = Tensor<double>::from_vector({2}, {0, 0});
    auto s = softmax(z);
    CHECK(s.at({0}) == doctest::Approx(0.5));
    CHECK(s.at({1}) == doctest::Approx(0.5));

    auto z3 = Tensor<double>::from_vector({3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    auto s3 = softmax(z3);
    CHECK(s3.at({0}) == doctest::Approx(1.0 / 6));
    CHECK(s3.at({1}) == doctest::Approx(2.0 / 6));
    CHECK(s3.at({2}) == doctest::Approx(3.0 / 6));

    auto big = softmax(Tensor<double>::from_vector({2}, {1000, 0}));
    CHECK(all_finite(big));
    CHECK(big.at({0}) == doctest::Approx(1.0));
    CHECK(big.at({1}) == doctest::Approx(0.0));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
    Rng rng(3);
    auto x = random_tensor<double>({4, 7}, rng, false, 3.0);
    auto s = softmax(x);
    for (int r = 0; r < 4; ++r) {
        double sum = 0;
        for (int j = 0; j < 7; ++j) sum += s.at({r, j});
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    auto shifted = softmax(add(x, Tensor<double>::scalar(17.25)));
    CHECK(max_abs_diff(s, shifted) < 1e-6);
}

TEST_CASE("softmax over a non-trailing axis") {
    Rng rng(4);
    auto x = random_tensor<double>({3, 5}, rng, false);
    auto s0 = softmax(x, 0);
    for (int j = 0; j < 5; ++j) {
        double sum = 0;
        for (int r = 0; r < 3; ++r) sum += s0.at({r, j});
        CHECK(sum == doctest::Approx(1.0));
    }
}

TEST_CASE("backward of linear function and softmax sum") {
    auto w = Tensor<double>::from_vector({2}, {2, 3}, true);
    auto x = Tensor<double>::from_vector({2}, {5, -4});
    sum_all(mul(w, x)).backward();
    CHECK(w.grad()[0] == doctest::Approx(5.0));
    CHECK(w.grad()[1] == doctest::Approx(-4.0));

    Rng rng(5);
    auto z = random_tensor<double>({6}, rng);
    sum_all(softmax(z)).backward();
    for (double g : z.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("backward accumulates until grads are cleared") {
    auto w = Tensor<double>::from_vector({2}, {1, 1}, true);
    auto x = Tensor<double>::from_vector({2}, {2, 7});
    auto run = [&] { sum_all(mul(w, x)).backward(); };
    run();
    run();
    CHECK(w.grad()[0] == doctest::Approx(4.0));
    CHECK(w.grad()[1] == doctest::Approx(14.0));
    w.zero_grad();
    run();
    CHECK(w.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar losses") {
    auto w = Tensor<double>::from_vector({2}, {1, 1}, true);
    CHECK_THROWS_AS(mul(w, w).backward(), ContractError);
}

TEST_CASE("elementwise and reduction ops match finite differences") {
    Rng rng(21);
    auto x = random_tensor<double>({3, 4}, rng);
    auto bias = random_tensor<double>({4}, rng);

    auto check = [&](const char* what, auto fn) {
        auto res = finite_difference_check<double>({{"x", x, true}, {"bias", bias, true}}, fn);
        INFO(what << " worst at " << res.worst);
        CHECK(res.max_err < 1e-4);
    };
    check("add+mul", [&] { return sum_all(mul(add(x, bias), x)); });
    check("sub/scale", [&] { return sum_all(scale(sub(x, bias), 1.7)); });
    check("exp", [&] { return sum_all(exp_t(scale(x, 0.3))); });
    check("log", [&] { return sum_all(log_t(add(mul(x, x), Tensor<double>::scalar(1.0)))); });
    check("sqrt", [&] { return sum_all(sqrt_t(add(mul(x, x), Tensor<double>::scalar(0.5)))); });
    check("silu", [&] { return sum_all(silu(x)); });
    check("softplus", [&] { return sum_all(softplus(x)); });
    check("softmax", [&] { return sum_all(mul(softmax(x), x)); });
    check("log_softmax", [&] { return sum_all(mul(log_softmax(x), x)); });
    auto rowcoef = random_tensor<double>({3}, rng, false);
    check("sum_last", [&] { return sum_all(mul(sum_last(mul(x, x)), rowcoef)); });
    check("mean_all", [&] { return mean_all(mul(x, add(x, bias))); });
    check("transpose", [&] { return sum_all(matmul(transpose_last(x), x)); });
}

TEST_CASE("slicing and concatenation gradients") {
    Rng rng(23);
    auto x = random_tensor<double>({2, 3, 6}, rng);
    auto y = random_tensor<double>({2, 3, 2}, rng);
    auto res = finite_difference_check<double>({{"x", x, true}, {"y", y, true}}, [&] {
        auto left = slice_last(x, 0, 2);
        auto right = slice_last(x, 4, 2);
        auto cat = concat_last<double>({left, mul(right, y), y});
        return sum_all(mul(cat, cat));
    });
    CHECK(res.max_err < 1e-4);

    auto a1 = random_tensor<double>({2, 2, 3}, rng);
    auto b1 = random_tensor<double>({2, 4, 3}, rng);
    auto res2 = finite_difference_check<double>({{"a", a1, true}, {"b", b1, true}}, [&] {
        auto cat = concat_axis1(a1, b1);
        return sum_all(mul(cat, cat));
    });
    CHECK(res2.max_err < 1e-4);

    auto tbl = random_tensor<double>({7, 4}, rng);
    auto res3 = finite_difference_check<double>({{"tbl", tbl, true}}, [&] {
        auto rows = slice_axis0(tbl, 2, 3);
        return sum_all(mul(rows, rows));
    });
    CHECK(res3.max_err < 1e-4);
}

TEST_CASE("layer norm gradient and normalization") {
    Rng rng(31);
    auto x = random_tensor<double>({3, 5}, rng);
    auto gamma = random_tensor<double>({5}, rng);
    auto beta = random_tensor<double>({5}, rng);
    auto coef = random_tensor<double>({3, 5}, rng, false);
    auto res = finite_difference_check<double>(
        {{"x", x, true}, {"gamma", gamma, true}, {"beta", beta, true}},
        [&] { return sum_all(mul(layer_norm(x, gamma, beta), coef)); });
    CHECK(res.max_err < 1e-4);

    auto ones = Tensor<double>::full({5}, 1.0);
    auto zeros = Tensor<double>::zeros({5});
    auto normed = layer_norm(x, ones, zeros);
    for (int r = 0; r < 3; ++r) {
        double mean = 0;
        for (int j = 0; j < 5; ++j) mean += normed.at({r, j});
        CHECK(std::abs(mean / 5) < 1e-12);
    }
}

TEST_CASE("embedding lookup and scatter-add backward") {
    Rng rng(33);
    auto table = random_tensor<double>({5, 3}, rng);
    TokenBatch toks{2, 3, {0, 2, 2, 4, 0, 1}};
    auto emb = embedding(table, toks);
    CHECK(emb.at({0, 1, 0}) == doctest::Approx(table.at({2, 0})));

    auto res = finite_difference_check<double>({{"table", table, true}}, [&] {
        auto e = embedding(table, toks);
        return sum_all(mul(e, e));
    });
    CHECK(res.max_err < 1e-4);

    TokenBatch bad{1, 1, {9}};
    CHECK_THROWS_AS(embedding(table, bad), ContractError);
}

TEST_CASE("cross entropy values and gradient") {
    // uniform logits over V=8 -> ln 8
    auto logits = Tensor<double>::zeros({3, 8});
    std::vector<int32_t> targets{1, 5, 7};
    CHECK(cross_entropy(logits, targets).item() == doctest::Approx(std::log(8.0)));

    Rng rng(35);
    auto z = random_tensor<double>({4, 6}, rng);
    std::vector<int32_t> tg{2, kIgnoreTarget, 0, 5};
    auto res = finite_difference_check<double>({{"z", z, true}},
                                               [&] { return cross_entropy(z, tg); });
    CHECK(res.max_err < 1e-4);

    std::vector<int32_t> bad{2, 9, 0, 5};
    CHECK_THROWS_AS(cross_entropy(z, bad), ContractError);
}

TEST_CASE("causal softmax masks the future and differentiates") {
    Rng rng(37);
    auto s = random_tensor<double>({2, 4, 4}, rng);
    auto w = causal_softmax(s);
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 4; ++i) {
            double sum = 0;
            for (int j = 0; j < 4; ++j) {
                if (j > i) CHECK(w.at({b, i, j}) == 0.0);
                sum += w.at({b, i, j});
            }
            CHECK(sum == doctest::Approx(1.0));
        }
    auto coef = random_tensor<double>({2, 4, 4}, rng, false);
    auto res = finite_difference_check<double>({{"s", s, true}}, [&] {
        return sum_all(mul(causal_softmax(s), coef));
    });
    CHECK(res.max_err < 1e-4);
}

TEST_CASE("detach cuts the graph") {
    auto w = Tensor<double>::from_vector({2}, {1, 2}, true);
    auto d = mul(w, w).detach();
    CHECK_FALSE(d.requires_grad());
    sum_all(mul(d, w)).backward();
    CHECK(w.grad()[0] == doctest::Approx(1.0));  // only the direct w factor
    CHECK(w.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("no-grad mode builds no graph") {
    auto w = Tensor<double>::from_vector({2}, {1, 2}, true);
    NoGradGuard ng;
    auto y = mul(w, w);
    CHECK(y.is_leaf());
    CHECK_FALSE(y.requires_grad());
}
