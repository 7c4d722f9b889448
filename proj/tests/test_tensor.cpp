#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace chybrid;
using namespace chybrid::testing;
using Catch::Approx;

TEST_CASE("tensor construction validates shape") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    CHECK_THROWS_AS(Tensor({0, 3}, {}), DimensionError);
    const Tensor s = Tensor::scalar(2.5);
    CHECK(s.size() == 1);
    CHECK(s.item() == 2.5);
    CHECK_THROWS_AS(Tensor::zeros({2}).item(), ContractError);
}

TEST_CASE("copies share the node, detach does not") {
    Tensor a = Tensor::full({3}, 1.0, true);
    Tensor b = a;
    b.data_mut()[0] = 7.0;
    CHECK(a.at(0) == 7.0);
    CHECK(a.same_node(b));
    Tensor d = a.detach();
    CHECK_FALSE(d.same_node(a));
    CHECK_FALSE(d.requires_grad());
}

TEST_CASE("backward of sum gives ones") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum(x*x) gives 2x") {
    Rng rng(3);
    Tensor x = random_tensor({4, 5}, rng);
    backward(sum(mul(x, x)));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 2.0 * x.at(i));
}

TEST_CASE("backward requires a scalar") {
    Tensor x = Tensor::full({2}, 1.0, true);
    CHECK_THROWS_AS(backward(scale(x, 2.0)), ContractError);
}

TEST_CASE("a tensor used twice accumulates both contributions") {
    Rng rng(11);
    Tensor w = random_tensor({3, 3}, rng);
    Tensor a = random_tensor({2, 3}, rng, 1.0, false);
    Tensor b = random_tensor({2, 3}, rng, 1.0, false);
    backward(add(sum(tanh(matmul(a, w))), sum(swish(matmul(b, w)))));
    const std::vector<double> shared(w.grad().begin(), w.grad().end());

    Tensor w1 = w.detach(), w2 = w.detach();
    w1.set_requires_grad(true);
    w2.set_requires_grad(true);
    backward(sum(tanh(matmul(a, w1))));
    backward(sum(swish(matmul(b, w2))));
    for (std::size_t i = 0; i < shared.size(); ++i) CHECK(shared[i] == Approx(w1.grad()[i] + w2.grad()[i]).epsilon(1e-14));
}

TEST_CASE("gradients accumulate across backward calls until cleared") {
    Tensor x = Tensor::full({2}, 3.0, true);
    backward(sum(x));
    backward(sum(x));
    CHECK(x.grad()[0] == 2.0);
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
}

TEST_CASE("topological order lists inputs before users") {
    Rng rng(1);
    Tensor x = random_tensor({3}, rng);
    Tensor y = tanh(x);
    Tensor z = mul(y, y);
    Tensor loss = sum(add(z, y));
    const auto order = topological_order(loss);
    auto pos = [&](const Tensor& t) {
        return std::find(order.begin(), order.end(), t.node().get()) - order.begin();
    };
    CHECK(order.size() == 5);
    CHECK(pos(x) < pos(y));
    CHECK(pos(y) < pos(z));
    CHECK(pos(z) < pos(loss));
    CHECK(order.back() == loss.node().get());
}

TEST_CASE("deep chains do not overflow the stack") {
    Tensor x = Tensor::full({1}, 0.5, true);
    Tensor h = x;
    for (int i = 0; i < 20000; ++i) h = scale(h, 1.0);
    backward(sum(h));
    CHECK(x.grad()[0] == 1.0);
}

TEST_CASE("no-grad guard records no history") {
    Tensor x = Tensor::full({2}, 1.0, true);
    {
        NoGradGuard g;
        Tensor y = mul(x, x);
        CHECK_FALSE(y.requires_grad());
        CHECK(y.node()->inputs.empty());
    }
    CHECK(mul(x, x).requires_grad());
}

TEST_CASE("assert_finite") {
    CHECK_NOTHROW(assert_finite(Tensor::zeros({4})));
    Tensor t = Tensor::zeros({4});
    t.data_mut()[2] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(assert_finite(t, "probe"), NumericError);
    t.data_mut()[2] = std::nan("");
    CHECK_THROWS_AS(assert_finite(t), NumericError);
}

TEST_CASE("rng is reproducible and its state round-trips") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    const std::string s = a.state();
    const double u = a.uniform(), n = a.normal();
    Rng c;
    c.set_state(s);
    CHECK(c.uniform() == u);
    CHECK(c.normal() == n);
    CHECK(Rng::derived(7, 1).next_u64() != Rng::derived(7, 2).next_u64());
}

TEST_CASE("rng distributions have the expected moments") {
    Rng rng(5);
    const int n = 200000;
    double su = 0, sn = 0, sn2 = 0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        CHECK((u >= 0.0 && u < 1.0));
        su += u;
        const double z = rng.normal();
        sn += z;
        sn2 += z * z;
    }
    CHECK(su / n == Approx(0.5).margin(0.005));
    CHECK(sn / n == Approx(0.0).margin(0.01));
    CHECK(sn2 / n == Approx(1.0).margin(0.02));
    std::vector<int> counts(6, 0);
    for (int i = 0; i < 60000; ++i) ++counts[rng.uniform_int(6)];
    for (int c : counts) CHECK(c == Approx(10000).margin(400));
}

TEST_CASE("parameter store aliases resolve to one tensor") {
    Rng rng(0);
    std::vector<ParamSpec> layout = {
        {"a.w", {2, 3}, Init::glorot, 2, 3, "", "a"},
        {"a.b", {3}, Init::zeros, 1, 1, "", "a"},
        {"b.w", {2, 3}, Init::glorot, 2, 3, "a.w", "b"},
        {"c.g", {3}, Init::ones, 1, 1, "", "c"},
    };
    ParamStore ps(layout, rng);
    CHECK(ps.names() == std::vector<std::string>{"a.w", "a.b", "c.g"});
    CHECK(ps.get("b.w").same_node(ps.get("a.w")));
    CHECK(ps.unique_count() == 12);
    CHECK(ps.get("c.g").at(1) == 1.0);
    CHECK(ps.get("a.b").at(1) == 0.0);
    const double limit = std::sqrt(6.0 / 5.0);
    for (double v : ps.get("a.w").data()) CHECK(std::abs(v) <= limit);
    CHECK_THROWS_AS(ps.get("nope"), ConfigError);
    CHECK_THROWS_AS(ps.add("a.b", Tensor::zeros({3})), ConfigError);
}
