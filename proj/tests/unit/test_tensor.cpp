#include <doctest.h>

#include <limits>

#include "vitkd/ops.hpp"
#include "vitkd/tensor.hpp"

using namespace vitkd;

TEST_CASE("tensor: construction and shape accessors") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK(z.dim() == 2);
    CHECK(z.size(0) == 2);
    CHECK(z.size(-1) == 3);
    for (float v : z.data()) CHECK(v == 0.0f);

    Tensor f = Tensor::full({2}, 1.5f);
    CHECK(f.data()[0] == 1.5f);

    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0f, 2.0f}), ShapeError);
    CHECK(Tensor::scalar(3.0f).item() == 3.0f);
    CHECK_THROWS_AS(Tensor::zeros({2, 2}).item(), ContractError);
}

TEST_CASE("tensor: loss = sum(x) gives all-ones gradient") {
    Tensor x = Tensor::param({2, 3}, {1, 2, 3, 4, 5, 6});
    backward(sum_all(x));
    REQUIRE(x.has_grad());
    for (float g : x.grad()) CHECK(g == 1.0f);
}

TEST_CASE("tensor: loss = sum(x*x) gives 2x") {
    Tensor x = Tensor::param({4}, {0.5f, -1.0f, 2.0f, 0.0f});
    backward(sum_all(mul(x, x)));
    REQUIRE(x.has_grad());
    for (size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0f * x.data()[i]));
}

TEST_CASE("tensor: backward requires a scalar and a recorded graph") {
    Tensor x = Tensor::param({3}, {1, 2, 3});
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);  // non-scalar

    Tensor plain = Tensor::from_data({1}, {2.0f});
    CHECK_THROWS_AS(backward(plain), ContractError);  // no grad anywhere
}

TEST_CASE("tensor: second backward without re-forward is an error") {
    Tensor x = Tensor::param({2}, {1.0f, 2.0f});
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), ContractError);
}

TEST_CASE("tensor: gradients accumulate across backward calls on fresh graphs") {
    Tensor x = Tensor::param({2}, {1.0f, 1.0f});
    backward(sum_all(x));
    backward(sum_all(x));
    CHECK(x.grad()[0] == 2.0f);
    x.zero_grad();
    backward(sum_all(x));
    CHECK(x.grad()[0] == 1.0f);
}

TEST_CASE("tensor: NoGradGuard suppresses taping") {
    Tensor x = Tensor::param({2}, {1.0f, 2.0f});
    {
        NoGradGuard ng;
        Tensor y = mul(x, x);
        CHECK_FALSE(y.requires_grad());
    }
    Tensor y = mul(x, x);
    CHECK(y.requires_grad());
}

TEST_CASE("tensor: detach cuts the graph, clone copies storage") {
    Tensor x = Tensor::param({2}, {1.0f, 2.0f});
    Tensor d = mul(x, x).detach();
    CHECK_FALSE(d.requires_grad());
    backward(sum_all(mul(d, x)));  // only x sees gradient, via the detached values
    CHECK(x.grad()[0] == 1.0f);
    CHECK(x.grad()[1] == 4.0f);

    Tensor c = x.clone();
    c.data()[0] = 99.0f;
    CHECK(x.data()[0] == 1.0f);

    Tensor alias = x;  // handle copy shares storage
    alias.data()[0] = 7.0f;
    CHECK(x.data()[0] == 7.0f);
}

TEST_CASE("tensor: all_finite flags inf and nan") {
    Tensor x = Tensor::from_data({2}, {1.0f, 2.0f});
    CHECK(x.all_finite());
    x.data()[1] = std::numeric_limits<float>::infinity();
    CHECK_FALSE(x.all_finite());
    x.data()[1] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(x.all_finite());
}

TEST_CASE("tensor: identical forward/backward runs give bit-identical gradients") {
    auto run = [] {
        Tensor x = Tensor::param({3, 3}, {0.1f, -0.2f, 0.3f, 1.0f, -1.0f, 0.5f, 0.7f, 0.2f, -0.4f});
        Tensor y = softmax(matmul(x, x), -1);
        backward(mean_all(mul(y, y)));
        return x.grad();
    };
    CHECK(run() == run());
}
