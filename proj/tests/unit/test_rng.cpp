#include <doctest.h>

#include <cmath>
#include <numeric>

#include "vitkd/rng.hpp"

using vitkd::Rng;

TEST_CASE("rng: identical seeds give identical streams") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42), d(43);
    bool differ = false;
    for (int i = 0; i < 10; ++i) differ = differ || (c.next_u64() != d.next_u64());
    CHECK(differ);
}

TEST_CASE("rng: uniform stays in [0,1) and fills the range") {
    Rng r(7);
    float lo = 1.0f, hi = 0.0f;
    for (int i = 0; i < 10000; ++i) {
        const float u = r.uniform();
        CHECK(u >= 0.0f);
        CHECK(u < 1.0f);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    CHECK(lo < 0.01f);
    CHECK(hi > 0.99f);
}

TEST_CASE("rng: normal has roughly standard moments") {
    Rng r(123);
    const int n = 20000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::fabs(mean) < 0.03);
    CHECK(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("rng: trunc_normal respects the two-sigma cut") {
    Rng r(5);
    for (int i = 0; i < 5000; ++i) CHECK(std::fabs(r.trunc_normal(0.02f)) <= 0.04f);
}

TEST_CASE("rng: derive gives reproducible independent streams") {
    Rng root(99);
    Rng a = root.derive(1), a2 = root.derive(1);
    CHECK(a.next_u64() == a2.next_u64());
    Rng c = root.derive(1), d = root.derive(2);
    CHECK(c.next_u64() != d.next_u64());
}

TEST_CASE("rng: shuffle is a deterministic permutation") {
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    std::vector<int> w = v;
    Rng a(11), b(11);
    a.shuffle(v);
    b.shuffle(w);
    CHECK(v == w);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);
}

TEST_CASE("rng: bernoulli extremes") {
    Rng r(3);
    for (int i = 0; i < 100; ++i) CHECK_FALSE(r.bernoulli(0.0f));
    for (int i = 0; i < 100; ++i) CHECK(r.bernoulli(1.0f));
}
