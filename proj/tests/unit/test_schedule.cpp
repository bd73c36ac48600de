#include <doctest.h>

#include "vitkd/schedule.hpp"

using namespace vitkd;

TEST_CASE("schedule hits the contract points exactly") {
    const int64_t total = 100, warmup = 10;
    const float peak = 1.0f, min_lr = 1e-5f;

    CHECK(lr_at_step(0, total, warmup, peak, min_lr) == doctest::Approx(peak / 10.0f));
    CHECK(lr_at_step(warmup, total, warmup, peak, min_lr) == peak);
    CHECK(lr_at_step(total - 1, total, warmup, peak, min_lr) == min_lr);
}

TEST_CASE("schedule ramps linearly during warmup") {
    for (int64_t t = 0; t < 10; ++t)
        CHECK(lr_at_step(t, 50, 10, 2.0f, 1e-5f) ==
              doctest::Approx(2.0f * static_cast<float>(t + 1) / 10.0f));
}

TEST_CASE("schedule is monotone nonincreasing after warmup") {
    const int64_t total = 317, warmup = 23;
    float prev = lr_at_step(warmup, total, warmup, 0.37f, 1e-5f);
    for (int64_t t = warmup + 1; t < total; ++t) {
        const float lr = lr_at_step(t, total, warmup, 0.37f, 1e-5f);
        CHECK(lr <= prev);
        prev = lr;
    }
    CHECK(prev == 1e-5f);
}

TEST_CASE("schedule with no warmup starts at peak") {
    CHECK(lr_at_step(0, 10, 0, 0.5f, 1e-5f) == 0.5f);
    CHECK(lr_at_step(9, 10, 0, 0.5f, 1e-5f) == 1e-5f);
}

TEST_CASE("schedule rejects out-of-range queries") {
    CHECK_THROWS_AS(lr_at_step(0, 0, 0, 1.0f, 1e-5f), ContractError);
    CHECK_THROWS_AS(lr_at_step(-1, 10, 2, 1.0f, 1e-5f), ContractError);
    CHECK_THROWS_AS(lr_at_step(10, 10, 2, 1.0f, 1e-5f), ContractError);
    CHECK_THROWS_AS(lr_at_step(3, 10, -1, 1.0f, 1e-5f), ContractError);
}
