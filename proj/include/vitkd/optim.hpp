#pragma once

#include <cstdint>
#include <vector>

#include "vitkd/tensor.hpp"

namespace vitkd {

struct AdamWConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

// Decoupled-weight-decay Adam. Decay is applied directly to the weights
// (w *= 1 - lr*wd) before the bias-corrected moment update, so a parameter
// with zero gradient still shrinks by exactly that factor.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig config);

    void step();
    void zero_grad();

    void set_lr(float lr) { config_.lr = lr; }
    float lr() const { return config_.lr; }
    int64_t steps_taken() const { return step_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    AdamWConfig config_;
    int64_t step_ = 0;
};

}  // namespace vitkd
