#include "vitkd/optim.hpp"

#include <cmath>

namespace vitkd {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
        if (!p.defined() || !p.requires_grad())
            throw ContractError("AdamW: every parameter must be a defined requires_grad leaf");
        m_.emplace_back(p.data().size(), 0.0f);
        v_.emplace_back(p.data().size(), 0.0f);
    }
}

void AdamW::step() {
    ++step_;
    const float bc1 = 1.0f - std::pow(config_.beta1, static_cast<float>(step_));
    const float bc2 = 1.0f - std::pow(config_.beta2, static_cast<float>(step_));
    const float decay = 1.0f - config_.lr * config_.weight_decay;
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        auto& w = params_[pi].data();
        auto& m = m_[pi];
        auto& v = v_[pi];
        const bool has_grad = params_[pi].has_grad();
        const std::vector<float>* grad = has_grad ? &params_[pi].grad() : nullptr;
        for (size_t i = 0; i < w.size(); ++i) {
            if (config_.weight_decay != 0.0f) w[i] *= decay;
            const float g = has_grad ? (*grad)[i] : 0.0f;
            m[i] = config_.beta1 * m[i] + (1.0f - config_.beta1) * g;
            v[i] = config_.beta2 * v[i] + (1.0f - config_.beta2) * g * g;
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace vitkd
