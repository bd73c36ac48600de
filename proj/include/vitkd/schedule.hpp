#pragma once

#include <cmath>
#include <cstdint>

#include "vitkd/error.hpp"

namespace vitkd {

// Linear warmup to `peak`, then cosine decay landing exactly on `min_lr` at
// the final step. lr(0) = peak/warmup_steps, lr(warmup_steps) = peak,
// lr(total_steps-1) = min_lr, monotone nonincreasing after warmup.
inline float lr_at_step(int64_t step, int64_t total_steps, int64_t warmup_steps, float peak,
                        float min_lr) {
    if (total_steps <= 0) throw ContractError("lr schedule needs total_steps > 0");
    if (step < 0 || step >= total_steps)
        throw ContractError("lr schedule step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + ")");
    if (warmup_steps < 0) throw ContractError("lr schedule needs warmup_steps >= 0");
    if (step < warmup_steps)
        return peak * static_cast<float>(step + 1) / static_cast<float>(warmup_steps);
    const int64_t span = total_steps - 1 - warmup_steps;
    if (span <= 0) return step == warmup_steps ? peak : min_lr;
    const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
    return static_cast<float>(min_lr + 0.5 * (peak - min_lr) * (1.0 + std::cos(progress * M_PI)));
}

constexpr float kMinLr = 1e-5f;

}  // namespace vitkd
