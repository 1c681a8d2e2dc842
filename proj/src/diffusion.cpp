#include "anonydiff/diffusion.hpp"

namespace anonydiff {

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max) {
    if (steps < 1) throw std::invalid_argument("make_schedule: steps must be positive");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.steps = steps;
    s.betas.resize(steps);
    s.alphas.resize(steps);
    s.alpha_bars.resize(steps);
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        s.betas[t] = steps == 1 ? beta_min : beta_min + (beta_max - beta_min) * t / (steps - 1);
        s.alphas[t] = 1.0 - s.betas[t];
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
    }
    return s;
}

void validate(const SamplerConfig& c, const NoiseSchedule& s) {
    if (c.steps < 1 || c.steps > s.steps) throw std::invalid_argument("sampler steps must be in [1, T]");
    if (!(c.guidance_scale >= 0.0)) throw std::invalid_argument("guidance scale must be non-negative");
    if (!(c.d >= 0.0)) throw std::invalid_argument("anonymization degree must be non-negative");
}

std::vector<int> sampling_timesteps(int steps, int schedule_steps) {
    std::vector<int> ts(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i)
        ts[i] = static_cast<int>((static_cast<long long>(steps - 1 - i) * schedule_steps) / steps);
    return ts;
}

}  // namespace anonydiff
