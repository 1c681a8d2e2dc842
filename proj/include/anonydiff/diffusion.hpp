#pragma once

// DDPM machinery: linear noise schedule, forward noising, classifier-free
// guidance and the ancestral reverse sampler. Independent of the network.

#include "anonydiff/rng.hpp"
#include "anonydiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace anonydiff {

struct DivergedSampling : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NoiseSchedule {
    int steps = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    /// alpha_bar at t, with alpha_bar(-1) = 1 (the clean image).
    double alpha_bar(int t) const { return t < 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(t)); }
};

/// Linear betas from beta_min to beta_max over `steps` training timesteps.
NoiseSchedule make_schedule(int steps = 1000, double beta_min = 1e-4, double beta_max = 0.02);

struct SamplerConfig {
    int steps = 200;
    double guidance_scale = 4.0;
    std::uint64_t seed = 0;
    double d = 0.0;
};

void validate(const SamplerConfig& c, const NoiseSchedule& s);

/// Evenly strided timesteps from high noise down to 0, e.g. 995, 990, ..., 0 for
/// 200 steps of a 1000-step schedule.
std::vector<int> sampling_timesteps(int steps, int schedule_steps);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
    require_same(x0.shape, eps.shape, "forward_diffuse");
    if (t < 0 || t >= s.steps) throw std::out_of_range("forward_diffuse: timestep out of range");
    const T a = static_cast<T>(std::sqrt(s.alpha_bars[t]));
    const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bars[t]));
    Tensor<T> out(x0.shape);
    out.mat() = x0.mat() * a + eps.mat() * b;
    return out;
}

/// Per-sample timesteps variant used by training batches.
template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, const std::vector<int>& t, const Tensor<T>& eps, const NoiseSchedule& s) {
    require_same(x0.shape, eps.shape, "forward_diffuse");
    if (t.size() != static_cast<std::size_t>(x0.shape.n)) throw ShapeError("forward_diffuse: one timestep per sample");
    Tensor<T> out(x0.shape);
    const std::size_t sp = x0.shape.spatial();
    for (int n = 0; n < x0.shape.n; ++n) {
        if (t[n] < 0 || t[n] >= s.steps) throw std::out_of_range("forward_diffuse: timestep out of range");
        const T a = static_cast<T>(std::sqrt(s.alpha_bars[t[n]]));
        const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bars[t[n]]));
        for (int c = 0; c < x0.shape.c; ++c) {
            const std::size_t off = c * x0.shape.cols() + n * sp;
            for (std::size_t i = 0; i < sp; ++i) out.data[off + i] = x0.data[off + i] * a + eps.data[off + i] * b;
        }
    }
    return out;
}

/// eps = eps_uncond + scale * (eps_cond - eps_uncond); scale 1 is the conditional branch.
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& eps_uncond, const Tensor<T>& eps_cond, double scale) {
    require_same(eps_uncond.shape, eps_cond.shape, "cfg_combine");
    Tensor<T> out(eps_uncond.shape);
    if (scale == 1.0) {
        out.data = eps_cond.data;
    } else if (scale == 0.0) {
        out.data = eps_uncond.data;
    } else {
        const T s = static_cast<T>(scale);
        out.mat() = eps_uncond.mat() + (eps_cond.mat() - eps_uncond.mat()) * s;
    }
    return out;
}

/// Ancestral step from t to t_prev (t_prev = t - 1 unless the sampler strides).
/// mean = (x_t - beta/sqrt(1 - abar_t) eps_hat) / sqrt(alpha), variance beta, with
/// alpha = abar_t / abar_prev and beta = 1 - alpha. No noise is added when t_prev < 0.
/// `noise_seeds` gives one stream per sample so batching does not change draws.
template <class T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, int t_prev, const NoiseSchedule& s,
                    std::vector<Rng>* noise) {
    require_same(x_t.shape, eps_hat.shape, "ddpm_step");
    if (t < 0 || t >= s.steps || t_prev >= t) throw std::out_of_range("ddpm_step: bad timestep pair");
    const double abar = s.alpha_bar(t);
    const double alpha = abar / s.alpha_bar(t_prev);
    const double beta = 1.0 - alpha;
    const T inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(alpha));
    const T eps_coef = static_cast<T>(beta / std::sqrt(1.0 - abar));
    Tensor<T> out(x_t.shape);
    out.mat() = (x_t.mat() - eps_hat.mat() * eps_coef) * inv_sqrt_alpha;
    if (t_prev >= 0) {
        if (!noise || noise->size() != static_cast<std::size_t>(x_t.shape.n))
            throw std::invalid_argument("ddpm_step: one noise stream per sample required");
        const double sigma = std::sqrt(beta);
        const std::size_t sp = x_t.shape.spatial();
        for (int n = 0; n < x_t.shape.n; ++n)
            for (int c = 0; c < x_t.shape.c; ++c) {
                T* p = &out.data[c * x_t.shape.cols() + n * sp];
                for (std::size_t i = 0; i < sp; ++i) p[i] += static_cast<T>(sigma * (*noise)[n].normal());
            }
    }
    return out;
}

template <class T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s, Rng& rng) {
    std::vector<Rng> streams;
    streams.reserve(static_cast<std::size_t>(x_t.shape.n));
    for (int n = 0; n < x_t.shape.n; ++n) streams.emplace_back(rng.next_u64());
    return ddpm_step(x_t, eps_hat, t, t - 1, s, &streams);
}

template <class T>
struct GuidedPrediction {
    Tensor<T> uncond;
    Tensor<T> cond;
};

/// Returns both branches' noise predictions for a batch at timestep t.
template <class T>
using GuidedDenoiser = std::function<GuidedPrediction<T>(const Tensor<T>& x_t, int t)>;

/// Reverse diffusion from seeded Gaussian noise. Sample n draws its initial
/// noise and every step's noise from its own stream seeded by seeds[n]. The
/// final state is clipped to [-1, 1]; intermediates are not.
template <class T>
Tensor<T> sample(const GuidedDenoiser<T>& denoiser, Shape shape, const std::vector<std::uint64_t>& seeds,
                 const SamplerConfig& config, const NoiseSchedule& schedule) {
    validate(config, schedule);
    if (seeds.size() != static_cast<std::size_t>(shape.n)) throw std::invalid_argument("sample: one seed per sample");
    std::vector<Rng> noise;
    noise.reserve(seeds.size());
    for (auto s : seeds) noise.emplace_back(s, std::initializer_list<std::uint64_t>{0x5a});
    Tensor<T> x(shape);
    const std::size_t sp = shape.spatial();
    for (int n = 0; n < shape.n; ++n)
        for (int c = 0; c < shape.c; ++c)
            for (std::size_t i = 0; i < sp; ++i) x.at(c, n, i) = static_cast<T>(noise[n].normal());

    const auto ts = sampling_timesteps(config.steps, schedule.steps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;
        auto pred = denoiser(x, t);
        require_same(pred.cond.shape, shape, "sample: denoiser output");
        const Tensor<T> eps = cfg_combine(pred.uncond, pred.cond, config.guidance_scale);
        x = ddpm_step(x, eps, t, t_prev, schedule, &noise);
        for (T v : x.data)
            if (!std::isfinite(static_cast<double>(v)))
                throw DivergedSampling("sampling diverged at timestep " + std::to_string(t));
    }
    for (T& v : x.data) v = std::clamp(v, T(-1), T(1));
    return x;
}

template <class T>
Tensor<T> sample(const GuidedDenoiser<T>& denoiser, Shape shape, const SamplerConfig& config,
                 const NoiseSchedule& schedule) {
    return sample(denoiser, shape, std::vector<std::uint64_t>(static_cast<std::size_t>(shape.n), config.seed), config,
                  schedule);
}

}  // namespace anonydiff
