#include "anonydiff/diffusion.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <span>

using namespace anonydiff;

namespace {

Tensor<double> gaussian(Shape s, Rng& rng) {
    Tensor<double> t(s);
    for (double& v : t.data) v = rng.normal();
    return t;
}

double variance(std::span<const double> v) {
    double m = 0, q = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) q += (x - m) * (x - m);
    return q / static_cast<double>(v.size());
}

}  // namespace

TEST(Schedule, FirstAlphaBar) {
    const auto s = make_schedule(1000, 1e-4, 0.02);
    EXPECT_DOUBLE_EQ(s.alpha_bars[0], 1 - 1e-4);
    EXPECT_GT(s.alpha_bars[0], 0.99);
}

TEST(Schedule, StrictlyDecreasingInRange) {
    for (auto [t, lo, hi] : {std::tuple{1000, 1e-4, 0.02}, std::tuple{50, 0.001, 0.2}, std::tuple{10, 0.05, 0.05}}) {
        const auto s = make_schedule(t, lo, hi);
        for (int i = 0; i < t; ++i) {
            EXPECT_GT(s.betas[i], 0.0);
            EXPECT_LT(s.betas[i], 1.0);
            EXPECT_GT(s.alpha_bars[i], 0.0);
            EXPECT_LT(s.alpha_bars[i], 1.0);
            if (i > 0) EXPECT_LT(s.alpha_bars[i], s.alpha_bars[i - 1]);
        }
    }
}

TEST(Schedule, LastAlphaBarMatchesProductOracle) {
    const auto s = make_schedule(1000, 1e-4, 0.02);
    // Independent oracle: log-sum of the linear betas.
    double log_prod = 0;
    for (int t = 0; t < 1000; ++t) log_prod += std::log1p(-(1e-4 + (0.02 - 1e-4) * t / 999.0));
    EXPECT_NEAR(s.alpha_bars[999] / std::exp(log_prod), 1.0, 1e-10);
}

TEST(Schedule, RejectsBadRanges) {
    EXPECT_THROW(make_schedule(1000, 0.0, 0.02), std::invalid_argument);
    EXPECT_THROW(make_schedule(1000, 0.03, 0.02), std::invalid_argument);
    EXPECT_THROW(make_schedule(1000, 1e-4, 1.0), std::invalid_argument);
    EXPECT_THROW(make_schedule(0, 1e-4, 0.02), std::invalid_argument);
}

TEST(SamplerConfig, Validation) {
    const auto s = make_schedule();
    SamplerConfig c;
    EXPECT_NO_THROW(validate(c, s));
    c.steps = 0;
    EXPECT_THROW(validate(c, s), std::invalid_argument);
    c.steps = 1001;
    EXPECT_THROW(validate(c, s), std::invalid_argument);
    c = {};
    c.guidance_scale = -0.1;
    EXPECT_THROW(validate(c, s), std::invalid_argument);
    EXPECT_EQ(SamplerConfig{}.steps, 200);
    EXPECT_EQ(SamplerConfig{}.guidance_scale, 4.0);
}

TEST(SamplingTimesteps, EvenStride) {
    const auto ts = sampling_timesteps(200, 1000);
    ASSERT_EQ(ts.size(), 200u);
    EXPECT_EQ(ts.front(), 995);
    EXPECT_EQ(ts.back(), 0);
    for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_EQ(ts[i - 1] - ts[i], 5);
    EXPECT_EQ(sampling_timesteps(1000, 1000).front(), 999);
}

TEST(ForwardDiffuse, ZeroNoise) {
    const auto s = make_schedule();
    Rng rng(1);
    const auto x0 = gaussian({3, 2, 4, 4}, rng);
    const Tensor<double> eps(x0.shape);
    const auto xt = forward_diffuse(x0, 500, eps, s);
    const double a = std::sqrt(s.alpha_bars[500]);
    for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_EQ(xt.data[i], x0.data[i] * a);
}

TEST(ForwardDiffuse, NearlyIdentityAtStart) {
    const auto s = make_schedule();
    Rng rng(2);
    const auto x0 = gaussian({3, 1, 8, 8}, rng);
    const auto eps = gaussian(x0.shape, rng);
    const auto xt = forward_diffuse(x0, 0, eps, s);
    for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(xt.data[i], x0.data[i], 1e-2 * 4);
}

TEST(ForwardDiffuse, PreservesVariance) {
    const auto s = make_schedule();
    Rng rng(3);
    for (int t : {10, 300, 999}) {
        const auto x0 = gaussian({1, 10000, 1, 1}, rng);
        const auto eps = gaussian(x0.shape, rng);
        EXPECT_NEAR(variance(forward_diffuse(x0, t, eps, s).data), 1.0, 0.05);
    }
}

TEST(ForwardDiffuse, ShapeMismatch) {
    const auto s = make_schedule();
    EXPECT_THROW(forward_diffuse(Tensor<double>({1, 1, 2, 2}), 3, Tensor<double>({1, 1, 2, 3}), s), ShapeError);
}

TEST(CfgCombine, ExactIdentities) {
    Rng rng(4);
    const auto u = gaussian({3, 2, 4, 4}, rng), c = gaussian({3, 2, 4, 4}, rng);
    EXPECT_EQ(cfg_combine(u, c, 1.0).data, c.data);
    EXPECT_EQ(cfg_combine(u, c, 0.0).data, u.data);
    const Tensor<double> zero(u.shape);
    const auto four = cfg_combine(zero, c, 4.0);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(four.data[i], 4.0 * c.data[i]);
}

TEST(CfgCombine, AffineInScale) {
    Rng rng(5);
    const auto u = gaussian({3, 1, 4, 4}, rng), c = gaussian({3, 1, 4, 4}, rng);
    for (auto [s1, s2] : {std::pair{0.5, 3.5}, std::pair{2.0, 6.0}, std::pair{-1.0, 1.0}}) {
        const auto a = cfg_combine(u, c, s1), b = cfg_combine(u, c, s2), m = cfg_combine(u, c, (s1 + s2) / 2);
        for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(a.data[i] + b.data[i], 2 * m.data[i], 1e-12);
    }
}

TEST(DdpmStep, NoNoiseAtZero) {
    const auto s = make_schedule();
    Rng rng(6);
    const auto x = gaussian({3, 1, 4, 4}, rng), e = gaussian({3, 1, 4, 4}, rng);
    Rng r1(1), r2(2);
    EXPECT_EQ(ddpm_step(x, e, 0, s, r1).data, ddpm_step(x, e, 0, s, r2).data);
}

TEST(DdpmStep, ExactNoiseGivesPosteriorMean) {
    const auto s = make_schedule();
    Rng rng(7);
    const auto x0 = gaussian({3, 2, 4, 4}, rng), eps = gaussian(x0.shape, rng);
    for (int t : {1, 17, 250, 999}) {
        const auto xt = forward_diffuse(x0, t, eps, s);
        std::vector<Rng> streams{Rng(100), Rng(101)};
        std::vector<Rng> copies = streams;
        const auto out = ddpm_step(xt, eps, t, t - 1, s, &streams);
        // Closed-form q(x_{t-1} | x_t, x0) mean.
        const double ab = s.alpha_bars[t], ab_prev = s.alpha_bars[t - 1], beta = s.betas[t];
        const double c0 = std::sqrt(ab_prev) * beta / (1 - ab);
        const double ct = std::sqrt(1 - beta) * (1 - ab_prev) / (1 - ab);
        const double sigma = std::sqrt(1 - ab / ab_prev);
        const std::size_t sp = x0.shape.spatial();
        for (int n = 0; n < 2; ++n)
            for (int c = 0; c < 3; ++c)
                for (std::size_t i = 0; i < sp; ++i) {
                    const double mean = c0 * x0.at(c, n, i) + ct * xt.at(c, n, i);
                    EXPECT_NEAR(out.at(c, n, i) - sigma * copies[n].normal(), mean, 1e-6);
                }
    }
    // t = 0 recovers x0.
    const auto xt = forward_diffuse(x0, 0, eps, s);
    Rng r(0);
    const auto out = ddpm_step(xt, eps, 0, s, r);
    for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(out.data[i], x0.data[i], 1e-6);
}

TEST(DdpmStep, NoiseVarianceIsBeta) {
    const auto s = make_schedule();
    const int t = 400;
    const Tensor<double> zero({1, 10000, 1, 1});
    Rng rng(8);
    const auto out = ddpm_step(zero, zero, t, s, rng);
    EXPECT_NEAR(variance(out.data) / s.betas[t], 1.0, 0.05);
}

namespace {

// Exact noise predictor E[eps | x_t] for a N(mu, sigma^2) target; sigma = 0 is a point mass.
GuidedDenoiser<double> gaussian_target(double mu, double sigma, const NoiseSchedule& s) {
    return [mu, sigma, &s](const Tensor<double>& x, int t) {
        Tensor<double> e(x.shape);
        const double a = std::sqrt(s.alpha_bars[t]), b = std::sqrt(1 - s.alpha_bars[t]);
        const double var = a * a * sigma * sigma + b * b;
        for (std::size_t i = 0; i < x.size(); ++i) e.data[i] = b * (x.data[i] - a * mu) / var;
        return GuidedPrediction<double>{e, e};
    };
}

GuidedDenoiser<double> point_target(double mu, const NoiseSchedule& s) { return gaussian_target(mu, 0.0, s); }

}  // namespace

TEST(Sample, GaussianTargetMean) {
    const auto s = make_schedule();
    SamplerConfig c;
    const double mu = 0.3;
    std::vector<std::uint64_t> seeds(2000);
    for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = i;
    const auto x = sample(point_target(mu, s), Shape{1, 2000, 1, 1}, seeds, c, s);
    double m = 0;
    for (double v : x.data) m += v;
    EXPECT_NEAR(m / 2000.0, mu, 0.05);

    const auto y = sample(gaussian_target(-0.2, 0.4, s), Shape{1, 2000, 1, 1}, seeds, c, s);
    double my = 0;
    for (double v : y.data) my += v;
    EXPECT_NEAR(my / 2000.0, -0.2, 0.04);
    EXPECT_NEAR(std::sqrt(variance(y.data)), 0.4, 0.06);
}

TEST(Sample, SeedDeterminism) {
    const auto s = make_schedule();
    SamplerConfig c;
    c.steps = 20;
    c.seed = 9;
    const auto a = sample(gaussian_target(0.1, 0.3, s), Shape{3, 1, 4, 4}, c, s);
    const auto b = sample(gaussian_target(0.1, 0.3, s), Shape{3, 1, 4, 4}, c, s);
    EXPECT_EQ(a.data, b.data);
    c.seed = 10;
    const auto d = sample(gaussian_target(0.1, 0.3, s), Shape{3, 1, 4, 4}, c, s);
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.data[i] - d.data[i]));
    EXPECT_GT(diff, 1e-3);
}

TEST(Sample, BatchingDoesNotChangeSamples) {
    const auto s = make_schedule();
    SamplerConfig c;
    c.steps = 10;
    const auto both = sample(gaussian_target(0.0, 0.3, s), Shape{3, 2, 4, 4}, {5, 6}, c, s);
    const auto one = sample(gaussian_target(0.0, 0.3, s), Shape{3, 1, 4, 4}, {6}, c, s);
    for (int ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(both.at(ch, 1, i), one.at(ch, 0, i));
}

TEST(Sample, OutputClippedAndGuidanceApplied) {
    const auto s = make_schedule();
    SamplerConfig c;
    c.steps = 10;
    c.guidance_scale = 4.0;
    int calls = 0;
    GuidedDenoiser<double> den = [&](const Tensor<double>& x, int) {
        ++calls;
        Tensor<double> u(x.shape), k(x.shape);
        for (double& v : k.data) v = -0.5;
        return GuidedPrediction<double>{u, k};
    };
    const auto x = sample(den, Shape{1, 4, 2, 2}, c, s);
    EXPECT_EQ(calls, 10);
    for (double v : x.data) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Sample, DivergenceAborts) {
    const auto s = make_schedule();
    SamplerConfig c;
    c.steps = 5;
    GuidedDenoiser<double> den = [](const Tensor<double>& x, int) {
        Tensor<double> e(x.shape);
        e.data[0] = std::numeric_limits<double>::quiet_NaN();
        return GuidedPrediction<double>{e, e};
    };
    EXPECT_THROW(sample(den, Shape{1, 1, 2, 2}, c, s), DivergedSampling);
}
