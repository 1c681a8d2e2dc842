#include "anonydiff/anonymize.hpp"
#include "anonydiff/synthetic_faces.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace anonydiff;

namespace {

constexpr double kDegrees[] = {0.0, 0.5, 1.0, 1.2, 1.4};

ReferenceState<double> random_state(Rng& rng, int n) {
    ReferenceState<double> s;
    for (Shape sh : {Shape{8, n, 4, 4}, Shape{16, n, 2, 2}}) {
        Tensor<double> t(sh);
        for (double& v : t.data) v = rng.normal();
        s.layers.push_back(std::move(t));
    }
    return s;
}

double rel_err(double got, double want) { return std::abs(got - want) / std::max(std::abs(want), 1e-300); }

struct Models {
    std::unique_ptr<Networks<float>> nets = init_networks<float>(DenoiserConfig{}, 11);
    Recognizer encoder{conditioning_encoder_preset(), 4};
    std::vector<Image> images;

    Models() {
        nets->trained_steps = 1;
        for (std::uint64_t id : {3, 4}) {
            FaceFactors f = sample_identity(2, id);
            images.push_back(render(f));
        }
    }
};

SamplerConfig quick_sampler() {
    SamplerConfig s;
    s.steps = 3;
    return s;
}

}  // namespace

TEST(AdjustEmbedding, ClosedForm) {
    Rng rng(1);
    std::vector<double> z(64);
    for (double& v : z) v = rng.normal();
    for (double d : kDegrees) {
        const auto got = adjust_embedding<double>(z, d);
        ASSERT_EQ(got.size(), z.size());
        for (std::size_t i = 0; i < z.size(); ++i) {
            const long double want = (1.0L - static_cast<long double>(d)) * static_cast<long double>(z[i]);
            if (want == 0) EXPECT_EQ(got[i], 0.0);
            else EXPECT_LE(rel_err(got[i], static_cast<double>(want)), 1e-12) << "d=" << d;
        }
    }
}

TEST(AdjustEmbedding, WorkedExample) {
    const std::vector<double> z{1.0, -2.0};
    const auto got = adjust_embedding<double>(z, 1.2);
    EXPECT_NEAR(got[0], -0.2, 1e-12);
    EXPECT_NEAR(got[1], 0.4, 1e-12);
}

TEST(AdjustEmbedding, ZeroDegreeIsIdentityAndNoRenormalization) {
    const std::vector<double> z{0.6, 0.8};
    EXPECT_EQ(adjust_embedding<double>(z, 0.0), z);
    const auto half = adjust_embedding<double>(z, 0.5);
    EXPECT_NEAR(std::hypot(half[0], half[1]), 0.5, 1e-15);
}

TEST(BlendStates, ClosedForm) {
    Rng rng(2);
    const auto c = random_state(rng, 2), u = random_state(rng, 2);
    for (double d : kDegrees) {
        const auto got = blend_states(c, u, d);
        ASSERT_EQ(got.layers.size(), c.layers.size());
        for (std::size_t l = 0; l < c.layers.size(); ++l)
            for (std::size_t i = 0; i < c.layers[l].size(); ++i) {
                const long double want = (1.0L - d) * c.layers[l].data[i] + static_cast<long double>(d) * u.layers[l].data[i];
                EXPECT_LE(std::abs(got.layers[l].data[i] - static_cast<double>(want)),
                          1e-12 * std::max(1.0, std::abs(static_cast<double>(want))))
                    << "d=" << d;
            }
    }
    EXPECT_EQ(blend_states(c, u, 0.0), c);
    EXPECT_EQ(blend_states(c, u, 1.0), u);
}

TEST(BlendStates, RejectsMisaligned) {
    Rng rng(3);
    auto c = random_state(rng, 1), u = random_state(rng, 1);
    u.layers.pop_back();
    EXPECT_THROW(blend_states(c, u, 0.5), ShapeError);
}

TEST(ScaleStates, DropsUnconditionalTerm) {
    Rng rng(4);
    const auto c = random_state(rng, 1);
    ReferenceState<double> zero;
    for (const auto& l : c.layers) zero.layers.emplace_back(l.shape);
    for (double d : kDegrees) EXPECT_EQ(scale_states(c, d), blend_states(c, zero, d));
}

TEST(Ablation, NamesRoundTrip) {
    for (Ablation a : kAllAblations) EXPECT_EQ(parse_ablation(to_string(a)), a);
    EXPECT_THROW(parse_ablation("everything"), std::invalid_argument);
}

TEST(RequestWarning, OnlyAboveThreshold) {
    AnonymizeRequest r;
    EXPECT_EQ(r.d, 1.25);
    EXPECT_FALSE(request_warning(r));
    r.d = kDegreeWarnThreshold;
    EXPECT_FALSE(request_warning(r));
    r.d = 1.6;
    const auto w = request_warning(r);
    ASSERT_TRUE(w);
    EXPECT_NE(w->find("1.6"), std::string::npos);
}

TEST(AnonymizationInputs, AblationsWireTheRightTensors) {
    Models m;
    const double d = 0.7;
    const Tensor<float> x = images_to_tensor<float>(m.images);
    const Tensor<float> z = embed_batch(m.encoder, x);
    const Tensor<float> tokens = spatial_features(m.encoder, x);
    const auto null = null_conditioning(*m.nets);
    const auto s_uncond = repeat_state(null.state, 2);
    const auto z_adj = adjust_embedding(z, d);

    const auto full = anonymization_inputs(m.images, d, Ablation::full, *m.nets, m.encoder);
    EXPECT_EQ(full.z_src, z_adj);
    EXPECT_EQ(full.z_drv, z);
    EXPECT_EQ(full.z_null, repeat_sample(null.z, 2));
    EXPECT_EQ(full.s_uncond, s_uncond);
    EXPECT_EQ(full.s_drv, refnet_forward(m.nets->refdrv, tokens, z));
    EXPECT_EQ(full.s_src, blend_states(refnet_forward(m.nets->refsrc, tokens, z_adj), s_uncond, d));

    const auto ne = anonymization_inputs(m.images, d, Ablation::no_embeds, *m.nets, m.encoder);
    EXPECT_EQ(ne.z_src, z);
    EXPECT_EQ(ne.s_src, blend_states(refnet_forward(m.nets->refsrc, tokens, z), s_uncond, d));

    const auto ns = anonymization_inputs(m.images, d, Ablation::no_states, *m.nets, m.encoder);
    EXPECT_EQ(ns.z_src, z_adj);
    EXPECT_EQ(ns.s_src, refnet_forward(m.nets->refsrc, tokens, z_adj));

    const auto nu = anonymization_inputs(m.images, d, Ablation::no_uncond_states, *m.nets, m.encoder);
    EXPECT_EQ(nu.z_src, z_adj);
    EXPECT_EQ(nu.s_src, scale_states(refnet_forward(m.nets->refsrc, tokens, z_adj), d));
}

TEST(AnonymizationInputs, ZeroDegreeIsSelfSwap) {
    Models m;
    const auto a = anonymization_inputs(m.images, 0.0, Ablation::full, *m.nets, m.encoder);
    const auto s = swap_inputs(m.images, m.images, *m.nets, m.encoder);
    EXPECT_EQ(a.z_src, s.z_src);
    EXPECT_EQ(a.s_src, s.s_src);
    EXPECT_EQ(a.s_drv, s.s_drv);
}

TEST(AnonymizationInputs, FullDegreeIsUnconditionalState) {
    Models m;
    const auto a = anonymization_inputs(m.images, 1.0, Ablation::full, *m.nets, m.encoder);
    EXPECT_EQ(a.s_src, a.s_uncond);
}

TEST(Anonymize, RequiresTrainedNetworks) {
    Models m;
    m.nets->trained_steps = 0;
    AnonymizeRequest r;
    r.image = m.images[0];
    EXPECT_THROW(anonymize(r, *m.nets, m.encoder, make_schedule()), UntrainedNetwork);
    EXPECT_THROW(swap(m.images[0], m.images[1], 0, *m.nets, m.encoder, make_schedule(), quick_sampler()),
                 UntrainedNetwork);
}

TEST(Anonymize, RejectsNegativeDegree) {
    Models m;
    EXPECT_THROW(anonymize_batch(m.images, -0.1, Ablation::full, {0, 1}, quick_sampler(), *m.nets, m.encoder,
                                 make_schedule()),
                 std::invalid_argument);
}

TEST(Anonymize, EncoderMismatch) {
    Models m;
    RecognizerConfig rc = conditioning_encoder_preset();
    rc.embed_dim = 32;
    Recognizer other(rc, 4);
    EXPECT_THROW(anonymization_inputs(m.images, 0.5, Ablation::full, *m.nets, other), ShapeError);
}

TEST(Anonymize, SeededAndBatchInvariant) {
    Models m;
    const auto sched = make_schedule();
    AnonymizeRequest r;
    r.image = m.images[1];
    r.seed = 42;
    r.sampler = quick_sampler();
    const Image a = anonymize(r, *m.nets, m.encoder, sched);
    const Image b = anonymize(r, *m.nets, m.encoder, sched);
    EXPECT_EQ(a.pixels, b.pixels);
    const auto batch = anonymize_batch(m.images, r.d, r.ablation, {7, 42}, r.sampler, *m.nets, m.encoder, sched);
    ASSERT_EQ(batch.size(), 2u);
    double diff = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i)
        diff = std::max(diff, static_cast<double>(std::abs(batch[1].pixels[i] - a.pixels[i])));
    EXPECT_LT(diff, 1e-5);
    r.seed = 43;
    EXPECT_NE(anonymize(r, *m.nets, m.encoder, sched).pixels, a.pixels);
}

TEST(Anonymize, GuidanceScaleMatters) {
    Models m;
    const auto sched = make_schedule();
    SamplerConfig s1 = quick_sampler(), s4 = quick_sampler();
    s1.guidance_scale = 1.0;
    s4.guidance_scale = 4.0;
    const auto a = anonymize_batch(m.images, 0.5, Ablation::full, {1, 2}, s1, *m.nets, m.encoder, sched);
    const auto b = anonymize_batch(m.images, 0.5, Ablation::full, {1, 2}, s4, *m.nets, m.encoder, sched);
    EXPECT_NE(a[0].pixels, b[0].pixels);
    for (const auto& img : b)
        for (float v : img.pixels) {
            EXPECT_GE(v, -1.0f);
            EXPECT_LE(v, 1.0f);
        }
}
