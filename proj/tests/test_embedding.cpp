#include "anonydiff/embedding.hpp"
#include "anonydiff/synthetic_faces.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace anonydiff;

namespace {

double norm(std::span<const float> z) {
    double s = 0;
    for (float v : z) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

// One recognizer shared by the tests that only read it.
const Recognizer& trained() {
    static const auto r = train_recognizer(render_identity_pool(3, 0, 20, 20), conditioning_encoder_preset());
    return *r;
}

}  // namespace

TEST(TrainRecognizer, HeldOutAccuracy) {
    EXPECT_GE(trained().accuracy, 0.95);
    EXPECT_EQ(trained().class_count(), 20);
}

TEST(TrainRecognizer, TinyDatasetTrains) {
    RecognizerConfig c = conditioning_encoder_preset();
    c.steps = 20;
    const auto r = train_recognizer(render_identity_pool(1, 0, 2, 2), c);
    EXPECT_GE(r->accuracy, 0.0);
    EXPECT_LE(r->accuracy, 1.0);
}

TEST(TrainRecognizer, SeedDeterministic) {
    RecognizerConfig c = evaluator_preset();
    c.steps = 30;
    const auto data = render_identity_pool(2, 0, 4, 4);
    EXPECT_EQ(train_recognizer(data, c)->parameter_hash(), train_recognizer(data, c)->parameter_hash());
    RecognizerConfig other = c;
    other.seed += 1;
    EXPECT_NE(train_recognizer(data, other)->parameter_hash(), train_recognizer(data, c)->parameter_hash());
}

TEST(TrainRecognizer, InsufficientData) {
    EXPECT_THROW(train_recognizer(render_identity_pool(1, 0, 1, 5), conditioning_encoder_preset()), InsufficientData);
    EXPECT_THROW(train_recognizer(render_identity_pool(1, 0, 3, 1), conditioning_encoder_preset()), InsufficientData);
}

TEST(TrainRecognizer, PresetsDiffer) {
    EXPECT_FALSE(conditioning_encoder_preset() == evaluator_preset());
    EXPECT_NE(conditioning_encoder_preset().seed, evaluator_preset().seed);
}

TEST(Embed, UnitNormAndDeterministic) {
    const auto pool = render_identity_pool(9, 500, 5, 2);
    for (const auto& img : pool.images) {
        const auto z = embed(trained(), img);
        EXPECT_EQ(static_cast<int>(z.size()), trained().embed_dim());
        EXPECT_NEAR(norm(z), 1.0, 1e-5);
        EXPECT_EQ(z, embed(trained(), img));
    }
}

TEST(Embed, WithinIdentityCloserThanAcross) {
    const auto pool = render_identity_pool(11, 7000, 50, 2);
    std::vector<ImageEmbedding> z;
    for (const auto& img : pool.images) z.push_back(embed(trained(), img));
    double within = 0, across = 0;
    for (int i = 0; i < 50; ++i) {
        within += identity_distance(z[2 * i], z[2 * i + 1]);
        across += identity_distance(z[2 * i], z[(2 * i + 2) % 100]);
    }
    for (int i = 0; i < 50; ++i) {
        within += identity_distance(z[2 * i + 1], z[2 * i]);
        across += identity_distance(z[2 * i + 1], z[(2 * i + 5) % 100]);
    }
    EXPECT_LT(within / 100, across / 100);
}

TEST(Embed, ShapeMismatch) {
    EXPECT_THROW(embed(trained(), Image(16, 16)), ShapeError);
    EXPECT_THROW(spatial_features(trained(), Image(32, 32, 1)), ShapeError);
}

TEST(Embed, SmallPerturbationIsBounded) {
    Image img = render(sample_identity(4, 4));
    const auto z = embed(trained(), img);
    img.pixels[17 * 32 * 3 + 16 * 3] += 1e-6f;
    const auto z2 = embed(trained(), img);
    double d = 0;
    for (std::size_t i = 0; i < z.size(); ++i) d += (z[i] - z2[i]) * (z[i] - z2[i]);
    EXPECT_LT(std::sqrt(d), 1e-2);
}

TEST(SpatialFeatures, TokenLayout) {
    const Image img = render(sample_identity(4, 5));
    const auto t = spatial_features(trained(), img);
    EXPECT_EQ(t.shape.c, trained().token_channels());
    EXPECT_EQ(t.shape.c, 16);
    EXPECT_EQ(t.shape.spatial(), 64u);
    EXPECT_EQ(t.data, spatial_features(trained(), img).data);
    const auto zero = spatial_features(trained(), Image(32, 32));
    for (float v : zero.data) ASSERT_TRUE(std::isfinite(v));
    for (float v : embed(trained(), Image(32, 32))) ASSERT_TRUE(std::isfinite(v));
}

TEST(IdentityDistance, Cases) {
    const std::vector<double> a{1, 0, 0}, b{0, 1, 0}, c{-1, 0, 0};
    EXPECT_DOUBLE_EQ(identity_distance(std::span<const double>(a), std::span<const double>(a)), 0.0);
    EXPECT_DOUBLE_EQ(identity_distance(std::span<const double>(a), std::span<const double>(c)), 2.0);
    EXPECT_DOUBLE_EQ(identity_distance(std::span<const double>(a), std::span<const double>(b)), 1.0);
    const std::vector<double> u{0.6, 0.8, 0}, v{0, 0.6, 0.8};
    EXPECT_DOUBLE_EQ(identity_distance(std::span<const double>(u), std::span<const double>(v)),
                     identity_distance(std::span<const double>(v), std::span<const double>(u)));
}

TEST(IdentityDistance, RejectsNonUnit) {
    const std::vector<double> a{1, 0}, off{1.01, 0}, ok{1.0005, 0};
    EXPECT_THROW(identity_distance(std::span<const double>(a), std::span<const double>(off)), std::invalid_argument);
    EXPECT_NO_THROW(identity_distance(std::span<const double>(a), std::span<const double>(ok)));
    const std::vector<float> f{1, 0}, g{0, 0};
    EXPECT_THROW(identity_distance(std::span<const float>(f), std::span<const float>(g)), std::invalid_argument);
}

TEST(RecognizerArchive, RoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "anonydiff_recognizer_rt";
    std::filesystem::remove_all(dir);
    save_recognizer(trained(), dir);
    EXPECT_TRUE(std::filesystem::exists(dir / "recognizer.json"));
    const auto back = load_recognizer(dir);
    EXPECT_EQ(back->parameter_hash(), trained().parameter_hash());
    EXPECT_EQ(back->accuracy, trained().accuracy);
    const Image img = render(sample_identity(4, 6));
    EXPECT_EQ(embed(*back, img), embed(trained(), img));
    std::filesystem::remove_all(dir);
}
