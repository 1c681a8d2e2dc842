#include "anonydiff/archive.hpp"
#include "anonydiff/synthetic_faces.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

using namespace anonydiff;
namespace fs = std::filesystem;

namespace {

// Golden values recorded on the first verified run.
constexpr double kGoldenCosine01 = -0.36058977565247941;
const std::string kGoldenManifestSha = "0b44c585f77a5abccc0ca535940e9e9eea77f95bc41b70c4a5e6db12e86c2186";

double cosine(const FaceFactors& a, const FaceFactors& b) {
    double s = 0;
    for (int k = 0; k < kIdentityDim; ++k) s += a.identity_vec[k] * b.identity_vec[k];
    return s;
}

// Column centroid of pixels that differ from their row's border colour.
double face_centroid_x(const Image& img) {
    double sum = 0, count = 0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double diff = 0;
            for (int c = 0; c < 3; ++c) diff += std::abs(img.at(y, x, c) - img.at(y, 0, c));
            if (diff > 0.05) {
                sum += x + 0.5;
                count += 1;
            }
        }
    return sum / count;
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("anonydiff_test_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(SampleIdentity, Deterministic) {
    EXPECT_EQ(sample_identity(0, 0), sample_identity(0, 0));
}

TEST(SampleIdentity, DistinctIdentitiesDiffer) {
    const double c = cosine(sample_identity(0, 0), sample_identity(0, 1));
    EXPECT_LT(c, 0.99);
    // Frozen on the first run.
    EXPECT_NEAR(c, kGoldenCosine01, 1e-12);
}

TEST(SampleIdentity, UnitNormNeutral) {
    for (std::uint64_t id = 0; id < 200; ++id) {
        const FaceFactors f = sample_identity(9, id);
        double n = 0;
        for (double v : f.identity_vec) n += v * v;
        EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
        EXPECT_EQ(f.pose, Pose{});
        EXPECT_EQ(f.gaze, Gaze{});
        for (double e : f.expression) EXPECT_EQ(e, 0.0);
    }
}

TEST(Render, NeutralIsMirrorSymmetric) {
    for (std::uint64_t id = 0; id < 5; ++id) {
        const Image img = render(sample_identity(4, id));
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c) ASSERT_NEAR(img.at(y, x, c), img.at(y, img.width - 1 - x, c), 1e-6);
    }
}

TEST(Render, PixelsInRangeAndDeterministic) {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        const FaceFactors f = with_attributes(sample_identity(5, i), sample_attributes(rng));
        const Image a = render(f);
        for (float v : a.pixels) {
            ASSERT_TRUE(std::isfinite(v));
            ASSERT_GE(v, -1.0f);
            ASSERT_LE(v, 1.0f);
        }
        EXPECT_EQ(a, render(f));
    }
}

TEST(Render, YawMirrorsCentroid) {
    for (std::uint64_t id = 0; id < 5; ++id) {
        FaceFactors f = sample_identity(6, id);
        f.pose.yaw = 0.3;
        const Image plus = render(f);
        f.pose.yaw = -0.3;
        const Image minus = render(f);
        EXPECT_LE(std::abs(face_centroid_x(plus) + face_centroid_x(minus) - plus.width), 1.0);
        EXPECT_GT(face_centroid_x(plus), face_centroid_x(minus) + 2.0);
    }
}

TEST(Render, RejectsInvalidFactors) {
    FaceFactors f = sample_identity(0, 0);
    f.pose.yaw = 0.6;
    EXPECT_THROW(render(f), InvalidFactors);
    f = sample_identity(0, 0);
    f.gaze.pitch = -0.41;
    EXPECT_THROW(render(f), InvalidFactors);
    f = sample_identity(0, 0);
    f.expression[2] = 1.5;
    EXPECT_THROW(render(f), InvalidFactors);
    f = sample_identity(0, 0);
    f.identity_vec[0] += 0.1;
    EXPECT_THROW(render(f), InvalidFactors);
}

// Ridge regression from pixels to yaw on 800 renders, scored on 200 more.
TEST(Render, YawIsLinearlyDecodable) {
    const int n = 1000, train_n = 800, dim = 32 * 32 * 3;
    Eigen::MatrixXd X(n, dim);
    Eigen::VectorXd y(n);
    Rng rng(12);
    for (int i = 0; i < n; ++i) {
        const FaceFactors f = with_attributes(sample_identity(12, i), sample_attributes(rng));
        const Image img = render(f);
        for (int k = 0; k < dim; ++k) X(i, k) = img.pixels[k];
        y(i) = f.pose.yaw;
    }
    const Eigen::RowVectorXd mu = X.topRows(train_n).colwise().mean();
    X.rowwise() -= mu;
    const double ymu = y.head(train_n).mean();
    const Eigen::MatrixXd Xt = X.topRows(train_n);
    Eigen::MatrixXd K = Xt * Xt.transpose();
    K.diagonal().array() += 1.0;
    const Eigen::VectorXd alpha = K.ldlt().solve((y.head(train_n).array() - ymu).matrix());
    const Eigen::VectorXd w = Xt.transpose() * alpha;
    const Eigen::VectorXd pred = (X.bottomRows(n - train_n) * w).array() + ymu;
    const Eigen::VectorXd truth = y.tail(n - train_n);
    const double ss_res = (pred - truth).squaredNorm();
    const double ss_tot = (truth.array() - truth.mean()).square().sum();
    EXPECT_GE(1.0 - ss_res / ss_tot, 0.8);
}

TEST(MakeTriplet, SharesAttributesAndIdentity) {
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        const Triplet t = make_triplet(3, 10, 11, rng);
        EXPECT_EQ(t.driving_factors.pose, t.gt_factors.pose);
        EXPECT_EQ(t.driving_factors.gaze, t.gt_factors.gaze);
        EXPECT_EQ(t.driving_factors.expression, t.gt_factors.expression);
        EXPECT_EQ(t.driving_factors.background_seed, t.gt_factors.background_seed);
        EXPECT_EQ(t.source_factors.identity_vec, t.gt_factors.identity_vec);
        EXPECT_EQ(t.source_factors.identity_id, t.gt_factors.identity_id);
        EXPECT_NE(t.driving_factors.identity_id, t.gt_factors.identity_id);
        EXPECT_EQ(t.ground_truth, render(t.gt_factors));
        EXPECT_EQ(t.driving, render(t.driving_factors));
    }
}

TEST(MakeTriplet, Deterministic) {
    Rng a(8), b(8);
    const Triplet x = make_triplet(8, 1, 2, a), y = make_triplet(8, 1, 2, b);
    EXPECT_EQ(x.source, y.source);
    EXPECT_EQ(x.driving, y.driving);
    EXPECT_EQ(x.ground_truth, y.ground_truth);
}

TEST(MakeTriplet, RejectsIdenticalIdentities) {
    Rng rng(1);
    EXPECT_THROW(make_triplet(1, 4, 4, rng), std::invalid_argument);
}

TEST(MakeDataset, TwoIdentitiesOneEach) {
    const fs::path dir = temp_dir("ds2");
    const DatasetManifest m = make_dataset(dir, 2, 1, 7);
    EXPECT_EQ(m.triplets.size(), 2u);
    const DatasetManifest back = load_manifest(dir);
    EXPECT_EQ(back.triplets.size(), 2u);
    for (const auto& t : back.triplets) EXPECT_EQ(read_image_bin(dir / t.source_path), render(t.source));
    fs::remove_all(dir);
}

TEST(MakeDataset, HeldOutIdentitiesNeverTrain) {
    const DatasetManifest m = plan_dataset(50, 10, 1);
    ASSERT_EQ(m.triplets.size(), 500u);
    std::set<std::uint64_t> held(m.held_out_identities.begin(), m.held_out_identities.end());
    EXPECT_FALSE(held.empty());
    std::size_t held_count = 0;
    for (const auto& t : m.triplets) {
        if (t.split == Split::train) {
            EXPECT_EQ(held.count(t.source.identity_id), 0u);
            EXPECT_EQ(held.count(t.driving.identity_id), 0u);
        } else {
            ++held_count;
            EXPECT_EQ(held.count(t.source.identity_id), 1u);
        }
    }
    EXPECT_GT(held_count, 0u);
}

TEST(MakeDataset, GoldenManifest) {
    const fs::path dir = temp_dir("ds50");
    const DatasetManifest m = make_dataset(dir, 50, 10, 1);
    EXPECT_EQ(m.triplets.size(), 500u);
    EXPECT_EQ(file_sha256(dir / "manifest.json"), kGoldenManifestSha);
    EXPECT_EQ(manifest_to_json(load_manifest(dir)), manifest_to_json(m));
    fs::remove_all(dir);
}

TEST(MakeDataset, MissingDirectorySurfacesPath) {
    try {
        load_manifest("/nonexistent/anonydiff/data");
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/anonydiff/data"), std::string::npos);
    }
}
