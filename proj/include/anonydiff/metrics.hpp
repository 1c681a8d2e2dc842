#pragma once

// Evaluation kernels: orientation and coefficient distances, re-identification,
// a face-validity proxy, and a small attribute regressor trained on renders.

#include "anonydiff/embedding.hpp"
#include "anonydiff/image.hpp"
#include "anonydiff/nn.hpp"
#include "anonydiff/synthetic_faces.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

namespace anonydiff {

struct Quaternion {
    double w = 1, x = 0, y = 0, z = 0;
    double norm() const;
    Quaternion operator-() const { return {-w, -x, -y, -z}; }
};

/// Hamilton product.
Quaternion operator*(const Quaternion& a, const Quaternion& b);

/// Yaw about z, then pitch about the new y, then roll about the new x:
/// R = Rz(yaw) Ry(pitch) Rx(roll).
Quaternion euler_to_quaternion(double yaw, double pitch, double roll);
/// Row-major 3x3 rotation matrix.
std::array<double, 9> rotation_matrix(const Quaternion& q);

/// 2 acos(min(1, |<q1, q2>|)). Throws std::invalid_argument unless both are unit within 1e-3.
double quaternion_distance(const Quaternion& q1, const Quaternion& q2);

using Vec3 = std::array<double, 3>;

/// Unit viewing direction for gaze angles (yaw right, pitch up, +z out of the face).
Vec3 gaze_direction(double yaw, double pitch);
/// Angle between two directions. Throws std::invalid_argument on a zero vector.
double gaze_distance(const Vec3& g1, const Vec3& g2);

/// Euclidean distance. Throws ShapeError on a dimension mismatch.
double coefficient_distance(std::span<const double> c1, std::span<const double> c2);

struct AttributeEstimate {
    Pose euler;
    Quaternion pose;
    Gaze gaze_angles;
    Vec3 gaze{};
    /// Identity geometry parameters.
    std::vector<double> shape;
    std::vector<double> expression;
};

/// Oracle mode: attributes read straight from the generating factors.
AttributeEstimate attributes_from_factors(const FaceFactors& f);

struct UntrainedProbe : std::logic_error {
    using std::logic_error::logic_error;
};

struct ProbeConfig {
    int input_size = 32;
    std::vector<int> widths{16, 32, 32};
    int convs_per_stage = 2;
    int hidden = 128;
    int steps = 4000;
    int batch = 64;
    double lr = 2e-3;
    double weight_decay = 1e-4;
    int train_images = 10000;
    int held_out_images = 500;
    /// Seed of the render pool and of the weights.
    std::uint64_t seed = 37;

    bool operator==(const ProbeConfig&) const = default;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

/// Errors measured on the probe's held-out renders.
struct ProbeValidation {
    double pose_median = 0;  // radians (quaternion distance)
    double gaze_median = 0;  // radians
    double shape_median = 0;
    double expression_median = 0;
    double pose_p90 = 0;
};

void to_json(nlohmann::json& j, const ProbeValidation& v);
void from_json(const nlohmann::json& j, ProbeValidation& v);

/// CNN regressor from an image to pose (3), gaze (2), expression (4) and
/// identity vector (8), all rescaled to roughly unit range.
class AttributeProbe {
public:
    using Var = Tape<float>::Var;
    static constexpr int kOutputs = 3 + 2 + kExpressionDim + kIdentityDim;

    explicit AttributeProbe(const ProbeConfig& cfg);
    AttributeProbe(const AttributeProbe&) = delete;
    AttributeProbe& operator=(const AttributeProbe&) = delete;

    const ProbeConfig& config() const { return cfg_; }
    ParameterStore<float>& store() { return store_; }
    const ParameterStore<float>& store() const { return store_; }

    Var forward(Tape<float>& tp, Var images) const;

    bool trained = false;
    ProbeValidation validation;

private:
    ProbeConfig cfg_;
    ParameterStore<float> store_;
    std::vector<Conv<float>> convs_;
    Conv<float> fc1_, fc2_;
};

/// Regression targets for one face, in the probe's output order.
std::array<float, AttributeProbe::kOutputs> probe_targets(const FaceFactors& f);

std::unique_ptr<AttributeProbe> train_attribute_probe(const ProbeConfig& cfg);

/// Throws UntrainedProbe unless the probe was trained (or loaded from a trained archive).
std::vector<AttributeEstimate> estimate_attributes(const AttributeProbe& probe, const Tensor<float>& images);
AttributeEstimate estimate_attributes(const AttributeProbe& probe, const Image& image);
std::vector<AttributeEstimate> estimate_attributes(const AttributeProbe& probe, std::span<const Image> images);

void save_probe(const AttributeProbe& p, const std::filesystem::path& dir);
std::unique_ptr<AttributeProbe> load_probe(const std::filesystem::path& dir);

struct ReidResult {
    double rate = 0;
    std::size_t hits = 0;
    std::size_t count = 0;
    /// Generated items whose best similarity was shared by several originals.
    std::size_t ties = 0;
    std::vector<std::size_t> nearest;
};

/// Nearest original by cosine similarity; ties go to the lowest index.
ReidResult reid(const std::vector<ImageEmbedding>& generated, const std::vector<ImageEmbedding>& originals,
                std::span<const std::size_t> origin_of);
double reid_rate(const std::vector<ImageEmbedding>& generated, const std::vector<ImageEmbedding>& originals,
                 std::span<const std::size_t> origin_of);

struct ValidityScore {
    /// Best Pearson correlation between the foreground map and an ellipse template.
    double correlation = 0;
    /// Mean foreground strength inside minus outside that ellipse.
    double contrast = 0;
    bool valid = false;
};

inline constexpr double kValidityCorrelation = 0.45;
inline constexpr double kValidityContrast = 0.25;

ValidityScore face_validity_score(const Image& image);
bool face_validity(const Image& image);

struct EvalRecord {
    std::size_t index = 0;
    std::size_t origin = 0;
    bool reid_hit = false;
    double id_dist = 0;
    double shape_dist = 0;
    double pose_dist = 0;
    double gaze_dist = 0;
    double expr_dist = 0;
    bool face_valid = false;
};

struct EvalMeans {
    double reid_rate = 0;
    double id_dist = 0;
    double shape_dist = 0;
    double pose_dist = 0;
    double gaze_dist = 0;
    double expr_dist = 0;
    double validity_rate = 0;
};

void to_json(nlohmann::json& j, const EvalMeans& m);

struct EvalReport {
    std::vector<EvalRecord> records;
    EvalMeans means;
    std::size_t reid_ties = 0;
    nlohmann::json config;
};

EvalMeans mean_of(std::span<const EvalRecord> records);

/// Scores generated[i] against originals[origin_of[i]]; re-identification
/// searches all originals.
EvalReport evaluate(const Recognizer& evaluator, const AttributeProbe& probe, std::span<const Image> originals,
                    std::span<const Image> generated, std::span<const std::size_t> origin_of,
                    const nlohmann::json& config = nlohmann::json::object());

/// One CSV row per record plus `summary.json` {means, spearman_rho (null), reid_ties, config, config_hash}.
void write_eval_report(const EvalReport& r, const std::filesystem::path& dir);

std::string config_hash(const nlohmann::json& config);

}  // namespace anonydiff
