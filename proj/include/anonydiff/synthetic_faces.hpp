#pragma once

#include "anonydiff/image.hpp"
#include "anonydiff/rng.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace anonydiff {

struct InvalidFactors : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline constexpr int kIdentityDim = 8;
inline constexpr int kExpressionDim = 4;
inline constexpr double kPoseLimit = 0.5;
inline constexpr double kGazeLimit = 0.4;

struct Pose {
    double yaw = 0, pitch = 0, roll = 0;
    bool operator==(const Pose&) const = default;
};

struct Gaze {
    double yaw = 0, pitch = 0;
    bool operator==(const Gaze&) const = default;
};

/// Ground-truth description of one synthetic face.
struct FaceFactors {
    std::uint64_t identity_id = 0;
    std::array<double, kIdentityDim> identity_vec{};
    Pose pose;
    Gaze gaze;
    std::array<double, kExpressionDim> expression{};
    std::uint64_t background_seed = 0;

    bool operator==(const FaceFactors&) const = default;
};

/// Non-identity attributes: everything a driving image contributes.
struct Attributes {
    Pose pose;
    Gaze gaze;
    std::array<double, kExpressionDim> expression{};
    std::uint64_t background_seed = 0;
};

/// Throws InvalidFactors if any range invariant is violated.
void validate(const FaceFactors& f);

/// Fresh unit identity vector with neutral attributes. Deterministic in (seed, identity_id).
FaceFactors sample_identity(std::uint64_t seed, std::uint64_t identity_id);

/// Uniform draw of pose/gaze/expression within their ranges plus a background seed.
Attributes sample_attributes(Rng& rng);

FaceFactors with_attributes(FaceFactors identity, const Attributes& a);

/// Rasterizes factors into an image in [-1, 1]. Identical factors give identical pixels.
Image render(const FaceFactors& f, int size = 32);

/// Geometry/colour parameters derived affinely from the identity vector; the
/// "shape coefficients" of a face.
std::array<double, kIdentityDim> identity_geometry(const std::array<double, kIdentityDim>& identity_vec);

struct Triplet {
    Image source, driving, ground_truth;
    FaceFactors source_factors, driving_factors, gt_factors;
};

/// Source = A under attributes 1, ground truth = A under attributes 2, driving =
/// C under attributes 2 (the ground truth with its identity substituted).
Triplet make_triplet(std::uint64_t seed, std::uint64_t id_a, std::uint64_t id_c, Rng& rng, int size = 32);

enum class Split { train, held_out };
std::string to_string(Split s);

struct TripletRecord {
    std::size_t index = 0;
    Split split = Split::train;
    FaceFactors source, driving, ground_truth;
    std::string source_path, driving_path, ground_truth_path;
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    int n_identities = 0;
    int triplets_per_identity = 0;
    int image_size = 32;
    std::vector<std::uint64_t> train_identities;
    std::vector<std::uint64_t> held_out_identities;
    std::vector<TripletRecord> triplets;
};

/// Identity partition: the last n/5 identities are held out when that is at least two.
void partition_identities(int n_identities, std::vector<std::uint64_t>& train, std::vector<std::uint64_t>& held_out);

/// Builds all triplet records in memory (images are re-rendered from factors on demand).
DatasetManifest plan_dataset(int n_identities, int triplets_per_identity, std::uint64_t seed, int size = 32);

/// Writes images and manifest.json (last) under `dir`.
DatasetManifest make_dataset(const std::filesystem::path& dir, int n_identities, int triplets_per_identity,
                             std::uint64_t seed, int size = 32);

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);
DatasetManifest load_manifest(const std::filesystem::path& dir);

}  // namespace anonydiff
