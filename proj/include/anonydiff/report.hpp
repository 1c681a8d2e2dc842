#pragma once

// Degree sweeps and the ablation grid, run on a loaded bundle.

#include "anonydiff/anonymize.hpp"
#include "anonydiff/bundle.hpp"
#include "anonydiff/metrics.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace anonydiff {

/// Spearman rank correlation with average ranks for ties; nullopt when fewer
/// than two points or when either side is constant.
std::optional<double> spearman_rho(std::span<const double> x, std::span<const double> y);

struct SweepRow {
    double d = 0;
    std::size_t identity = 0;
    std::uint64_t seed = 0;
    double id_dist = 0;
    double shape_dist = 0;
    double pose_dist = 0;
    double gaze_dist = 0;
    double expr_dist = 0;
    bool face_valid = false;
};

struct SweepLevel {
    double d = 0;
    std::size_t count = 0;
    /// Re-identification searches the identity images of the sweep.
    EvalMeans means;
};

struct SweepReport {
    std::vector<SweepRow> rows;
    std::vector<SweepLevel> levels;
    /// Mean identity distance against d.
    std::optional<double> spearman_rho;
    nlohmann::json config;
};

/// One anonymization per (d, identity image, seed); rows are ordered d-major,
/// then identity, then seed. Needs nets, encoder, evaluator and probe.
SweepReport sweep_report(const ModelBundle& bundle, std::span<const double> d_values,
                         const std::vector<Image>& identities, std::span<const std::uint64_t> seeds,
                         const SamplerConfig& sampler, Ablation ablation = Ablation::full,
                         const nlohmann::json& config = nlohmann::json::object());

/// `sweep.csv` and `sweep_summary.json` {levels, spearman_rho, config, config_hash}.
void write_sweep_report(const SweepReport& r, const std::filesystem::path& dir);

struct AblationRow {
    Ablation ablation = Ablation::full;
    EvalReport report;
};

struct AblationGrid {
    double d = kDefaultDegree;
    std::vector<AblationRow> rows;
    nlohmann::json config;

    const AblationRow& row(Ablation a) const;
    /// Full method has the lowest re-ID rate and the largest shape distance
    /// (both inclusive of ties).
    bool full_is_best() const;
};

/// Anonymizes every image once per seed under each ablation.
AblationGrid ablation_grid(const ModelBundle& bundle, const std::vector<Image>& images,
                           std::span<const std::uint64_t> seeds, double d, const SamplerConfig& sampler,
                           std::span<const Ablation> ablations = kAllAblations,
                           const nlohmann::json& config = nlohmann::json::object());

/// `ablation.csv` (one row per ablation) and `ablation_summary.json`.
void write_ablation_grid(const AblationGrid& g, const std::filesystem::path& dir);

}  // namespace anonydiff
