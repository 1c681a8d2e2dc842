#pragma once

// Strict run configuration shared by every CLI command.

#include "anonydiff/anonymize.hpp"
#include "anonydiff/condnet.hpp"
#include "anonydiff/diffusion.hpp"
#include "anonydiff/embedding.hpp"
#include "anonydiff/metrics.hpp"
#include "anonydiff/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace anonydiff {

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DataSection {
    int n_identities = 50;
    int triplets_per_identity = 10;
    int image_size = 32;
    std::uint64_t seed = 1;
    bool operator==(const DataSection&) const = default;
};

/// Identity pool a recognizer is trained on.
struct PoolSection {
    std::uint64_t seed = 1;
    std::uint64_t first_id = 0;
    int identities = 300;
    int per_identity = 8;
    bool operator==(const PoolSection&) const = default;
};

struct ModelSection {
    DenoiserConfig denoiser;
    std::uint64_t init_seed = 5;
    RecognizerConfig encoder = conditioning_encoder_preset();
    PoolSection encoder_pool{1, 200000, 300, 8};
    RecognizerConfig evaluator = evaluator_preset();
    PoolSection evaluator_pool{1, 100000, 300, 8};
    ProbeConfig probe;
    bool operator==(const ModelSection&) const = default;
};

struct EvalSection {
    double d = kDefaultDegree;
    std::vector<double> d_values{0.3, 0.6, 0.9, 1.2};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    /// Held-out identities used by sweep and ablate (0: all of them).
    int identities = 20;
    bool operator==(const EvalSection&) const = default;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs";
    DataSection data;
    ModelSection model;
    TrainConfig train;
    SamplerConfig sampler;
    EvalSection eval;
};

/// Complete document: every field present.
nlohmann::json to_json(const RunConfig& c);

/// Parses a config document. Missing fields take defaults; unknown keys and
/// type mismatches throw ConfigError naming the field (dotted path); syntax
/// errors name the line and column.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace anonydiff
