#pragma once

// Everything needed to anonymize and evaluate: trained networks, the frozen
// conditioning encoder, the evaluator recognizer and the attribute probe.

#include "anonydiff/condnet.hpp"
#include "anonydiff/diffusion.hpp"
#include "anonydiff/embedding.hpp"
#include "anonydiff/metrics.hpp"

#include <filesystem>
#include <memory>

namespace anonydiff {

struct ModelBundle {
    std::unique_ptr<Networks<float>> nets;
    std::unique_ptr<Recognizer> encoder;
    std::unique_ptr<Recognizer> evaluator;
    std::unique_ptr<AttributeProbe> probe;
    NoiseSchedule schedule = make_schedule();
};

struct BundlePaths {
    std::filesystem::path checkpoint;
    std::filesystem::path encoder;
    std::filesystem::path evaluator;  // optional for generation-only use
    std::filesystem::path probe;      // optional for generation-only use
};

/// Loads every non-empty path. Throws ArchiveError on hash mismatches.
ModelBundle load_bundle(const BundlePaths& paths);

}  // namespace anonydiff
