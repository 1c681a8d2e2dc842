#include "anonydiff/bundle.hpp"

#include "anonydiff/training.hpp"

namespace anonydiff {

ModelBundle load_bundle(const BundlePaths& paths) {
    ModelBundle b;
    if (!paths.checkpoint.empty()) b.nets = load_networks<float>(paths.checkpoint);
    if (!paths.encoder.empty()) b.encoder = load_recognizer(paths.encoder);
    if (!paths.evaluator.empty()) b.evaluator = load_recognizer(paths.evaluator);
    if (!paths.probe.empty()) b.probe = load_probe(paths.probe);
    return b;
}

}  // namespace anonydiff
