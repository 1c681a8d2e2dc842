#pragma once

// Small convolutional identity recognizer. Its pooled, L2-normalized
// penultimate layer is the image embedding; an intermediate 8x8 feature map is
// the token matrix fed to the ReferenceNets.

#include "anonydiff/image.hpp"
#include "anonydiff/nn.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace anonydiff {

struct InsufficientData : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct RecognizerConfig {
    int input_size = 32;
    int channels = 3;
    /// One stage per entry; every stage but the last ends with a 2x average pool.
    std::vector<int> widths{16, 16, 32};
    int convs_per_stage = 1;
    /// Pooled output of this stage is the token map (stage 1 -> 8x8 for 32x32 input).
    int token_stage = 1;
    int embed_dim = 64;
    double classifier_scale = 10.0;
    int steps = 1500;
    int batch = 32;
    double lr = 3e-3;
    double weight_decay = 1e-4;
    double held_out_fraction = 0.2;
    std::uint64_t seed = 0;

    bool operator==(const RecognizerConfig&) const = default;
};

void validate(const RecognizerConfig& c);
void to_json(nlohmann::json& j, const RecognizerConfig& c);
void from_json(const nlohmann::json& j, RecognizerConfig& c);

/// The conditioning encoder and the evaluator differ in architecture and seed.
RecognizerConfig conditioning_encoder_preset();
RecognizerConfig evaluator_preset();

struct LabeledImages {
    std::vector<Image> images;
    std::vector<std::uint64_t> identities;
};

/// Renders `per_id` random-attribute images for identities first_id .. first_id+n_ids-1.
LabeledImages render_identity_pool(std::uint64_t seed, std::uint64_t first_id, int n_ids, int per_id, int size = 32);

class Recognizer {
public:
    using Var = Tape<float>::Var;

    Recognizer(const RecognizerConfig& cfg, int class_count);
    Recognizer(const Recognizer&) = delete;
    Recognizer& operator=(const Recognizer&) = delete;

    const RecognizerConfig& config() const { return cfg_; }
    int class_count() const { return class_count_; }
    int embed_dim() const { return cfg_.embed_dim; }
    int token_channels() const { return cfg_.widths.at(cfg_.token_stage); }
    int token_size() const { return cfg_.input_size >> (cfg_.token_stage + 1); }
    double accuracy = 0.0;

    ParameterStore<float>& store() { return store_; }
    const ParameterStore<float>& store() const { return store_; }
    std::uint64_t parameter_hash() const { return store_.hash(); }

    /// Embeddings [D, n, 1, 1]; optionally also the token map.
    Var forward(Tape<float>& tp, Var images, Var* tokens = nullptr) const;
    Var logits(Tape<float>& tp, Var embeddings) const;

private:
    RecognizerConfig cfg_;
    int class_count_;
    ParameterStore<float> store_;
    std::vector<Conv<float>> convs_;
    Conv<float> head_, classifier_;
};

/// Trains a fresh recognizer; reports held-out accuracy in `accuracy`.
std::unique_ptr<Recognizer> train_recognizer(const LabeledImages& data, const RecognizerConfig& cfg);

using ImageEmbedding = std::vector<float>;

/// Batched embeddings [D, n, 1, 1] for images [C, n, H, W].
Tensor<float> embed_batch(const Recognizer& r, const Tensor<float>& images);
ImageEmbedding embed(const Recognizer& r, const Image& image);
/// Token map [token_channels, n, s, s] (T = s*s tokens per image).
Tensor<float> spatial_features(const Recognizer& r, const Tensor<float>& images);
Tensor<float> spatial_features(const Recognizer& r, const Image& image);

/// 1 - <z1, z2> for unit vectors; rejects inputs whose norm is off by more than 1e-3.
double identity_distance(std::span<const float> z1, std::span<const float> z2);
double identity_distance(std::span<const double> z1, std::span<const double> z2);

/// Archive in `dir` plus the sidecar `dir/recognizer.json`.
void save_recognizer(const Recognizer& r, const std::filesystem::path& dir);
std::unique_ptr<Recognizer> load_recognizer(const std::filesystem::path& dir);

}  // namespace anonydiff
