#include "anonydiff/training.hpp"

#include <nlohmann/json.hpp>

namespace anonydiff {

void validate(const TrainConfig& c) {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (c.steps <= 0) fail("steps must be positive");
    if (c.batch <= 0 || c.accumulation <= 0) fail("batch and accumulation must be positive");
    if (!(c.lr > 0)) fail("lr must be positive");
    if (!(c.weight_decay >= 0)) fail("weight_decay must be non-negative");
    if (!(c.uncond_prob >= 0 && c.uncond_prob <= 1)) fail("uncond_prob must be in [0, 1]");
    if (!(c.phase1_fraction >= 0 && c.phase1_fraction <= 1)) fail("phase1_fraction must be in [0, 1]");
    if (c.checkpoint_every < 0) fail("checkpoint_every must be non-negative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"steps", c.steps},
                       {"batch", c.batch},
                       {"accumulation", c.accumulation},
                       {"lr", c.lr},
                       {"weight_decay", c.weight_decay},
                       {"uncond_prob", c.uncond_prob},
                       {"phase1_fraction", c.phase1_fraction},
                       {"seed", c.seed},
                       {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    d.steps = j.value("steps", d.steps);
    d.batch = j.value("batch", d.batch);
    d.accumulation = j.value("accumulation", d.accumulation);
    d.lr = j.value("lr", d.lr);
    d.weight_decay = j.value("weight_decay", d.weight_decay);
    d.uncond_prob = j.value("uncond_prob", d.uncond_prob);
    d.phase1_fraction = j.value("phase1_fraction", d.phase1_fraction);
    d.seed = j.value("seed", d.seed);
    d.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c = d;
}

nlohmann::json train_config_json(const TrainConfig& c) { return c; }
nlohmann::json denoiser_config_json(const DenoiserConfig& c) { return c; }
DenoiserConfig denoiser_config_from(const nlohmann::json& j) { return j.get<DenoiserConfig>(); }

TrainConfig full_scale_train_preset() {
    TrainConfig c;
    c.steps = 435000;
    c.batch = 1;
    c.accumulation = 8;
    c.lr = 1e-5;
    return c;
}

TrainConfig desk_train_preset() { return TrainConfig{}; }

std::string to_string(CondMode m) { return m == CondMode::conditional ? "conditional" : "unconditional"; }

CondMode conditioning_dropout(Rng& rng, double uncond_prob) {
    if (!(uncond_prob >= 0 && uncond_prob <= 1)) throw std::invalid_argument("uncond_prob must be in [0, 1]");
    return rng.bernoulli(uncond_prob) ? CondMode::unconditional : CondMode::conditional;
}

CurriculumExample curriculum_batch(std::size_t dataset_size, int step, const TrainConfig& config, Rng& rng) {
    if (dataset_size == 0) throw EmptyDataset("curriculum_batch: dataset is empty");
    CurriculumExample e;
    e.entry = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(dataset_size)));
    e.phase = static_cast<double>(step) < config.phase1_fraction * config.steps ? 1 : 2;
    e.swapped = e.phase == 1 && rng.bernoulli(0.5);
    if (e.swapped) {
        e.slot_source = TrainingSet::alt_source;
        e.slot_driving = TrainingSet::ground_truth;
        e.slot_target = TrainingSet::driving;
    }
    e.mode = conditioning_dropout(rng, config.uncond_prob);
    return e;
}

std::string StepRecord::mode() const {
    if (unconditional == 0) return "conditional";
    if (unconditional == examples) return "unconditional";
    return "mixed";
}

TrainingSet build_training_set(const DatasetManifest& manifest, const Recognizer& encoder,
                               const std::optional<std::filesystem::path>& dataset_dir, Split split) {
    TrainingSet set;
    std::vector<Image> imgs[4];
    for (const auto& r : manifest.triplets) {
        if (r.split != split) continue;
        set.triplet_index.push_back(r.index);
        if (dataset_dir) {
            imgs[TrainingSet::source].push_back(read_image_bin(*dataset_dir / r.source_path));
            imgs[TrainingSet::driving].push_back(read_image_bin(*dataset_dir / r.driving_path));
            imgs[TrainingSet::ground_truth].push_back(read_image_bin(*dataset_dir / r.ground_truth_path));
        } else {
            imgs[TrainingSet::source].push_back(render(r.source, manifest.image_size));
            imgs[TrainingSet::driving].push_back(render(r.driving, manifest.image_size));
            imgs[TrainingSet::ground_truth].push_back(render(r.ground_truth, manifest.image_size));
        }
        FaceFactors alt = r.driving;
        alt.pose = r.source.pose;
        alt.gaze = r.source.gaze;
        alt.expression = r.source.expression;
        alt.background_seed = r.source.background_seed;
        imgs[TrainingSet::alt_source].push_back(render(alt, manifest.image_size));
    }
    if (set.triplet_index.empty()) return set;
    for (int s = 0; s < 4; ++s) {
        set.images[s] = images_to_tensor<float>(imgs[s]);
        set.embeddings[s] = embed_batch(encoder, set.images[s]);
        set.tokens[s] = spatial_features(encoder, set.images[s]);
    }
    return set;
}

}  // namespace anonydiff
