#pragma once

// Single-loss training: MSE between predicted and true noise, nothing else.

#include "anonydiff/archive.hpp"
#include "anonydiff/condnet.hpp"
#include "anonydiff/diffusion.hpp"
#include "anonydiff/embedding.hpp"
#include "anonydiff/optim.hpp"
#include "anonydiff/synthetic_faces.hpp"

#include <nlohmann/json_fwd.hpp>

#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace anonydiff {

struct DivergedTraining : std::runtime_error {
    DivergedTraining(const std::string& what, std::string checkpoint)
        : std::runtime_error(what), last_good_checkpoint(std::move(checkpoint)) {}
    std::string last_good_checkpoint;
};

struct EmptyDataset : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
    int steps = 8000;
    int batch = 8;
    int accumulation = 1;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double uncond_prob = 0.10;
    double phase1_fraction = 0.5;
    std::uint64_t seed = 0;
    /// Save a checkpoint every this many steps (0: only at the end).
    int checkpoint_every = 0;

    bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Full-scale schedule (batch 1, 8 accumulation steps, fixed lr 1e-5, 435k
/// steps). Documented for reference; far beyond a desk CPU.
TrainConfig full_scale_train_preset();
/// The schedule used for the end-to-end checks on a single CPU core.
TrainConfig desk_train_preset();

/// MSE over all elements.
template <class T>
double reconstruction_loss(const Tensor<T>& eps_hat, const Tensor<T>& eps) {
    require_same(eps_hat.shape, eps.shape, "reconstruction_loss");
    return static_cast<double>((eps_hat.mat() - eps.mat()).squaredNorm()) / static_cast<double>(eps.size());
}

/// Tape form used by the trainer; the only loss op the training graph contains.
template <class T>
typename Tape<T>::Var reconstruction_loss(Tape<T>& tp, typename Tape<T>::Var eps_hat, typename Tape<T>::Var eps) {
    return tp.mse(eps_hat, eps);
}

enum class CondMode { conditional, unconditional };
std::string to_string(CondMode m);

/// Bernoulli(uncond_prob) draw of the conditioning mode.
CondMode conditioning_dropout(Rng& rng, double uncond_prob);

/// Names of every parameter the optimizer may update.
template <class T>
std::vector<std::string> trainable_parameters(const Networks<T>& nets) {
    std::vector<std::string> out;
    for (const auto& p : nets.store.all())
        if (p.trainable) out.push_back(p.name);
    return out;
}

/// Hash of every parameter the optimizer must never touch.
template <class T>
std::uint64_t frozen_parameter_hash(const Networks<T>& nets) {
    return nets.store.hash([](const Parameter<T>& p) { return !p.trainable; });
}

/// Precomputed training material. For every triplet: source, driving and
/// ground-truth images, plus an image of the driving identity under the
/// source's attributes (the source of the role-swapped variant). Encoder
/// embeddings and token maps of all four are computed once, since the encoder
/// is frozen.
struct TrainingSet {
    enum Slot { source = 0, driving = 1, ground_truth = 2, alt_source = 3 };
    std::size_t size() const { return triplet_index.size(); }
    std::vector<std::size_t> triplet_index;  // manifest index of each entry
    Tensor<float> images[4];                  // [3, N, H, W]
    Tensor<float> embeddings[4];              // [D, N, 1, 1]
    Tensor<float> tokens[4];                  // [C_tok, N, s, s]
};

/// Builds the training set from the train split. Images are read from
/// `dataset_dir` when given, otherwise re-rendered from the recorded factors.
TrainingSet build_training_set(const DatasetManifest& manifest, const Recognizer& encoder,
                               const std::optional<std::filesystem::path>& dataset_dir = std::nullopt,
                               Split split = Split::train);

/// One training example: which triplet, orientation, conditioning mode.
struct CurriculumExample {
    std::size_t entry = 0;
    bool swapped = false;
    CondMode mode = CondMode::conditional;
    int phase = 2;
    int slot_source = TrainingSet::source;
    int slot_driving = TrainingSet::driving;
    int slot_target = TrainingSet::ground_truth;
};

/// Phase 1 covers steps [0, phase1_fraction * steps); there, with probability
/// 1/2, the roles are swapped: the ground truth plays the driving image, the
/// driving image becomes the target and the source shows the driving identity.
CurriculumExample curriculum_batch(std::size_t dataset_size, int step, const TrainConfig& config, Rng& rng);

/// Per-example random stream: a pure function of (seed, step, example index), so
/// any split of a step into batch x accumulation draws the same examples.
inline Rng example_rng(std::uint64_t seed, int step, int example) {
    return Rng(seed, {0x7a, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(example)});
}

struct StepRecord {
    int step = 0;
    double loss = 0;
    int unconditional = 0;
    int examples = 0;
    int phase = 2;
    std::string mode() const;
};

struct TrainHooks {
    /// Loss log CSV (`step,loss,mode,phase`); appended per step when set.
    std::optional<std::filesystem::path> loss_log;
    /// Checkpoints go to `<checkpoint_dir>/step_<n>` when set.
    std::optional<std::filesystem::path> checkpoint_dir;
    std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
    std::vector<StepRecord> log;
    std::string last_checkpoint;
    /// Loss ops seen on every micro-batch tape (all must equal 1).
    std::vector<std::size_t> loss_terms_per_tape;
};

template <class T>
void save_checkpoint(const Networks<T>& nets, const AdamW<T>& opt, int next_step, const TrainConfig& cfg,
                     const std::filesystem::path& dir);

/// Restores networks and optimizer state; returns the next step to run.
template <class T>
int load_checkpoint(Networks<T>& nets, AdamW<T>& opt, const std::filesystem::path& dir);

/// Gathers one micro-batch and returns its loss on the tape `tp`. Inputs the
/// tape refers to are parked in `keep_alive`, which must outlive the tape.
template <class T>
typename Tape<T>::Var training_loss(Tape<T>& tp, Networks<T>& nets, const TrainingSet& data,
                                    const NoiseSchedule& schedule, const std::vector<CurriculumExample>& examples,
                                    const std::vector<Rng*>& rngs, std::deque<Tensor<T>>& keep_alive) {
    const int b = static_cast<int>(examples.size());
    auto gather = [&](const Tensor<float>* slots, auto slot_of) {
        Shape s = slots[0].shape;
        s.n = b;
        Tensor<T> out(s);
        const std::size_t sp = s.spatial();
        for (int ch = 0; ch < s.c; ++ch)
            for (int i = 0; i < b; ++i) {
                const Tensor<float>& src = slots[slot_of(examples[i])];
                const float* p = &src.data[ch * src.shape.cols() + examples[i].entry * sp];
                T* q = &out.data[ch * s.cols() + i * sp];
                for (std::size_t k = 0; k < sp; ++k) q[k] = static_cast<T>(p[k]);
            }
        return out;
    };
    auto src_of = [](const CurriculumExample& e) { return e.slot_source; };
    auto drv_of = [](const CurriculumExample& e) { return e.slot_driving; };
    auto tgt_of = [](const CurriculumExample& e) { return e.slot_target; };

    Tensor<T> x0 = gather(data.images, tgt_of);
    Tensor<T> eps(x0.shape);
    std::vector<int> t(static_cast<std::size_t>(b));
    std::vector<char> uncond(static_cast<std::size_t>(b));
    const std::size_t sp = x0.shape.spatial();
    for (int i = 0; i < b; ++i) {
        Rng& r = *rngs[i];
        t[i] = static_cast<int>(r.integer(0, schedule.steps));
        for (int ch = 0; ch < x0.shape.c; ++ch)
            for (std::size_t k = 0; k < sp; ++k) eps.data[ch * x0.shape.cols() + i * sp + k] = static_cast<T>(r.normal());
        uncond[i] = examples[i].mode == CondMode::unconditional;
    }
    Tensor<T> tok_src = gather(data.tokens, src_of);
    for (int i = 0; i < b; ++i)
        if (uncond[i])
            for (int ch = 0; ch < tok_src.shape.c; ++ch) {
                const std::size_t tsp = tok_src.shape.spatial();
                std::fill_n(tok_src.data.begin() + ch * tok_src.shape.cols() + i * tsp, tsp, T(0));
            }

    keep_alive.push_back(forward_diffuse(x0, t, eps, schedule));
    auto x_t = tp.constant_ref(keep_alive.back());
    keep_alive.push_back(std::move(eps));
    auto eps_var = tp.constant_ref(keep_alive.back());
    keep_alive.push_back(std::move(tok_src));
    auto tok_src_var = tp.constant_ref(keep_alive.back());
    keep_alive.push_back(gather(data.tokens, drv_of));
    auto tok_drv_var = tp.constant_ref(keep_alive.back());
    keep_alive.push_back(gather(data.embeddings, src_of));
    auto z_src_raw = tp.constant_ref(keep_alive.back());
    keep_alive.push_back(gather(data.embeddings, drv_of));
    auto z_drv = tp.constant_ref(keep_alive.back());

    auto z_src = tp.select_samples(z_src_raw, tp.param(*nets.null_embedding), uncond);
    auto s_src = nets.refsrc.states(tp, tok_src_var, z_src);
    auto s_drv = nets.refdrv.states(tp, tok_drv_var, z_drv);
    std::vector<ReferenceTokens<T>> refs;
    for (std::size_t l = 0; l < s_src.size(); ++l) refs.push_back({s_src[l], s_drv[l]});
    auto ctx = context_tokens(tp, z_src, z_drv);
    auto eps_hat = nets.unet.forward(tp, x_t, t, ctx, refs);
    return reconstruction_loss(tp, eps_hat, eps_var);
}

/// Runs steps [start_step, config.steps). Deterministic given the seed.
template <class T>
TrainResult train(Networks<T>& nets, AdamW<T>& opt, const TrainingSet& data, const NoiseSchedule& schedule,
                  const TrainConfig& cfg, const TrainHooks& hooks = {}, int start_step = 0);

}  // namespace anonydiff

#include "anonydiff/training_impl.hpp"
