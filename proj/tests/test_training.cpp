#include "anonydiff/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace anonydiff;
namespace fs = std::filesystem;

namespace {

DenoiserConfig small_denoiser() {
    DenoiserConfig c;
    c.widths = {8, 16};
    c.attention_stages = {1};
    c.heads = 2;
    c.groups = 4;
    c.embed_dim = 16;
    c.time_features = 16;
    return c;
}

RecognizerConfig small_encoder() {
    RecognizerConfig c = conditioning_encoder_preset();
    c.embed_dim = 16;
    return c;
}

struct Bench {
    Recognizer encoder{small_encoder(), 4};
    DatasetManifest manifest = plan_dataset(5, 2, 3);
    TrainingSet data = build_training_set(manifest, encoder);
    NoiseSchedule schedule = make_schedule();

    TrainConfig config(int steps) const {
        TrainConfig c;
        c.steps = steps;
        c.batch = 2;
        c.lr = 1e-3;
        c.seed = 4;
        return c;
    }
};

AdamW<float> make_opt(const TrainConfig& c) { return AdamW<float>(AdamWConfig{c.lr, 0.9, 0.999, 1e-8, c.weight_decay}); }

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("anonydiff_training_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(ReconstructionLoss, MatchesElementwiseMean) {
    Rng rng(1);
    Tensor<double> a({3, 2, 4, 4}), b({3, 2, 4, 4});
    for (double& v : a.data) v = rng.normal();
    for (double& v : b.data) v = rng.normal();
    double want = 0;
    for (std::size_t i = 0; i < a.size(); ++i) want += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    want /= static_cast<double>(a.size());
    EXPECT_NEAR(reconstruction_loss(a, b), want, 1e-12);
    Tape<double> tp;
    EXPECT_NEAR(reconstruction_loss(tp, tp.constant_ref(a), tp.constant_ref(b))->val().data[0], want, 1e-12);
    EXPECT_EQ(tp.loss_terms(), 1u);
    EXPECT_THROW(reconstruction_loss(a, Tensor<double>({3, 1, 4, 4})), ShapeError);
}

TEST(ReconstructionLoss, FiniteDifferenceGradient) {
    Rng rng(2);
    ParameterStore<double> store;
    auto& eps_hat = store.add("eps_hat", Shape{3, 2, 4, 4});
    Tensor<double> eps({3, 2, 4, 4});
    for (double& v : eps_hat.value.data) v = rng.normal();
    for (double& v : eps.data) v = rng.normal();
    {
        Tape<double> tp;
        tp.backward(reconstruction_loss(tp, tp.param(eps_hat), tp.constant_ref(eps)));
    }
    for (int k = 0; k < 5; ++k) {
        const auto i = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(eps.size())));
        const double orig = eps_hat.value.data[i], h = 1e-6;
        eps_hat.value.data[i] = orig + h;
        const double up = reconstruction_loss(eps_hat.value, eps);
        eps_hat.value.data[i] = orig - h;
        const double down = reconstruction_loss(eps_hat.value, eps);
        eps_hat.value.data[i] = orig;
        const double numeric = (up - down) / (2 * h);
        EXPECT_LT(std::abs(numeric - eps_hat.grad.data[i]) / std::abs(numeric), 1e-3);
    }
}

TEST(ConditioningDropout, RateAndValidation) {
    Rng rng(3);
    int uncond = 0;
    for (int i = 0; i < 20000; ++i) uncond += conditioning_dropout(rng, 0.1) == CondMode::unconditional;
    EXPECT_NEAR(uncond / 20000.0, 0.1, 0.01);
    EXPECT_THROW(conditioning_dropout(rng, 1.5), std::invalid_argument);
    EXPECT_EQ(to_string(CondMode::conditional), "conditional");
}

TEST(Curriculum, PhasesAndSwapping) {
    TrainConfig c;
    c.steps = 100;
    c.phase1_fraction = 0.3;
    int swapped_p1 = 0, total_p1 = 0;
    for (int step = 0; step < c.steps; ++step)
        for (int e = 0; e < 50; ++e) {
            Rng rng = example_rng(1, step, e);
            const auto ex = curriculum_batch(7, step, c, rng);
            EXPECT_LT(ex.entry, 7u);
            EXPECT_EQ(ex.phase, step < 30 ? 1 : 2);
            if (ex.phase == 2) {
                EXPECT_FALSE(ex.swapped);
                EXPECT_EQ(ex.slot_source, TrainingSet::source);
                EXPECT_EQ(ex.slot_driving, TrainingSet::driving);
                EXPECT_EQ(ex.slot_target, TrainingSet::ground_truth);
            } else {
                ++total_p1;
                if (ex.swapped) {
                    ++swapped_p1;
                    EXPECT_EQ(ex.slot_source, TrainingSet::alt_source);
                    EXPECT_EQ(ex.slot_driving, TrainingSet::ground_truth);
                    EXPECT_EQ(ex.slot_target, TrainingSet::driving);
                }
            }
        }
    EXPECT_NEAR(static_cast<double>(swapped_p1) / total_p1, 0.5, 0.05);
    Rng rng(1);
    EXPECT_THROW(curriculum_batch(0, 0, c, rng), EmptyDataset);
}

TEST(TrainConfigCheck, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(validate(c));
    c.steps = 0;
    EXPECT_THROW(validate(c), std::invalid_argument);
    c = {};
    c.uncond_prob = -0.1;
    EXPECT_THROW(validate(c), std::invalid_argument);
    c = {};
    c.lr = 0;
    EXPECT_THROW(validate(c), std::invalid_argument);
}

TEST(TrainingSet, AltSourceShowsDrivingIdentityWithSourceAttributes) {
    Bench s;
    ASSERT_GT(s.data.size(), 0u);
    const auto& r = s.manifest.triplets[s.data.triplet_index[0]];
    EXPECT_EQ(r.split, Split::train);
    FaceFactors alt = r.driving;
    alt.pose = r.source.pose;
    alt.gaze = r.source.gaze;
    alt.expression = r.source.expression;
    alt.background_seed = r.source.background_seed;
    const Tensor<float> want = image_to_tensor<float>(render(alt));
    const Tensor<float> got = slice_sample(s.data.images[TrainingSet::alt_source], 0);
    EXPECT_EQ(got.data, want.data);
    for (std::size_t i : s.data.triplet_index) EXPECT_EQ(s.manifest.triplets[i].split, Split::train);
}

TEST(Train, SingleLossAndFrozenWeights) {
    Bench s;
    auto nets = init_networks<float>(small_denoiser(), 1);
    const auto cfg = s.config(20);
    auto opt = make_opt(cfg);
    const auto frozen = frozen_parameter_hash(*nets);
    const auto trainable_before = nets->store.hash([](const Parameter<float>& p) { return p.trainable; });
    const auto res = train(*nets, opt, s.data, s.schedule, cfg);
    ASSERT_EQ(res.loss_terms_per_tape.size(), 20u);
    for (auto n : res.loss_terms_per_tape) EXPECT_EQ(n, 1u);
    EXPECT_EQ(frozen_parameter_hash(*nets), frozen);
    EXPECT_NE(nets->store.hash([](const Parameter<float>& p) { return p.trainable; }), trainable_before);
    EXPECT_EQ(nets->trained_steps, 20);
    for (const auto& name : trainable_parameters(*nets)) {
        const bool ok = name.rfind(kUnetPrefix, 0) == 0 || name == kNullEmbedding || is_reference_attention(name);
        EXPECT_TRUE(ok) << name;
    }
    // Reference attention weights do learn.
    const auto* q = nets->store.find("refsrc.down.1.attn.self.q.weight");
    const auto* u = nets->store.find("unet.down.1.attn.self.q.weight");
    ASSERT_TRUE(q && u);
    EXPECT_NE(q->value, u->value);
}

TEST(Train, DeterministicGivenSeed) {
    Bench s;
    const auto cfg = s.config(5);
    auto a = init_networks<float>(small_denoiser(), 1), b = init_networks<float>(small_denoiser(), 1);
    auto oa = make_opt(cfg), ob = make_opt(cfg);
    const auto ra = train(*a, oa, s.data, s.schedule, cfg);
    const auto rb = train(*b, ob, s.data, s.schedule, cfg);
    EXPECT_EQ(a->store.hash(), b->store.hash());
    for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(ra.log[i].loss, rb.log[i].loss);
}

TEST(Train, AccumulationDrawsTheSameExamples) {
    Bench s;
    auto big = s.config(3);
    big.batch = 4;
    auto split = s.config(3);
    split.batch = 2;
    split.accumulation = 2;
    auto a = init_networks<float>(small_denoiser(), 1), b = init_networks<float>(small_denoiser(), 1);
    auto oa = make_opt(big), ob = make_opt(split);
    const auto ra = train(*a, oa, s.data, s.schedule, big);
    const auto rb = train(*b, ob, s.data, s.schedule, split);
    for (std::size_t i = 0; i < ra.log.size(); ++i) {
        EXPECT_NEAR(ra.log[i].loss, rb.log[i].loss, 1e-4 * ra.log[i].loss);
        EXPECT_EQ(ra.log[i].unconditional, rb.log[i].unconditional);
    }
}

TEST(Train, ResumeMatchesUninterrupted) {
    Bench s;
    const auto cfg = s.config(4);
    const fs::path dir = temp_dir("resume");
    auto full = init_networks<float>(small_denoiser(), 1);
    auto of = make_opt(cfg);
    train(*full, of, s.data, s.schedule, cfg);

    auto first = init_networks<float>(small_denoiser(), 1);
    auto o1 = make_opt(cfg);
    auto half_cfg = cfg;
    half_cfg.checkpoint_every = 2;
    TrainHooks hooks;
    hooks.checkpoint_dir = dir;
    train(*first, o1, s.data, s.schedule, half_cfg, hooks);
    ASSERT_TRUE(fs::exists(dir / "step_000002"));

    auto resumed = init_networks<float>(small_denoiser(), 1);
    auto o2 = make_opt(cfg);
    const int next = load_checkpoint(*resumed, o2, dir / "step_000002");
    EXPECT_EQ(next, 2);
    EXPECT_EQ(resumed->trained_steps, 2);
    train(*resumed, o2, s.data, s.schedule, cfg, {}, next);
    EXPECT_EQ(resumed->store.hash(), full->store.hash());
    fs::remove_all(dir);
}

TEST(Train, CheckpointRejectsOtherConfig) {
    Bench s;
    const auto cfg = s.config(1);
    const fs::path dir = temp_dir("other");
    auto nets = init_networks<float>(small_denoiser(), 1);
    auto opt = make_opt(cfg);
    save_checkpoint(*nets, opt, 0, cfg, dir / "ck");
    auto c = small_denoiser();
    c.embed_dim = 8;
    auto other = init_networks<float>(c, 1);
    EXPECT_THROW(load_checkpoint(*other, opt, dir / "ck"), ArchiveError);
    fs::remove_all(dir);
}

TEST(Train, LossLogAndDivergence) {
    Bench s;
    const fs::path dir = temp_dir("log");
    auto cfg = s.config(2);
    auto nets = init_networks<float>(small_denoiser(), 1);
    auto opt = make_opt(cfg);
    TrainHooks hooks;
    hooks.loss_log = dir / "loss.csv";
    train(*nets, opt, s.data, s.schedule, cfg, hooks);
    std::ifstream in(dir / "loss.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "step,loss,mode,phase");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 2);

    nets->store.find("unet.conv_in.weight")->value.data[0] = std::nanf("");
    cfg.steps = 3;
    EXPECT_THROW(train(*nets, opt, s.data, s.schedule, cfg, {}, 2), DivergedTraining);
    fs::remove_all(dir);
}

TEST(Train, EmptyDataset) {
    auto nets = init_networks<float>(small_denoiser(), 1);
    TrainConfig cfg;
    auto opt = make_opt(cfg);
    EXPECT_THROW(train(*nets, opt, TrainingSet{}, make_schedule(), cfg), EmptyDataset);
}

TEST(Train, DeskScaleLossDecreases) {
    // Desk network and batch, first 500 steps.
    Recognizer encoder(conditioning_encoder_preset(), 4);
    const TrainingSet data = build_training_set(plan_dataset(10, 4, 3), encoder);
    auto nets = init_networks<float>(DenoiserConfig{}, 5);
    TrainConfig cfg;
    cfg.steps = 500;
    cfg.seed = 1;
    auto opt = make_opt(cfg);
    const auto res = train(*nets, opt, data, make_schedule(), cfg);
    ASSERT_EQ(res.log.size(), 500u);
    double lead = 0, trail = 0;
    for (int i = 0; i < 100; ++i) {
        lead += res.log[i].loss;
        trail += res.log[400 + i].loss;
    }
    EXPECT_LT(trail, lead) << "leading mean " << lead / 100 << ", trailing mean " << trail / 100;
}
