#pragma once

// Template definitions for training.hpp (trainer loop and checkpoints).

#include "anonydiff/training.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <type_traits>

namespace anonydiff {

nlohmann::json train_config_json(const TrainConfig& c);
nlohmann::json denoiser_config_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from(const nlohmann::json& j);

template <class T>
constexpr const char* dtype_name() {
    return std::is_same_v<T, double> ? "fp64" : "fp32";
}

/// Network parameters only; enough to run inference.
template <class T>
TensorArchive networks_archive(const Networks<T>& nets) {
    TensorArchive a;
    for (const auto& p : nets.store.all()) a.put(p.name, p.value);
    a.metadata()["denoiser"] = denoiser_config_json(nets.config);
    a.metadata()["init_seed"] = nets.seed;
    a.metadata()["trained_steps"] = nets.trained_steps;
    a.metadata()["dtype"] = dtype_name<T>();
    return a;
}

/// Rebuilds networks from an archive written by networks_archive/save_checkpoint.
template <class T>
std::unique_ptr<Networks<T>> networks_from_archive(const TensorArchive& a) {
    const auto& m = a.metadata();
    if (!m.contains("denoiser")) throw ArchiveError("archive does not describe a denoiser");
    auto nets = init_networks<T>(denoiser_config_from(m.at("denoiser")), m.at("init_seed").get<std::uint64_t>());
    nets->trained_steps = m.value("trained_steps", std::int64_t{0});
    for (auto& p : nets->store.all()) {
        Tensor<T> t = a.get<T>(p.name);
        require_same(t.shape, p.value.shape, ("checkpoint entry " + p.name).c_str());
        p.value = std::move(t);
    }
    return nets;
}

template <class T>
std::unique_ptr<Networks<T>> load_networks(const std::filesystem::path& dir) {
    return networks_from_archive<T>(TensorArchive::load(dir));
}

template <class T>
void save_checkpoint(const Networks<T>& nets, const AdamW<T>& opt, int next_step, const TrainConfig& cfg,
                     const std::filesystem::path& dir) {
    TensorArchive a = networks_archive(nets);
    for (const auto& [name, slot] : opt.slots()) {
        a.put("adamw.m." + name, slot.m);
        a.put("adamw.v." + name, slot.v);
    }
    a.metadata()["next_step"] = next_step;
    a.metadata()["optimizer_steps"] = opt.steps();
    a.metadata()["train"] = train_config_json(cfg);
    a.save(dir);
}

template <class T>
int load_checkpoint(Networks<T>& nets, AdamW<T>& opt, const std::filesystem::path& dir) {
    const TensorArchive a = TensorArchive::load(dir);
    const auto& m = a.metadata();
    if (!m.contains("denoiser") || !(denoiser_config_from(m.at("denoiser")) == nets.config))
        throw ArchiveError("checkpoint " + dir.string() + " was written for a different denoiser config");
    for (auto& p : nets.store.all()) {
        Tensor<T> t = a.get<T>(p.name);
        require_same(t.shape, p.value.shape, ("checkpoint entry " + p.name).c_str());
        p.value = std::move(t);
    }
    nets.trained_steps = m.value("trained_steps", std::int64_t{0});
    opt.slots().clear();
    for (const auto& name : a.names()) {
        if (name.rfind("adamw.m.", 0) != 0) continue;
        const std::string pname = name.substr(8);
        auto& slot = opt.slots()[pname];
        slot.m = a.get<T>(name);
        slot.v = a.get<T>("adamw.v." + pname);
    }
    opt.set_steps(m.at("optimizer_steps").get<std::int64_t>());
    return m.at("next_step").get<int>();
}

template <class T>
TrainResult train(Networks<T>& nets, AdamW<T>& opt, const TrainingSet& data, const NoiseSchedule& schedule,
                  const TrainConfig& cfg, const TrainHooks& hooks, int start_step) {
    validate(cfg);
    if (data.size() == 0) throw EmptyDataset("train: dataset is empty");
    if (start_step < 0 || start_step > cfg.steps) throw std::invalid_argument("train: start_step out of range");
    TrainResult res;
    std::ofstream log;
    if (hooks.loss_log) {
        log.open(*hooks.loss_log, start_step == 0 ? std::ios::trunc : std::ios::app);
        if (!log) throw IoError("cannot open loss log " + hooks.loss_log->string());
        if (start_step == 0) log << "step,loss,mode,phase\n";
    }
    auto checkpoint = [&](int next_step) {
        if (!hooks.checkpoint_dir) return;
        char name[32];
        std::snprintf(name, sizeof(name), "step_%06d", next_step);
        const auto dir = *hooks.checkpoint_dir / name;
        save_checkpoint(nets, opt, next_step, cfg, dir);
        res.last_checkpoint = dir.string();
    };

    std::vector<CurriculumExample> examples(static_cast<std::size_t>(cfg.batch));
    std::vector<Rng> rngs;
    std::vector<Rng*> rng_ptrs(static_cast<std::size_t>(cfg.batch));
    for (int step = start_step; step < cfg.steps; ++step) {
        nets.store.zero_grad();
        StepRecord rec;
        rec.step = step;
        double loss_sum = 0;
        for (int micro = 0; micro < cfg.accumulation; ++micro) {
            rngs.clear();
            for (int b = 0; b < cfg.batch; ++b) rngs.push_back(example_rng(cfg.seed, step, micro * cfg.batch + b));
            for (int b = 0; b < cfg.batch; ++b) {
                rng_ptrs[b] = &rngs[b];
                examples[b] = curriculum_batch(data.size(), step, cfg, rngs[b]);
                rec.unconditional += examples[b].mode == CondMode::unconditional;
                rec.phase = examples[b].phase;
            }
            rec.examples += cfg.batch;
            Tape<T> tp;
            std::deque<Tensor<T>> keep_alive;
            auto loss = training_loss(tp, nets, data, schedule, examples, rng_ptrs, keep_alive);
            res.loss_terms_per_tape.push_back(tp.loss_terms());
            if (tp.loss_terms() != 1) throw std::logic_error("training graph must contain exactly one loss term");
            const double value = static_cast<double>(loss->val().data[0]);
            if (!std::isfinite(value))
                throw DivergedTraining("training diverged at step " + std::to_string(step) +
                                           (res.last_checkpoint.empty() ? "" : "; last good checkpoint " + res.last_checkpoint),
                                       res.last_checkpoint);
            loss_sum += value;
            tp.backward(loss);
        }
        opt.step(nets.store, 1.0 / cfg.accumulation);
        nets.trained_steps = step + 1;
        rec.loss = loss_sum / cfg.accumulation;
        res.log.push_back(rec);
        if (log) log << rec.step << ',' << rec.loss << ',' << rec.mode() << ',' << rec.phase << '\n';
        if (hooks.on_step) hooks.on_step(rec);
        const bool last = step + 1 == cfg.steps;
        if (last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)) checkpoint(step + 1);
    }
    nets.store.zero_grad();
    return res;
}

}  // namespace anonydiff
