// anonydiff command-line interface.

#include "anonydiff/anonymize.hpp"
#include "anonydiff/archive.hpp"
#include "anonydiff/bundle.hpp"
#include "anonydiff/config.hpp"
#include "anonydiff/metrics.hpp"
#include "anonydiff/report.hpp"
#include "anonydiff/synthetic_faces.hpp"
#include "anonydiff/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace anonydiff;
using nlohmann::json;

namespace {

// Fresh faces for sweeps and ablations live far above the dataset's ids.
constexpr std::uint64_t kTestIdentityBase = 1000000;

struct Common {
    std::string config_path;
    std::string out;
};

struct Context {
    RunConfig cfg;
    json cfg_json;
    fs::path out;
    int threads = 1;
    json inputs = json::object();

    void input(const std::string& role, const fs::path& p) {
        if (!fs::exists(p)) throw IoError("missing input " + p.string());
        const fs::path f = fs::is_directory(p) ? p / (fs::exists(p / "MANIFEST.json") ? "MANIFEST.json" : "manifest.json") : p;
        if (!fs::exists(f)) throw IoError("missing input " + f.string());
        inputs[role] = {{"path", p.string()}, {"sha256", file_sha256(f)}};
    }

    void write_manifest(const std::string& command, const json& extra) const {
        fs::create_directories(out);
        json m{{"command", command},
               {"version", kVersion},
               {"config", cfg_json},
               {"config_hash", config_hash(cfg_json)},
               {"seed", cfg.seed},
               {"threads", threads},
               {"inputs", inputs},
               {"result", extra}};
        write_text_file(out / ("run_" + command + ".json"), m.dump(1) + "\n");
    }
};

int thread_cap() {
    const char* v = std::getenv("ANONYDIFF_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end || n < 1) throw ConfigError("ANONYDIFF_THREADS must be a positive integer, got '" + std::string(v) + "'");
    // All kernels here are single-threaded, so any cap >= 1 is respected.
    return static_cast<int>(n);
}

Context make_context(const Common& c) {
    Context ctx;
    ctx.cfg = c.config_path.empty() ? RunConfig{} : load_run_config(c.config_path);
    if (!c.out.empty()) ctx.cfg.output_dir = c.out;
    ctx.cfg_json = to_json(ctx.cfg);
    ctx.out = ctx.cfg.output_dir;
    ctx.threads = thread_cap();
    if (!c.config_path.empty()) ctx.input("config", c.config_path);
    return ctx;
}

fs::path or_default(const std::string& given, const fs::path& fallback) { return given.empty() ? fallback : fs::path(given); }

void write_image_pair(const fs::path& stem, const Image& img) {
    fs::create_directories(stem.parent_path());
    write_image_bin(fs::path(stem.string() + ".bin"), img);
    write_png(fs::path(stem.string() + ".png"), img);
}

std::vector<Image> test_faces(const RunConfig& cfg, int count) {
    return render_identity_pool(cfg.data.seed, kTestIdentityBase, count, 1, cfg.data.image_size).images;
}

json means_json(const EvalMeans& m) { return m; }

// ---- commands ----

void cmd_gen_data(const Common& c) {
    Context ctx = make_context(c);
    const auto& d = ctx.cfg.data;
    const fs::path dir = ctx.out / "data";
    const DatasetManifest m = make_dataset(dir, d.n_identities, d.triplets_per_identity, d.seed, d.image_size);
    ctx.write_manifest("gen-data", {{"dataset", dir.string()},
                                    {"triplets", m.triplets.size()},
                                    {"manifest_sha256", file_sha256(dir / "manifest.json")}});
    std::cout << "wrote " << m.triplets.size() << " triplets to " << dir.string() << "\n";
}

void cmd_train_probe(const Common& c, const std::string& which) {
    Context ctx = make_context(c);
    if (which != "all" && which != "encoder" && which != "evaluator" && which != "attributes")
        throw ConfigError("--which must be one of all, encoder, evaluator, attributes");
    const auto& m = ctx.cfg.model;
    json result = json::object();
    auto recognizer = [&](const char* name, const RecognizerConfig& rc, const PoolSection& pool) {
        const LabeledImages data =
            render_identity_pool(pool.seed, pool.first_id, pool.identities, pool.per_identity, rc.input_size);
        auto r = train_recognizer(data, rc);
        save_recognizer(*r, ctx.out / name);
        result[name] = {{"path", (ctx.out / name).string()}, {"accuracy", r->accuracy}};
        std::cout << name << " accuracy " << r->accuracy << "\n";
    };
    if (which == "all" || which == "encoder") recognizer("encoder", m.encoder, m.encoder_pool);
    if (which == "all" || which == "evaluator") recognizer("evaluator", m.evaluator, m.evaluator_pool);
    if (which == "all" || which == "attributes") {
        auto p = train_attribute_probe(m.probe);
        save_probe(*p, ctx.out / "probe");
        result["probe"] = {{"path", (ctx.out / "probe").string()}, {"validation", p->validation}};
        std::cout << "attribute probe pose median error " << p->validation.pose_median << " rad\n";
    }
    ctx.write_manifest("train-probe", result);
}

void cmd_train(const Common& c, const std::string& data_dir, const std::string& encoder_dir, const std::string& resume) {
    Context ctx = make_context(c);
    const fs::path data = or_default(data_dir, ctx.out / "data");
    const fs::path enc = or_default(encoder_dir, ctx.out / "encoder");
    ctx.input("dataset", data);
    ctx.input("encoder", enc);
    const DatasetManifest manifest = load_manifest(data);
    auto encoder = load_recognizer(enc);
    const TrainingSet set = build_training_set(manifest, *encoder, data);
    auto nets = init_networks<float>(ctx.cfg.model.denoiser, ctx.cfg.model.init_seed);
    TrainConfig tc = ctx.cfg.train;
    AdamW<float> opt(AdamWConfig{tc.lr, 0.9, 0.999, 1e-8, tc.weight_decay});
    int start = 0;
    if (!resume.empty()) {
        ctx.input("resume", resume);
        start = load_checkpoint(*nets, opt, resume);
    }
    fs::create_directories(ctx.out);
    TrainHooks hooks;
    hooks.loss_log = ctx.out / "loss.csv";
    hooks.checkpoint_dir = ctx.out / "checkpoints";
    hooks.on_step = [&](const StepRecord& r) {
        if ((r.step + 1) % 100 == 0 || r.step + 1 == tc.steps)
            std::cout << "step " << r.step + 1 << " loss " << r.loss << "\n" << std::flush;
    };
    const TrainResult res = train(*nets, opt, set, make_schedule(), tc, hooks, start);
    const fs::path model = ctx.out / "model";
    networks_archive(*nets).save(model);
    ctx.write_manifest("train", {{"model", model.string()},
                                 {"last_checkpoint", res.last_checkpoint},
                                 {"start_step", start},
                                 {"steps", tc.steps},
                                 {"final_loss", res.log.empty() ? json() : json(res.log.back().loss)},
                                 {"parameter_hash", nets->store.hash()},
                                 {"model_manifest_sha256", file_sha256(model / "MANIFEST.json")}});
}

ModelBundle bundle_for(Context& ctx, const std::string& checkpoint, const std::string& encoder, bool with_eval) {
    BundlePaths p;
    p.checkpoint = or_default(checkpoint, ctx.out / "model");
    p.encoder = or_default(encoder, ctx.out / "encoder");
    ctx.input("checkpoint", p.checkpoint);
    ctx.input("encoder", p.encoder);
    if (with_eval) {
        p.evaluator = ctx.out / "evaluator";
        p.probe = ctx.out / "probe";
        ctx.input("evaluator", p.evaluator);
        ctx.input("probe", p.probe);
    }
    return load_bundle(p);
}

void cmd_anonymize(const Common& c, const std::string& input, std::optional<double> d, std::optional<std::uint64_t> seed,
                   const std::string& ablation, const std::string& checkpoint, const std::string& encoder) {
    Context ctx = make_context(c);
    ctx.input("image", input);
    ModelBundle b = bundle_for(ctx, checkpoint, encoder, false);
    AnonymizeRequest req;
    req.image = read_image_bin(input);
    req.d = d.value_or(kDefaultDegree);
    req.seed = seed.value_or(ctx.cfg.sampler.seed);
    req.ablation = parse_ablation(ablation);
    req.sampler = ctx.cfg.sampler;
    if (auto w = request_warning(req)) std::cerr << "warning: " << *w << "\n";
    const Image out = anonymize(req, *b.nets, *b.encoder, b.schedule);
    const fs::path stem = ctx.out / "anonymized" / fs::path(input).stem();
    write_image_pair(stem, out);
    ctx.write_manifest("anonymize", {{"d", req.d},
                                     {"d_defaulted", !d.has_value()},
                                     {"seed", req.seed},
                                     {"ablation", to_string(req.ablation)},
                                     {"output", stem.string() + ".bin"},
                                     {"output_hash", image_hash(out)},
                                     {"face_valid", face_validity(out)}});
    std::cout << stem.string() << ".bin\n";
}

void cmd_swap(const Common& c, const std::string& source, const std::string& driving, std::optional<std::uint64_t> seed,
              const std::string& checkpoint, const std::string& encoder) {
    Context ctx = make_context(c);
    ctx.input("source", source);
    ctx.input("driving", driving);
    ModelBundle b = bundle_for(ctx, checkpoint, encoder, false);
    const std::uint64_t s = seed.value_or(ctx.cfg.sampler.seed);
    const Image out = swap(read_image_bin(source), read_image_bin(driving), s, *b.nets, *b.encoder, b.schedule,
                           ctx.cfg.sampler);
    const fs::path stem = ctx.out / "swapped" / (fs::path(source).stem().string() + "_on_" + fs::path(driving).stem().string());
    write_image_pair(stem, out);
    ctx.write_manifest("swap", {{"seed", s}, {"output", stem.string() + ".bin"}, {"output_hash", image_hash(out)}});
    std::cout << stem.string() << ".bin\n";
}

void cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data_dir) {
    Context ctx = make_context(c);
    ModelBundle b = bundle_for(ctx, checkpoint, "", true);
    const fs::path data = or_default(data_dir, ctx.out / "data");
    ctx.input("dataset", data);
    const DatasetManifest m = load_manifest(data);
    std::vector<Image> originals;
    for (const auto& t : m.triplets)
        if (t.split == Split::held_out) originals.push_back(read_image_bin(data / t.source_path));
    if (originals.empty()) throw EmptyDataset("eval: dataset has no held-out triplets");
    const std::uint64_t seed = ctx.cfg.eval.seeds.empty() ? ctx.cfg.sampler.seed : ctx.cfg.eval.seeds.front();
    const std::vector<std::uint64_t> seeds(originals.size(), seed);
    const auto gen = anonymize_batch(originals, ctx.cfg.eval.d, Ablation::full, seeds, ctx.cfg.sampler, *b.nets,
                                     *b.encoder, b.schedule);
    std::vector<std::size_t> origin(originals.size());
    for (std::size_t i = 0; i < origin.size(); ++i) origin[i] = i;
    const EvalReport rep = evaluate(*b.evaluator, *b.probe, originals, gen, origin, ctx.cfg_json);
    write_eval_report(rep, ctx.out / "eval");
    ctx.write_manifest("eval", {{"d", ctx.cfg.eval.d}, {"count", rep.records.size()}, {"means", means_json(rep.means)}});
    std::cout << json(rep.means).dump() << "\n";
}

std::vector<double> parse_doubles(const std::string& s, const char* what) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(std::string(what) + ": cannot parse '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError(std::string(what) + " is empty");
    return out;
}

void cmd_sweep(const Common& c, const std::string& checkpoint, const std::string& d_list, const std::string& seed_list) {
    Context ctx = make_context(c);
    ModelBundle b = bundle_for(ctx, checkpoint, "", true);
    const std::vector<double> ds = d_list.empty() ? ctx.cfg.eval.d_values : parse_doubles(d_list, "--d-list");
    std::vector<std::uint64_t> seeds = ctx.cfg.eval.seeds;
    if (!seed_list.empty()) {
        seeds.clear();
        for (double v : parse_doubles(seed_list, "--seeds")) {
            if (v < 0 || v != static_cast<double>(static_cast<std::uint64_t>(v)))
                throw ConfigError("--seeds must be non-negative integers");
            seeds.push_back(static_cast<std::uint64_t>(v));
        }
    }
    const auto faces = test_faces(ctx.cfg, std::max(1, ctx.cfg.eval.identities));
    const SweepReport rep = sweep_report(b, ds, faces, seeds, ctx.cfg.sampler, Ablation::full, ctx.cfg_json);
    write_sweep_report(rep, ctx.out / "sweep");
    ctx.write_manifest("sweep", {{"d_values", ds},
                                 {"seeds", seeds},
                                 {"rows", rep.rows.size()},
                                 {"spearman_rho", rep.spearman_rho ? json(*rep.spearman_rho) : json()}});
    for (const auto& l : rep.levels) std::cout << "d " << l.d << " id_dist " << l.means.id_dist << "\n";
}

void cmd_ablate(const Common& c, const std::string& checkpoint) {
    Context ctx = make_context(c);
    ModelBundle b = bundle_for(ctx, checkpoint, "", true);
    const auto faces = test_faces(ctx.cfg, std::max(1, ctx.cfg.eval.identities));
    const std::vector<std::uint64_t> seeds =
        ctx.cfg.eval.seeds.empty() ? std::vector<std::uint64_t>{ctx.cfg.sampler.seed} : ctx.cfg.eval.seeds;
    const AblationGrid g = ablation_grid(b, faces, seeds, ctx.cfg.eval.d, ctx.cfg.sampler, kAllAblations, ctx.cfg_json);
    write_ablation_grid(g, ctx.out / "ablation");
    json rows = json::object();
    for (const auto& r : g.rows) rows[to_string(r.ablation)] = means_json(r.report.means);
    ctx.write_manifest("ablate", {{"d", g.d}, {"rows", rows}, {"full_is_best", g.full_is_best()}});
    for (const auto& r : g.rows)
        std::cout << to_string(r.ablation) << " reid " << r.report.means.reid_rate << " shape "
                  << r.report.means.shape_dist << "\n";
}

std::string one_line(std::string s) {
    for (char& ch : s)
        if (ch == '\n' || ch == '\r') ch = ' ';
    return s;
}

int fail(const char* kind, const std::string& what, int code) {
    std::cerr << "error: " << kind << ": " << one_line(what) << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Face anonymization with reference-conditioned diffusion on synthetic faces"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--config", common.config_path, "Run configuration (JSON)");
    app.add_option("--out", common.out, "Output directory (overrides output_dir)");

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic triplet dataset");

    std::string which = "all";
    auto* probe = app.add_subcommand("train-probe", "Train the conditioning encoder, evaluator and attribute probe");
    probe->add_option("--which", which, "all | encoder | evaluator | attributes");

    std::string data_dir, encoder_dir, resume, checkpoint;
    auto* train_cmd = app.add_subcommand("train", "Train the denoiser and ReferenceNets");
    train_cmd->add_option("--data", data_dir, "Dataset directory");
    train_cmd->add_option("--encoder", encoder_dir, "Conditioning encoder archive");
    train_cmd->add_option("--resume", resume, "Checkpoint to resume from");

    std::string input, ablation = "full";
    std::optional<double> d;
    std::optional<std::uint64_t> seed;
    auto* anon = app.add_subcommand("anonymize", "Anonymize one image");
    anon->add_option("--input", input, "Input image (.bin)")->required();
    anon->add_option("--d", d, "Anonymization degree (default 1.25)");
    anon->add_option("--seed", seed, "Sampling seed");
    anon->add_option("--ablation", ablation, "full | no_embeds | no_states | no_uncond_states");
    anon->add_option("--checkpoint", checkpoint, "Model archive");
    anon->add_option("--encoder", encoder_dir, "Conditioning encoder archive");

    std::string source, driving;
    auto* swp = app.add_subcommand("swap", "Put the source identity onto the driving image");
    swp->add_option("--source", source, "Source image (.bin)")->required();
    swp->add_option("--driving", driving, "Driving image (.bin)")->required();
    swp->add_option("--seed", seed, "Sampling seed");
    swp->add_option("--checkpoint", checkpoint, "Model archive");
    swp->add_option("--encoder", encoder_dir, "Conditioning encoder archive");

    auto* ev = app.add_subcommand("eval", "Anonymize held-out sources and score them");
    ev->add_option("--checkpoint", checkpoint, "Model archive");
    ev->add_option("--data", data_dir, "Dataset directory");

    std::string d_list, seed_list;
    auto* sweep = app.add_subcommand("sweep", "Identity distance across anonymization degrees");
    sweep->add_option("--checkpoint", checkpoint, "Model archive");
    sweep->add_option("--d-list", d_list, "Comma-separated degrees");
    sweep->add_option("--seeds", seed_list, "Comma-separated sampling seeds");

    auto* abl = app.add_subcommand("ablate", "Ablation grid over the four conditioning variants");
    abl->add_option("--checkpoint", checkpoint, "Model archive");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 2);
    }

    try {
        if (*gen) cmd_gen_data(common);
        else if (*probe) cmd_train_probe(common, which);
        else if (*train_cmd) cmd_train(common, data_dir, encoder_dir, resume);
        else if (*anon) cmd_anonymize(common, input, d, seed, ablation, checkpoint, encoder_dir);
        else if (*swp) cmd_swap(common, source, driving, seed, checkpoint, encoder_dir);
        else if (*ev) cmd_eval(common, checkpoint, data_dir);
        else if (*sweep) cmd_sweep(common, checkpoint, d_list, seed_list);
        else if (*abl) cmd_ablate(common, checkpoint);
    } catch (const ConfigError& e) {
        return fail("config", e.what(), 2);
    } catch (const ArchiveError& e) {
        return fail("archive", e.what(), 4);
    } catch (const IoError& e) {
        return fail("io", e.what(), 3);
    } catch (const DivergedTraining& e) {
        return fail("diverged_training", e.what(), 5);
    } catch (const DivergedSampling& e) {
        return fail("diverged_sampling", e.what(), 5);
    } catch (const UntrainedNetwork& e) {
        return fail("untrained", e.what(), 6);
    } catch (const std::invalid_argument& e) {
        return fail("invalid_argument", e.what(), 2);
    } catch (const std::exception& e) {
        return fail("runtime", e.what(), 1);
    }
    return 0;
}
