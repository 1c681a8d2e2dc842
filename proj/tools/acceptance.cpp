// Acceptance run: one PASS/FAIL line per criterion.
//
// Criteria 1-7 are self-contained. 8-10 need the desk model, which is built
// once through the anonydiff CLI into <cache>/desk and reused while its
// config hash matches. 11 runs the CLI twice with a fixed seed and compares
// the recorded hashes.

#include "anonydiff/anonymize.hpp"
#include "anonydiff/archive.hpp"
#include "anonydiff/bundle.hpp"
#include "anonydiff/config.hpp"
#include "anonydiff/metrics.hpp"
#include "anonydiff/report.hpp"
#include "anonydiff/synthetic_faces.hpp"
#include "anonydiff/training.hpp"

#include <CLI11.hpp>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using namespace anonydiff;
using nlohmann::json;

namespace {

constexpr std::uint64_t kTestIdentityBase = 1000000;
constexpr double kDegrees[] = {0.0, 0.5, 1.0, 1.2, 1.4};

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 3) {
    std::ostringstream s;
    s << std::setprecision(prec) << v;
    return s.str();
}

Tensor<double> gaussian(Shape s, Rng& rng, double scale = 1.0) {
    Tensor<double> t(s);
    for (double& v : t.data) v = rng.normal() * scale;
    return t;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

double rel_err(double got, long double want) {
    if (want == 0) return got == 0 ? 0.0 : std::abs(got);
    return static_cast<double>(std::abs((static_cast<long double>(got) - want) / want));
}

// ---- 1 ----

Outcome embedding_and_state_forms() {
    Rng rng(1);
    std::vector<double> z(64);
    for (double& v : z) v = rng.normal();
    ReferenceState<double> c, u;
    for (Shape sh : {Shape{32, 2, 8, 8}, Shape{64, 2, 4, 4}}) {
        c.layers.push_back(gaussian(sh, rng));
        u.layers.push_back(gaussian(sh, rng));
    }
    double worst = 0;
    for (double d : kDegrees) {
        const long double ld = d;
        const auto got = adjust_embedding<double>(z, d);
        for (std::size_t i = 0; i < z.size(); ++i) worst = std::max(worst, rel_err(got[i], (1.0L - ld) * z[i]));
        const auto b = blend_states(c, u, d);
        for (std::size_t l = 0; l < c.layers.size(); ++l)
            for (std::size_t i = 0; i < c.layers[l].size(); ++i) {
                const long double want = (1.0L - ld) * c.layers[l].data[i] + ld * u.layers[l].data[i];
                worst = std::max(worst, rel_err(b.layers[l].data[i], want));
            }
    }
    const std::vector<double> ex{1.0, -2.0};
    const auto w = adjust_embedding<double>(ex, 1.2);
    const double ex_err = std::max(std::abs(w[0] + 0.2), std::abs(w[1] - 0.4));
    return {worst <= 1e-12 && ex_err <= 1e-12,
            "max rel err " + fmt(worst) + " [<= 1e-12]; d=1.2 on [1,-2] -> [" + fmt(w[0], 17) + ", " + fmt(w[1], 17) + "]"};
}

// ---- 2 ----

Outcome guidance_identities() {
    Rng rng(2);
    const auto uc = gaussian({3, 2, 8, 8}, rng), co = gaussian({3, 2, 8, 8}, rng);
    const bool one = cfg_combine(uc, co, 1.0).data == co.data;
    const bool zero = cfg_combine(uc, co, 0.0).data == uc.data;
    double affine = 0;
    for (auto [s1, s2] : {std::pair{0.5, 3.5}, std::pair{2.0, 6.0}, std::pair{-1.0, 1.0}, std::pair{4.0, 7.5}}) {
        const auto a = cfg_combine(uc, co, s1), b = cfg_combine(uc, co, s2), m = cfg_combine(uc, co, (s1 + s2) / 2);
        for (std::size_t i = 0; i < uc.size(); ++i) affine = std::max(affine, std::abs(a.data[i] + b.data[i] - 2 * m.data[i]));
    }
    return {one && zero && affine <= 1e-12, std::string("scale 1 exact ") + (one ? "yes" : "no") + ", scale 0 exact " +
                                                 (zero ? "yes" : "no") + ", affine residual " + fmt(affine) + " [<= 1e-12]"};
}

// ---- 3 ----

GuidedDenoiser<double> gaussian_target(double mu, double sigma, const NoiseSchedule& s) {
    return [mu, sigma, &s](const Tensor<double>& x, int t) {
        Tensor<double> e(x.shape);
        const double a = std::sqrt(s.alpha_bars[t]), b = std::sqrt(1 - s.alpha_bars[t]);
        const double var = a * a * sigma * sigma + b * b;
        for (std::size_t i = 0; i < x.size(); ++i) e.data[i] = b * (x.data[i] - a * mu) / var;
        return GuidedPrediction<double>{e, e};
    };
}

Outcome sampler_oracle() {
    const auto s = make_schedule();
    SamplerConfig cfg;
    std::vector<std::uint64_t> seeds(2000);
    for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = i;
    const double mu = 0.3;
    const auto x = sample(gaussian_target(mu, 0.25, s), Shape{1, 2000, 1, 1}, seeds, cfg, s);
    double mean = 0;
    for (double v : x.data) mean += v;
    mean /= 2000.0;

    Rng rng(3);
    const auto x0 = gaussian({3, 2, 4, 4}, rng), eps = gaussian(x0.shape, rng);
    double worst = 0;
    for (int t : {1, 17, 250, 999}) {
        const auto xt = forward_diffuse(x0, t, eps, s);
        std::vector<Rng> streams{Rng(100), Rng(101)};
        std::vector<Rng> copies = streams;
        const auto out = ddpm_step(xt, eps, t, t - 1, s, &streams);
        const double ab = s.alpha_bars[t], ab_prev = s.alpha_bars[t - 1], beta = s.betas[t];
        const double c0 = std::sqrt(ab_prev) * beta / (1 - ab);
        const double ct = std::sqrt(1 - beta) * (1 - ab_prev) / (1 - ab);
        const double sigma = std::sqrt(1 - ab / ab_prev);
        for (int n = 0; n < 2; ++n)
            for (int c = 0; c < 3; ++c)
                for (std::size_t i = 0; i < x0.shape.spatial(); ++i) {
                    const double want = c0 * x0.at(c, n, i) + ct * xt.at(c, n, i);
                    worst = std::max(worst, std::abs(out.at(c, n, i) - sigma * copies[n].normal() - want));
                }
    }
    const bool ok = std::abs(mean - mu) <= 0.05 && worst <= 1e-6;
    return {ok, "2000-sample mean " + fmt(mean, 4) + " vs " + fmt(mu) + " [+-0.05]; posterior mean err " + fmt(worst) +
                    " [<= 1e-6]"};
}

// ---- 4 ----

// Plain multi-head self-attention written against Eigen.
Tensor<double> plain_attention(const ConcatSelfAttention<double>& a, const Tensor<double>& h) {
    const int c = h.shape.c, n = h.shape.n, tok = static_cast<int>(h.shape.spatial());
    auto w = [&](const Conv<double>& conv) {
        return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            conv.weight->value.data.data(), c, c);
    };
    const Eigen::MatrixXd wq = w(a.to_q), wk = w(a.to_k), wv = w(a.to_v), wo = w(a.to_out);
    const Eigen::VectorXd bo = Eigen::Map<const Eigen::VectorXd>(a.to_out.bias->value.data.data(), c);
    const int dh = c / a.heads;
    Tensor<double> out(h.shape);
    for (int s = 0; s < n; ++s) {
        Eigen::MatrixXd x(c, tok);
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < tok; ++i) x(ch, i) = h.at(ch, s, i);
        const Eigen::MatrixXd q = wq * x, k = wk * x, v = wv * x;
        Eigen::MatrixXd o(c, tok);
        for (int hd = 0; hd < a.heads; ++hd) {
            Eigen::MatrixXd logits = q.middleRows(hd * dh, dh).transpose() * k.middleRows(hd * dh, dh) / std::sqrt(dh);
            for (int r = 0; r < tok; ++r) {
                logits.row(r) = (logits.row(r).array() - logits.row(r).maxCoeff()).exp();
                logits.row(r) /= logits.row(r).sum();
            }
            o.middleRows(hd * dh, dh) = v.middleRows(hd * dh, dh) * logits.transpose();
        }
        const Eigen::MatrixXd y = (wo * o).colwise() + bo;
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < tok; ++i) out.at(ch, s, i) = y(ch, i);
    }
    return out;
}

Outcome attention_degeneracy() {
    auto nets = init_networks<double>(DenoiserConfig{}, 3);
    Rng rng(4);
    double plain = 0, perm = 0;
    for (int l = 0; l < nets->unet.attention_layers(); ++l) {
        const auto& layer = nets->unet.attention_block(l).self_attn;
        const int c = layer.to_q.weight->value.shape.c;
        const auto h = gaussian({c, 2, 4, 4}, rng);
        const Tensor<double> empty({c, 2, 0, 0});
        plain = std::max(plain, max_abs_diff(concat_self_attention(layer, h, empty, empty), plain_attention(layer, h)));
        const auto s = gaussian({c, 2, 8, 8}, rng), d = gaussian({c, 2, 8, 8}, rng);
        std::vector<std::size_t> p(64);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = (i * 37 + 11) % 64;
        Tensor<double> sp(s.shape), dp(d.shape);
        for (int ch = 0; ch < c; ++ch)
            for (int n = 0; n < 2; ++n)
                for (std::size_t i = 0; i < 64; ++i) {
                    sp.at(ch, n, i) = s.at(ch, n, p[i]);
                    dp.at(ch, n, i) = d.at(ch, n, p[63 - i]);
                }
        perm = std::max(perm, max_abs_diff(concat_self_attention(layer, h, s, d), concat_self_attention(layer, h, sp, dp)));
    }
    return {plain <= 1e-6 && perm <= 1e-5,
            "empty references vs plain attention " + fmt(plain) + " [<= 1e-6]; reference permutation " + fmt(perm) +
                " [<= 1e-5]"};
}

// ---- 5 ----

Outcome gradient_checks() {
    Rng rng(5);
    double worst_loss = 0;
    {
        ParameterStore<double> store;
        auto& eps_hat = store.add("eps_hat", Shape{3, 2, 8, 8});
        const auto eps = gaussian(eps_hat.value.shape, rng);
        for (double& v : eps_hat.value.data) v = rng.normal();
        Tape<double> tp;
        tp.backward(reconstruction_loss(tp, tp.param(eps_hat), tp.constant_ref(eps)));
        for (int k = 0; k < 5; ++k) {
            const auto i = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(eps.size())));
            const double orig = eps_hat.value.data[i], h = 1e-6;
            eps_hat.value.data[i] = orig + h;
            const double up = reconstruction_loss(eps_hat.value, eps);
            eps_hat.value.data[i] = orig - h;
            const double down = reconstruction_loss(eps_hat.value, eps);
            eps_hat.value.data[i] = orig;
            const double num = (up - down) / (2 * h);
            worst_loss = std::max(worst_loss, std::abs(num - eps_hat.grad.data[i]) / std::max(std::abs(num), 1e-8));
        }
    }

    auto nets = init_networks<double>(DenoiserConfig{}, 6);
    const int n = 2;
    auto unit = [&] {
        Tensor<double> z = gaussian({64, n, 1, 1}, rng);
        for (int s = 0; s < n; ++s) {
            double norm = 0;
            for (int k = 0; k < 64; ++k) norm += z.data[k * n + s] * z.data[k * n + s];
            for (int k = 0; k < 64; ++k) z.data[k * n + s] /= std::sqrt(norm);
        }
        return z;
    };
    const auto z_src = unit(), z_drv = unit();
    const auto s_src = refnet_forward(nets->refsrc, gaussian({16, n, 8, 8}, rng), z_src);
    const auto s_drv = refnet_forward(nets->refdrv, gaussian({16, n, 8, 8}, rng), z_drv);
    const auto x = gaussian({3, n, 32, 32}, rng), target = gaussian(x.shape, rng);
    const std::vector<int> t{40, 700};
    auto loss = [&] { return reconstruction_loss(unet_forward(*nets, x, t, z_src, z_drv, s_src, s_drv), target); };
    nets->store.zero_grad();
    {
        Tape<double> tp;
        auto refs = reference_tokens(tp, s_src, s_drv);
        auto ctx = context_tokens(tp, tp.constant_ref(z_src), tp.constant_ref(z_drv));
        auto y = nets->unet.forward(tp, tp.constant_ref(x), t, ctx, refs);
        tp.backward(reconstruction_loss(tp, y, tp.constant_ref(target)));
    }
    // Five coordinates drawn uniformly over all UNet parameters.
    std::vector<Parameter<double>*> unet;
    std::size_t total = 0;
    for (auto& p : nets->store.all())
        if (p.name.rfind(kUnetPrefix, 0) == 0) {
            unet.push_back(&p);
            total += p.value.size();
        }
    double worst_unet = 0;
    std::string where;
    for (int k = 0; k < 5; ++k) {
        std::size_t i = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(total)));
        Parameter<double>* p = nullptr;
        for (auto* q : unet) {
            if (i < q->value.size()) {
                p = q;
                break;
            }
            i -= q->value.size();
        }
        const double orig = p->value.data[i], h = 1e-5;
        p->value.data[i] = orig + h;
        const double up = loss();
        p->value.data[i] = orig - h;
        const double down = loss();
        p->value.data[i] = orig;
        const double num = (up - down) / (2 * h);
        const double ana = p->grad.size() ? p->grad.data[i] : 0.0;
        const double err = std::abs(num - ana) / std::max(std::abs(num), 1e-8);
        if (err >= worst_unet) where = p->name + "[" + std::to_string(i) + "]";
        worst_unet = std::max(worst_unet, err);
    }
    return {worst_loss < 1e-3 && worst_unet < 1e-3, "reconstruction_loss max rel err " + fmt(worst_loss) +
                                                        ", unet_forward max rel err " + fmt(worst_unet) + " at " + where +
                                                        " [< 1e-3, 5 coordinates each, fp64]"};
}

// ---- 6 ----

Outcome single_loss_audit() {
    Recognizer encoder(conditioning_encoder_preset(), 4);
    const TrainingSet data = build_training_set(plan_dataset(5, 2, 3), encoder);
    auto nets = init_networks<float>(DenoiserConfig{}, 1);
    TrainConfig cfg;
    cfg.steps = 100;
    cfg.seed = 6;
    AdamW<float> opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    const auto frozen = frozen_parameter_hash(*nets);
    const auto trainable = nets->store.hash([](const Parameter<float>& p) { return p.trainable; });
    const TrainResult r = train(*nets, opt, data, make_schedule(), cfg);
    std::set<std::size_t> terms(r.loss_terms_per_tape.begin(), r.loss_terms_per_tape.end());
    bool only_allowed = true;
    for (const auto& name : trainable_parameters(*nets))
        only_allowed = only_allowed && (name.rfind(kUnetPrefix, 0) == 0 || name == kNullEmbedding || is_reference_attention(name));
    const bool one = r.loss_terms_per_tape.size() == 100 && terms == std::set<std::size_t>{1};
    const bool kept = frozen_parameter_hash(*nets) == frozen;
    const bool moved = nets->store.hash([](const Parameter<float>& p) { return p.trainable; }) != trainable;
    std::string t;
    for (auto v : terms) t += (t.empty() ? "" : ",") + std::to_string(v);
    return {one && kept && moved && only_allowed,
            "loss terms per step {" + t + "} [exactly 1]; frozen ReferenceNet hash " + (kept ? "unchanged" : "CHANGED") +
                " after 100 steps; trainable weights " + (moved ? "updated" : "unchanged") + "; trainable set " +
                (only_allowed ? "UNet + reference attention" : "has extras")};
}

// ---- 7 ----

Outcome metric_kernels() {
    const Quaternion id{};
    Rng rng(7);
    double cover = 0;
    for (int i = 0; i < 100; ++i) {
        const auto q = euler_to_quaternion(rng.uniform(-3, 3), rng.uniform(-1.5, 1.5), rng.uniform(-3, 3));
        cover = std::max(cover, quaternion_distance(q, -q));
    }
    const double self = quaternion_distance(id, id);
    const double right = quaternion_distance(id, euler_to_quaternion(std::numbers::pi / 2, 0, 0));
    auto random_embedding = [&] {
        ImageEmbedding e(64);
        double n = 0;
        for (auto& v : e) {
            v = rng.normal();
            n += v * v;
        }
        for (auto& v : e) v /= std::sqrt(n);
        return e;
    };
    std::vector<std::size_t> idx(100);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<ImageEmbedding> orig;
    for (int i = 0; i < 100; ++i) orig.push_back(random_embedding());
    const double trivial = reid_rate(orig, orig, idx);
    double null = 0;
    const int trials = 50;
    for (int t = 0; t < trials; ++t) {
        std::vector<ImageEmbedding> o, g;
        for (int i = 0; i < 100; ++i) o.push_back(random_embedding());
        for (int i = 0; i < 100; ++i) g.push_back(random_embedding());
        null += reid_rate(g, o, idx);
    }
    null /= trials;
    const bool ok = self <= 1e-9 && cover <= 1e-6 && std::abs(right - std::numbers::pi / 2) <= 1e-9 && trivial == 1.0 &&
                    null >= 0.002 && null <= 0.03;
    return {ok, "identity " + fmt(self) + ", double cover " + fmt(cover) + ", 90 deg " + fmt(right, 12) +
                    " [pi/2 +- 1e-9]; reid trivial " + fmt(trivial) + " [= 1], null mean " + fmt(null) +
                    " [0.002, 0.03] at N=100"};
}

// ---- CLI-backed criteria ----

int run_cli(const fs::path& cli, const std::string& args, const fs::path& log) {
    const std::string cmd = cli.string() + " " + args + " >>" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json read_json(const fs::path& p) { return json::parse(read_text_file(p)); }

struct Desk {
    fs::path dir;
    RunConfig cfg;
    json cfg_json;
};

json desk_config(const fs::path& dir) {
    json j = to_json(RunConfig{});
    j["output_dir"] = dir.string();
    j["train"]["checkpoint_every"] = 1000;
    return j;
}

// Builds (or reuses) data, recognizers, probe and trained model under dir.
Desk ensure_desk(const fs::path& cli, const fs::path& dir) {
    Desk d{dir, {}, desk_config(dir)};
    d.cfg = parse_run_config(d.cfg_json.dump());
    fs::create_directories(dir);
    const fs::path cfg_path = dir / "config.json";
    const std::string hash = config_hash(to_json(d.cfg));
    auto fresh = [&](const char* cmd) {
        const fs::path m = dir / ("run_" + std::string(cmd) + ".json");
        return fs::exists(m) && read_json(m)["config_hash"] == hash;
    };
    if (!fs::exists(cfg_path) || read_text_file(cfg_path) != d.cfg_json.dump(1) + "\n")
        write_text_file(cfg_path, d.cfg_json.dump(1) + "\n");
    const std::string c = "--config " + cfg_path.string();
    const fs::path log = dir / "pipeline.log";
    for (const char* cmd : {"gen-data", "train-probe", "train"}) {
        if (fresh(cmd)) continue;
        std::cout << "  building desk model: " << cmd << " (log " << log.string() << ")\n" << std::flush;
        std::string args = c + " " + cmd;
        if (std::string(cmd) == "train") {
            // Resume from the newest checkpoint of an interrupted run.
            fs::path last;
            if (fs::exists(dir / "checkpoints"))
                for (const auto& e : fs::directory_iterator(dir / "checkpoints"))
                    if (fs::exists(e.path() / "MANIFEST.json") && e.path() > last) last = e.path();
            if (!last.empty()) args += " --resume " + last.string();
        }
        const int code = run_cli(cli, args, log);
        if (code != 0) throw std::runtime_error(std::string("anonydiff ") + cmd + " failed with exit code " + std::to_string(code));
    }
    return d;
}

ModelBundle desk_bundle(const Desk& d) {
    return load_bundle({d.dir / "model", d.dir / "encoder", d.dir / "evaluator", d.dir / "probe"});
}

SamplerConfig acceptance_sampler(const Desk& d, int steps) {
    SamplerConfig s = d.cfg.sampler;
    s.steps = steps;
    return s;
}

std::vector<Image> fresh_faces(const Desk& d, int count) {
    return render_identity_pool(d.cfg.data.seed, kTestIdentityBase, count, 1, d.cfg.data.image_size).images;
}

Outcome identity_transfer(const Desk& d, const ModelBundle& b, int sampler_steps) {
    const DatasetManifest m = load_manifest(d.dir / "data");
    std::vector<Image> src, drv;
    for (const auto& t : m.triplets)
        if (t.split == Split::held_out && src.size() < 50) {
            src.push_back(render(t.source, d.cfg.data.image_size));
            drv.push_back(render(t.driving, d.cfg.data.image_size));
        }
    std::vector<std::uint64_t> seeds(src.size());
    for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = i;
    const SamplerConfig sc = acceptance_sampler(d, sampler_steps);
    std::vector<Image> out;
    for (std::size_t s = 0; s < src.size(); s += 10) {
        const std::size_t e = std::min(src.size(), s + 10);
        const auto o = swap_batch({src.begin() + s, src.begin() + e}, {drv.begin() + s, drv.begin() + e},
                                  {seeds.begin() + s, seeds.begin() + e}, sc, *b.nets, *b.encoder, b.schedule);
        out.insert(out.end(), o.begin(), o.end());
    }
    int wins = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto zo = embed(*b.evaluator, out[i]);
        wins += identity_distance(zo, embed(*b.evaluator, src[i])) < identity_distance(zo, embed(*b.evaluator, drv[i]));
    }
    const double frac = out.empty() ? 0.0 : static_cast<double>(wins) / static_cast<double>(out.size());
    return {out.size() == 50 && frac >= 0.8, "swap closer to source on " + std::to_string(wins) + "/" +
                                                 std::to_string(out.size()) + " held-out triplets (" + fmt(100 * frac) +
                                                 "%) [>= 80% of 50]"};
}

Outcome degree_monotonicity(const Desk& d, const ModelBundle& b, int sampler_steps, const fs::path& out) {
    const std::vector<double> ds{0.3, 0.6, 0.9, 1.2};
    const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    const auto faces = fresh_faces(d, 20);
    const SweepReport r = sweep_report(b, ds, faces, seeds, acceptance_sampler(d, sampler_steps), Ablation::full, d.cfg_json);
    write_sweep_report(r, out);
    std::string levels;
    for (const auto& l : r.levels) levels += (levels.empty() ? "" : ", ") + fmt(l.means.id_dist);
    const double rho = r.spearman_rho.value_or(std::nan(""));
    return {r.spearman_rho && rho >= 0.9,
            "mean id distance at d=0.3,0.6,0.9,1.2: " + levels + "; spearman rho " + fmt(rho) + " [>= 0.9, 20 ids x 5 seeds]"};
}

Outcome ablation_ordering(const Desk& d, const ModelBundle& b, int sampler_steps, const fs::path& out) {
    const auto faces = fresh_faces(d, 20);
    const std::vector<std::uint64_t>& seeds = d.cfg.eval.seeds;
    const AblationGrid g = ablation_grid(b, faces, seeds, d.cfg.eval.d, acceptance_sampler(d, sampler_steps),
                                         kAllAblations, d.cfg_json);
    write_ablation_grid(g, out);
    std::string rows;
    for (const auto& r : g.rows)
        rows += (rows.empty() ? "" : "; ") + to_string(r.ablation) + " reid " + fmt(r.report.means.reid_rate) + " shape " +
                fmt(r.report.means.shape_dist);
    return {g.full_is_best(), rows + " [full lowest reid and largest shape distance, 20 ids x " +
                                  std::to_string(seeds.size()) + " seeds]"};
}

Outcome reproducibility(const fs::path& cli, const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    json j = to_json(RunConfig{});
    j["output_dir"] = (dir / "shared").string();
    j["data"]["n_identities"] = 10;
    j["data"]["triplets_per_identity"] = 2;
    j["model"]["encoder"]["steps"] = 50;
    j["train"]["steps"] = 10;
    j["sampler"]["steps"] = 20;
    write_text_file(dir / "config.json", j.dump(1) + "\n");
    const std::string c = "--config " + (dir / "config.json").string();
    const fs::path log = dir / "log.txt";
    const fs::path shared = dir / "shared";
    if (run_cli(cli, c + " gen-data", log) || run_cli(cli, c + " train-probe --which encoder", log))
        return {false, "setup failed, see " + log.string()};
    std::string input;
    for (const auto& e : fs::recursive_directory_iterator(shared / "data"))
        if (e.path().extension() == ".bin" && (input.empty() || e.path().string() < input)) input = e.path().string();
    std::vector<std::string> params, outputs;
    for (const char* run : {"a", "b"}) {
        const fs::path o = dir / run;
        const std::string common = c + " --out " + o.string();
        if (run_cli(cli, common + " train --data " + (shared / "data").string() + " --encoder " + (shared / "encoder").string(), log) ||
            run_cli(cli, common + " anonymize --input " + input + " --seed 5 --encoder " + (shared / "encoder").string(), log))
            return {false, std::string("run ") + run + " failed, see " + log.string()};
        params.push_back(std::to_string(read_json(o / "run_train.json")["result"]["parameter_hash"].get<std::uint64_t>()));
        outputs.push_back(read_json(o / "run_anonymize.json")["result"]["output_hash"].get<std::string>());
    }
    const bool ok = params[0] == params[1] && outputs[0] == outputs[1];
    return {ok, "parameter hash " + params[0] + (params[0] == params[1] ? " == " : " != ") + params[1] + "; output hash " +
                    outputs[0].substr(0, 16) + (outputs[0] == outputs[1] ? " == " : " != ") + outputs[1].substr(0, 16) +
                    " [bitwise identical, 10 training steps]"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string cache = "acceptance";
    std::string cli = ANONYDIFF_CLI;
    std::vector<int> only;
    int sampler_steps = 100;
    app.add_option("--cache", cache, "Directory for the desk model and reports");
    app.add_option("--cli", cli, "anonydiff executable");
    app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 11));
    app.add_option("--sampler-steps", sampler_steps, "Sampling steps for criteria 8-10")->check(CLI::PositiveNumber);
    CLI11_PARSE(app, argc, argv);
    const std::set<int> want = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}
                                            : std::set<int>(only.begin(), only.end());
    const fs::path root = fs::absolute(cache);

    std::optional<Desk> desk;
    std::optional<ModelBundle> bundle;
    auto need_desk = [&]() -> std::pair<const Desk&, const ModelBundle&> {
        if (!desk) {
            desk = ensure_desk(cli, root / "desk");
            bundle = desk_bundle(*desk);
        }
        return {*desk, *bundle};
    };

    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"embedding and state closed forms", embedding_and_state_forms},
        {"guidance identities", guidance_identities},
        {"sampler oracle", sampler_oracle},
        {"attention degeneracy", attention_degeneracy},
        {"gradient checks", gradient_checks},
        {"single-loss audit", single_loss_audit},
        {"metric kernels", metric_kernels},
        {"end-to-end identity transfer",
         [&] {
             auto [d, b] = need_desk();
             return identity_transfer(d, b, sampler_steps);
         }},
        {"d-monotonicity",
         [&] {
             auto [d, b] = need_desk();
             return degree_monotonicity(d, b, sampler_steps, root / "sweep");
         }},
        {"ablation ordering",
         [&] {
             auto [d, b] = need_desk();
             return ablation_ordering(d, b, sampler_steps, root / "ablation");
         }},
        {"reproducibility", [&] { return reproducibility(cli, root / "repro"); }},
    };

    json summary = json::object();
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i) + 1;
        if (!want.count(n)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failed += !o.pass;
        std::cout << "criterion " << std::setw(2) << n << ": " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first
                  << ": " << o.detail << " (" << fmt(secs, 3) << " s)\n"
                  << std::flush;
        summary[std::to_string(n)] = {{"name", criteria[i].first}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", secs}};
    }
    fs::create_directories(root);
    write_text_file(root / "acceptance.json", summary.dump(1) + "\n");
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all selected criteria passed")) << "\n";
    return failed ? 1 : 0;
}
