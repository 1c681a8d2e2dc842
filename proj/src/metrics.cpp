#include "anonydiff/metrics.hpp"

#include "anonydiff/archive.hpp"
#include "anonydiff/hashing.hpp"
#include "anonydiff/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace anonydiff {

double Quaternion::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quaternion operator*(const Quaternion& a, const Quaternion& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z, a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x, a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quaternion euler_to_quaternion(double yaw, double pitch, double roll) {
    const Quaternion qz{std::cos(yaw / 2), 0, 0, std::sin(yaw / 2)};
    const Quaternion qy{std::cos(pitch / 2), 0, std::sin(pitch / 2), 0};
    const Quaternion qx{std::cos(roll / 2), std::sin(roll / 2), 0, 0};
    Quaternion q = qz * qy * qx;
    const double n = q.norm();
    return {q.w / n, q.x / n, q.y / n, q.z / n};
}

std::array<double, 9> rotation_matrix(const Quaternion& q) {
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
            2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

double quaternion_distance(const Quaternion& q1, const Quaternion& q2) {
    if (std::abs(q1.norm() - 1.0) > 1e-3 || std::abs(q2.norm() - 1.0) > 1e-3)
        throw std::invalid_argument("quaternion_distance: non-unit quaternion");
    const double dot = q1.w * q2.w + q1.x * q2.x + q1.y * q2.y + q1.z * q2.z;
    return 2.0 * std::acos(std::min(1.0, std::abs(dot)));
}

Vec3 gaze_direction(double yaw, double pitch) {
    return {std::cos(pitch) * std::sin(yaw), std::sin(pitch), std::cos(pitch) * std::cos(yaw)};
}

double gaze_distance(const Vec3& g1, const Vec3& g2) {
    const double n1 = std::sqrt(g1[0] * g1[0] + g1[1] * g1[1] + g1[2] * g1[2]);
    const double n2 = std::sqrt(g2[0] * g2[0] + g2[1] * g2[1] + g2[2] * g2[2]);
    if (n1 == 0 || n2 == 0) throw std::invalid_argument("gaze_distance: zero direction vector");
    const double c = (g1[0] * g2[0] + g1[1] * g2[1] + g1[2] * g2[2]) / (n1 * n2);
    return std::acos(std::clamp(c, -1.0, 1.0));
}

double coefficient_distance(std::span<const double> c1, std::span<const double> c2) {
    if (c1.size() != c2.size())
        throw ShapeError("coefficient_distance: dimensions " + std::to_string(c1.size()) + " and " +
                         std::to_string(c2.size()));
    double s = 0;
    for (std::size_t i = 0; i < c1.size(); ++i) s += (c1[i] - c2[i]) * (c1[i] - c2[i]);
    return std::sqrt(s);
}

AttributeEstimate attributes_from_factors(const FaceFactors& f) {
    AttributeEstimate a;
    a.euler = f.pose;
    a.pose = euler_to_quaternion(f.pose.yaw, f.pose.pitch, f.pose.roll);
    a.gaze_angles = f.gaze;
    a.gaze = gaze_direction(f.gaze.yaw, f.gaze.pitch);
    const auto g = identity_geometry(f.identity_vec);
    a.shape.assign(g.begin(), g.end());
    a.expression.assign(f.expression.begin(), f.expression.end());
    return a;
}

// ---- attribute probe ----

namespace {

constexpr double kIdentityScale = 2.5;

AttributeEstimate decode(const float* out, std::size_t stride) {
    auto at = [&](int k) { return static_cast<double>(out[k * stride]); };
    AttributeEstimate a;
    a.euler = {at(0) * kPoseLimit, at(1) * kPoseLimit, at(2) * kPoseLimit};
    a.pose = euler_to_quaternion(a.euler.yaw, a.euler.pitch, a.euler.roll);
    a.gaze_angles = {at(3) * kGazeLimit, at(4) * kGazeLimit};
    a.gaze = gaze_direction(a.gaze_angles.yaw, a.gaze_angles.pitch);
    for (int k = 0; k < kExpressionDim; ++k) a.expression.push_back(at(5 + k));
    std::array<double, kIdentityDim> id{};
    for (int k = 0; k < kIdentityDim; ++k) id[k] = at(5 + kExpressionDim + k) / kIdentityScale;
    const auto g = identity_geometry(id);
    a.shape.assign(g.begin(), g.end());
    return a;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

double quantile(std::vector<double> v, double q) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    return v[std::min(v.size() - 1, static_cast<std::size_t>(q * static_cast<double>(v.size())))];
}

}  // namespace

std::array<float, AttributeProbe::kOutputs> probe_targets(const FaceFactors& f) {
    std::array<float, AttributeProbe::kOutputs> t{};
    t[0] = static_cast<float>(f.pose.yaw / kPoseLimit);
    t[1] = static_cast<float>(f.pose.pitch / kPoseLimit);
    t[2] = static_cast<float>(f.pose.roll / kPoseLimit);
    t[3] = static_cast<float>(f.gaze.yaw / kGazeLimit);
    t[4] = static_cast<float>(f.gaze.pitch / kGazeLimit);
    for (int k = 0; k < kExpressionDim; ++k) t[5 + k] = static_cast<float>(f.expression[k]);
    for (int k = 0; k < kIdentityDim; ++k)
        t[5 + kExpressionDim + k] = static_cast<float>(f.identity_vec[k] * kIdentityScale);
    return t;
}

void to_json(nlohmann::json& j, const ProbeConfig& c) {
    j = nlohmann::json{{"input_size", c.input_size},   {"widths", c.widths},
                       {"convs_per_stage", c.convs_per_stage}, {"hidden", c.hidden},           {"steps", c.steps},
                       {"batch", c.batch},             {"lr", c.lr},
                       {"weight_decay", c.weight_decay}, {"train_images", c.train_images},
                       {"held_out_images", c.held_out_images}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
    ProbeConfig d;
    d.input_size = j.value("input_size", d.input_size);
    d.widths = j.value("widths", d.widths);
    d.convs_per_stage = j.value("convs_per_stage", d.convs_per_stage);
    d.hidden = j.value("hidden", d.hidden);
    d.steps = j.value("steps", d.steps);
    d.batch = j.value("batch", d.batch);
    d.lr = j.value("lr", d.lr);
    d.weight_decay = j.value("weight_decay", d.weight_decay);
    d.train_images = j.value("train_images", d.train_images);
    d.held_out_images = j.value("held_out_images", d.held_out_images);
    d.seed = j.value("seed", d.seed);
    c = d;
}

void to_json(nlohmann::json& j, const ProbeValidation& v) {
    j = nlohmann::json{{"pose_median", v.pose_median},
                       {"gaze_median", v.gaze_median},
                       {"shape_median", v.shape_median},
                       {"expression_median", v.expression_median},
                       {"pose_p90", v.pose_p90}};
}

void from_json(const nlohmann::json& j, ProbeValidation& v) {
    v.pose_median = j.value("pose_median", 0.0);
    v.gaze_median = j.value("gaze_median", 0.0);
    v.shape_median = j.value("shape_median", 0.0);
    v.expression_median = j.value("expression_median", 0.0);
    v.pose_p90 = j.value("pose_p90", 0.0);
}

AttributeProbe::AttributeProbe(const ProbeConfig& cfg) : cfg_(cfg) {
    const int stages = static_cast<int>(cfg.widths.size());
    if (stages < 1 || cfg.input_size % (1 << stages) || cfg.hidden < 1 || cfg.convs_per_stage < 1)
        throw std::invalid_argument("probe config: input_size must divide by 2^stages");
    Rng rng(cfg.seed, {0xa7});
    int prev = 3;
    for (int s = 0; s < stages; ++s)
        for (int k = 0; k < cfg.convs_per_stage; ++k) {
            convs_.emplace_back(store_, rng, "probe.stage" + std::to_string(s) + ".conv" + std::to_string(k), prev,
                                cfg.widths[s], 3);
            prev = cfg.widths[s];
        }
    const int side = cfg.input_size >> stages;
    fc1_ = Conv<float>(store_, rng, "probe.fc1", prev * side * side, cfg.hidden, 1);
    fc2_ = Conv<float>(store_, rng, "probe.fc2", cfg.hidden, kOutputs, 1);
}

AttributeProbe::Var AttributeProbe::forward(Tape<float>& tp, Var images) const {
    const Shape s = images->shape();
    if (s.c != 3 || s.h != cfg_.input_size || s.w != cfg_.input_size)
        throw ShapeError("attribute probe: unexpected input " + s.str());
    Var h = images;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        h = tp.silu(convs_[i](tp, h));
        if ((i + 1) % static_cast<std::size_t>(cfg_.convs_per_stage) == 0) h = tp.avgpool2x(h);
    }
    return fc2_(tp, tp.silu(fc1_(tp, tp.flatten(h))));
}

namespace {

struct ProbeData {
    Tensor<float> images;
    std::vector<FaceFactors> factors;
};

ProbeData render_probe_data(std::uint64_t seed, std::uint64_t stream, int count, int size) {
    ProbeData d;
    std::vector<Image> imgs;
    Rng rng(seed, {0xa8, stream});
    for (int i = 0; i < count; ++i) {
        // Every render gets a fresh identity so shape is never memorized per id.
        const std::uint64_t id = rng.next_u64() >> 16;
        FaceFactors f = with_attributes(sample_identity(seed ^ 0xa8a8, id), sample_attributes(rng));
        imgs.push_back(render(f, size));
        d.factors.push_back(f);
    }
    d.images = images_to_tensor<float>(imgs);
    return d;
}

Tensor<float> gather_samples(const Tensor<float>& all, std::span<const std::size_t> idx) {
    Shape s = all.shape;
    s.n = static_cast<int>(idx.size());
    Tensor<float> out(s);
    const std::size_t sp = s.spatial();
    for (int c = 0; c < s.c; ++c)
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(all.data.begin() + c * all.shape.cols() + idx[i] * sp, sp,
                        out.data.begin() + c * s.cols() + i * sp);
    return out;
}

std::vector<AttributeEstimate> run_probe(const AttributeProbe& probe, const Tensor<float>& images) {
    std::vector<AttributeEstimate> out;
    const std::size_t n = static_cast<std::size_t>(images.shape.n);
    for (std::size_t start = 0; start < n; start += 256) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n, start + 256); ++i) idx.push_back(i);
        const Tensor<float> x = idx.size() == n ? images : gather_samples(images, idx);
        Tape<float> tp(false);
        const auto& y = probe.forward(tp, tp.constant_ref(x))->val();
        for (std::size_t i = 0; i < idx.size(); ++i) out.push_back(decode(&y.data[i], idx.size()));
    }
    return out;
}

}  // namespace

std::unique_ptr<AttributeProbe> train_attribute_probe(const ProbeConfig& cfg) {
    if (cfg.train_images < 1 || cfg.batch < 1 || cfg.steps < 0)
        throw std::invalid_argument("probe config: bad sizes");
    auto probe = std::make_unique<AttributeProbe>(cfg);
    const ProbeData train = render_probe_data(cfg.seed, 0, cfg.train_images, cfg.input_size);
    Tensor<float> targets(Shape{AttributeProbe::kOutputs, cfg.train_images, 1, 1});
    for (int i = 0; i < cfg.train_images; ++i) {
        const auto t = probe_targets(train.factors[static_cast<std::size_t>(i)]);
        for (int k = 0; k < AttributeProbe::kOutputs; ++k) targets.data[k * cfg.train_images + i] = t[k];
    }

    AdamW<float> opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    Rng rng(cfg.seed, {0xa9});
    std::vector<std::size_t> batch(static_cast<std::size_t>(cfg.batch));
    for (int step = 0; step < cfg.steps; ++step) {
        for (auto& b : batch) b = static_cast<std::size_t>(rng.integer(0, cfg.train_images));
        const Tensor<float> x = gather_samples(train.images, batch);
        const Tensor<float> y = gather_samples(targets, batch);
        Tape<float> tp;
        auto loss = tp.mse(probe->forward(tp, tp.constant_ref(x)), tp.constant_ref(y));
        probe->store().zero_grad();
        tp.backward(loss);
        opt.set_lr(cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / cfg.steps)));
        opt.step(probe->store());
    }
    probe->store().zero_grad();
    probe->trained = true;

    if (cfg.held_out_images > 0) {
        const ProbeData held = render_probe_data(cfg.seed, 1, cfg.held_out_images, cfg.input_size);
        const auto est = run_probe(*probe, held.images);
        std::vector<double> pose, gaze, shape, expr;
        for (std::size_t i = 0; i < est.size(); ++i) {
            const auto truth = attributes_from_factors(held.factors[i]);
            pose.push_back(quaternion_distance(est[i].pose, truth.pose));
            gaze.push_back(gaze_distance(est[i].gaze, truth.gaze));
            shape.push_back(coefficient_distance(est[i].shape, truth.shape));
            expr.push_back(coefficient_distance(est[i].expression, truth.expression));
        }
        probe->validation = {median(pose), median(gaze), median(shape), median(expr), quantile(pose, 0.9)};
    }
    return probe;
}

std::vector<AttributeEstimate> estimate_attributes(const AttributeProbe& probe, const Tensor<float>& images) {
    if (!probe.trained) throw UntrainedProbe("estimate_attributes: the attribute probe has not been trained");
    return run_probe(probe, images);
}

AttributeEstimate estimate_attributes(const AttributeProbe& probe, const Image& image) {
    return estimate_attributes(probe, image_to_tensor<float>(image)).front();
}

std::vector<AttributeEstimate> estimate_attributes(const AttributeProbe& probe, std::span<const Image> images) {
    return estimate_attributes(probe, images_to_tensor<float>(images));
}

void save_probe(const AttributeProbe& p, const std::filesystem::path& dir) {
    TensorArchive a;
    for (const auto& prm : p.store().all()) a.put(prm.name, prm.value);
    a.metadata() = nlohmann::json{{"kind", "attribute_probe"},
                                  {"config", p.config()},
                                  {"trained", p.trained},
                                  {"validation", p.validation}};
    a.save(dir);
}

std::unique_ptr<AttributeProbe> load_probe(const std::filesystem::path& dir) {
    const TensorArchive a = TensorArchive::load(dir);
    const auto& m = a.metadata();
    if (m.value("kind", "") != "attribute_probe")
        throw ArchiveError("archive in " + dir.string() + " is not an attribute probe");
    auto p = std::make_unique<AttributeProbe>(m.at("config").get<ProbeConfig>());
    for (auto& prm : p->store().all()) {
        Tensor<float> t = a.get<float>(prm.name);
        require_same(t.shape, prm.value.shape, "load_probe");
        prm.value = std::move(t);
    }
    p->trained = m.value("trained", false);
    p->validation = m.at("validation").get<ProbeValidation>();
    return p;
}

// ---- re-identification ----

ReidResult reid(const std::vector<ImageEmbedding>& generated, const std::vector<ImageEmbedding>& originals,
                std::span<const std::size_t> origin_of) {
    if (generated.empty() || originals.empty()) throw std::invalid_argument("reid_rate: empty input");
    if (origin_of.size() != generated.size()) throw std::invalid_argument("reid_rate: origin_of must cover every generated item");
    std::vector<double> onorm(originals.size());
    for (std::size_t j = 0; j < originals.size(); ++j) {
        double s = 0;
        for (float v : originals[j]) s += static_cast<double>(v) * v;
        onorm[j] = std::sqrt(s);
    }
    ReidResult r;
    r.count = generated.size();
    for (std::size_t i = 0; i < generated.size(); ++i) {
        if (origin_of[i] >= originals.size()) throw std::out_of_range("reid_rate: origin index out of range");
        const auto& g = generated[i];
        double gn = 0;
        for (float v : g) gn += static_cast<double>(v) * v;
        gn = std::sqrt(gn);
        std::size_t best = 0;
        double best_sim = -std::numeric_limits<double>::infinity();
        bool tied = false;
        for (std::size_t j = 0; j < originals.size(); ++j) {
            const auto& o = originals[j];
            if (o.size() != g.size()) throw ShapeError("reid_rate: embedding dimension mismatch");
            double dot = 0;
            for (std::size_t k = 0; k < g.size(); ++k) dot += static_cast<double>(g[k]) * o[k];
            const double sim = gn > 0 && onorm[j] > 0 ? dot / (gn * onorm[j]) : 0.0;
            if (sim > best_sim) {
                best_sim = sim;
                best = j;
                tied = false;
            } else if (sim == best_sim) {
                tied = true;
            }
        }
        r.nearest.push_back(best);
        r.ties += tied;
        r.hits += best == origin_of[i];
    }
    r.rate = static_cast<double>(r.hits) / static_cast<double>(r.count);
    return r;
}

double reid_rate(const std::vector<ImageEmbedding>& generated, const std::vector<ImageEmbedding>& originals,
                 std::span<const std::size_t> origin_of) {
    return reid(generated, originals, origin_of).rate;
}

// ---- face validity ----

ValidityScore face_validity_score(const Image& img) {
    const int h = img.height, w = img.width, ch = img.channels;
    ValidityScore out;
    if (h < 8 || w < 8) return out;
    // Foreground strength: colour distance to the row's border background.
    std::vector<double> f(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        std::vector<double> bg(static_cast<std::size_t>(ch), 0.0);
        for (int x : {0, 1, w - 2, w - 1})
            for (int c = 0; c < ch; ++c) bg[c] += img.at(y, x, c) / 4.0;
        for (int x = 0; x < w; ++x) {
            double s = 0;
            for (int c = 0; c < ch; ++c) s += (img.at(y, x, c) - bg[c]) * (img.at(y, x, c) - bg[c]);
            f[static_cast<std::size_t>(y) * w + x] = std::sqrt(s);
        }
    }
    const double n = static_cast<double>(f.size());
    double sum = 0, sq = 0;
    for (double v : f) {
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double sd = std::sqrt(std::max(0.0, sq / n - mean * mean));
    if (sd < 1e-9) return out;

    out.correlation = -1;
    static constexpr double kCentres[] = {-0.3, -0.15, 0.0, 0.15, 0.3};
    static constexpr double kRx[] = {0.3, 0.4, 0.5, 0.6};
    static constexpr double kRy[] = {0.4, 0.5, 0.6, 0.7};
    for (double cy : kCentres)
        for (double cx : kCentres)
            for (double rx : kRx)
                for (double ry : kRy) {
                    double in_sum = 0;
                    std::size_t k = 0;
                    for (int y = 0; y < h; ++y) {
                        const double v = static_cast<double>(2 * y + 1 - h) / h;
                        for (int x = 0; x < w; ++x) {
                            const double u = static_cast<double>(2 * x + 1 - w) / w;
                            const double a = (u - cx) / rx, b = (v - cy) / ry;
                            if (a * a + b * b <= 1.0) {
                                in_sum += f[static_cast<std::size_t>(y) * w + x];
                                ++k;
                            }
                        }
                    }
                    if (k == 0 || k == f.size()) continue;
                    const double p = static_cast<double>(k) / n;
                    const double mean_in = in_sum / static_cast<double>(k);
                    const double mean_out = (sum - in_sum) / (n - static_cast<double>(k));
                    const double corr = p * (mean_in - mean) / (sd * std::sqrt(p * (1 - p)));
                    if (corr > out.correlation) {
                        out.correlation = corr;
                        out.contrast = mean_in - mean_out;
                    }
                }
    out.valid = out.correlation >= kValidityCorrelation && out.contrast >= kValidityContrast;
    return out;
}

bool face_validity(const Image& image) { return face_validity_score(image).valid; }

// ---- reports ----

void to_json(nlohmann::json& j, const EvalMeans& m) {
    j = nlohmann::json{{"reid_rate", m.reid_rate},   {"id_dist", m.id_dist},       {"shape_dist", m.shape_dist},
                       {"pose_dist", m.pose_dist},   {"gaze_dist", m.gaze_dist},   {"expr_dist", m.expr_dist},
                       {"validity_rate", m.validity_rate}};
}

EvalMeans mean_of(std::span<const EvalRecord> records) {
    EvalMeans m;
    if (records.empty()) return m;
    for (const auto& r : records) {
        m.reid_rate += r.reid_hit;
        m.id_dist += r.id_dist;
        m.shape_dist += r.shape_dist;
        m.pose_dist += r.pose_dist;
        m.gaze_dist += r.gaze_dist;
        m.expr_dist += r.expr_dist;
        m.validity_rate += r.face_valid;
    }
    const double n = static_cast<double>(records.size());
    m.reid_rate /= n;
    m.id_dist /= n;
    m.shape_dist /= n;
    m.pose_dist /= n;
    m.gaze_dist /= n;
    m.expr_dist /= n;
    m.validity_rate /= n;
    return m;
}

namespace {

std::vector<ImageEmbedding> embed_all(const Recognizer& r, std::span<const Image> images) {
    std::vector<ImageEmbedding> out;
    for (std::size_t start = 0; start < images.size(); start += 256) {
        const auto chunk = images.subspan(start, std::min<std::size_t>(256, images.size() - start));
        const Tensor<float> z = embed_batch(r, images_to_tensor<float>(chunk));
        const std::size_t n = chunk.size();
        for (std::size_t i = 0; i < n; ++i) {
            ImageEmbedding e(static_cast<std::size_t>(z.shape.c));
            for (int k = 0; k < z.shape.c; ++k) e[k] = z.data[k * n + i];
            out.push_back(std::move(e));
        }
    }
    return out;
}

}  // namespace

EvalReport evaluate(const Recognizer& evaluator, const AttributeProbe& probe, std::span<const Image> originals,
                    std::span<const Image> generated, std::span<const std::size_t> origin_of,
                    const nlohmann::json& config) {
    if (generated.size() != origin_of.size()) throw std::invalid_argument("evaluate: origin_of size mismatch");
    EvalReport rep;
    rep.config = config;
    if (generated.empty()) return rep;
    const auto z_orig = embed_all(evaluator, originals);
    const auto z_gen = embed_all(evaluator, generated);
    const ReidResult rr = reid(z_gen, z_orig, origin_of);
    rep.reid_ties = rr.ties;
    const auto a_orig = estimate_attributes(probe, originals);
    const auto a_gen = estimate_attributes(probe, generated);
    for (std::size_t i = 0; i < generated.size(); ++i) {
        const std::size_t o = origin_of[i];
        EvalRecord r;
        r.index = i;
        r.origin = o;
        r.reid_hit = rr.nearest[i] == o;
        r.id_dist = identity_distance(std::span<const float>(z_gen[i]), std::span<const float>(z_orig[o]));
        r.shape_dist = coefficient_distance(a_gen[i].shape, a_orig[o].shape);
        r.pose_dist = quaternion_distance(a_gen[i].pose, a_orig[o].pose);
        r.gaze_dist = gaze_distance(a_gen[i].gaze, a_orig[o].gaze);
        r.expr_dist = coefficient_distance(a_gen[i].expression, a_orig[o].expression);
        r.face_valid = face_validity(generated[i]);
        rep.records.push_back(r);
    }
    rep.means = mean_of(rep.records);
    return rep;
}

std::string config_hash(const nlohmann::json& config) { return sha256_hex(config.dump()); }

void write_eval_report(const EvalReport& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string csv = "index,origin,reid_hit,id_dist,shape_dist,pose_dist,gaze_dist,expr_dist,face_valid\n";
    char buf[256];
    for (const auto& e : r.records) {
        std::snprintf(buf, sizeof(buf), "%zu,%zu,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n", e.index, e.origin,
                      e.reid_hit ? 1 : 0, e.id_dist, e.shape_dist, e.pose_dist, e.gaze_dist, e.expr_dist,
                      e.face_valid ? 1 : 0);
        csv += buf;
    }
    write_text_file(dir / "records.csv", csv);
    const nlohmann::json summary{{"means", r.means},
                                 {"spearman_rho", nullptr},
                                 {"count", r.records.size()},
                                 {"reid_ties", r.reid_ties},
                                 {"config", r.config},
                                 {"config_hash", config_hash(r.config)}};
    write_text_file(dir / "summary.json", summary.dump(1) + "\n");
}

}  // namespace anonydiff
