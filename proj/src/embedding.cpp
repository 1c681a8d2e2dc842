#include "anonydiff/embedding.hpp"

#include "anonydiff/archive.hpp"
#include "anonydiff/optim.hpp"
#include "anonydiff/synthetic_faces.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace anonydiff {

void validate(const RecognizerConfig& c) {
    auto fail = [](const std::string& m) { throw std::invalid_argument("recognizer config: " + m); };
    if (c.widths.size() < 2) fail("need at least two stages");
    for (int w : c.widths)
        if (w <= 0) fail("widths must be positive");
    const int stages = static_cast<int>(c.widths.size());
    if (c.token_stage < 0 || c.token_stage >= stages - 1) fail("token_stage must precede the last stage");
    if (c.input_size <= 0 || c.input_size % (1 << (stages - 1))) fail("input_size must divide by 2^(stages-1)");
    if (c.convs_per_stage < 1 || c.embed_dim < 1 || c.channels < 1) fail("sizes must be positive");
    if (c.steps < 0 || c.batch < 1 || !(c.lr > 0)) fail("bad optimizer settings");
    if (!(c.held_out_fraction >= 0 && c.held_out_fraction < 1)) fail("held_out_fraction must be in [0, 1)");
}

void to_json(nlohmann::json& j, const RecognizerConfig& c) {
    j = nlohmann::json{{"input_size", c.input_size},
                       {"channels", c.channels},
                       {"widths", c.widths},
                       {"convs_per_stage", c.convs_per_stage},
                       {"token_stage", c.token_stage},
                       {"embed_dim", c.embed_dim},
                       {"classifier_scale", c.classifier_scale},
                       {"steps", c.steps},
                       {"batch", c.batch},
                       {"lr", c.lr},
                       {"weight_decay", c.weight_decay},
                       {"held_out_fraction", c.held_out_fraction},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RecognizerConfig& c) {
    RecognizerConfig d;
    d.input_size = j.value("input_size", d.input_size);
    d.channels = j.value("channels", d.channels);
    d.widths = j.value("widths", d.widths);
    d.convs_per_stage = j.value("convs_per_stage", d.convs_per_stage);
    d.token_stage = j.value("token_stage", d.token_stage);
    d.embed_dim = j.value("embed_dim", d.embed_dim);
    d.classifier_scale = j.value("classifier_scale", d.classifier_scale);
    d.steps = j.value("steps", d.steps);
    d.batch = j.value("batch", d.batch);
    d.lr = j.value("lr", d.lr);
    d.weight_decay = j.value("weight_decay", d.weight_decay);
    d.held_out_fraction = j.value("held_out_fraction", d.held_out_fraction);
    d.seed = j.value("seed", d.seed);
    c = d;
}

RecognizerConfig conditioning_encoder_preset() {
    RecognizerConfig c;
    c.seed = 11;
    return c;
}

RecognizerConfig evaluator_preset() {
    RecognizerConfig c;
    c.widths = {12, 24, 48};
    c.embed_dim = 48;
    c.seed = 29;
    return c;
}

LabeledImages render_identity_pool(std::uint64_t seed, std::uint64_t first_id, int n_ids, int per_id, int size) {
    LabeledImages out;
    for (int i = 0; i < n_ids; ++i) {
        const std::uint64_t id = first_id + static_cast<std::uint64_t>(i);
        const FaceFactors base = sample_identity(seed, id);
        Rng rng(seed, {0x9e, id});
        for (int j = 0; j < per_id; ++j) {
            out.images.push_back(render(with_attributes(base, sample_attributes(rng)), size));
            out.identities.push_back(id);
        }
    }
    return out;
}

Recognizer::Recognizer(const RecognizerConfig& cfg, int class_count) : cfg_(cfg), class_count_(class_count) {
    validate(cfg);
    Rng rng(cfg.seed, {0xe0});
    int prev = cfg.channels;
    for (std::size_t s = 0; s < cfg.widths.size(); ++s)
        for (int k = 0; k < cfg.convs_per_stage; ++k) {
            convs_.emplace_back(store_, rng, "rec.stage" + std::to_string(s) + ".conv" + std::to_string(k), prev,
                                cfg.widths[s], 3);
            prev = cfg.widths[s];
        }
    head_ = Conv<float>(store_, rng, "rec.head", prev, cfg.embed_dim, 1);
    if (class_count > 0) classifier_ = Conv<float>(store_, rng, "rec.classifier", cfg.embed_dim, class_count, 1, 1, false);
}

Recognizer::Var Recognizer::forward(Tape<float>& tp, Var images, Var* tokens) const {
    const Shape s = images->shape();
    if (s.c != cfg_.channels || s.h != cfg_.input_size || s.w != cfg_.input_size)
        throw ShapeError("recognizer: input " + s.str() + " does not match " + std::to_string(cfg_.input_size) + "x" +
                         std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.channels));
    Var h = images;
    const int stages = static_cast<int>(cfg_.widths.size());
    std::size_t c = 0;
    for (int st = 0; st < stages; ++st) {
        for (int k = 0; k < cfg_.convs_per_stage; ++k) h = tp.silu(convs_[c++](tp, h));
        if (st + 1 < stages) h = tp.avgpool2x(h);
        if (st == cfg_.token_stage && tokens) *tokens = h;
    }
    return tp.l2_normalize(head_(tp, tp.global_avg_pool(h)));
}

Recognizer::Var Recognizer::logits(Tape<float>& tp, Var embeddings) const {
    if (!classifier_.weight) throw std::logic_error("recognizer has no classifier head");
    return tp.scale(classifier_(tp, embeddings), static_cast<float>(cfg_.classifier_scale));
}

namespace {

Tensor<float> gather(const Tensor<float>& all, const std::vector<std::size_t>& idx) {
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

}  // namespace

std::unique_ptr<Recognizer> train_recognizer(const LabeledImages& data, const RecognizerConfig& cfg) {
    validate(cfg);
    if (data.images.size() != data.identities.size()) throw std::invalid_argument("train_recognizer: label count");
    std::map<std::uint64_t, std::vector<std::size_t>> by_id;
    for (std::size_t i = 0; i < data.identities.size(); ++i) by_id[data.identities[i]].push_back(i);
    std::size_t eligible = 0;
    for (const auto& [id, v] : by_id) eligible += v.size() >= 2;
    if (eligible < 2) throw InsufficientData("train_recognizer: need at least 2 identities with at least 2 images each");

    std::vector<std::size_t> train_idx, held_idx;
    std::vector<int> label_of(data.images.size(), -1);
    int cls = 0;
    for (const auto& [id, v] : by_id) {
        std::size_t held = 0;
        if (v.size() >= 2)
            held = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.held_out_fraction * v.size()));
        if (cfg.held_out_fraction == 0) held = 0;
        for (std::size_t k = 0; k < v.size(); ++k) {
            label_of[v[k]] = cls;
            (k + held < v.size() ? train_idx : held_idx).push_back(v[k]);
        }
        ++cls;
    }

    auto r = std::make_unique<Recognizer>(cfg, cls);
    const Tensor<float> all = images_to_tensor<float>(data.images);
    AdamW<float> opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    Rng rng(cfg.seed, {0xe1});
    std::vector<std::size_t> batch(static_cast<std::size_t>(cfg.batch));
    std::vector<int> labels(batch.size());
    for (int step = 0; step < cfg.steps; ++step) {
        for (std::size_t b = 0; b < batch.size(); ++b) {
            batch[b] = train_idx[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(train_idx.size())))];
            labels[b] = label_of[batch[b]];
        }
        const Tensor<float> x = gather(all, batch);
        Tape<float> tp;
        auto loss = tp.cross_entropy(r->logits(tp, r->forward(tp, tp.constant_ref(x))), labels);
        r->store().zero_grad();
        tp.backward(loss);
        opt.set_lr(cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / cfg.steps)));
        opt.step(r->store());
    }
    r->store().zero_grad();

    if (!held_idx.empty()) {
        std::size_t hits = 0;
        for (std::size_t start = 0; start < held_idx.size(); start += 256) {
            std::vector<std::size_t> chunk(held_idx.begin() + start,
                                           held_idx.begin() + std::min(held_idx.size(), start + 256));
            const Tensor<float> x = gather(all, chunk);
            Tape<float> tp(false);
            const auto& lg = r->logits(tp, r->forward(tp, tp.constant_ref(x)))->val();
            for (std::size_t i = 0; i < chunk.size(); ++i) {
                int best = 0;
                for (int k = 1; k < cls; ++k)
                    if (lg.data[k * chunk.size() + i] > lg.data[best * chunk.size() + i]) best = k;
                hits += best == label_of[chunk[i]];
            }
        }
        r->accuracy = static_cast<double>(hits) / static_cast<double>(held_idx.size());
    }
    return r;
}

Tensor<float> embed_batch(const Recognizer& r, const Tensor<float>& images) {
    Tape<float> tp(false);
    return r.forward(tp, tp.constant_ref(images))->val();
}

ImageEmbedding embed(const Recognizer& r, const Image& image) {
    const auto e = embed_batch(r, image_to_tensor<float>(image));
    return {e.data.begin(), e.data.end()};
}

Tensor<float> spatial_features(const Recognizer& r, const Tensor<float>& images) {
    Tape<float> tp(false);
    Recognizer::Var tokens = nullptr;
    r.forward(tp, tp.constant_ref(images), &tokens);
    return tokens->val();
}

Tensor<float> spatial_features(const Recognizer& r, const Image& image) {
    return spatial_features(r, image_to_tensor<float>(image));
}

namespace {

template <class T>
double unit_distance(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw ShapeError("identity_distance: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (std::abs(std::sqrt(na) - 1.0) > 1e-3 || std::abs(std::sqrt(nb) - 1.0) > 1e-3)
        throw std::invalid_argument("identity_distance: inputs must be unit vectors");
    return std::clamp(1.0 - dot, 0.0, 2.0);
}

}  // namespace

double identity_distance(std::span<const float> z1, std::span<const float> z2) { return unit_distance(z1, z2); }
double identity_distance(std::span<const double> z1, std::span<const double> z2) { return unit_distance(z1, z2); }

void save_recognizer(const Recognizer& r, const std::filesystem::path& dir) {
    TensorArchive a;
    for (const auto& p : r.store().all()) a.put(p.name, p.value);
    nlohmann::json sidecar{{"input_hw", {r.config().input_size, r.config().input_size}},
                           {"D", r.embed_dim()},
                           {"class_count", r.class_count()},
                           {"seed", r.config().seed},
                           {"accuracy", r.accuracy},
                           {"config", r.config()}};
    a.metadata() = sidecar;
    a.save(dir);
    write_text_file(dir / "recognizer.json", sidecar.dump(1) + "\n");
}

std::unique_ptr<Recognizer> load_recognizer(const std::filesystem::path& dir) {
    TensorArchive a = TensorArchive::load(dir);
    const auto& m = a.metadata();
    if (!m.contains("config")) throw ArchiveError("recognizer archive in " + dir.string() + " lacks its config");
    auto r = std::make_unique<Recognizer>(m.at("config").get<RecognizerConfig>(), m.at("class_count").get<int>());
    for (auto& p : r->store().all()) {
        Tensor<float> t = a.get<float>(p.name);
        require_same(t.shape, p.value.shape, "load_recognizer");
        p.value = std::move(t);
    }
    r->accuracy = m.value("accuracy", 0.0);
    return r;
}

}  // namespace anonydiff
