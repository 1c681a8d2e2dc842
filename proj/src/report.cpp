#include "anonydiff/report.hpp"

#include "anonydiff/archive.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace anonydiff {

namespace {

std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

std::vector<Image> generate_chunked(const ModelBundle& b, const std::vector<Image>& images,
                                    const std::vector<std::uint64_t>& seeds, double d, Ablation ablation,
                                    const SamplerConfig& sampler) {
    constexpr std::size_t kChunk = 32;
    std::vector<Image> out;
    for (std::size_t start = 0; start < images.size(); start += kChunk) {
        const std::size_t end = std::min(images.size(), start + kChunk);
        const std::vector<Image> imgs(images.begin() + start, images.begin() + end);
        const std::vector<std::uint64_t> sd(seeds.begin() + start, seeds.begin() + end);
        auto part = anonymize_batch(imgs, d, ablation, sd, sampler, *b.nets, *b.encoder, b.schedule);
        for (auto& im : part) out.push_back(std::move(im));
    }
    return out;
}

void require_full(const ModelBundle& b, const char* what) {
    if (!b.nets || !b.encoder || !b.evaluator || !b.probe)
        throw std::invalid_argument(std::string(what) + ": bundle needs networks, encoder, evaluator and probe");
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

std::optional<double> spearman_rho(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("spearman_rho: length mismatch");
    if (x.size() < 2) return std::nullopt;
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

SweepReport sweep_report(const ModelBundle& bundle, std::span<const double> d_values,
                         const std::vector<Image>& identities, std::span<const std::uint64_t> seeds,
                         const SamplerConfig& sampler, Ablation ablation, const nlohmann::json& config) {
    require_full(bundle, "sweep_report");
    if (d_values.empty() || identities.empty() || seeds.empty())
        throw std::invalid_argument("sweep_report: d values, identities and seeds must be non-empty");
    SweepReport rep;
    rep.config = config;
    std::vector<Image> inputs;
    std::vector<std::uint64_t> sample_seeds;
    std::vector<std::size_t> origin;
    for (std::size_t i = 0; i < identities.size(); ++i)
        for (std::uint64_t s : seeds) {
            inputs.push_back(identities[i]);
            sample_seeds.push_back(s);
            origin.push_back(i);
        }
    std::vector<double> means;
    for (double d : d_values) {
        const auto gen = generate_chunked(bundle, inputs, sample_seeds, d, ablation, sampler);
        const EvalReport ev = evaluate(*bundle.evaluator, *bundle.probe, identities, gen, origin);
        for (const auto& r : ev.records)
            rep.rows.push_back({d, r.origin, sample_seeds[r.index], r.id_dist, r.shape_dist, r.pose_dist, r.gaze_dist,
                                r.expr_dist, r.face_valid});
        rep.levels.push_back({d, ev.records.size(), ev.means});
        means.push_back(ev.means.id_dist);
    }
    rep.spearman_rho = spearman_rho(d_values, means);
    return rep;
}

void write_sweep_report(const SweepReport& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string csv = "d,identity,seed,id_dist,shape_dist,pose_dist,gaze_dist,expr_dist,face_valid\n";
    for (const auto& row : r.rows)
        csv += fmt(row.d) + ',' + std::to_string(row.identity) + ',' + std::to_string(row.seed) + ',' +
               fmt(row.id_dist) + ',' + fmt(row.shape_dist) + ',' + fmt(row.pose_dist) + ',' + fmt(row.gaze_dist) +
               ',' + fmt(row.expr_dist) + ',' + (row.face_valid ? "1" : "0") + '\n';
    write_text_file(dir / "sweep.csv", csv);
    nlohmann::json levels = nlohmann::json::array();
    for (const auto& l : r.levels) levels.push_back({{"d", l.d}, {"count", l.count}, {"means", l.means}});
    nlohmann::json summary{{"levels", levels},
                           {"spearman_rho", r.spearman_rho ? nlohmann::json(*r.spearman_rho) : nlohmann::json()},
                           {"config", r.config},
                           {"config_hash", config_hash(r.config)}};
    write_text_file(dir / "sweep_summary.json", summary.dump(1) + "\n");
}

const AblationRow& AblationGrid::row(Ablation a) const {
    for (const auto& r : rows)
        if (r.ablation == a) return r;
    throw std::out_of_range("ablation grid has no row " + to_string(a));
}

bool AblationGrid::full_is_best() const {
    const auto& full = row(Ablation::full).report.means;
    for (const auto& r : rows) {
        if (r.ablation == Ablation::full) continue;
        if (full.reid_rate > r.report.means.reid_rate) return false;
        if (full.shape_dist < r.report.means.shape_dist) return false;
    }
    return true;
}

AblationGrid ablation_grid(const ModelBundle& bundle, const std::vector<Image>& images,
                           std::span<const std::uint64_t> seeds, double d, const SamplerConfig& sampler,
                           std::span<const Ablation> ablations, const nlohmann::json& config) {
    require_full(bundle, "ablation_grid");
    if (images.empty() || seeds.empty()) throw std::invalid_argument("ablation_grid: images and seeds must be non-empty");
    AblationGrid g;
    g.d = d;
    g.config = config;
    std::vector<Image> inputs;
    std::vector<std::uint64_t> sample_seeds;
    std::vector<std::size_t> origin;
    for (std::size_t i = 0; i < images.size(); ++i)
        for (std::uint64_t s : seeds) {
            inputs.push_back(images[i]);
            sample_seeds.push_back(s);
            origin.push_back(i);
        }
    for (Ablation a : ablations) {
        const auto gen = generate_chunked(bundle, inputs, sample_seeds, d, a, sampler);
        AblationRow row;
        row.ablation = a;
        row.report = evaluate(*bundle.evaluator, *bundle.probe, images, gen, origin, config);
        g.rows.push_back(std::move(row));
    }
    return g;
}

void write_ablation_grid(const AblationGrid& g, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string csv = "ablation,reid_rate,id_dist,shape_dist,pose_dist,gaze_dist,expr_dist,validity_rate\n";
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : g.rows) {
        const auto& m = r.report.means;
        csv += to_string(r.ablation) + ',' + fmt(m.reid_rate) + ',' + fmt(m.id_dist) + ',' + fmt(m.shape_dist) + ',' +
               fmt(m.pose_dist) + ',' + fmt(m.gaze_dist) + ',' + fmt(m.expr_dist) + ',' + fmt(m.validity_rate) + '\n';
        rows.push_back({{"ablation", to_string(r.ablation)},
                        {"count", r.report.records.size()},
                        {"reid_ties", r.report.reid_ties},
                        {"means", m}});
    }
    write_text_file(dir / "ablation.csv", csv);
    nlohmann::json summary{{"d", g.d},
                           {"rows", rows},
                           {"full_is_best", g.full_is_best()},
                           {"config", g.config},
                           {"config_hash", config_hash(g.config)}};
    write_text_file(dir / "ablation_summary.json", summary.dump(1) + "\n");
}

}  // namespace anonydiff
