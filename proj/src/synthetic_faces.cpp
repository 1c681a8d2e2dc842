#include "anonydiff/synthetic_faces.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace anonydiff {

namespace {

constexpr std::uint64_t kIdentityTag = 0x1d;
constexpr std::uint64_t kTripletTag = 0x7e;

struct Rgb {
    double r, g, b;
};

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

/// Coverage of a shape from its signed distance (normalized units), with a one
/// pixel wide linear ramp so sub-pixel geometry is visible in intensities.
double coverage(double sdf, double pixel) { return std::clamp(0.5 - sdf / pixel, 0.0, 1.0); }

double ellipse_sdf(double x, double y, double rx, double ry) {
    const double r = std::sqrt((x / rx) * (x / rx) + (y / ry) * (y / ry));
    return (r - 1.0) * std::min(rx, ry);
}

void over(Rgb& dst, const Rgb& src, double alpha) {
    dst.r += (src.r - dst.r) * alpha;
    dst.g += (src.g - dst.g) * alpha;
    dst.b += (src.b - dst.b) * alpha;
}

bool within(double v, double lim) { return std::isfinite(v) && v >= -lim && v <= lim; }

nlohmann::json factors_json(const FaceFactors& f) {
    return {
        {"identity_id", f.identity_id},
        {"identity_vec", f.identity_vec},
        {"pose", {{"yaw", f.pose.yaw}, {"pitch", f.pose.pitch}, {"roll", f.pose.roll}}},
        {"gaze", {{"yaw", f.gaze.yaw}, {"pitch", f.gaze.pitch}}},
        {"expression", f.expression},
        {"background_seed", f.background_seed},
    };
}

FaceFactors factors_from_json(const nlohmann::json& j) {
    FaceFactors f;
    f.identity_id = j.at("identity_id").get<std::uint64_t>();
    f.identity_vec = j.at("identity_vec").get<std::array<double, kIdentityDim>>();
    f.pose = {j.at("pose").at("yaw").get<double>(), j.at("pose").at("pitch").get<double>(),
              j.at("pose").at("roll").get<double>()};
    f.gaze = {j.at("gaze").at("yaw").get<double>(), j.at("gaze").at("pitch").get<double>()};
    f.expression = j.at("expression").get<std::array<double, kExpressionDim>>();
    f.background_seed = j.at("background_seed").get<std::uint64_t>();
    return f;
}

}  // namespace

void validate(const FaceFactors& f) {
    double norm2 = 0;
    for (double v : f.identity_vec) {
        if (!std::isfinite(v)) throw InvalidFactors("identity_vec has a non-finite component");
        norm2 += v * v;
    }
    if (std::abs(std::sqrt(norm2) - 1.0) > 1e-6) throw InvalidFactors("identity_vec is not unit norm");
    if (!within(f.pose.yaw, kPoseLimit) || !within(f.pose.pitch, kPoseLimit) || !within(f.pose.roll, kPoseLimit))
        throw InvalidFactors("pose angle outside [-0.5, 0.5]");
    if (!within(f.gaze.yaw, kGazeLimit) || !within(f.gaze.pitch, kGazeLimit))
        throw InvalidFactors("gaze angle outside [-0.4, 0.4]");
    for (double e : f.expression)
        if (!within(e, 1.0)) throw InvalidFactors("expression component outside [-1, 1]");
}

FaceFactors sample_identity(std::uint64_t seed, std::uint64_t identity_id) {
    Rng rng(seed, {kIdentityTag, identity_id});
    FaceFactors f;
    f.identity_id = identity_id;
    double norm2 = 0;
    for (auto& v : f.identity_vec) {
        v = rng.normal();
        norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& v : f.identity_vec) v *= inv;
    f.background_seed = rng.next_u64();
    return f;
}

Attributes sample_attributes(Rng& rng) {
    Attributes a;
    a.pose = {rng.uniform(-kPoseLimit, kPoseLimit), rng.uniform(-kPoseLimit, kPoseLimit),
              rng.uniform(-kPoseLimit, kPoseLimit)};
    a.gaze = {rng.uniform(-kGazeLimit, kGazeLimit), rng.uniform(-kGazeLimit, kGazeLimit)};
    for (auto& e : a.expression) e = rng.uniform(-1.0, 1.0);
    a.background_seed = rng.next_u64();
    return a;
}

FaceFactors with_attributes(FaceFactors f, const Attributes& a) {
    f.pose = a.pose;
    f.gaze = a.gaze;
    f.expression = a.expression;
    f.background_seed = a.background_seed;
    return f;
}

std::array<double, kIdentityDim> identity_geometry(const std::array<double, kIdentityDim>& k) {
    return {
        0.44 + 0.14 * k[0],   // face half-width
        0.56 + 0.12 * k[1],   // face half-height
        0.75 + 0.28 * k[2],   // skin red
        0.55 + 0.30 * k[3],   // skin green
        0.42 + 0.30 * k[4],   // skin blue
        0.20 + 0.10 * k[5],   // eye half-spacing
        -0.12 + 0.10 * k[6],  // eye height
        0.18 + 0.12 * k[7],   // mouth half-width
    };
}

Image render(const FaceFactors& f, int size) {
    validate(f);
    const auto g = identity_geometry(f.identity_vec);
    const double pixel = 2.0 / size;

    Rng bg_rng(f.background_seed);
    const Rgb top{bg_rng.uniform(0.0, 0.25), bg_rng.uniform(0.05, 0.45), bg_rng.uniform(0.2, 0.7)};
    const Rgb bottom{bg_rng.uniform(0.0, 0.25), bg_rng.uniform(0.05, 0.45), bg_rng.uniform(0.2, 0.7)};

    const Rgb skin{std::clamp(g[2], 0.0, 1.0), std::clamp(g[3], 0.0, 1.0), std::clamp(g[4], 0.0, 1.0)};
    const Rgb nose_col{skin.r * 0.78, skin.g * 0.78, skin.b * 0.78};
    const Rgb eye_white{0.95, 0.95, 0.92};
    const Rgb pupil{0.05, 0.05, 0.12};
    const Rgb brow{0.22, 0.13, 0.08};
    const Rgb lips{0.55, 0.08, 0.14};

    const double cx = 0.45 * f.pose.yaw, cy = 0.45 * f.pose.pitch;
    const double cr = std::cos(f.pose.roll), sr = std::sin(f.pose.roll);
    const double face_rx = g[0] * (1.0 - 0.2 * f.pose.yaw * f.pose.yaw);
    const double face_ry = g[1] * (1.0 - 0.2 * f.pose.pitch * f.pose.pitch);
    // Inner features move further than the outline under rotation.
    const double fdx = 0.30 * f.pose.yaw, fdy = 0.30 * f.pose.pitch;
    const double eye_rx = 0.085, eye_ry = 0.06 * (1.0 + 0.35 * f.expression[3]);
    const double pdx = 0.05 * f.gaze.yaw / kGazeLimit, pdy = 0.035 * f.gaze.pitch / kGazeLimit;
    const double brow_y = g[6] - 0.12 - 0.05 * f.expression[2];
    const double mouth_y = 0.30, mouth_w = g[7];
    const double mouth_th = 0.025 + 0.02 * (f.expression[1] + 1.0);

    Image img(size, size, 3);
    for (int y = 0; y < size; ++y) {
        const double v = static_cast<double>(2 * y + 1 - size) / size;
        const Rgb bg = lerp(top, bottom, (v + 1.0) / 2.0);
        for (int x = 0; x < size; ++x) {
            const double u = static_cast<double>(2 * x + 1 - size) / size;
            Rgb col = bg;
            const double dx = u - cx, dy = v - cy;
            const double fx = cr * dx + sr * dy;
            const double fy = -sr * dx + cr * dy;

            over(col, skin, coverage(ellipse_sdf(fx, fy, face_rx, face_ry), pixel));
            over(col, nose_col, coverage(ellipse_sdf(fx - 1.5 * fdx, fy - 0.05 - fdy, 0.04, 0.08), pixel));
            for (double side : {-1.0, 1.0}) {
                const double ex = side * g[5] + fdx, ey = g[6] + fdy;
                over(col, eye_white, coverage(ellipse_sdf(fx - ex, fy - ey, eye_rx, eye_ry), pixel));
                over(col, pupil, coverage(ellipse_sdf(fx - ex - pdx, fy - ey - pdy, 0.035, 0.035), pixel));
                over(col, brow, coverage(ellipse_sdf(fx - ex, fy - (brow_y + fdy), 0.09, 0.022), pixel));
            }
            const double mx = fx - fdx, my = fy - (mouth_y + fdy);
            const double t = std::min(std::abs(mx) / mouth_w, 1.0);
            const double centre = -0.06 * f.expression[0] * (1.0 - t * t);
            const double mouth_sdf = std::max(std::abs(my - centre) - mouth_th, std::abs(mx) - mouth_w);
            over(col, lips, coverage(mouth_sdf, pixel));

            img.at(y, x, 0) = static_cast<float>(std::clamp(2.0 * col.r - 1.0, -1.0, 1.0));
            img.at(y, x, 1) = static_cast<float>(std::clamp(2.0 * col.g - 1.0, -1.0, 1.0));
            img.at(y, x, 2) = static_cast<float>(std::clamp(2.0 * col.b - 1.0, -1.0, 1.0));
        }
    }
    return img;
}

Triplet make_triplet(std::uint64_t seed, std::uint64_t id_a, std::uint64_t id_c, Rng& rng, int size) {
    if (id_a == id_c) throw std::invalid_argument("make_triplet: identical identities");
    const FaceFactors a = sample_identity(seed, id_a);
    const FaceFactors c = sample_identity(seed, id_c);
    const Attributes first = sample_attributes(rng);
    const Attributes second = sample_attributes(rng);
    Triplet t;
    t.source_factors = with_attributes(a, first);
    t.gt_factors = with_attributes(a, second);
    t.driving_factors = with_attributes(c, second);
    t.source = render(t.source_factors, size);
    t.ground_truth = render(t.gt_factors, size);
    t.driving = render(t.driving_factors, size);
    return t;
}

std::string to_string(Split s) { return s == Split::train ? "train" : "held_out"; }

void partition_identities(int n, std::vector<std::uint64_t>& train, std::vector<std::uint64_t>& held_out) {
    train.clear();
    held_out.clear();
    const int n_held = (n / 5 >= 2) ? n / 5 : 0;
    for (int i = 0; i < n; ++i) (i < n - n_held ? train : held_out).push_back(static_cast<std::uint64_t>(i));
}

DatasetManifest plan_dataset(int n_identities, int triplets_per_identity, std::uint64_t seed, int size) {
    if (n_identities < 2) throw std::invalid_argument("make_dataset: need at least 2 identities");
    if (triplets_per_identity < 1) throw std::invalid_argument("make_dataset: need at least 1 triplet per identity");
    DatasetManifest m;
    m.seed = seed;
    m.n_identities = n_identities;
    m.triplets_per_identity = triplets_per_identity;
    m.image_size = size;
    partition_identities(n_identities, m.train_identities, m.held_out_identities);
    for (Split split : {Split::train, Split::held_out}) {
        const auto& pool = split == Split::train ? m.train_identities : m.held_out_identities;
        for (std::uint64_t a : pool) {
            for (int j = 0; j < triplets_per_identity; ++j) {
                Rng rng(seed, {kTripletTag, a, static_cast<std::uint64_t>(j)});
                std::uint64_t c = a;
                while (c == a) c = pool[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(pool.size())))];
                const FaceFactors fa = sample_identity(seed, a);
                const FaceFactors fc = sample_identity(seed, c);
                const Attributes first = sample_attributes(rng);
                const Attributes second = sample_attributes(rng);
                TripletRecord r;
                r.index = m.triplets.size();
                r.split = split;
                r.source = with_attributes(fa, first);
                r.ground_truth = with_attributes(fa, second);
                r.driving = with_attributes(fc, second);
                char buf[64];
                std::snprintf(buf, sizeof buf, "images/%06zu_", r.index);
                r.source_path = std::string(buf) + "source.bin";
                r.driving_path = std::string(buf) + "driving.bin";
                r.ground_truth_path = std::string(buf) + "ground_truth.bin";
                m.triplets.push_back(std::move(r));
            }
        }
    }
    return m;
}

DatasetManifest make_dataset(const std::filesystem::path& dir, int n_identities, int triplets_per_identity,
                             std::uint64_t seed, int size) {
    DatasetManifest m = plan_dataset(n_identities, triplets_per_identity, seed, size);
    std::error_code ec;
    std::filesystem::create_directories(dir / "images", ec);
    if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
    for (const auto& r : m.triplets) {
        write_image_bin(dir / r.source_path, render(r.source, size));
        write_image_bin(dir / r.driving_path, render(r.driving, size));
        write_image_bin(dir / r.ground_truth_path, render(r.ground_truth, size));
    }
    const auto path = dir / "manifest.json";
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << manifest_to_json(m);
    if (!out) throw IoError("write failed: " + path.string());
    return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["format"] = "anonydiff-dataset-v1";
    j["seed"] = m.seed;
    j["n_identities"] = m.n_identities;
    j["triplets_per_identity"] = m.triplets_per_identity;
    j["image_size"] = m.image_size;
    j["train_identities"] = m.train_identities;
    j["held_out_identities"] = m.held_out_identities;
    auto& arr = j["triplets"] = nlohmann::json::array();
    for (const auto& r : m.triplets) {
        arr.push_back({
            {"index", r.index},
            {"split", to_string(r.split)},
            {"source", factors_json(r.source)},
            {"driving", factors_json(r.driving)},
            {"ground_truth", factors_json(r.ground_truth)},
            {"paths", {{"source", r.source_path}, {"driving", r.driving_path}, {"ground_truth", r.ground_truth_path}}},
        });
    }
    return j.dump(1) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", "") != "anonydiff-dataset-v1") throw IoError("not an anonydiff dataset manifest");
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n_identities = j.at("n_identities").get<int>();
    m.triplets_per_identity = j.at("triplets_per_identity").get<int>();
    m.image_size = j.at("image_size").get<int>();
    m.train_identities = j.at("train_identities").get<std::vector<std::uint64_t>>();
    m.held_out_identities = j.at("held_out_identities").get<std::vector<std::uint64_t>>();
    for (const auto& t : j.at("triplets")) {
        TripletRecord r;
        r.index = t.at("index").get<std::size_t>();
        r.split = t.at("split").get<std::string>() == "train" ? Split::train : Split::held_out;
        r.source = factors_from_json(t.at("source"));
        r.driving = factors_from_json(t.at("driving"));
        r.ground_truth = factors_from_json(t.at("ground_truth"));
        r.source_path = t.at("paths").at("source").get<std::string>();
        r.driving_path = t.at("paths").at("driving").get<std::string>();
        r.ground_truth_path = t.at("paths").at("ground_truth").get<std::string>();
        m.triplets.push_back(std::move(r));
    }
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return manifest_from_json(ss.str());
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest " + path.string() + ": " + e.what());
    }
}

}  // namespace anonydiff
