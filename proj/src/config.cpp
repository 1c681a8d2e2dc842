#include "anonydiff/config.hpp"

#include "anonydiff/archive.hpp"

#include <algorithm>

namespace anonydiff {

namespace {

using nlohmann::json;

json pool_json(const PoolSection& p) {
    return {{"seed", p.seed}, {"first_id", p.first_id}, {"identities", p.identities}, {"per_identity", p.per_identity}};
}

json sampler_json(const SamplerConfig& s) {
    return {{"steps", s.steps}, {"guidance_scale", s.guidance_scale}, {"seed", s.seed}, {"d", s.d}};
}

// The default document is the schema: every accepted key appears in it.
void check_keys(const json& input, const json& schema, const std::string& path) {
    auto kind = [](const json& v) {
        if (v.is_number_float()) return std::string("number");
        if (v.is_number()) return std::string("integer");
        return std::string(v.type_name());
    };
    for (auto it = input.begin(); it != input.end(); ++it) {
        const std::string field = path.empty() ? it.key() : path + "." + it.key();
        if (!schema.contains(it.key())) throw ConfigError("unknown key '" + field + "'");
        const json& want = schema.at(it.key());
        const json& got = it.value();
        if (want.is_object()) {
            if (!got.is_object()) throw ConfigError("field '" + field + "' must be an object");
            check_keys(got, want, field);
            continue;
        }
        const std::string wk = kind(want), gk = kind(got);
        const bool ok = wk == gk || (wk == "number" && gk == "integer") ||
                        (want.is_number_unsigned() && got.is_number_unsigned());
        if (!ok) throw ConfigError("field '" + field + "' must be " + (wk == "integer" ? "an integer" : "a " + wk));
        if (want.is_number_unsigned() && got.is_number_integer() && got.get<std::int64_t>() < 0)
            throw ConfigError("field '" + field + "' must be non-negative");
    }
}

template <class T>
T field(const json& j, const char* section, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("field '" + std::string(section) + "." + key + "': " + e.what());
    }
}

}  // namespace

json to_json(const RunConfig& c) {
    return {{"seed", c.seed},
            {"output_dir", c.output_dir},
            {"data",
             {{"n_identities", c.data.n_identities},
              {"triplets_per_identity", c.data.triplets_per_identity},
              {"image_size", c.data.image_size},
              {"seed", c.data.seed}}},
            {"model",
             {{"denoiser", c.model.denoiser},
              {"init_seed", c.model.init_seed},
              {"encoder", c.model.encoder},
              {"encoder_pool", pool_json(c.model.encoder_pool)},
              {"evaluator", c.model.evaluator},
              {"evaluator_pool", pool_json(c.model.evaluator_pool)},
              {"probe", c.model.probe}}},
            {"train", c.train},
            {"sampler", sampler_json(c.sampler)},
            {"eval",
             {{"d", c.eval.d}, {"d_values", c.eval.d_values}, {"seeds", c.eval.seeds}, {"identities", c.eval.identities}}}};
}

RunConfig parse_run_config(const std::string& text) {
    json input;
    try {
        input = json::parse(text);
    } catch (const json::parse_error& e) {
        // Byte offset -> line/column.
        const std::size_t pos = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n');
        const auto nl = text.rfind('\n', pos == 0 ? 0 : pos - 1);
        const std::size_t col = nl == std::string::npos ? pos + 1 : pos - nl;
        throw ConfigError("syntax error at line " + std::to_string(line) + " column " + std::to_string(col));
    }
    if (!input.is_object()) throw ConfigError("config must be a JSON object");
    const json schema = to_json(RunConfig{});
    check_keys(input, schema, "");
    json doc = schema;
    doc.merge_patch(input);

    RunConfig c;
    c.seed = field<std::uint64_t>(doc, "", "seed");
    c.output_dir = field<std::string>(doc, "", "output_dir");
    const json& d = doc.at("data");
    c.data.n_identities = field<int>(d, "data", "n_identities");
    c.data.triplets_per_identity = field<int>(d, "data", "triplets_per_identity");
    c.data.image_size = field<int>(d, "data", "image_size");
    c.data.seed = field<std::uint64_t>(d, "data", "seed");
    const json& m = doc.at("model");
    c.model.denoiser = field<DenoiserConfig>(m, "model", "denoiser");
    c.model.init_seed = field<std::uint64_t>(m, "model", "init_seed");
    c.model.encoder = field<RecognizerConfig>(m, "model", "encoder");
    c.model.evaluator = field<RecognizerConfig>(m, "model", "evaluator");
    c.model.probe = field<ProbeConfig>(m, "model", "probe");
    for (auto [key, pool] : {std::pair{"encoder_pool", &c.model.encoder_pool}, {"evaluator_pool", &c.model.evaluator_pool}}) {
        const json& p = m.at(key);
        pool->seed = field<std::uint64_t>(p, key, "seed");
        pool->first_id = field<std::uint64_t>(p, key, "first_id");
        pool->identities = field<int>(p, key, "identities");
        pool->per_identity = field<int>(p, key, "per_identity");
    }
    c.train = field<TrainConfig>(doc, "", "train");
    const json& s = doc.at("sampler");
    c.sampler.steps = field<int>(s, "sampler", "steps");
    c.sampler.guidance_scale = field<double>(s, "sampler", "guidance_scale");
    c.sampler.seed = field<std::uint64_t>(s, "sampler", "seed");
    c.sampler.d = field<double>(s, "sampler", "d");
    const json& e = doc.at("eval");
    c.eval.d = field<double>(e, "eval", "d");
    c.eval.d_values = field<std::vector<double>>(e, "eval", "d_values");
    c.eval.seeds = field<std::vector<std::uint64_t>>(e, "eval", "seeds");
    c.eval.identities = field<int>(e, "eval", "identities");

    try {
        validate(c.model.denoiser);
        validate(c.model.encoder);
        validate(c.model.evaluator);
        validate(c.train);
        validate(c.sampler, make_schedule());
    } catch (const std::invalid_argument& ex) {
        throw ConfigError(ex.what());
    }
    if (c.data.n_identities < 2 || c.data.triplets_per_identity < 1 || c.data.image_size < 8)
        throw ConfigError("data: need at least 2 identities, 1 triplet each, image_size >= 8");
    if (c.data.image_size != c.model.denoiser.image_size)
        throw ConfigError("data.image_size must equal model.denoiser.image_size");
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("missing config file " + path.string());
    try {
        return parse_run_config(read_text_file(path));
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace anonydiff
