#include "anonydiff/condnet.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <set>

namespace anonydiff {

void validate(const DenoiserConfig& c) {
    auto fail = [](const std::string& m) { throw InvalidConfig("denoiser config: " + m); };
    if (c.widths.empty()) fail("widths must not be empty");
    if (c.image_channels <= 0 || c.embed_dim <= 0 || c.time_features <= 0 || c.time_features % 2)
        fail("channel counts must be positive (time_features even)");
    if (c.heads <= 0 || c.groups <= 0) fail("heads and groups must be positive");
    for (int w : c.widths) {
        if (w <= 0) fail("widths must be positive");
        if (w % c.groups) fail("width " + std::to_string(w) + " not divisible by groups");
    }
    const int stages = static_cast<int>(c.widths.size());
    if (c.attention_stages.empty()) fail("at least one attention stage is required");
    std::set<int> seen;
    for (int s : c.attention_stages) {
        if (s < 0 || s >= stages) fail("attention stage " + std::to_string(s) + " out of range");
        if (!seen.insert(s).second) fail("duplicate attention stage");
        if (c.widths[s] % c.heads) fail("attention width not divisible by heads");
    }
    if (c.image_size <= 0 || c.image_size % (1 << (stages - 1))) fail("image_size must divide by 2^(stages-1)");
    if (c.token_channels <= 0 || c.token_size <= 0 || c.image_size % c.token_size) fail("bad token map size");
    const int ratio = c.image_size / c.token_size;
    if (ratio & (ratio - 1)) fail("image_size / token_size must be a power of two");
    if (!(c.skip_sigma_data >= 0)) fail("skip_sigma_data must be non-negative");
    if (c.state_tap != "self_attention_input") fail("unsupported state_tap '" + c.state_tap + "'");
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
    j = nlohmann::json{{"image_size", c.image_size},         {"image_channels", c.image_channels},
                       {"widths", c.widths},                 {"attention_stages", c.attention_stages},
                       {"heads", c.heads},                   {"groups", c.groups},
                       {"embed_dim", c.embed_dim},           {"time_features", c.time_features},
                       {"token_channels", c.token_channels}, {"token_size", c.token_size},
                       {"state_tap", c.state_tap},           {"skip_sigma_data", c.skip_sigma_data}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
    DenoiserConfig d;
    d.image_size = j.value("image_size", d.image_size);
    d.image_channels = j.value("image_channels", d.image_channels);
    d.widths = j.value("widths", d.widths);
    d.attention_stages = j.value("attention_stages", d.attention_stages);
    d.heads = j.value("heads", d.heads);
    d.groups = j.value("groups", d.groups);
    d.embed_dim = j.value("embed_dim", d.embed_dim);
    d.time_features = j.value("time_features", d.time_features);
    d.token_channels = j.value("token_channels", d.token_channels);
    d.token_size = j.value("token_size", d.token_size);
    d.state_tap = j.value("state_tap", d.state_tap);
    d.skip_sigma_data = j.value("skip_sigma_data", d.skip_sigma_data);
    c = d;
}

}  // namespace anonydiff
