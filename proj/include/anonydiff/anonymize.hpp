#pragma once

#include "anonydiff/condnet.hpp"
#include "anonydiff/diffusion.hpp"
#include "anonydiff/embedding.hpp"
#include "anonydiff/image.hpp"

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace anonydiff {

struct UntrainedNetwork : std::logic_error {
    using std::logic_error::logic_error;
};

enum class Ablation { full, no_embeds, no_states, no_uncond_states };
std::string to_string(Ablation a);
Ablation parse_ablation(const std::string& s);
inline constexpr Ablation kAllAblations[] = {Ablation::full, Ablation::no_embeds, Ablation::no_states,
                                             Ablation::no_uncond_states};

inline constexpr double kDefaultDegree = 1.25;
/// Above this degree outputs start failing face validity; requests warn but proceed.
inline constexpr double kDegreeWarnThreshold = 1.5;

/// z' = (1 - d) z, not renormalized.
template <class T>
std::vector<T> adjust_embedding(std::span<const T> z, double d) {
    std::vector<T> out(z.begin(), z.end());
    if (d == 0.0) return out;
    const T k = static_cast<T>(1.0 - d);
    for (T& v : out) v *= k;
    return out;
}

template <class T>
Tensor<T> adjust_embedding(const Tensor<T>& z, double d) {
    return Tensor<T>(z.shape, adjust_embedding<T>(std::span<const T>(z.data), d));
}

/// S' = (1 - d) S_cond + d S_uncond, per layer. d = 0 and d = 1 return the
/// respective input bitwise.
template <class T>
ReferenceState<T> blend_states(const ReferenceState<T>& s_cond, const ReferenceState<T>& s_uncond, double d) {
    check_aligned(s_cond, s_uncond, "blend_states");
    if (d == 0.0) return s_cond;
    if (d == 1.0) return s_uncond;
    const T a = static_cast<T>(1.0 - d), b = static_cast<T>(d);
    ReferenceState<T> out;
    for (std::size_t l = 0; l < s_cond.layers.size(); ++l) {
        Tensor<T> t(s_cond.layers[l].shape);
        t.mat() = s_cond.layers[l].mat() * a + s_uncond.layers[l].mat() * b;
        out.layers.push_back(std::move(t));
    }
    return out;
}

/// (1 - d) S_cond: the blend without its unconditional term.
template <class T>
ReferenceState<T> scale_states(const ReferenceState<T>& s, double d) {
    if (d == 0.0) return s;
    ReferenceState<T> out;
    for (const auto& l : s.layers) {
        Tensor<T> t(l.shape);
        t.mat() = l.mat() * static_cast<T>(1.0 - d);
        out.layers.push_back(std::move(t));
    }
    return out;
}

/// Everything the UNet needs for both guidance branches of a batch.
struct GuidanceInputs {
    Tensor<float> z_src, z_drv, z_null;        // [D, n, 1, 1]
    ReferenceState<float> s_src, s_drv, s_uncond;  // batch n
};

/// Reverse diffusion with classifier-free guidance. Both branches run as one
/// batch of 2n; the unconditional branch replaces only the source side.
Tensor<float> generate(const Networks<float>& nets, const GuidanceInputs& in, const SamplerConfig& sampler,
                       const std::vector<std::uint64_t>& seeds, const NoiseSchedule& schedule);

struct AnonymizeRequest {
    Image image;
    double d = kDefaultDegree;
    std::uint64_t seed = 0;
    Ablation ablation = Ablation::full;
    SamplerConfig sampler;
};

/// Warning text for risky but permitted requests (d above the validity threshold).
std::optional<std::string> request_warning(const AnonymizeRequest& r);

/// Builds guidance inputs for anonymizing `images` (each image is its own
/// source and driving input) at degree d under an ablation.
GuidanceInputs anonymization_inputs(const std::vector<Image>& images, double d, Ablation ablation,
                                    const Networks<float>& nets, const Recognizer& encoder);

/// Guidance inputs for swapping the identity of `sources[i]` onto `drivings[i]`.
GuidanceInputs swap_inputs(const std::vector<Image>& sources, const std::vector<Image>& drivings,
                           const Networks<float>& nets, const Recognizer& encoder);

std::vector<Image> anonymize_batch(const std::vector<Image>& images, double d, Ablation ablation,
                                   const std::vector<std::uint64_t>& seeds, const SamplerConfig& sampler,
                                   const Networks<float>& nets, const Recognizer& encoder,
                                   const NoiseSchedule& schedule);

Image anonymize(const AnonymizeRequest& request, const Networks<float>& nets, const Recognizer& encoder,
                const NoiseSchedule& schedule);

std::vector<Image> swap_batch(const std::vector<Image>& sources, const std::vector<Image>& drivings,
                              const std::vector<std::uint64_t>& seeds, const SamplerConfig& sampler,
                              const Networks<float>& nets, const Recognizer& encoder, const NoiseSchedule& schedule);

Image swap(const Image& source, const Image& driving, std::uint64_t seed, const Networks<float>& nets,
           const Recognizer& encoder, const NoiseSchedule& schedule, const SamplerConfig& sampler = {});

}  // namespace anonydiff
