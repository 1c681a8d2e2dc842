#include "anonydiff/anonymize.hpp"

#include <sstream>

namespace anonydiff {

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::no_embeds: return "no_embeds";
        case Ablation::no_states: return "no_states";
        case Ablation::no_uncond_states: return "no_uncond_states";
    }
    return "?";
}

Ablation parse_ablation(const std::string& s) {
    for (Ablation a : kAllAblations)
        if (to_string(a) == s) return a;
    throw std::invalid_argument("unknown ablation '" + s + "'");
}

std::optional<std::string> request_warning(const AnonymizeRequest& r) {
    if (r.d > kDegreeWarnThreshold) {
        std::ostringstream ss;
        ss << "degree d=" << r.d << " exceeds " << kDegreeWarnThreshold << "; outputs may no longer look like faces";
        return ss.str();
    }
    return std::nullopt;
}

namespace {

void require_trained(const Networks<float>& nets) {
    if (nets.trained_steps <= 0) throw UntrainedNetwork("networks have not been trained");
}

void require_compatible(const Networks<float>& nets, const Recognizer& enc) {
    const auto& c = nets.config;
    if (enc.embed_dim() != c.embed_dim || enc.token_channels() != c.token_channels || enc.token_size() != c.token_size)
        throw ShapeError("encoder output does not match the denoiser config");
}

}  // namespace

Tensor<float> generate(const Networks<float>& nets, const GuidanceInputs& in, const SamplerConfig& sampler,
                       const std::vector<std::uint64_t>& seeds, const NoiseSchedule& schedule) {
    const int n = in.z_src.shape.n;
    const auto& c = nets.config;
    const Shape shape{c.image_channels, n, c.image_size, c.image_size};
    const bool guided = sampler.guidance_scale != 1.0;

    // Branch inputs are constant over the trajectory; stack them once.
    const Tensor<float> z_src = guided ? stack_samples<float>({&in.z_src, &in.z_null}) : in.z_src;
    const Tensor<float> z_drv = guided ? stack_samples<float>({&in.z_drv, &in.z_drv}) : in.z_drv;
    const ReferenceState<float> s_src = guided ? stack_states(in.s_src, in.s_uncond) : in.s_src;
    const ReferenceState<float> s_drv = guided ? stack_states(in.s_drv, in.s_drv) : in.s_drv;

    GuidedDenoiser<float> denoiser = [&](const Tensor<float>& x, int t) {
        const Tensor<float> xx = guided ? stack_samples<float>({&x, &x}) : x;
        std::vector<int> ts(static_cast<std::size_t>(xx.shape.n), t);
        Tensor<float> eps = unet_forward(nets, xx, ts, z_src, z_drv, s_src, s_drv);
        GuidedPrediction<float> out;
        if (!guided) {
            out.cond = eps;
            out.uncond = std::move(eps);
            return out;
        }
        const std::size_t half = x.size() / x.shape.c;
        out.cond = Tensor<float>(x.shape);
        out.uncond = Tensor<float>(x.shape);
        for (int ch = 0; ch < x.shape.c; ++ch) {
            auto src = eps.data.begin() + ch * eps.shape.cols();
            std::copy_n(src, half, out.cond.data.begin() + ch * half);
            std::copy_n(src + half, half, out.uncond.data.begin() + ch * half);
        }
        return out;
    };
    return sample<float>(denoiser, shape, seeds, sampler, schedule);
}

GuidanceInputs anonymization_inputs(const std::vector<Image>& images, double d, Ablation ablation,
                                    const Networks<float>& nets, const Recognizer& encoder) {
    require_compatible(nets, encoder);
    const Tensor<float> x = images_to_tensor<float>(images);
    const Tensor<float> z = embed_batch(encoder, x);
    const Tensor<float> tokens = spatial_features(encoder, x);
    const int n = x.shape.n;

    GuidanceInputs in;
    in.z_drv = z;
    in.s_drv = refnet_forward(nets.refdrv, tokens, z);
    in.z_src = ablation == Ablation::no_embeds ? z : adjust_embedding(z, d);
    const ReferenceState<float> s_cond = refnet_forward(nets.refsrc, tokens, in.z_src);
    const NullConditioning<float> null = null_conditioning(nets);
    in.z_null = repeat_sample(null.z, n);
    in.s_uncond = repeat_state(null.state, n);
    switch (ablation) {
        case Ablation::full:
        case Ablation::no_embeds: in.s_src = blend_states(s_cond, in.s_uncond, d); break;
        case Ablation::no_states: in.s_src = s_cond; break;
        case Ablation::no_uncond_states: in.s_src = scale_states(s_cond, d); break;
    }
    return in;
}

GuidanceInputs swap_inputs(const std::vector<Image>& sources, const std::vector<Image>& drivings,
                           const Networks<float>& nets, const Recognizer& encoder) {
    require_compatible(nets, encoder);
    if (sources.size() != drivings.size()) throw std::invalid_argument("swap: source/driving count mismatch");
    const Tensor<float> xs = images_to_tensor<float>(sources);
    const Tensor<float> xd = images_to_tensor<float>(drivings);
    GuidanceInputs in;
    in.z_src = embed_batch(encoder, xs);
    in.z_drv = embed_batch(encoder, xd);
    in.s_src = refnet_forward(nets.refsrc, spatial_features(encoder, xs), in.z_src);
    in.s_drv = refnet_forward(nets.refdrv, spatial_features(encoder, xd), in.z_drv);
    const NullConditioning<float> null = null_conditioning(nets);
    in.z_null = repeat_sample(null.z, xs.shape.n);
    in.s_uncond = repeat_state(null.state, xs.shape.n);
    return in;
}

std::vector<Image> anonymize_batch(const std::vector<Image>& images, double d, Ablation ablation,
                                   const std::vector<std::uint64_t>& seeds, const SamplerConfig& sampler,
                                   const Networks<float>& nets, const Recognizer& encoder,
                                   const NoiseSchedule& schedule) {
    require_trained(nets);
    if (!(d >= 0.0)) throw std::invalid_argument("anonymize: degree must be non-negative");
    const GuidanceInputs in = anonymization_inputs(images, d, ablation, nets, encoder);
    const Tensor<float> out = generate(nets, in, sampler, seeds, schedule);
    std::vector<Image> result;
    for (int i = 0; i < out.shape.n; ++i) result.push_back(tensor_to_image(out, i));
    return result;
}

Image anonymize(const AnonymizeRequest& request, const Networks<float>& nets, const Recognizer& encoder,
                const NoiseSchedule& schedule) {
    return anonymize_batch({request.image}, request.d, request.ablation, {request.seed}, request.sampler, nets,
                           encoder, schedule)
        .front();
}

std::vector<Image> swap_batch(const std::vector<Image>& sources, const std::vector<Image>& drivings,
                              const std::vector<std::uint64_t>& seeds, const SamplerConfig& sampler,
                              const Networks<float>& nets, const Recognizer& encoder, const NoiseSchedule& schedule) {
    require_trained(nets);
    const GuidanceInputs in = swap_inputs(sources, drivings, nets, encoder);
    const Tensor<float> out = generate(nets, in, sampler, seeds, schedule);
    std::vector<Image> result;
    for (int i = 0; i < out.shape.n; ++i) result.push_back(tensor_to_image(out, i));
    return result;
}

Image swap(const Image& source, const Image& driving, std::uint64_t seed, const Networks<float>& nets,
           const Recognizer& encoder, const NoiseSchedule& schedule, const SamplerConfig& sampler) {
    return swap_batch({source}, {driving}, {seed}, sampler, nets, encoder, schedule).front();
}

}  // namespace anonydiff
