#pragma once

// Denoising UNet plus the two ReferenceNet twins.
//
// All three networks are built by one class. A ReferenceNet reads the 8x8
// encoder token map (upsampled to image resolution) instead of a noisy image,
// always runs at timestep 0 with a single-token context, and stops as soon as
// it has recorded the token matrix entering its last self-attention layer.

#include "anonydiff/diffusion.hpp"
#include "anonydiff/nn.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace anonydiff {

struct InvalidConfig : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DenoiserConfig {
    int image_size = 32;
    int image_channels = 3;
    std::vector<int> widths{16, 32, 64};
    /// Stages (0 = full resolution) carrying an attention layer on the way down and up.
    std::vector<int> attention_stages{1, 2};
    int heads = 4;
    int groups = 8;
    int embed_dim = 64;
    int time_features = 32;
    /// Encoder token map consumed by the ReferenceNets.
    int token_channels = 16;
    int token_size = 8;
    /// Where reference states are tapped. Only "self_attention_input" is implemented.
    std::string state_tap = "self_attention_input";
    /// UNet output is skip(t) * x_t + network, where skip(t) is the best linear
    /// noise estimate for zero-mean data of this standard deviation under the
    /// default schedule. 0 turns the skip off.
    double skip_sigma_data = 0.5;

    bool operator==(const DenoiserConfig&) const = default;
    int attention_layers() const { return 2 * static_cast<int>(attention_stages.size()); }
    int time_dim() const { return 4 * widths.at(0); }
};

void validate(const DenoiserConfig& c);
void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

enum class NetRole { unet, reference };

template <class T>
class DenoiserNet {
public:
    using Var = typename Tape<T>::Var;

    DenoiserNet() = default;
    DenoiserNet(ParameterStore<T>& store, Rng& rng, const std::string& prefix, const DenoiserConfig& cfg, NetRole role)
        : cfg_(cfg), role_(role), prefix_(prefix) {
        validate(cfg);
        const auto& w = cfg.widths;
        const int stages = static_cast<int>(w.size());
        const int in_ch = role == NetRole::unet ? cfg.image_channels : cfg.token_channels;
        conv_in_ = Conv<T>(store, rng, prefix + "conv_in", in_ch, w[0], 3);
        time1_ = Conv<T>(store, rng, prefix + "time.0", cfg.time_features, cfg.time_dim(), 1);
        time2_ = Conv<T>(store, rng, prefix + "time.1", cfg.time_dim(), cfg.time_dim(), 1);
        stage_attn_down_.assign(stages, -1);
        stage_attn_up_.assign(stages, -1);
        int prev = w[0];
        for (int i = 0; i < stages; ++i) {
            const std::string s = prefix + "down." + std::to_string(i);
            down_res_.emplace_back(store, rng, s + ".res", prev, w[i], cfg.groups, cfg.time_dim());
            if (has_attention(i)) {
                stage_attn_down_[i] = static_cast<int>(attn_.size());
                attn_.emplace_back(store, rng, s + ".attn", w[i], cfg.embed_dim, cfg.heads);
            }
            if (i + 1 < stages) downsample_.emplace_back(store, rng, s + ".downsample", w[i], w[i], 3, 2);
            prev = w[i];
        }
        mid_ = ResBlock<T>(store, rng, prefix + "mid.res", prev, prev, cfg.groups, cfg.time_dim());
        up_res_.resize(stages);
        for (int i = stages - 1; i >= 0; --i) {
            const std::string s = prefix + "up." + std::to_string(i);
            up_res_[i] = ResBlock<T>(store, rng, s + ".res", prev + w[i], w[i], cfg.groups, cfg.time_dim());
            if (has_attention(i)) {
                stage_attn_up_[i] = static_cast<int>(attn_.size());
                attn_.emplace_back(store, rng, s + ".attn", w[i], cfg.embed_dim, cfg.heads);
            }
            prev = w[i];
        }
        norm_out_ = Norm<T>(store, prefix + "out.norm", w[0], cfg.groups);
        conv_out_ = Conv<T>(store, rng, prefix + "out.conv", w[0], cfg.image_channels, 3, 1, true, 0.1);
    }

    const DenoiserConfig& config() const { return cfg_; }
    NetRole role() const { return role_; }
    const std::string& prefix() const { return prefix_; }
    int attention_layers() const { return static_cast<int>(attn_.size()); }
    const AttentionBlock<T>& attention_block(int l) const { return attn_.at(static_cast<std::size_t>(l)); }

    /// UNet pass: x [C, n, H, W], one timestep per sample, ctx [D, n, k, 1], and
    /// either no references or one ReferenceTokens entry per attention layer.
    Var forward(Tape<T>& tp, Var x, std::span<const int> t, Var ctx, std::span<const ReferenceTokens<T>> refs) const {
        if (role_ != NetRole::unet) throw std::logic_error("forward() called on a ReferenceNet");
        if (!refs.empty() && static_cast<int>(refs.size()) != attention_layers())
            throw ShapeError("unet: " + std::to_string(refs.size()) + " reference layers for " +
                             std::to_string(attention_layers()) + " attention layers");
        return run(tp, x, t, ctx, refs, nullptr);
    }

    /// ReferenceNet pass over a token map [token_channels, n, s, s] with a context
    /// [D, n, 1, 1]. Returns the per-layer tokens entering self-attention.
    std::vector<Var> states(Tape<T>& tp, Var tokens, Var ctx) const {
        if (role_ != NetRole::reference) throw std::logic_error("states() called on the UNet");
        const Shape s = tokens->shape();
        if (s.c != cfg_.token_channels || s.h != cfg_.token_size || s.w != cfg_.token_size)
            throw ShapeError("refnet: token map " + s.str() + " does not match config");
        Var x = tokens;
        for (int size = cfg_.token_size; size < cfg_.image_size; size *= 2) x = tp.upsample2x(x);
        std::vector<int> t(static_cast<std::size_t>(s.n), 0);
        std::vector<Var> out;
        run(tp, x, t, ctx, {}, &out);
        return out;
    }

private:
    bool has_attention(int stage) const {
        for (int a : cfg_.attention_stages)
            if (a == stage) return true;
        return false;
    }

    Var run(Tape<T>& tp, Var x, std::span<const int> t, Var ctx, std::span<const ReferenceTokens<T>> refs,
            std::vector<Var>* states) const {
        const Shape xs = x->shape();
        const int in_ch = role_ == NetRole::unet ? cfg_.image_channels : cfg_.token_channels;
        if (xs.c != in_ch || xs.h != cfg_.image_size || xs.w != cfg_.image_size)
            throw ShapeError(prefix_ + ": input " + xs.str() + " does not match config");
        if (static_cast<int>(t.size()) != xs.n) throw ShapeError(prefix_ + ": one timestep per sample required");
        if (ctx->shape().c != cfg_.embed_dim || ctx->shape().n != xs.n)
            throw ShapeError(prefix_ + ": context " + ctx->shape().str());

        Var temb = tp.constant(timestep_features<T>(t, cfg_.time_features));
        temb = time2_(tp, tp.silu(time1_(tp, temb)));

        const int stages = static_cast<int>(cfg_.widths.size());
        const int last = attention_layers() - 1;
        auto attend = [&](int l, Var h) -> Var {
            const auto& blk = attn_[l];
            Var normed = blk.state(tp, h);
            if (states) {
                states->push_back(normed);
                if (l == last) return nullptr;
            }
            ReferenceTokens<T> r = refs.empty() ? ReferenceTokens<T>{} : refs[l];
            return blk(tp, h, normed, ctx, r);
        };

        Var h = conv_in_(tp, x);
        std::vector<Var> skips;
        for (int i = 0; i < stages; ++i) {
            h = down_res_[i](tp, h, temb);
            if (stage_attn_down_[i] >= 0 && !(h = attend(stage_attn_down_[i], h))) return nullptr;
            skips.push_back(h);
            if (i + 1 < stages) h = downsample_[i](tp, h);
        }
        h = mid_(tp, h, temb);
        for (int i = stages - 1; i >= 0; --i) {
            h = up_res_[i](tp, tp.concat_channels(h, skips[i]), temb);
            if (stage_attn_up_[i] >= 0 && !(h = attend(stage_attn_up_[i], h))) return nullptr;
            if (i > 0) h = tp.upsample2x(h);
        }
        Var out = conv_out_(tp, tp.silu(norm_out_(tp, h)));
        if (role_ == NetRole::unet && cfg_.skip_sigma_data > 0) out = tp.add(out, tp.constant(output_skip(x->val(), t)));
        return out;
    }

    Tensor<T> output_skip(const Tensor<T>& x, std::span<const int> t) const {
        static const NoiseSchedule schedule = make_schedule();
        const double s2 = cfg_.skip_sigma_data * cfg_.skip_sigma_data;
        Tensor<T> out(x.shape);
        const std::size_t sp = x.shape.spatial();
        for (int n = 0; n < x.shape.n; ++n) {
            const double abar = schedule.alpha_bar(t[n]);
            const T k = static_cast<T>(std::sqrt(1.0 - abar) / (abar * s2 + 1.0 - abar));
            for (int c = 0; c < x.shape.c; ++c)
                for (std::size_t i = 0; i < sp; ++i) out.at(c, n, i) = x.at(c, n, i) * k;
        }
        return out;
    }

    DenoiserConfig cfg_;
    NetRole role_ = NetRole::unet;
    std::string prefix_;
    Conv<T> conv_in_, time1_, time2_, conv_out_;
    Norm<T> norm_out_;
    std::vector<ResBlock<T>> down_res_, up_res_;
    std::vector<Conv<T>> downsample_;
    ResBlock<T> mid_;
    std::vector<AttentionBlock<T>> attn_;
    std::vector<int> stage_attn_down_, stage_attn_up_;
};

inline constexpr const char* kUnetPrefix = "unet.";
inline constexpr const char* kRefSrcPrefix = "refsrc.";
inline constexpr const char* kRefDrvPrefix = "refdrv.";
inline constexpr const char* kNullEmbedding = "null_embedding";

/// True for ReferenceNet parameters that belong to a transformer (attention) block.
inline bool is_reference_attention(const std::string& name) {
    const bool ref = name.rfind(kRefSrcPrefix, 0) == 0 || name.rfind(kRefDrvPrefix, 0) == 0;
    return ref && name.find(".attn.") != std::string::npos;
}
inline bool is_reference(const std::string& name) {
    return name.rfind(kRefSrcPrefix, 0) == 0 || name.rfind(kRefDrvPrefix, 0) == 0;
}

/// The UNet, both ReferenceNets and the learned null embedding, in one store.
template <class T>
struct Networks {
    DenoiserConfig config;
    std::uint64_t seed = 0;
    std::int64_t trained_steps = 0;
    ParameterStore<T> store;
    DenoiserNet<T> unet, refsrc, refdrv;
    Parameter<T>* null_embedding = nullptr;

    Networks() = default;
    Networks(const Networks&) = delete;
    Networks& operator=(const Networks&) = delete;

    const DenoiserNet<T>& reference(bool source) const { return source ? refsrc : refdrv; }
};

/// Builds all three networks. Every ReferenceNet tensor with a UNet counterpart of
/// the same name and shape starts as a copy of it; the token-input convolution
/// (different input width) is drawn once and shared by both twins. Only the
/// UNet, the ReferenceNet attention blocks and the null embedding are trainable.
template <class T>
std::unique_ptr<Networks<T>> init_networks(const DenoiserConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    auto nets = std::make_unique<Networks<T>>();
    nets->config = cfg;
    nets->seed = seed;
    Rng unet_rng(seed, {0xc0, 0});
    nets->unet = DenoiserNet<T>(nets->store, unet_rng, kUnetPrefix, cfg, NetRole::unet);
    Rng src_rng(seed, {0xc0, 1});
    nets->refsrc = DenoiserNet<T>(nets->store, src_rng, kRefSrcPrefix, cfg, NetRole::reference);
    Rng drv_rng(seed, {0xc0, 1});
    nets->refdrv = DenoiserNet<T>(nets->store, drv_rng, kRefDrvPrefix, cfg, NetRole::reference);
    auto& null = nets->store.add(kNullEmbedding, Shape{cfg.embed_dim, 1, 1, 1});
    Rng null_rng(seed, {0xc0, 2});
    init_normal(null, null_rng, cfg.embed_dim);
    nets->null_embedding = &null;

    const std::string unet = kUnetPrefix;
    for (auto& p : nets->store.all()) {
        if (!is_reference(p.name)) continue;
        const std::string rest = p.name.substr(p.name.find('.') + 1);
        if (const auto* u = nets->store.find(unet + rest); u && u->value.shape == p.value.shape) p.value = u->value;
        p.trainable = is_reference_attention(p.name);
    }
    return nets;
}

/// Copies `from` into a freshly built network set of scalar type U (e.g. fp64 for checks).
template <class U, class T>
std::unique_ptr<Networks<U>> convert_networks(const Networks<T>& from) {
    auto to = init_networks<U>(from.config, from.seed);
    to->trained_steps = from.trained_steps;
    for (const auto& p : from.store.all()) to->store.find(p.name)->value = p.value.template cast<U>();
    return to;
}

/// Names and shapes of parameters present in the ReferenceNet with the given
/// prefix, mapped onto the UNet name they were copied from ("" if none).
template <class T>
std::vector<std::pair<std::string, std::string>> twin_pairs(const Networks<T>& nets, const std::string& ref_prefix) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& p : nets.store.all()) {
        if (p.name.rfind(ref_prefix, 0) != 0) continue;
        const std::string u = kUnetPrefix + p.name.substr(ref_prefix.size());
        const auto* up = nets.store.find(u);
        out.emplace_back(p.name, up && up->value.shape == p.value.shape ? u : std::string());
    }
    return out;
}

/// Per-attention-layer token matrices [C_l, n, H_l, W_l] exported by a ReferenceNet.
template <class T>
struct ReferenceState {
    std::vector<Tensor<T>> layers;
    bool operator==(const ReferenceState&) const = default;
};

template <class T>
void check_aligned(const ReferenceState<T>& a, const ReferenceState<T>& b, const char* what) {
    if (a.layers.size() != b.layers.size())
        throw ShapeError(std::string(what) + ": state lists differ in length");
    for (std::size_t l = 0; l < a.layers.size(); ++l) require_same(a.layers[l].shape, b.layers[l].shape, what);
}

/// Stacks two state batches along the sample axis.
template <class T>
ReferenceState<T> stack_states(const ReferenceState<T>& a, const ReferenceState<T>& b) {
    check_aligned(a, b, "stack_states");
    ReferenceState<T> out;
    for (std::size_t l = 0; l < a.layers.size(); ++l) out.layers.push_back(stack_samples<T>({&a.layers[l], &b.layers[l]}));
    return out;
}

/// Repeats every sample of a batch-1 tensor n times.
template <class T>
Tensor<T> repeat_sample(const Tensor<T>& x, int n) {
    if (x.shape.n != 1) throw ShapeError("repeat_sample: expects batch 1, got " + x.shape.str());
    std::vector<const Tensor<T>*> parts(static_cast<std::size_t>(n), &x);
    return stack_samples<T>(parts);
}

template <class T>
ReferenceState<T> repeat_state(const ReferenceState<T>& s, int n) {
    ReferenceState<T> out;
    for (const auto& l : s.layers) out.layers.push_back(repeat_sample(l, n));
    return out;
}

/// Runs a ReferenceNet on tokens [token_channels, n, s, s] with embedding z [D, n, 1, 1].
template <class T>
ReferenceState<T> refnet_forward(const DenoiserNet<T>& refnet, const Tensor<T>& tokens, const Tensor<T>& z) {
    Tape<T> tp(false);
    auto vars = refnet.states(tp, tp.constant_ref(tokens), tp.constant_ref(z));
    ReferenceState<T> out;
    for (auto v : vars) out.layers.push_back(v->val());
    return out;
}

/// Concatenated self-attention of one layer on plain tensors: queries from h,
/// keys/values over [h; s_src; s_drv]; only the h segment is returned. Empty
/// (zero-token) reference tensors are allowed.
template <class T>
Tensor<T> concat_self_attention(const ConcatSelfAttention<T>& layer, const Tensor<T>& h, const Tensor<T>& s_src,
                                const Tensor<T>& s_drv) {
    Tape<T> tp(false);
    ReferenceTokens<T> r;
    for (const auto* s : {&s_src, &s_drv}) {
        if (s->shape.c != h.shape.c) throw ShapeError("concat_self_attention: width mismatch " + s->shape.str());
        if (s->shape.spatial() == 0) continue;
        (s == &s_src ? r.source : r.driving) = tp.constant_ref(*s);
    }
    return layer(tp, tp.constant_ref(h), r)->val();
}

/// Context tokens [D, n, 2, 1] = [z_src; z_drv].
template <class T>
typename Tape<T>::Var context_tokens(Tape<T>& tp, typename Tape<T>::Var z_src, typename Tape<T>::Var z_drv) {
    return tp.concat_tokens({z_src, z_drv});
}

template <class T>
std::vector<ReferenceTokens<T>> reference_tokens(Tape<T>& tp, const ReferenceState<T>& s_src,
                                                 const ReferenceState<T>& s_drv) {
    check_aligned(s_src, s_drv, "reference states");
    std::vector<ReferenceTokens<T>> refs;
    for (std::size_t l = 0; l < s_src.layers.size(); ++l)
        refs.push_back({tp.constant_ref(s_src.layers[l]), tp.constant_ref(s_drv.layers[l])});
    return refs;
}

/// Full UNet noise prediction for a batch.
template <class T>
Tensor<T> unet_forward(const Networks<T>& nets, const Tensor<T>& x_t, std::span<const int> t, const Tensor<T>& z_src,
                       const Tensor<T>& z_drv, const ReferenceState<T>& s_src, const ReferenceState<T>& s_drv) {
    if (static_cast<int>(s_src.layers.size()) != nets.unet.attention_layers())
        throw ShapeError("unet_forward: state list misaligned with attention layers");
    Tape<T> tp(false);
    auto refs = reference_tokens(tp, s_src, s_drv);
    auto ctx = context_tokens(tp, tp.constant_ref(z_src), tp.constant_ref(z_drv));
    return nets.unet.forward(tp, tp.constant_ref(x_t), t, ctx, refs)->val();
}

/// Unconditional source-side conditioning: the learned null embedding and the
/// source ReferenceNet's state for an all-zero token map under that embedding.
template <class T>
struct NullConditioning {
    Tensor<T> z;             // [D, 1, 1, 1]
    ReferenceState<T> state;  // batch 1
};

template <class T>
NullConditioning<T> null_conditioning(const Networks<T>& nets) {
    const auto& c = nets.config;
    NullConditioning<T> out;
    out.z = nets.null_embedding->value;
    Tensor<T> zeros(Shape{c.token_channels, 1, c.token_size, c.token_size});
    out.state = refnet_forward(nets.refsrc, zeros, out.z);
    return out;
}

}  // namespace anonydiff
