#pragma once

#include "anonydiff/autograd.hpp"
#include "anonydiff/rng.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace anonydiff {

/// Named, address-stable parameter storage. Layers keep raw pointers into it,
/// so a store must outlive (and not be copied out from under) its layers.
template <class T>
class ParameterStore {
public:
    Parameter<T>& add(const std::string& name, Shape shape) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
        auto& p = params_.emplace_back();
        p.name = name;
        p.value = Tensor<T>(shape);
        index_[name] = params_.size() - 1;
        return p;
    }

    Parameter<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }
    const Parameter<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    std::deque<Parameter<T>>& all() { return params_; }
    const std::deque<Parameter<T>>& all() const { return params_; }

    std::size_t count(const std::function<bool(const Parameter<T>&)>& pred = {}) const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (!pred || pred(p)) n += p.value.size();
        return n;
    }

    /// Order-sensitive fingerprint of names and values of the selected parameters.
    std::uint64_t hash(const std::function<bool(const Parameter<T>&)>& pred = {}, bool with_names = true) const {
        std::uint64_t h = 1469598103934665603ull;
        for (const auto& p : params_) {
            if (pred && !pred(p)) continue;
            if (with_names) h = fnv1a(p.name.data(), p.name.size(), h);
            h = hash_tensor(p.value, h);
        }
        return h;
    }

    void zero_grad() {
        for (auto& p : params_) p.grad = Tensor<T>();
    }

private:
    std::deque<Parameter<T>> params_;
    std::map<std::string, std::size_t> index_;
};

/// Fills with N(0, gain^2 / fan_in).
template <class T>
void init_normal(Parameter<T>& p, Rng& rng, int fan_in, double gain = 1.0) {
    const double sd = gain / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : p.value.data) v = static_cast<T>(rng.normal() * sd);
}

template <class T>
struct Conv {
    Parameter<T>* weight = nullptr;
    Parameter<T>* bias = nullptr;
    int kernel = 1;
    int stride = 1;

    Conv() = default;
    Conv(ParameterStore<T>& store, Rng& rng, const std::string& name, int cin, int cout, int k, int stride_ = 1,
         bool with_bias = true, double gain = 1.0)
        : kernel(k), stride(stride_) {
        weight = &store.add(name + ".weight", Shape{cout, 1, 1, cin * k * k});
        init_normal(*weight, rng, cin * k * k, gain);
        if (with_bias) bias = &store.add(name + ".bias", Shape{cout, 1, 1, 1});
    }

    typename Tape<T>::Var operator()(Tape<T>& tp, typename Tape<T>::Var x) const {
        return tp.conv2d(x, tp.param(*weight), bias ? tp.param(*bias) : nullptr, kernel, stride);
    }
};

template <class T>
struct Norm {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    int groups = 0;  // 0 = layer norm over channels per position

    Norm() = default;
    Norm(ParameterStore<T>& store, const std::string& name, int channels, int groups_ = 0) : groups(groups_) {
        gamma = &store.add(name + ".gamma", Shape{channels, 1, 1, 1});
        beta = &store.add(name + ".beta", Shape{channels, 1, 1, 1});
        std::fill(gamma->value.data.begin(), gamma->value.data.end(), T(1));
    }

    typename Tape<T>::Var operator()(Tape<T>& tp, typename Tape<T>::Var x) const {
        if (groups > 0) return tp.group_norm(x, groups, tp.param(*gamma), tp.param(*beta));
        return tp.layer_norm(x, tp.param(*gamma), tp.param(*beta));
    }
};

/// GN -> SiLU -> conv -> (+ time) -> GN -> SiLU -> conv, plus a 1x1 skip when widths differ.
template <class T>
struct ResBlock {
    Norm<T> norm1, norm2;
    Conv<T> conv1, conv2, skip, time_proj;
    bool has_skip = false;
    bool has_time = false;

    ResBlock() = default;
    ResBlock(ParameterStore<T>& store, Rng& rng, const std::string& name, int cin, int cout, int groups,
             int time_dim)
        : norm1(store, name + ".norm1", cin, groups),
          norm2(store, name + ".norm2", cout, groups),
          conv1(store, rng, name + ".conv1", cin, cout, 3),
          conv2(store, rng, name + ".conv2", cout, cout, 3, 1, true, 0.5) {
        if (cin != cout) {
            skip = Conv<T>(store, rng, name + ".skip", cin, cout, 1);
            has_skip = true;
        }
        if (time_dim > 0) {
            time_proj = Conv<T>(store, rng, name + ".time", time_dim, cout, 1);
            has_time = true;
        }
    }

    typename Tape<T>::Var operator()(Tape<T>& tp, typename Tape<T>::Var x, typename Tape<T>::Var temb) const {
        auto h = conv1(tp, tp.silu(norm1(tp, x)));
        if (has_time && temb) h = tp.add_per_sample(h, time_proj(tp, tp.silu(temb)));
        h = conv2(tp, tp.silu(norm2(tp, h)));
        return tp.add(has_skip ? skip(tp, x) : x, h);
    }
};

/// Reference segments for one attention layer: tokens from the source and the
/// driving ReferenceNet. Either may be null (treated as absent).
template <class T>
struct ReferenceTokens {
    typename Tape<T>::Var source = nullptr;
    typename Tape<T>::Var driving = nullptr;
};

/// Self-attention whose keys/values span [h; s_src; s_drv] while queries come from
/// h only. Rows of attention are independent, so this returns exactly the UNet
/// segment of full three-stream attention followed by a split.
template <class T>
struct ConcatSelfAttention {
    Conv<T> to_q, to_k, to_v, to_out;
    int heads = 1;

    ConcatSelfAttention() = default;
    ConcatSelfAttention(ParameterStore<T>& store, Rng& rng, const std::string& name, int channels, int heads_)
        : to_q(store, rng, name + ".q", channels, channels, 1, 1, false),
          to_k(store, rng, name + ".k", channels, channels, 1, 1, false),
          to_v(store, rng, name + ".v", channels, channels, 1, 1, false),
          to_out(store, rng, name + ".out", channels, channels, 1),
          heads(heads_) {}

    typename Tape<T>::Var operator()(Tape<T>& tp, typename Tape<T>::Var h, ReferenceTokens<T> refs) const {
        using Var = typename Tape<T>::Var;
        const int c = h->shape().c;
        for (Var s : {refs.source, refs.driving})
            if (s && (s->shape().c != c || s->shape().n != h->shape().n))
                throw ShapeError("concat self-attention: reference " + s->shape().str() + " vs " + h->shape().str());
        std::vector<Var> parts{h};
        if (refs.source) parts.push_back(refs.source);
        if (refs.driving) parts.push_back(refs.driving);
        Var kv = parts.size() == 1 ? h : tp.concat_tokens(std::span<const Var>(parts));
        auto q = to_q(tp, h);
        auto k = to_k(tp, kv);
        auto v = to_v(tp, kv);
        return to_out(tp, tp.attention(q, k, v, heads));
    }
};

template <class T>
struct CrossAttention {
    Conv<T> to_q, to_k, to_v, to_out;
    int heads = 1;

    CrossAttention() = default;
    CrossAttention(ParameterStore<T>& store, Rng& rng, const std::string& name, int channels, int ctx_dim,
                   int heads_)
        : to_q(store, rng, name + ".q", channels, channels, 1, 1, false),
          to_k(store, rng, name + ".k", ctx_dim, channels, 1, 1, false),
          to_v(store, rng, name + ".v", ctx_dim, channels, 1, 1, false),
          to_out(store, rng, name + ".out", channels, channels, 1),
          heads(heads_) {}

    typename Tape<T>::Var operator()(Tape<T>& tp, typename Tape<T>::Var h, typename Tape<T>::Var ctx) const {
        return to_out(tp, tp.attention(to_q(tp, h), to_k(tp, ctx), to_v(tp, ctx), heads));
    }
};

/// Transformer block: LN -> concat self-attention, LN -> cross-attention on the
/// embedding context, LN -> MLP; each with a residual connection.
template <class T>
struct AttentionBlock {
    Norm<T> norm1, norm2, norm3;
    ConcatSelfAttention<T> self_attn;
    CrossAttention<T> cross_attn;
    Conv<T> ff1, ff2;

    AttentionBlock() = default;
    AttentionBlock(ParameterStore<T>& store, Rng& rng, const std::string& name, int channels, int ctx_dim,
                   int heads)
        : norm1(store, name + ".norm1", channels),
          norm2(store, name + ".norm2", channels),
          norm3(store, name + ".norm3", channels),
          self_attn(store, rng, name + ".self", channels, heads),
          cross_attn(store, rng, name + ".cross", channels, ctx_dim, heads),
          ff1(store, rng, name + ".ff1", channels, 4 * channels, 1),
          ff2(store, rng, name + ".ff2", 4 * channels, channels, 1, 1, true, 0.5) {}

    /// Token matrix entering self-attention; this is what a ReferenceNet exports.
    typename Tape<T>::Var state(Tape<T>& tp, typename Tape<T>::Var h) const { return norm1(tp, h); }

    typename Tape<T>::Var operator()(Tape<T>& tp, typename Tape<T>::Var h, typename Tape<T>::Var normed,
                                     typename Tape<T>::Var ctx, ReferenceTokens<T> refs) const {
        h = tp.add(h, self_attn(tp, normed, refs));
        h = tp.add(h, cross_attn(tp, norm2(tp, h), ctx));
        return tp.add(h, ff2(tp, tp.silu(ff1(tp, norm3(tp, h)))));
    }
};

/// Sinusoidal timestep features [dim, n, 1, 1].
template <class T>
Tensor<T> timestep_features(std::span<const int> timesteps, int dim) {
    const int n = static_cast<int>(timesteps.size());
    const int half = dim / 2;
    Tensor<T> out(Shape{dim, n, 1, 1});
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        for (int s = 0; s < n; ++s) {
            out.data[i * n + s] = static_cast<T>(std::sin(timesteps[s] * freq));
            out.data[(i + half) * n + s] = static_cast<T>(std::cos(timesteps[s] * freq));
        }
    }
    return out;
}

}  // namespace anonydiff
