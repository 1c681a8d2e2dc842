#include "anonydiff/condnet.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

using namespace anonydiff;

namespace {

Tensor<double> gaussian(Shape s, Rng& rng, double scale = 1.0) {
    Tensor<double> t(s);
    for (double& v : t.data) v = rng.normal() * scale;
    return t;
}

std::uint64_t subset_hash(const Networks<double>& nets, const std::vector<std::string>& names) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& n : names) h = hash_tensor(nets.store.find(n)->value, h);
    return h;
}

// Plain multi-head self-attention with an output projection, written against
// Eigen directly: per head softmax(q^T k / sqrt(dh)) over the sample's tokens.
Tensor<double> plain_attention(const ConcatSelfAttention<double>& a, const Tensor<double>& h) {
    const int c = h.shape.c, n = h.shape.n, tok = static_cast<int>(h.shape.spatial());
    auto w = [&](const Conv<double>& conv) {
        return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            conv.weight->value.data.data(), c, c);
    };
    const Eigen::MatrixXd wq = w(a.to_q), wk = w(a.to_k), wv = w(a.to_v), wo = w(a.to_out);
    const Eigen::VectorXd bo = Eigen::Map<const Eigen::VectorXd>(a.to_out.bias->value.data.data(), c);
    const int dh = c / a.heads;
    Tensor<double> out(h.shape);
    for (int s = 0; s < n; ++s) {
        Eigen::MatrixXd x(c, tok);
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < tok; ++i) x(ch, i) = h.at(ch, s, i);
        const Eigen::MatrixXd q = wq * x, k = wk * x, v = wv * x;
        Eigen::MatrixXd o(c, tok);
        for (int hd = 0; hd < a.heads; ++hd) {
            Eigen::MatrixXd logits = q.middleRows(hd * dh, dh).transpose() * k.middleRows(hd * dh, dh) / std::sqrt(dh);
            for (int r = 0; r < tok; ++r) {
                const double m = logits.row(r).maxCoeff();
                logits.row(r) = (logits.row(r).array() - m).exp();
                logits.row(r) /= logits.row(r).sum();
            }
            o.middleRows(hd * dh, dh) = v.middleRows(hd * dh, dh) * logits.transpose();
        }
        const Eigen::MatrixXd y = (wo * o).colwise() + bo;
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < tok; ++i) out.at(ch, s, i) = y(ch, i);
    }
    return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

struct Fixture {
    std::unique_ptr<Networks<double>> nets = init_networks<double>(DenoiserConfig{}, 3);
    Rng rng{17};
    int n = 2;
    Tensor<double> tokens_src = gaussian({16, n, 8, 8}, rng), tokens_drv = gaussian({16, n, 8, 8}, rng);
    Tensor<double> z_src = unit(rng), z_drv = unit(rng);
    Tensor<double> x = gaussian({3, n, 32, 32}, rng);
    std::vector<int> t{10, 700};

    Tensor<double> unit(Rng& r) {
        Tensor<double> z = gaussian({64, n, 1, 1}, r);
        for (int s = 0; s < n; ++s) {
            double norm = 0;
            for (int k = 0; k < 64; ++k) norm += z.data[k * n + s] * z.data[k * n + s];
            for (int k = 0; k < 64; ++k) z.data[k * n + s] /= std::sqrt(norm);
        }
        return z;
    }
};

}  // namespace

TEST(InitNetworks, TwinsCopyUnetWeights) {
    auto nets = init_networks<double>(DenoiserConfig{}, 1);
    std::vector<std::string> src, drv, unet;
    for (const auto& [ref, u] : twin_pairs(*nets, kRefSrcPrefix)) {
        if (u.empty()) continue;
        src.push_back(ref);
        unet.push_back(u);
        drv.push_back(kRefDrvPrefix + ref.substr(std::string(kRefSrcPrefix).size()));
    }
    ASSERT_FALSE(src.empty());
    EXPECT_EQ(subset_hash(*nets, src), subset_hash(*nets, unet));
    EXPECT_EQ(subset_hash(*nets, drv), subset_hash(*nets, unet));
    auto prefixed = [&](const char* p) {
        return nets->store.hash([p](const Parameter<double>& q) { return q.name.rfind(p, 0) == 0; }, false);
    };
    EXPECT_EQ(prefixed(kRefSrcPrefix), prefixed(kRefDrvPrefix));
    for (const auto& name : src) EXPECT_EQ(nets->store.find(name)->value, nets->store.find("unet." + name.substr(7))->value);
}

TEST(InitNetworks, DeterministicInSeed) {
    auto a = init_networks<double>(DenoiserConfig{}, 4), b = init_networks<double>(DenoiserConfig{}, 4);
    auto c = init_networks<double>(DenoiserConfig{}, 5);
    EXPECT_EQ(a->store.hash(), b->store.hash());
    EXPECT_NE(a->store.hash(), c->store.hash());
}

TEST(InitNetworks, AttentionSubsetsMatch) {
    auto nets = init_networks<double>(DenoiserConfig{}, 1);
    auto count = [&](const std::string& prefix) {
        return nets->store.count([&](const Parameter<double>& p) {
            return p.name.rfind(prefix, 0) == 0 && p.name.find(".attn.") != std::string::npos;
        });
    };
    EXPECT_GT(count(kUnetPrefix), 0u);
    EXPECT_EQ(count(kUnetPrefix), count(kRefSrcPrefix));
    EXPECT_EQ(count(kUnetPrefix), count(kRefDrvPrefix));
    EXPECT_EQ(nets->unet.attention_layers(), nets->refsrc.attention_layers());
    for (int l = 0; l < nets->unet.attention_layers(); ++l)
        EXPECT_EQ(nets->unet.attention_block(l).norm1.gamma->value.shape,
                  nets->refsrc.attention_block(l).norm1.gamma->value.shape);
}

TEST(InitNetworks, TrainableSubset) {
    auto nets = init_networks<double>(DenoiserConfig{}, 1);
    for (const auto& p : nets->store.all()) {
        const bool expected = p.name.rfind(kUnetPrefix, 0) == 0 || p.name == kNullEmbedding || is_reference_attention(p.name);
        EXPECT_EQ(p.trainable, expected) << p.name;
    }
}

TEST(InitNetworks, InvalidConfig) {
    DenoiserConfig c;
    c.widths = {16, 0, 64};
    EXPECT_THROW(init_networks<double>(c, 0), InvalidConfig);
    c = {};
    c.attention_stages = {5};
    EXPECT_THROW(init_networks<double>(c, 0), InvalidConfig);
    c = {};
    c.heads = 3;
    EXPECT_THROW(init_networks<double>(c, 0), InvalidConfig);
}

TEST(RefnetForward, StateLayout) {
    Fixture f;
    const auto s = refnet_forward(f.nets->refsrc, f.tokens_src, f.z_src);
    ASSERT_EQ(static_cast<int>(s.layers.size()), f.nets->config.attention_layers());
    ASSERT_EQ(static_cast<int>(s.layers.size()), f.nets->unet.attention_layers());
    for (int l = 0; l < f.nets->unet.attention_layers(); ++l) {
        EXPECT_EQ(s.layers[l].shape.c, f.nets->unet.attention_block(l).norm1.gamma->value.shape.c);
        EXPECT_EQ(s.layers[l].shape.n, f.n);
    }
    EXPECT_EQ(s, refnet_forward(f.nets->refsrc, f.tokens_src, f.z_src));
}

TEST(RefnetForward, EmbeddingChangesStates) {
    Fixture f;
    const auto cond = refnet_forward(f.nets->refsrc, f.tokens_src, f.z_src);
    const auto null = refnet_forward(f.nets->refsrc, f.tokens_src, repeat_sample(f.nets->null_embedding->value, f.n));
    // The first layer's input precedes any cross-attention; later layers must differ.
    double diff = 0;
    for (std::size_t l = 1; l < cond.layers.size(); ++l) diff = std::max(diff, max_abs_diff(cond.layers[l], null.layers[l]));
    EXPECT_GT(diff, 0.0);
}

TEST(RefnetForward, RejectsWrongTokens) {
    Fixture f;
    EXPECT_THROW(refnet_forward(f.nets->refsrc, Tensor<double>({8, 2, 8, 8}), f.z_src), ShapeError);
}

TEST(ConcatSelfAttention, EmptyReferencesIsPlainSelfAttention) {
    Fixture f;
    const auto& layer = f.nets->unet.attention_block(0).self_attn;
    const auto h = gaussian({32, 2, 8, 8}, f.rng);
    const Tensor<double> empty({32, 2, 0, 0});
    const auto got = concat_self_attention(layer, h, empty, empty);
    ASSERT_EQ(got.shape, h.shape);
    EXPECT_LT(max_abs_diff(got, plain_attention(layer, h)), 1e-6);
}

TEST(ConcatSelfAttention, KeepsOnlyUnetSegment) {
    Fixture f;
    const auto& layer = f.nets->unet.attention_block(1).self_attn;
    const auto h = gaussian({64, 2, 4, 4}, f.rng);
    for (int tokens : {1, 16, 40}) {
        const auto s = gaussian({64, 2, tokens, 1}, f.rng), d = gaussian({64, 2, 16, 1}, f.rng);
        EXPECT_EQ(concat_self_attention(layer, h, s, d).shape, h.shape);
    }
}

TEST(ConcatSelfAttention, PermutationInvariantInReferences) {
    Fixture f;
    const auto& layer = f.nets->unet.attention_block(0).self_attn;
    const auto h = gaussian({32, 2, 8, 8}, f.rng);
    const auto s = gaussian({32, 2, 8, 8}, f.rng), d = gaussian({32, 2, 8, 8}, f.rng);
    std::vector<std::size_t> perm(64);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = (i * 37 + 11) % 64;
    Tensor<double> sp(s.shape);
    for (int c = 0; c < 32; ++c)
        for (int n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < 64; ++i) sp.at(c, n, i) = s.at(c, n, perm[i]);
    EXPECT_LT(max_abs_diff(concat_self_attention(layer, h, s, d), concat_self_attention(layer, h, sp, d)), 1e-5);
}

TEST(ConcatSelfAttention, ReferencesMatter) {
    Fixture f;
    const auto& layer = f.nets->unet.attention_block(0).self_attn;
    const auto h = gaussian({32, 1, 8, 8}, f.rng);
    const auto s = gaussian({32, 1, 8, 8}, f.rng, 3.0);
    const Tensor<double> empty({32, 1, 0, 0});
    EXPECT_GT(max_abs_diff(concat_self_attention(layer, h, s, empty), concat_self_attention(layer, h, empty, empty)), 1e-3);
}

TEST(ConcatSelfAttention, WidthMismatch) {
    Fixture f;
    const auto& layer = f.nets->unet.attention_block(0).self_attn;
    EXPECT_THROW(concat_self_attention(layer, Tensor<double>({32, 1, 4, 4}), Tensor<double>({16, 1, 4, 4}),
                                       Tensor<double>({32, 1, 0, 0})),
                 ShapeError);
}

TEST(UnetForward, ShapeAndDeterminism) {
    Fixture f;
    const auto s_src = refnet_forward(f.nets->refsrc, f.tokens_src, f.z_src);
    const auto s_drv = refnet_forward(f.nets->refdrv, f.tokens_drv, f.z_drv);
    const auto a = unet_forward(*f.nets, f.x, f.t, f.z_src, f.z_drv, s_src, s_drv);
    EXPECT_EQ(a.shape, f.x.shape);
    EXPECT_EQ(a.data, unet_forward(*f.nets, f.x, f.t, f.z_src, f.z_drv, s_src, s_drv).data);
    for (double v : a.data) ASSERT_TRUE(std::isfinite(v));
}

TEST(UnetForward, OtherConfigsKeepShape) {
    DenoiserConfig c;
    c.widths = {8, 16};
    c.attention_stages = {0, 1};
    c.heads = 2;
    c.groups = 4;
    c.embed_dim = 16;
    auto nets = init_networks<double>(c, 2);
    Rng rng(1);
    const auto tokens = gaussian({16, 1, 8, 8}, rng);
    Tensor<double> z = gaussian({16, 1, 1, 1}, rng);
    const auto s = refnet_forward(nets->refsrc, tokens, z);
    EXPECT_EQ(static_cast<int>(s.layers.size()), 4);
    const auto x = gaussian({3, 1, 32, 32}, rng);
    const std::vector<int> t{5};
    EXPECT_EQ(unet_forward(*nets, x, t, z, z, s, s).shape, x.shape);
}

TEST(UnetForward, MisalignedStates) {
    Fixture f;
    auto s = refnet_forward(f.nets->refsrc, f.tokens_src, f.z_src);
    s.layers.pop_back();
    EXPECT_THROW(unet_forward(*f.nets, f.x, f.t, f.z_src, f.z_drv, s, s), ShapeError);
}

TEST(UnetForward, FiniteDifferenceOnAttentionWeight) {
    Fixture f;
    const auto s_src = refnet_forward(f.nets->refsrc, f.tokens_src, f.z_src);
    const auto s_drv = refnet_forward(f.nets->refdrv, f.tokens_drv, f.z_drv);
    const auto target = gaussian(f.x.shape, f.rng);
    auto& w = *f.nets->store.find("unet.down.1.attn.self.q.weight");
    auto loss = [&]() {
        const auto y = unet_forward(*f.nets, f.x, f.t, f.z_src, f.z_drv, s_src, s_drv);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += (y.data[i] - target.data[i]) * (y.data[i] - target.data[i]);
        return s / static_cast<double>(y.size());
    };
    f.nets->store.zero_grad();
    {
        Tape<double> tp;
        auto refs = reference_tokens(tp, s_src, s_drv);
        auto ctx = context_tokens(tp, tp.constant_ref(f.z_src), tp.constant_ref(f.z_drv));
        auto y = f.nets->unet.forward(tp, tp.constant_ref(f.x), f.t, ctx, refs);
        tp.backward(tp.mse(y, tp.constant_ref(target)));
    }
    Rng pick(99);
    for (int k = 0; k < 5; ++k) {
        const std::size_t i = static_cast<std::size_t>(pick.integer(0, static_cast<std::int64_t>(w.value.size())));
        const double orig = w.value.data[i], h = 1e-5;
        w.value.data[i] = orig + h;
        const double up = loss();
        w.value.data[i] = orig - h;
        const double down = loss();
        w.value.data[i] = orig;
        const double numeric = (up - down) / (2 * h), analytic = w.grad.data[i];
        EXPECT_LT(std::abs(numeric - analytic) / std::max(std::abs(numeric), 1e-8), 1e-3) << "coordinate " << i;
    }
}

TEST(NullConditioning, DeterministicAndImageIndependent) {
    auto nets = init_networks<double>(DenoiserConfig{}, 8);
    const auto a = null_conditioning(*nets), b = null_conditioning(*nets);
    EXPECT_EQ(a.state, b.state);
    EXPECT_EQ(a.z, nets->null_embedding->value);
    const Tensor<double> zeros({16, 1, 8, 8});
    EXPECT_EQ(a.state, refnet_forward(nets->refsrc, zeros, nets->null_embedding->value));
}
