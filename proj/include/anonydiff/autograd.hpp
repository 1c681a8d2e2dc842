#pragma once

// Minimal reverse-mode differentiation over channel-major tensors.
//
// A Tape records every op of one forward pass. Ops are coarse (whole
// convolutions, norms, attention) so the per-node bookkeeping is negligible next
// to the GEMMs. Creation order is a valid topological order, so backward() is a
// single reverse sweep. With gradients disabled the tape is a plain evaluator.

#include "anonydiff/tensor.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace anonydiff {

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;

    void zero_grad() { grad = Tensor<T>(value.shape); }
};

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    const Tensor<T>* external = nullptr;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    std::function<void()> backward;

    const Tensor<T>& val() const { return external ? *external : value; }
    const Shape& shape() const { return val().shape; }
    Tensor<T>& ensure_grad() {
        if (grad.empty()) grad = Tensor<T>(shape());
        return grad;
    }
};

template <class T>
class Tape {
public:
    using Var = Node<T>*;
    using Mat = MatrixRM<T>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }
    /// Number of loss ops (mse, cross_entropy) recorded on this tape.
    std::size_t loss_terms() const { return loss_terms_; }

    Var constant(Tensor<T> t) { return make(std::move(t), false); }

    /// Wraps a tensor without copying; the caller keeps it alive for the tape's lifetime.
    Var constant_ref(const Tensor<T>& t) {
        auto& n = nodes_.emplace_back();
        n.external = &t;
        return &n;
    }

    Var param(Parameter<T>& p) {
        auto& n = nodes_.emplace_back();
        n.external = &p.value;
        n.param = &p;
        n.needs_grad = grad_enabled_ && p.trainable;
        if (n.needs_grad) {
            Node<T>* self = &n;
            n.backward = [self] {
                auto& g = self->param->grad;
                if (g.empty()) g = Tensor<T>(self->param->value.shape);
                g.mat() += self->grad.mat();
            };
        }
        return &n;
    }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
    void backward(Var loss) {
        if (loss->shape().size() != 1) throw ShapeError("backward: loss must be a scalar");
        if (!loss->needs_grad) return;
        loss->ensure_grad().data[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->needs_grad && it->backward && !it->grad.empty()) it->backward();
        }
    }

    // ------------------------------------------------------------------ linear algebra

    /// k x k convolution with zero padding k/2. Weight is [cout, cin*k*k].
    Var conv2d(Var x, Var w, Var b, int k, int stride) {
        const Shape xs = x->shape();
        const Shape ws = w->shape();
        if (ws.spatial() != static_cast<std::size_t>(xs.c * k * k))
            throw ShapeError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
        const int pad = k / 2;
        const int ho = (xs.h + 2 * pad - k) / stride + 1;
        const int wo = (xs.w + 2 * pad - k) / stride + 1;
        Tensor<T> col = (k == 1 && stride == 1) ? Tensor<T>() : im2col(x->val(), k, stride, pad, ho, wo);
        Tensor<T> out(Shape{ws.c, xs.n, ho, wo});
        if (k == 1 && stride == 1)
            out.mat().noalias() = w->val().mat() * x->val().mat();
        else
            out.mat().noalias() = w->val().mat() * std::as_const(col).mat();
        if (b) out.mat().colwise() += b->val().mat().col(0);
        Var o = make(std::move(out), needs(x, w, b));
        if (o->needs_grad) {
            o->backward = [=, this, col = std::move(col)] {
                const auto dy = o->grad.mat();
                const bool direct = (k == 1 && stride == 1);
                if (w->needs_grad) {
                    if (direct)
                        w->ensure_grad().mat().noalias() += dy * x->val().mat().transpose();
                    else
                        w->ensure_grad().mat().noalias() += dy * col.mat().transpose();
                }
                if (b && b->needs_grad) b->ensure_grad().mat().col(0) += dy.rowwise().sum();
                if (x->needs_grad) {
                    if (direct) {
                        x->ensure_grad().mat().noalias() += w->val().mat().transpose() * dy;
                    } else {
                        Mat dcol = w->val().mat().transpose() * dy;
                        col2im_add(dcol, x->ensure_grad(), k, stride, pad, ho, wo);
                    }
                }
            };
        }
        return o;
    }

    /// Per-position affine map over channels; weight is [cout, cin].
    Var linear(Var x, Var w, Var b) { return conv2d(x, w, b, 1, 1); }

    // ------------------------------------------------------------------ normalization

    Var group_norm(Var x, int groups, Var gamma, Var beta, T eps = T(1e-5)) {
        const Shape s = x->shape();
        if (s.c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
        const int cg = s.c / groups;
        const std::size_t sp = s.spatial();
        const T count = static_cast<T>(cg * sp);
        Tensor<T> xhat(s);
        std::vector<T> inv_std(static_cast<std::size_t>(s.n) * groups);
        const auto& xv = x->val();
        for (int n = 0; n < s.n; ++n) {
            for (int g = 0; g < groups; ++g) {
                T mean = 0, sq = 0;
                for (int c = g * cg; c < (g + 1) * cg; ++c) {
                    const T* p = &xv.data[c * s.cols() + n * sp];
                    for (std::size_t i = 0; i < sp; ++i) mean += p[i];
                }
                mean /= count;
                for (int c = g * cg; c < (g + 1) * cg; ++c) {
                    const T* p = &xv.data[c * s.cols() + n * sp];
                    for (std::size_t i = 0; i < sp; ++i) sq += (p[i] - mean) * (p[i] - mean);
                }
                const T is = T(1) / std::sqrt(sq / count + eps);
                inv_std[n * groups + g] = is;
                for (int c = g * cg; c < (g + 1) * cg; ++c) {
                    const T* p = &xv.data[c * s.cols() + n * sp];
                    T* q = &xhat.data[c * s.cols() + n * sp];
                    for (std::size_t i = 0; i < sp; ++i) q[i] = (p[i] - mean) * is;
                }
            }
        }
        Tensor<T> out(s);
        out.mat() = xhat.mat();
        apply_channel_affine(out, gamma->val(), beta->val());
        Var o = make(std::move(out), needs(x, gamma, beta));
        if (o->needs_grad) {
            o->backward = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                const auto& dy = o->grad;
                channel_affine_grads(dy, xhat, gamma, beta);
                if (!x->needs_grad) return;
                auto& dx = x->ensure_grad();
                const auto& gm = gamma->val();
                for (int n = 0; n < s.n; ++n) {
                    for (int g = 0; g < groups; ++g) {
                        T m1 = 0, m2 = 0;
                        for (int c = g * cg; c < (g + 1) * cg; ++c) {
                            const std::size_t off = c * s.cols() + n * sp;
                            for (std::size_t i = 0; i < sp; ++i) {
                                const T d = dy.data[off + i] * gm.data[c];
                                m1 += d;
                                m2 += d * xhat.data[off + i];
                            }
                        }
                        m1 /= count;
                        m2 /= count;
                        const T is = inv_std[n * groups + g];
                        for (int c = g * cg; c < (g + 1) * cg; ++c) {
                            const std::size_t off = c * s.cols() + n * sp;
                            for (std::size_t i = 0; i < sp; ++i) {
                                const T d = dy.data[off + i] * gm.data[c];
                                dx.data[off + i] += is * (d - m1 - xhat.data[off + i] * m2);
                            }
                        }
                    }
                }
            };
        }
        return o;
    }

    /// Normalizes every position (column) over its channels.
    Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
        const Shape s = x->shape();
        const auto xm = x->val().mat();
        using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
        const Row mean = xm.colwise().mean().array();
        Tensor<T> xhat(s);
        auto xh = xhat.mat();
        xh = xm.array().rowwise() - mean;
        const Row inv_std = ((xh.array().square().colwise().sum() / T(s.c)) + eps).rsqrt();
        xh.array().rowwise() *= inv_std;
        Tensor<T> out(s);
        out.mat() = xh;
        apply_channel_affine(out, gamma->val(), beta->val());
        Var o = make(std::move(out), needs(x, gamma, beta));
        if (o->needs_grad) {
            o->backward = [=, xhat = std::move(xhat)] {
                channel_affine_grads(o->grad, xhat, gamma, beta);
                if (!x->needs_grad) return;
                Mat d = o->grad.mat();
                d.array().colwise() *= gamma->val().mat().col(0).array();
                const Row m1 = d.colwise().mean().array();
                const Row m2 = (d.array() * xhat.mat().array()).colwise().mean();
                Mat dx = d;
                dx.array().rowwise() -= m1;
                dx.array() -= xhat.mat().array().rowwise() * m2;
                dx.array().rowwise() *= inv_std;
                x->ensure_grad().mat() += dx;
            };
        }
        return o;
    }

    /// Divides every column by its L2 norm.
    Var l2_normalize(Var x, T eps = T(1e-12)) {
        const auto xm = x->val().mat();
        using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
        const Row inv = (xm.array().square().colwise().sum() + eps).rsqrt();
        Tensor<T> out(x->shape());
        out.mat() = xm.array().rowwise() * inv;
        Var o = make(std::move(out), needs(x));
        if (o->needs_grad) {
            o->backward = [=] {
                const auto y = o->val().mat().array();
                const auto dy = o->grad.mat().array();
                const Row proj = (y * dy).colwise().sum();
                Mat dx = (dy - y.rowwise() * proj).matrix();
                dx.array().rowwise() *= inv;
                x->ensure_grad().mat() += dx;
            };
        }
        return o;
    }

    // ------------------------------------------------------------------ pointwise

    Var silu(Var x) {
        Tensor<T> out(x->shape());
        const auto xa = x->val().mat().array();
        out.mat().array() = xa / (T(1) + (-xa).exp());
        Var o = make(std::move(out), needs(x));
        if (o->needs_grad) {
            o->backward = [=] {
                const auto xa = x->val().mat().array();
                const auto sig = (T(1) / (T(1) + (-xa).exp())).eval();
                x->ensure_grad().mat().array() += o->grad.mat().array() * (sig * (T(1) + xa * (T(1) - sig)));
            };
        }
        return o;
    }

    Var add(Var a, Var b) {
        require_same(a->shape(), b->shape(), "add");
        Tensor<T> out(a->shape());
        out.mat() = a->val().mat() + b->val().mat();
        Var o = make(std::move(out), needs(a, b));
        if (o->needs_grad) {
            o->backward = [=] {
                if (a->needs_grad) a->ensure_grad().mat() += o->grad.mat();
                if (b->needs_grad) b->ensure_grad().mat() += o->grad.mat();
            };
        }
        return o;
    }

    Var sub(Var a, Var b) { return add(a, scale(b, T(-1))); }

    Var scale(Var x, T s) {
        Tensor<T> out(x->shape());
        out.mat() = x->val().mat() * s;
        Var o = make(std::move(out), needs(x));
        if (o->needs_grad) o->backward = [=] { x->ensure_grad().mat() += o->grad.mat() * s; };
        return o;
    }

    /// Adds a per-sample channel vector e [c, n, 1, 1] at every position of x.
    Var add_per_sample(Var x, Var e) {
        const Shape s = x->shape();
        const Shape es = e->shape();
        if (es.c != s.c || es.n != s.n || es.spatial() != 1)
            throw ShapeError("add_per_sample: " + es.str() + " vs " + s.str());
        Tensor<T> out = x->val();
        const std::size_t sp = s.spatial();
        for (int c = 0; c < s.c; ++c)
            for (int n = 0; n < s.n; ++n) {
                const T v = e->val().data[c * s.n + n];
                T* p = &out.data[c * s.cols() + n * sp];
                for (std::size_t i = 0; i < sp; ++i) p[i] += v;
            }
        Var o = make(std::move(out), needs(x, e));
        if (o->needs_grad) {
            o->backward = [=] {
                if (x->needs_grad) x->ensure_grad().mat() += o->grad.mat();
                if (!e->needs_grad) return;
                auto& de = e->ensure_grad();
                for (int c = 0; c < s.c; ++c)
                    for (int n = 0; n < s.n; ++n) {
                        const T* p = &o->grad.data[c * s.cols() + n * sp];
                        T acc = 0;
                        for (std::size_t i = 0; i < sp; ++i) acc += p[i];
                        de.data[c * s.n + n] += acc;
                    }
            };
        }
        return o;
    }

    // ------------------------------------------------------------------ layout

    /// Stacks along channels. Channel-major storage makes this a plain append.
    Var concat_channels(Var a, Var b) {
        const Shape sa = a->shape(), sb = b->shape();
        if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
            throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
        Tensor<T> out(Shape{sa.c + sb.c, sa.n, sa.h, sa.w});
        std::copy(a->val().data.begin(), a->val().data.end(), out.data.begin());
        std::copy(b->val().data.begin(), b->val().data.end(), out.data.begin() + a->val().size());
        Var o = make(std::move(out), needs(a, b));
        if (o->needs_grad) {
            o->backward = [=] {
                const std::size_t na = a->shape().size();
                if (a->needs_grad) {
                    auto& g = a->ensure_grad();
                    for (std::size_t i = 0; i < na; ++i) g.data[i] += o->grad.data[i];
                }
                if (b->needs_grad) {
                    auto& g = b->ensure_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += o->grad.data[na + i];
                }
            };
        }
        return o;
    }

    /// Concatenates token sequences per sample: out[:, n] = [p0[:, n]; p1[:, n]; ...].
    /// Each part is read as a sequence of h*w tokens; the result has w = 1.
    Var concat_tokens(std::span<const Var> parts) {
        if (parts.empty()) throw ShapeError("concat_tokens: no inputs");
        const int c = parts[0]->shape().c, n = parts[0]->shape().n;
        std::size_t total = 0;
        bool any = false;
        for (Var p : parts) {
            if (p->shape().c != c || p->shape().n != n)
                throw ShapeError("concat_tokens: " + p->shape().str() + " vs channel/batch " + std::to_string(c) +
                                 "/" + std::to_string(n));
            total += p->shape().spatial();
            any = any || p->needs_grad;
        }
        Tensor<T> out(Shape{c, n, static_cast<int>(total), 1});
        for (int ch = 0; ch < c; ++ch)
            for (int s = 0; s < n; ++s) {
                std::size_t off = ch * out.shape.cols() + s * total;
                for (Var p : parts) {
                    const std::size_t sp = p->shape().spatial();
                    std::copy_n(p->val().data.begin() + ch * p->shape().cols() + s * sp, sp, out.data.begin() + off);
                    off += sp;
                }
            }
        Var o = make(std::move(out), any && grad_enabled_);
        if (o->needs_grad) {
            std::vector<Var> ps(parts.begin(), parts.end());
            o->backward = [=] {
                for (int ch = 0; ch < c; ++ch)
                    for (int s = 0; s < n; ++s) {
                        std::size_t off = ch * o->shape().cols() + s * total;
                        for (Var p : ps) {
                            const std::size_t sp = p->shape().spatial();
                            if (p->needs_grad) {
                                T* g = &p->ensure_grad().data[ch * p->shape().cols() + s * sp];
                                for (std::size_t i = 0; i < sp; ++i) g[i] += o->grad.data[off + i];
                            }
                            off += sp;
                        }
                    }
            };
        }
        return o;
    }
    Var concat_tokens(std::initializer_list<Var> parts) {
        return concat_tokens(std::span<const Var>(parts.begin(), parts.size()));
    }

    /// Per-sample select: out[:, n] = use_b[n] ? b[:, n] : a[:, n]. A batch-1 `b`
    /// is broadcast to every selected sample.
    Var select_samples(Var a, Var b, const std::vector<char>& use_b) {
        const Shape sa = a->shape(), sb = b->shape();
        if (sa.c != sb.c || sa.h != sb.h || sa.w != sb.w || (sb.n != sa.n && sb.n != 1) ||
            use_b.size() != static_cast<std::size_t>(sa.n))
            throw ShapeError("select_samples: " + sa.str() + " vs " + sb.str());
        const std::size_t sp = sa.spatial();
        auto src = [=](int n) { return sb.n == 1 ? 0 : n; };
        Tensor<T> out = a->val();
        for (int c = 0; c < sa.c; ++c)
            for (int n = 0; n < sa.n; ++n)
                if (use_b[n])
                    std::copy_n(b->val().data.begin() + c * sb.cols() + src(n) * sp, sp,
                                out.data.begin() + c * sa.cols() + n * sp);
        Var o = make(std::move(out), needs(a, b));
        if (o->needs_grad) {
            o->backward = [=] {
                for (int c = 0; c < sa.c; ++c)
                    for (int n = 0; n < sa.n; ++n) {
                        const T* g = &o->grad.data[c * sa.cols() + n * sp];
                        Var dst = use_b[n] ? b : a;
                        if (!dst->needs_grad) continue;
                        const std::size_t off = c * dst->shape().cols() + (use_b[n] ? src(n) : n) * sp;
                        T* d = &dst->ensure_grad().data[off];
                        for (std::size_t i = 0; i < sp; ++i) d[i] += g[i];
                    }
            };
        }
        return o;
    }

    /// [c, n, h, w] -> [c*h*w, n, 1, 1]: one feature column per sample.
    Var flatten(Var x) {
        const Shape s = x->shape();
        const std::size_t sp = s.spatial();
        Tensor<T> out(Shape{static_cast<int>(s.c * sp), s.n, 1, 1});
        for (int c = 0; c < s.c; ++c)
            for (int n = 0; n < s.n; ++n)
                for (std::size_t i = 0; i < sp; ++i) out.data[(c * sp + i) * s.n + n] = x->val().at(c, n, i);
        Var o = make(std::move(out), needs(x));
        if (o->needs_grad) {
            o->backward = [=] {
                auto& g = x->ensure_grad();
                for (int c = 0; c < s.c; ++c)
                    for (int n = 0; n < s.n; ++n)
                        for (std::size_t i = 0; i < sp; ++i) g.at(c, n, i) += o->grad.data[(c * sp + i) * s.n + n];
            };
        }
        return o;
    }

    /// Reinterprets (h, w) with the same number of positions.
    Var reshape(Var x, int h, int w) {
        const Shape s = x->shape();
        if (static_cast<std::size_t>(h) * w != s.spatial()) throw ShapeError("reshape: " + s.str());
        Tensor<T> out = x->val();
        out.shape.h = h;
        out.shape.w = w;
        Var o = make(std::move(out), needs(x));
        if (o->needs_grad) o->backward = [=] { x->ensure_grad().mat() += o->grad.mat(); };
        return o;
    }

    Var upsample2x(Var x) {
        const Shape s = x->shape();
        Tensor<T> out(Shape{s.c, s.n, s.h * 2, s.w * 2});
        const std::size_t planes = static_cast<std::size_t>(s.c) * s.n;
        for (std::size_t p = 0; p < planes; ++p) {
            const T* src = &x->val().data[p * s.spatial()];
            T* dst = &out.data[p * out.shape.spatial()];
            for (int y = 0; y < 2 * s.h; ++y)
                for (int xx = 0; xx < 2 * s.w; ++xx) dst[y * 2 * s.w + xx] = src[(y / 2) * s.w + xx / 2];
        }
        Var o = make(std::move(out), needs(x));
        if (o->needs_grad) {
            o->backward = [=] {
                auto& g = x->ensure_grad();
                for (std::size_t p = 0; p < planes; ++p) {
                    const T* src = &o->grad.data[p * 4 * s.spatial()];
                    T* dst = &g.data[p * s.spatial()];
                    for (int y = 0; y < 2 * s.h; ++y)
                        for (int xx = 0; xx < 2 * s.w; ++xx) dst[(y / 2) * s.w + xx / 2] += src[y * 2 * s.w + xx];
                }
            };
        }
        return o;
    }

    Var avgpool2x(Var x) {
        const Shape s = x->shape();
        if (s.h % 2 || s.w % 2) throw ShapeError("avgpool2x: odd extent " + s.str());
        Tensor<T> out(Shape{s.c, s.n, s.h / 2, s.w / 2});
        const std::size_t planes = static_cast<std::size_t>(s.c) * s.n;
        const int ow = s.w / 2;
        for (std::size_t p = 0; p < planes; ++p) {
            const T* src = &x->val().data[p * s.spatial()];
            T* dst = &out.data[p * out.shape.spatial()];
            for (int y = 0; y < s.h; ++y)
                for (int xx = 0; xx < s.w; ++xx) dst[(y / 2) * ow + xx / 2] += src[y * s.w + xx] * T(0.25);
        }
        Var o = make(std::move(out), needs(x));
        if (o->needs_grad) {
            o->backward = [=] {
                auto& g = x->ensure_grad();
                for (std::size_t p = 0; p < planes; ++p) {
                    const T* src = &o->grad.data[p * o->shape().spatial()];
                    T* dst = &g.data[p * s.spatial()];
                    for (int y = 0; y < s.h; ++y)
                        for (int xx = 0; xx < s.w; ++xx) dst[y * s.w + xx] += src[(y / 2) * ow + xx / 2] * T(0.25);
                }
            };
        }
        return o;
    }

    /// Mean over positions: [c, n, h, w] -> [c, n, 1, 1].
    Var global_avg_pool(Var x) {
        const Shape s = x->shape();
        Tensor<T> out(Shape{s.c, s.n, 1, 1});
        const std::size_t sp = s.spatial();
        for (std::size_t p = 0; p < static_cast<std::size_t>(s.c) * s.n; ++p) {
            T acc = 0;
            for (std::size_t i = 0; i < sp; ++i) acc += x->val().data[p * sp + i];
            out.data[p] = acc / T(sp);
        }
        Var o = make(std::move(out), needs(x));
        if (o->needs_grad) {
            o->backward = [=] {
                auto& g = x->ensure_grad();
                for (std::size_t p = 0; p < static_cast<std::size_t>(s.c) * s.n; ++p) {
                    const T d = o->grad.data[p] / T(sp);
                    for (std::size_t i = 0; i < sp; ++i) g.data[p * sp + i] += d;
                }
            };
        }
        return o;
    }

    // ------------------------------------------------------------------ attention

    /// Scaled dot-product attention with `heads` heads. q is [c, n, Tq], k and v are
    /// [c, n, Tk]; every query of sample n attends over the Tk keys of sample n.
    Var attention(Var q, Var k, Var v, int heads) {
        const Shape qs = q->shape(), ks = k->shape();
        require_same(ks, v->shape(), "attention k/v");
        if (qs.c != ks.c || qs.n != ks.n || qs.c % heads != 0)
            throw ShapeError("attention: q " + qs.str() + " k " + ks.str());
        const int dh = qs.c / heads;
        const int tq = static_cast<int>(qs.spatial()), tk = static_cast<int>(ks.spatial());
        const T sc = T(1) / std::sqrt(T(dh));
        const bool keep = grad_enabled_ && (q->needs_grad || k->needs_grad || v->needs_grad);
        std::vector<Mat> probs;
        if (keep) probs.reserve(static_cast<std::size_t>(qs.n) * heads);
        Tensor<T> out(qs);
        auto qm = q->val().mat();
        auto km = k->val().mat();
        auto vm = v->val().mat();
        auto om = out.mat();
        Mat p;
        for (int n = 0; n < qs.n; ++n)
            for (int h = 0; h < heads; ++h) {
                const auto qh = qm.block(h * dh, n * tq, dh, tq);
                const auto kh = km.block(h * dh, n * tk, dh, tk);
                const auto vh = vm.block(h * dh, n * tk, dh, tk);
                p.noalias() = (qh.transpose() * kh) * sc;
                softmax_rows(p);
                om.block(h * dh, n * tq, dh, tq).noalias() = vh * p.transpose();
                if (keep) probs.push_back(p);
            }
        Var o = make(std::move(out), keep);
        if (o->needs_grad) {
            o->backward = [=, probs = std::move(probs)] {
                auto qm = q->val().mat();
                auto km = k->val().mat();
                auto vm = v->val().mat();
                auto dom = o->grad.mat();
                Mat dp, ds;
                for (int n = 0; n < qs.n; ++n)
                    for (int h = 0; h < heads; ++h) {
                        const Mat& p = probs[static_cast<std::size_t>(n) * heads + h];
                        const auto doh = dom.block(h * dh, n * tq, dh, tq);
                        const auto vh = vm.block(h * dh, n * tk, dh, tk);
                        if (v->needs_grad) v->ensure_grad().mat().block(h * dh, n * tk, dh, tk).noalias() += doh * p;
                        dp.noalias() = doh.transpose() * vh;
                        ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
                        if (q->needs_grad)
                            q->ensure_grad().mat().block(h * dh, n * tq, dh, tq).noalias() +=
                                (km.block(h * dh, n * tk, dh, tk) * ds.transpose()) * sc;
                        if (k->needs_grad)
                            k->ensure_grad().mat().block(h * dh, n * tk, dh, tk).noalias() +=
                                (qm.block(h * dh, n * tq, dh, tq) * ds) * sc;
                    }
            };
        }
        return o;
    }

    // ------------------------------------------------------------------ losses

    /// Mean squared difference over every element; returns a scalar node.
    Var mse(Var a, Var b) {
        require_same(a->shape(), b->shape(), "mse");
        ++loss_terms_;
        const T m = static_cast<T>(a->shape().size());
        const T loss = (a->val().mat() - b->val().mat()).squaredNorm() / m;
        Var o = make(Tensor<T>(Shape{1, 1, 1, 1}, loss), needs(a, b));
        if (o->needs_grad) {
            o->backward = [=] {
                const T g = o->grad.data[0] * T(2) / m;
                if (a->needs_grad) a->ensure_grad().mat() += (a->val().mat() - b->val().mat()) * g;
                if (b->needs_grad) b->ensure_grad().mat() -= (a->val().mat() - b->val().mat()) * g;
            };
        }
        return o;
    }

    /// Mean softmax cross-entropy of logits [classes, n, 1, 1] against labels.
    Var cross_entropy(Var logits, std::span<const int> labels) {
        const Shape s = logits->shape();
        if (s.spatial() != 1 || static_cast<std::size_t>(s.n) != labels.size())
            throw ShapeError("cross_entropy: logits " + s.str());
        ++loss_terms_;
        Mat p = logits->val().mat().transpose();  // n x classes
        softmax_rows(p);
        T loss = 0;
        for (int n = 0; n < s.n; ++n) loss -= std::log(std::max(p(n, labels[n]), T(1e-30)));
        loss /= T(s.n);
        Var o = make(Tensor<T>(Shape{1, 1, 1, 1}, loss), needs(logits));
        if (o->needs_grad) {
            std::vector<int> lab(labels.begin(), labels.end());
            o->backward = [=, p = std::move(p), lab = std::move(lab)] {
                Mat d = p;
                for (int n = 0; n < s.n; ++n) d(n, lab[n]) -= T(1);
                logits->ensure_grad().mat() += d.transpose() * (o->grad.data[0] / T(s.n));
            };
        }
        return o;
    }

private:
    Var make(Tensor<T> value, bool needs_grad) {
        auto& n = nodes_.emplace_back();
        n.value = std::move(value);
        n.needs_grad = needs_grad && grad_enabled_;
        return &n;
    }

    template <class... V>
    bool needs(V... vs) const {
        return grad_enabled_ && ((vs != nullptr && vs->needs_grad) || ...);
    }

    static void softmax_rows(Mat& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            auto row = m.row(r).array();
            row = (row - row.maxCoeff()).exp();
            row /= row.sum();
        }
    }

    static void apply_channel_affine(Tensor<T>& t, const Tensor<T>& gamma, const Tensor<T>& beta) {
        auto m = t.mat();
        m.array().colwise() *= gamma.mat().col(0).array();
        m.array().colwise() += beta.mat().col(0).array();
    }

    static void channel_affine_grads(const Tensor<T>& dy, const Tensor<T>& xhat, Var gamma, Var beta) {
        if (gamma->needs_grad)
            gamma->ensure_grad().mat().col(0) += (dy.mat().array() * xhat.mat().array()).rowwise().sum().matrix();
        if (beta->needs_grad) beta->ensure_grad().mat().col(0) += dy.mat().rowwise().sum();
    }

    static Tensor<T> im2col(const Tensor<T>& x, int k, int stride, int pad, int ho, int wo) {
        const Shape s = x.shape;
        Tensor<T> col(Shape{s.c * k * k, s.n, ho, wo});
        const std::size_t ocols = col.shape.cols();
        const std::size_t osp = static_cast<std::size_t>(ho) * wo;
        for (int c = 0; c < s.c; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    T* row = &col.data[((c * k + ky) * k + kx) * ocols];
                    for (int n = 0; n < s.n; ++n) {
                        const T* src = &x.data[c * s.cols() + n * s.spatial()];
                        T* dst = row + n * osp;
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            T* d = dst + oy * wo;
                            if (iy < 0 || iy >= s.h) {
                                std::fill_n(d, wo, T(0));
                                continue;
                            }
                            const T* srow = src + iy * s.w;
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * stride + kx - pad;
                                d[ox] = (ix < 0 || ix >= s.w) ? T(0) : srow[ix];
                            }
                        }
                    }
                }
        return col;
    }

    static void col2im_add(const Mat& dcol, Tensor<T>& dx, int k, int stride, int pad, int ho, int wo) {
        const Shape s = dx.shape;
        const std::size_t osp = static_cast<std::size_t>(ho) * wo;
        for (int c = 0; c < s.c; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const T* row = dcol.data() + ((c * k + ky) * k + kx) * dcol.cols();
                    for (int n = 0; n < s.n; ++n) {
                        T* dst = &dx.data[c * s.cols() + n * s.spatial()];
                        const T* src = row + n * osp;
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= s.h) continue;
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * stride + kx - pad;
                                if (ix >= 0 && ix < s.w) dst[iy * s.w + ix] += src[oy * wo + ox];
                            }
                        }
                    }
                }
    }

    bool grad_enabled_;
    std::size_t loss_terms_ = 0;
    std::deque<Node<T>> nodes_;
};

}  // namespace anonydiff
