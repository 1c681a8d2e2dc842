#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace anonydiff {

/// Thrown on any dimension disagreement between operands.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<MatrixRM<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const MatrixRM<T>>;

/// Channel-major 4D shape. Storage order is [c][n][h][w], so every tensor is also
/// a (c x n*h*w) row-major matrix. Feature maps and token sequences share this
/// layout: a token sequence of length T is simply h = T, w = 1.
struct Shape {
    int c = 0;
    int n = 0;
    int h = 1;
    int w = 1;

    std::size_t spatial() const { return static_cast<std::size_t>(h) * w; }
    std::size_t cols() const { return static_cast<std::size_t>(n) * spatial(); }
    std::size_t size() const { return static_cast<std::size_t>(c) * cols(); }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        return "[" + std::to_string(c) + "," + std::to_string(n) + "," + std::to_string(h) + "," +
               std::to_string(w) + "]";
    }
};

/// Storage always starts on Eigen's maximum alignment, so vectorised reductions
/// peel the same way on every call and results are bitwise reproducible.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct Tensor {
    Shape shape;
    Buffer<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.size(), fill) {}
    Tensor(Shape s, Buffer<T> values) : shape(s), data(std::move(values)) {
        if (data.size() != shape.size()) throw ShapeError("tensor data does not match shape " + shape.str());
    }
    Tensor(Shape s, const std::vector<T>& values) : Tensor(s, Buffer<T>(values.begin(), values.end())) {}

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    bool operator==(const Tensor&) const = default;

    MatMap<T> mat() { return MatMap<T>(data.data(), shape.c, static_cast<Eigen::Index>(shape.cols())); }
    ConstMatMap<T> mat() const {
        return ConstMatMap<T>(data.data(), shape.c, static_cast<Eigen::Index>(shape.cols()));
    }

    /// Element (channel, sample, spatial index).
    T& at(int c, int n, std::size_t s) { return data[static_cast<std::size_t>(c) * shape.cols() + n * shape.spatial() + s]; }
    T at(int c, int n, std::size_t s) const {
        return data[static_cast<std::size_t>(c) * shape.cols() + n * shape.spatial() + s];
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline void require_same(const Shape& a, const Shape& b, const char* what) {
    if (!(a == b)) throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

/// Extracts sample `n` of a batched tensor as a batch-1 tensor.
template <class T>
Tensor<T> slice_sample(const Tensor<T>& x, int n) {
    Shape s = x.shape;
    s.n = 1;
    Tensor<T> out(s);
    const std::size_t sp = x.shape.spatial();
    for (int c = 0; c < s.c; ++c)
        std::copy_n(x.data.begin() + c * x.shape.cols() + n * sp, sp, out.data.begin() + c * sp);
    return out;
}

/// Stacks batch tensors of identical (c, h, w) along the sample axis.
template <class T>
Tensor<T> stack_samples(const std::vector<const Tensor<T>*>& parts) {
    if (parts.empty()) throw ShapeError("stack_samples: no inputs");
    Shape s = parts.front()->shape;
    s.n = 0;
    for (const auto* p : parts) {
        if (p->shape.c != s.c || p->shape.h != s.h || p->shape.w != s.w)
            throw ShapeError("stack_samples: incompatible " + p->shape.str());
        s.n += p->shape.n;
    }
    Tensor<T> out(s);
    const std::size_t sp = s.spatial();
    for (int c = 0; c < s.c; ++c) {
        std::size_t off = c * s.cols();
        for (const auto* p : parts) {
            std::size_t len = p->shape.n * sp;
            std::copy_n(p->data.begin() + c * p->shape.cols(), len, out.data.begin() + off);
            off += len;
        }
    }
    return out;
}

/// 64-bit FNV-1a over raw bytes; used for cheap parameter fingerprints.
inline std::uint64_t fnv1a(const void* bytes, std::size_t len, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

template <class T>
std::uint64_t hash_tensor(const Tensor<T>& t, std::uint64_t h = 1469598103934665603ull) {
    h = fnv1a(&t.shape, sizeof(Shape), h);
    return fnv1a(t.data.data(), t.data.size() * sizeof(T), h);
}

}  // namespace anonydiff
