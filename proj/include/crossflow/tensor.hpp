#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace crossflow {

// Shape/precondition failures in numeric kernels and layer wiring.
struct ContractViolation : std::runtime_error {
    explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk data (bad magic, truncation). Carries the byte offset
// at which parsing stopped making sense.
struct FormatError : std::runtime_error {
    std::size_t offset;
    FormatError(const std::string& msg, std::size_t at)
        : std::runtime_error(msg + " (at byte " + std::to_string(at) + ")"), offset(at) {}
};

struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

#define CF_CHECK(cond, msg)                                     \
    do {                                                        \
        if (!(cond)) throw ::crossflow::ContractViolation(msg); \
    } while (0)

struct Shape {
    std::vector<int> dims;

    Shape() = default;
    Shape(std::initializer_list<int> d) : dims(d) {}
    explicit Shape(std::vector<int> d) : dims(std::move(d)) {}

    int rank() const { return static_cast<int>(dims.size()); }
    int operator[](int i) const { return dims[static_cast<std::size_t>(i)]; }

    std::size_t numel() const {
        std::size_t n = 1;
        for (int d : dims) n *= static_cast<std::size_t>(d);
        return n;
    }

    bool operator==(const Shape& o) const { return dims == o.dims; }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < dims.size(); ++i) {
            if (i) os << ',';
            os << dims[i];
        }
        os << ']';
        return os.str();
    }

    void validate() const {
        CF_CHECK(!dims.empty(), "rank-0 shape is forbidden");
        for (int d : dims) CF_CHECK(d >= 1, "dimension sizes must be >= 1, got shape " + str());
    }
};

// Dense row-major N-d array of doubles. The last axis varies fastest.
// Immutable by convention once handed to a graph; kernels return fresh values.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)) {
        shape.validate();
        data.assign(shape.numel(), 0.0);
    }

    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        shape.validate();
        CF_CHECK(data.size() == shape.numel(),
                 "data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    std::size_t numel() const { return data.size(); }
    int rank() const { return shape.rank(); }
    int dim(int i) const { return shape[i]; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // Row-major accessors for the ranks the kernels use.
    double& at(int i) { return data[static_cast<std::size_t>(i)]; }
    double at(int i) const { return data[static_cast<std::size_t>(i)]; }
    double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double& at(int c, int h, int w) {
        return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
    }
    double at(int c, int h, int w) const {
        return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
    }
    double& at(int n, int c, int h, int w) {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    double at(int n, int c, int h, int w) const {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
};

inline Tensor reshape(const Tensor& t, Shape new_shape) {
    new_shape.validate();
    CF_CHECK(new_shape.numel() == t.numel(),
             "reshape: element count mismatch " + t.shape.str() + " -> " + new_shape.str());
    return Tensor(std::move(new_shape), t.data);
}

inline Tensor flatten(const Tensor& t) {
    return Tensor({static_cast<int>(t.numel())}, t.data);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    CF_CHECK(a.shape == b.shape, "add: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    CF_CHECK(a.shape == b.shape, "mul: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (double& v : out.data) v *= s;
    return out;
}

inline double squared_l2_diff(const Tensor& a, const Tensor& b) {
    CF_CHECK(a.shape == b.shape,
             "squared_l2_diff: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc;
}

inline double dot(const Tensor& a, const Tensor& b) {
    CF_CHECK(a.shape == b.shape, "dot: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
    return acc;
}

namespace detail {

// Treat a row-major tensor as [outer, axis, inner] around `axis`.
inline void axis_split(const Shape& s, int axis, std::size_t& outer, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
    for (int i = axis + 1; i < s.rank(); ++i) inner *= static_cast<std::size_t>(s[i]);
}

}  // namespace detail

inline Tensor concat(const std::vector<const Tensor*>& parts, int axis) {
    CF_CHECK(!parts.empty(), "concat: no parts");
    const Shape& first = parts[0]->shape;
    CF_CHECK(axis >= 0 && axis < first.rank(), "concat: axis out of range");
    int axis_total = 0;
    for (const Tensor* p : parts) {
        CF_CHECK(p->rank() == first.rank(), "concat: rank mismatch");
        for (int i = 0; i < first.rank(); ++i) {
            if (i == axis) continue;
            CF_CHECK(p->shape[i] == first[i],
                     "concat: non-axis dimension mismatch at axis " + std::to_string(i));
        }
        axis_total += p->shape[axis];
    }
    Shape out_shape = first;
    out_shape.dims[static_cast<std::size_t>(axis)] = axis_total;
    Tensor out(out_shape);

    std::size_t outer, inner;
    detail::axis_split(out_shape, axis, outer, inner);
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t dst_axis_off = 0;
        for (const Tensor* p : parts) {
            const std::size_t pa = static_cast<std::size_t>(p->shape[axis]);
            const double* src = p->data.data() + o * pa * inner;
            double* dst = out.data.data() + (o * static_cast<std::size_t>(axis_total) + dst_axis_off) * inner;
            std::copy(src, src + pa * inner, dst);
            dst_axis_off += pa;
        }
    }
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    std::vector<const Tensor*> ptrs;
    ptrs.reserve(parts.size());
    for (const Tensor& t : parts) ptrs.push_back(&t);
    return concat(ptrs, axis);
}

inline std::vector<Tensor> split(const Tensor& t, int axis, const std::vector<int>& sizes) {
    CF_CHECK(axis >= 0 && axis < t.rank(), "split: axis out of range");
    int total = 0;
    for (int s : sizes) {
        CF_CHECK(s >= 1, "split: sizes must be positive");
        total += s;
    }
    CF_CHECK(total == t.shape[axis], "split: sizes do not sum to axis length");

    std::size_t outer, inner;
    detail::axis_split(t.shape, axis, outer, inner);
    std::vector<Tensor> out;
    out.reserve(sizes.size());
    int axis_off = 0;
    for (int s : sizes) {
        Shape ps = t.shape;
        ps.dims[static_cast<std::size_t>(axis)] = s;
        Tensor part(ps);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src =
                t.data.data() + (o * static_cast<std::size_t>(t.shape[axis]) + axis_off) * inner;
            double* dst = part.data.data() + o * static_cast<std::size_t>(s) * inner;
            std::copy(src, src + static_cast<std::size_t>(s) * inner, dst);
        }
        out.push_back(std::move(part));
        axis_off += s;
    }
    return out;
}

}  // namespace crossflow
