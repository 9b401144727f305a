#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "crossflow/autodiff.hpp"
#include "crossflow/rng.hpp"
#include "crossflow/tensor.hpp"

namespace crossflow::nn {

using ad::BnState;
using ad::Mode;
using ad::Parameter;
using ad::Tape;
using ad::Var;

// Parameters are drawn at float32 precision so that the float32 archive
// format round-trips freshly initialized models without loss.
inline double f32_exact(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void xavier_uniform(Tensor& t, int fan_in, int fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::size_t i = 0;
    double a, b;
    for (; i + 1 < t.data.size(); i += 2) {
        rng.uniform_pair24(a, b);
        t.data[i] = f32_exact(limit * (2.0 * a - 1.0));
        t.data[i + 1] = f32_exact(limit * (2.0 * b - 1.0));
    }
    if (i < t.data.size()) {
        rng.uniform_pair24(a, b);
        t.data[i] = f32_exact(limit * (2.0 * a - 1.0));
    }
}

struct Dense {
    Parameter weight;  // [out, in]
    Parameter bias;    // [out]

    void init(const std::string& prefix, int in, int out, Rng& rng) {
        weight = Parameter(prefix + ".weight", Tensor({out, in}));
        bias = Parameter(prefix + ".bias", Tensor({out}));
        xavier_uniform(weight.value, in, out, rng);
    }

    int in_features() const { return weight.value.dim(1); }
    int out_features() const { return weight.value.dim(0); }

    Var apply(Tape& t, Var x) { return t.affine(t.param(weight), x, t.param(bias)); }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

struct Conv2D {
    Parameter kernels;  // [Cout, Cin, kh, kw]
    Parameter bias;     // [Cout]
    Padding padding = Padding::Same;

    void init(const std::string& prefix, int c_out, int c_in, int kh, int kw, Padding pad,
              Rng& rng) {
        padding = pad;
        kernels = Parameter(prefix + ".kernel", Tensor({c_out, c_in, kh, kw}));
        bias = Parameter(prefix + ".bias", Tensor({c_out}));
        xavier_uniform(kernels.value, c_in * kh * kw, c_out * kh * kw, rng);
    }

    Var apply(Tape& t, Var x) {
        return t.conv2d(x, t.param(kernels), t.param(bias), padding);
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&kernels);
        out.push_back(&bias);
    }
};

struct Deconv2D {
    Parameter kernels;  // [Cout, Cin, kh, kw]
    Parameter bias;     // [Cout]

    void init(const std::string& prefix, int c_out, int c_in, int kh, int kw, Rng& rng) {
        kernels = Parameter(prefix + ".kernel", Tensor({c_out, c_in, kh, kw}));
        bias = Parameter(prefix + ".bias", Tensor({c_out}));
        xavier_uniform(kernels.value, c_in * kh * kw, c_out * kh * kw, rng);
    }

    Var apply(Tape& t, Var x) { return t.deconv2d(x, t.param(kernels), t.param(bias)); }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&kernels);
        out.push_back(&bias);
    }
};

struct PReLU {
    Parameter slopes;

    void init(const std::string& prefix, int channels) {
        slopes = Parameter(prefix + ".slope", Tensor::full({channels}, 0.25));
    }

    Var apply(Tape& t, Var x) { return t.prelu(x, t.param(slopes)); }

    void collect(std::vector<Parameter*>& out) { out.push_back(&slopes); }
};

struct BatchNorm {
    Parameter gamma;
    Parameter beta;
    BnState state;

    void init(const std::string& prefix, int features) {
        gamma = Parameter(prefix + ".gamma", Tensor::full({features}, 1.0));
        beta = Parameter(prefix + ".beta", Tensor({features}));
        state.running_mean = Tensor({features});
        state.running_var = Tensor::full({features}, 1.0);
    }

    // Input must be stacked along a leading batch axis ([N,F] or [N,C,H,W]).
    Var apply(Tape& t, Var stacked, Mode mode) {
        return t.batchnorm(stacked, t.param(gamma), t.param(beta), state, mode);
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

// Single-layer LSTM; gates use sigmoid, candidate and output squash with tanh,
// initial states are zero. Forget-gate bias starts at 1.
struct LSTM {
    Parameter w_i, u_i, b_i;
    Parameter w_f, u_f, b_f;
    Parameter w_g, u_g, b_g;
    Parameter w_o, u_o, b_o;
    int hidden = 0;

    void init(const std::string& prefix, int input_dim, int hidden_dim, Rng& rng) {
        hidden = hidden_dim;
        auto gate = [&](const char* g, Parameter& w, Parameter& u, Parameter& b, double bias_init) {
            w = Parameter(prefix + ".w_" + g, Tensor({hidden_dim, input_dim}));
            u = Parameter(prefix + ".u_" + g, Tensor({hidden_dim, hidden_dim}));
            b = Parameter(prefix + ".b_" + g, Tensor::full({hidden_dim}, bias_init));
            xavier_uniform(w.value, input_dim, hidden_dim, rng);
            xavier_uniform(u.value, hidden_dim, hidden_dim, rng);
        };
        gate("i", w_i, u_i, b_i, 0.0);
        gate("f", w_f, u_f, b_f, 1.0);
        gate("g", w_g, u_g, b_g, 0.0);
        gate("o", w_o, u_o, b_o, 0.0);
    }

    // Runs the recurrence over a nonempty sequence; returns the last hidden
    // state, or the mean of per-step hidden states when mean_pool is set.
    Var apply(Tape& t, const std::vector<Var>& sequence, bool mean_pool = false) {
        CF_CHECK(!sequence.empty(), "lstm: empty sequence");
        Var h = t.input(Tensor({hidden}));
        Var c = t.input(Tensor({hidden}));
        Var zero = t.input(Tensor({hidden}));
        std::vector<Var> steps;
        for (Var x : sequence) {
            Var i = t.sigmoid(t.add(t.affine(t.param(w_i), x, t.param(b_i)),
                                    t.affine(t.param(u_i), h, zero)));
            Var f = t.sigmoid(t.add(t.affine(t.param(w_f), x, t.param(b_f)),
                                    t.affine(t.param(u_f), h, zero)));
            Var g = t.tanh_op(t.add(t.affine(t.param(w_g), x, t.param(b_g)),
                                    t.affine(t.param(u_g), h, zero)));
            Var o = t.sigmoid(t.add(t.affine(t.param(w_o), x, t.param(b_o)),
                                    t.affine(t.param(u_o), h, zero)));
            c = t.add(t.mul(f, c), t.mul(i, g));
            h = t.mul(o, t.tanh_op(c));
            steps.push_back(h);
        }
        if (mean_pool) return t.scale(t.add_n(steps), 1.0 / static_cast<double>(steps.size()));
        return h;
    }

    void collect(std::vector<Parameter*>& out) {
        for (Parameter* p : {&w_i, &u_i, &b_i, &w_f, &u_f, &b_f, &w_g, &u_g, &b_g, &w_o, &u_o, &b_o})
            out.push_back(p);
    }
};

struct SoftmaxResult {
    double loss;
    Tensor probs;
};

inline SoftmaxResult softmax_cross_entropy(const Tensor& logits, int label) {
    CF_CHECK(logits.rank() == 1, "softmax_cross_entropy: logits must be rank 1");
    const int classes = logits.dim(0);
    CF_CHECK(label >= 0 && label < classes, "softmax_cross_entropy: label out of range");
    double max_logit = logits.data[0];
    for (double v : logits.data) max_logit = std::max(max_logit, v);
    Tensor probs({classes});
    double z = 0.0;
    for (int c = 0; c < classes; ++c) {
        probs.at(c) = std::exp(logits.at(c) - max_logit);
        z += probs.at(c);
    }
    for (int c = 0; c < classes; ++c) probs.at(c) /= z;
    return {std::log(z) - (logits.at(label) - max_logit), std::move(probs)};
}

}  // namespace crossflow::nn
