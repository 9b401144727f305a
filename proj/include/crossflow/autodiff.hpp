#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "crossflow/kernels.hpp"
#include "crossflow/rng.hpp"
#include "crossflow/tensor.hpp"

namespace crossflow::ad {

// A learnable tensor. Gradients accumulate across backward calls until reset.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;  // empty until first accumulation; empty means zero

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

    void reset_grad() { grad = Tensor(); }

    void accumulate(const Tensor& g) {
        CF_CHECK(g.shape == value.shape, "gradient shape mismatch for parameter " + name);
        if (grad.data.empty()) {
            grad = g;
        } else {
            for (std::size_t i = 0; i < grad.data.size(); ++i) grad.data[i] += g.data[i];
        }
    }

    const Tensor& grad_or_zero() {
        if (grad.data.empty()) grad = Tensor::zeros(value.shape);
        return grad;
    }
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

enum class Mode { Train, Eval };

// Running statistics and hyperparameters for a batch-normalization site.
struct BnState {
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.99;
    double eps = 1e-3;
};

// Dynamic computation graph (tape). Nodes are appended in evaluation order,
// which is by construction a topological order; backward walks it in reverse.
// A tape instance is confined to one thread; parameters referenced by a tape
// must outlive it.
class Tape {
public:
    int size() const { return static_cast<int>(nodes_.size()); }

    const Tensor& val(Var v) const {
        const Node& n = nodes_[check(v)];
        return n.external ? *n.external : n.value;
    }

    const char* op_tag(Var v) const { return nodes_[check(v)].op; }
    const std::vector<int>& inputs_of(Var v) const { return nodes_[check(v)].inputs; }

    Var input(Tensor t) {
        Node n;
        n.op = "input";
        n.value = std::move(t);
        return push(std::move(n));
    }

    Var param(Parameter& p) {
        Node n;
        n.op = "param";
        n.external = &p.value;
        n.param = &p;
        return push(std::move(n));
    }

    Var conv2d(Var x, Var k, Var b, Padding pad) {
        Node n;
        n.op = "conv2d";
        n.inputs = {x.id, k.id, b.id};
        n.value = crossflow::conv2d(val(x), val(k), val(b), pad);
        const int h = val(x).dim(1), w = val(x).dim(2);
        const int kh = val(k).dim(2), kw = val(k).dim(3);
        n.back = [x, k, b, pad, h, w, kh, kw](Tape& t, const Tensor& g) {
            t.add_grad(x, conv2d_grad_input(g, t.val(k), pad, h, w));
            t.add_grad(k, conv2d_grad_kernels(g, t.val(x), pad, kh, kw));
            t.add_grad(b, conv2d_grad_bias(g));
        };
        return push(std::move(n));
    }

    Var deconv2d(Var x, Var k, Var b) {
        Node n;
        n.op = "deconv2d";
        n.inputs = {x.id, k.id, b.id};
        n.value = crossflow::deconv2d(val(x), val(k), val(b));
        const int h = val(x).dim(1), w = val(x).dim(2);
        const int kh = val(k).dim(2), kw = val(k).dim(3);
        n.back = [x, k, b, h, w, kh, kw](Tape& t, const Tensor& g) {
            t.add_grad(x, deconv2d_grad_input(g, t.val(k), h, w));
            t.add_grad(k, deconv2d_grad_kernels(g, t.val(x), kh, kw));
            t.add_grad(b, deconv2d_grad_bias(g));
        };
        return push(std::move(n));
    }

    Var maxpool2x2(Var x) {
        PoolResult pr = crossflow::maxpool2x2(val(x));
        Node n;
        n.op = "maxpool2x2";
        n.inputs = {x.id};
        n.value = std::move(pr.output);
        Shape in_shape = val(x).shape;
        n.back = [x, argmax = std::move(pr.argmax), in_shape](Tape& t, const Tensor& g) {
            t.add_grad(x, maxpool2x2_grad(g, argmax, in_shape));
        };
        return push(std::move(n));
    }

    Var affine(Var w, Var x, Var b) {
        Node n;
        n.op = "affine";
        n.inputs = {w.id, x.id, b.id};
        n.value = crossflow::affine(val(x), val(w), val(b));
        n.back = [w, x, b](Tape& t, const Tensor& g) {
            t.add_grad(w, affine_grad_weights(g, t.val(x)));
            t.add_grad(x, affine_grad_input(g, t.val(w)));
            t.add_grad(b, g);
        };
        return push(std::move(n));
    }

    Var relu(Var x) {
        Node n;
        n.op = "relu";
        n.inputs = {x.id};
        n.value = val(x);
        for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
        n.back = [x](Tape& t, const Tensor& g) {
            const Tensor& xin = t.val(x);
            Tensor gx(xin.shape);
            for (std::size_t i = 0; i < gx.data.size(); ++i)
                gx.data[i] = xin.data[i] > 0.0 ? g.data[i] : 0.0;
            t.add_grad(x, gx);
        };
        return push(std::move(n));
    }

    // Slopes: one per channel for rank-3 [C,H,W] input, one per element for
    // rank-1 input. The x == 0 branch takes the negative slope.
    Var prelu(Var x, Var slopes) {
        const Tensor& xin = val(x);
        const Tensor& a = val(slopes);
        CF_CHECK(xin.rank() == 3 || xin.rank() == 1, "prelu: input must be rank 1 or 3");
        const int channels = xin.dim(0);
        CF_CHECK(a.rank() == 1 && a.dim(0) == channels,
                 "prelu: slope shape " + a.shape.str() + " does not match input " + xin.shape.str());
        const std::size_t per_ch = xin.numel() / static_cast<std::size_t>(channels);

        Node n;
        n.op = "prelu";
        n.inputs = {x.id, slopes.id};
        n.value = xin;
        for (std::size_t i = 0; i < n.value.data.size(); ++i) {
            const double v = n.value.data[i];
            if (v <= 0.0) n.value.data[i] = a.data[i / per_ch] * v;
        }
        n.back = [x, slopes, per_ch, channels](Tape& t, const Tensor& g) {
            const Tensor& xv = t.val(x);
            const Tensor& av = t.val(slopes);
            Tensor gx(xv.shape);
            Tensor ga({channels});
            for (std::size_t i = 0; i < xv.data.size(); ++i) {
                const std::size_t c = i / per_ch;
                if (xv.data[i] > 0.0) {
                    gx.data[i] = g.data[i];
                } else {
                    gx.data[i] = g.data[i] * av.data[c];
                    ga.data[c] += g.data[i] * xv.data[i];
                }
            }
            t.add_grad(x, gx);
            t.add_grad(slopes, ga);
        };
        return push(std::move(n));
    }

    Var sigmoid(Var x) {
        Node n;
        n.op = "sigmoid";
        n.inputs = {x.id};
        n.value = val(x);
        for (double& v : n.value.data) v = 1.0 / (1.0 + std::exp(-v));
        n.back = [x, self = next_id()](Tape& t, const Tensor& g) {
            const Tensor& y = t.node_value(self);
            Tensor gx(y.shape);
            for (std::size_t i = 0; i < gx.data.size(); ++i)
                gx.data[i] = g.data[i] * y.data[i] * (1.0 - y.data[i]);
            t.add_grad(x, gx);
        };
        return push(std::move(n));
    }

    Var tanh_op(Var x) {
        Node n;
        n.op = "tanh";
        n.inputs = {x.id};
        n.value = val(x);
        for (double& v : n.value.data) v = std::tanh(v);
        n.back = [x, self = next_id()](Tape& t, const Tensor& g) {
            const Tensor& y = t.node_value(self);
            Tensor gx(y.shape);
            for (std::size_t i = 0; i < gx.data.size(); ++i)
                gx.data[i] = g.data[i] * (1.0 - y.data[i] * y.data[i]);
            t.add_grad(x, gx);
        };
        return push(std::move(n));
    }

    Var add(Var a, Var b) {
        Node n;
        n.op = "add";
        n.inputs = {a.id, b.id};
        n.value = crossflow::add(val(a), val(b));
        n.back = [a, b](Tape& t, const Tensor& g) {
            t.add_grad(a, g);
            t.add_grad(b, g);
        };
        return push(std::move(n));
    }

    Var mul(Var a, Var b) {
        Node n;
        n.op = "mul";
        n.inputs = {a.id, b.id};
        n.value = crossflow::mul(val(a), val(b));
        n.back = [a, b](Tape& t, const Tensor& g) {
            t.add_grad(a, crossflow::mul(g, t.val(b)));
            t.add_grad(b, crossflow::mul(g, t.val(a)));
        };
        return push(std::move(n));
    }

    Var scale(Var a, double s) {
        Node n;
        n.op = "scale";
        n.inputs = {a.id};
        n.value = crossflow::scale(val(a), s);
        n.back = [a, s](Tape& t, const Tensor& g) { t.add_grad(a, crossflow::scale(g, s)); };
        return push(std::move(n));
    }

    Var add_n(const std::vector<Var>& xs) {
        CF_CHECK(!xs.empty(), "add_n: empty list");
        Node n;
        n.op = "add_n";
        n.value = val(xs[0]);
        for (std::size_t i = 1; i < xs.size(); ++i) {
            const Tensor& xi = val(xs[i]);
            CF_CHECK(xi.shape == n.value.shape, "add_n: shape mismatch");
            for (std::size_t j = 0; j < n.value.data.size(); ++j) n.value.data[j] += xi.data[j];
        }
        for (Var v : xs) n.inputs.push_back(v.id);
        n.back = [xs](Tape& t, const Tensor& g) {
            for (Var v : xs) t.add_grad(v, g);
        };
        return push(std::move(n));
    }

    Var sum(Var x) {
        Node n;
        n.op = "sum";
        n.inputs = {x.id};
        double acc = 0.0;
        for (double v : val(x).data) acc += v;
        n.value = Tensor::scalar(acc);
        Shape in_shape = val(x).shape;
        n.back = [x, in_shape](Tape& t, const Tensor& g) {
            t.add_grad(x, Tensor::full(in_shape, g.data[0]));
        };
        return push(std::move(n));
    }

    Var concat(const std::vector<Var>& parts, int axis) {
        CF_CHECK(!parts.empty(), "concat: no parts");
        std::vector<const Tensor*> ptrs;
        std::vector<int> sizes;
        for (Var v : parts) {
            ptrs.push_back(&val(v));
            sizes.push_back(val(v).shape[axis]);
        }
        Node n;
        n.op = "concat";
        for (Var v : parts) n.inputs.push_back(v.id);
        n.value = crossflow::concat(ptrs, axis);
        n.back = [parts, sizes, axis](Tape& t, const Tensor& g) {
            std::vector<Tensor> gs = crossflow::split(g, axis, sizes);
            for (std::size_t i = 0; i < parts.size(); ++i) t.add_grad(parts[i], gs[i]);
        };
        return push(std::move(n));
    }

    Var reshape(Var x, Shape new_shape) {
        Node n;
        n.op = "reshape";
        n.inputs = {x.id};
        n.value = crossflow::reshape(val(x), new_shape);
        Shape old_shape = val(x).shape;
        n.back = [x, old_shape](Tape& t, const Tensor& g) {
            t.add_grad(x, crossflow::reshape(g, old_shape));
        };
        return push(std::move(n));
    }

    Var flatten(Var x) { return reshape(x, Shape{static_cast<int>(val(x).numel())}); }

    // Stack same-shaped tensors along a new leading axis.
    Var stack(const std::vector<Var>& xs) {
        CF_CHECK(!xs.empty(), "stack: empty list");
        const Shape& es = val(xs[0]).shape;
        Shape out_shape;
        out_shape.dims.push_back(static_cast<int>(xs.size()));
        out_shape.dims.insert(out_shape.dims.end(), es.dims.begin(), es.dims.end());
        Node n;
        n.op = "stack";
        n.value = Tensor(out_shape);
        const std::size_t stride = es.numel();
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const Tensor& xi = val(xs[i]);
            CF_CHECK(xi.shape == es, "stack: shape mismatch");
            std::copy(xi.data.begin(), xi.data.end(), n.value.data.begin() + i * stride);
            n.inputs.push_back(xs[i].id);
        }
        n.back = [xs, stride, es](Tape& t, const Tensor& g) {
            for (std::size_t i = 0; i < xs.size(); ++i) {
                Tensor gi(es);
                std::copy(g.data.begin() + i * stride, g.data.begin() + (i + 1) * stride,
                          gi.data.begin());
                t.add_grad(xs[i], gi);
            }
        };
        return push(std::move(n));
    }

    Var unstack(Var x, int index) {
        const Tensor& xv = val(x);
        CF_CHECK(index >= 0 && index < xv.dim(0), "unstack: index out of range");
        Shape es;
        es.dims.assign(xv.shape.dims.begin() + 1, xv.shape.dims.end());
        const std::size_t stride = es.numel();
        Node n;
        n.op = "unstack";
        n.inputs = {x.id};
        n.value = Tensor(es);
        std::copy(xv.data.begin() + index * stride, xv.data.begin() + (index + 1) * stride,
                  n.value.data.begin());
        Shape xs = xv.shape;
        n.back = [x, index, stride, xs](Tape& t, const Tensor& g) {
            Tensor gx(xs);
            std::copy(g.data.begin(), g.data.end(), gx.data.begin() + index * stride);
            t.add_grad(x, gx);
        };
        return push(std::move(n));
    }

    // Batch normalization over the leading axis of a stacked tensor
    // ([N,F] per feature, [N,C,H,W] per channel). Training mode normalizes by
    // batch statistics, differentiates through them, and updates the running
    // stats in `state`; eval mode uses the running stats.
    Var batchnorm(Var x, Var gamma, Var beta, BnState& state, Mode mode) {
        const Tensor& xv = val(x);
        CF_CHECK(xv.rank() == 2 || xv.rank() == 4, "batchnorm: input must be [N,F] or [N,C,H,W]");
        const int batch = xv.dim(0);
        const int features = xv.dim(1);
        const std::size_t spatial =
            xv.rank() == 4 ? static_cast<std::size_t>(xv.dim(2)) * xv.dim(3) : 1;
        const std::size_t m = static_cast<std::size_t>(batch) * spatial;
        const Tensor& gv = val(gamma);
        const Tensor& bv = val(beta);
        CF_CHECK(gv.rank() == 1 && gv.dim(0) == features, "batchnorm: gamma must be [features]");
        CF_CHECK(bv.rank() == 1 && bv.dim(0) == features, "batchnorm: beta must be [features]");
        CF_CHECK(state.running_mean.numel() == static_cast<std::size_t>(features),
                 "batchnorm: running stats size mismatch");

        const bool train = mode == Mode::Train;
        if (train) CF_CHECK(batch >= 2, "batchnorm: training mode requires batch >= 2");

        Tensor mean({features}), var({features});
        if (train) {
            for (int f = 0; f < features; ++f) {
                double acc = 0.0;
                for_feature(xv, f, spatial, [&](double v) { acc += v; });
                mean.at(f) = acc / static_cast<double>(m);
            }
            for (int f = 0; f < features; ++f) {
                double acc = 0.0;
                const double mu = mean.at(f);
                for_feature(xv, f, spatial, [&](double v) { acc += (v - mu) * (v - mu); });
                var.at(f) = acc / static_cast<double>(m);
            }
            for (int f = 0; f < features; ++f) {
                state.running_mean.at(f) =
                    state.momentum * state.running_mean.at(f) + (1.0 - state.momentum) * mean.at(f);
                state.running_var.at(f) =
                    state.momentum * state.running_var.at(f) + (1.0 - state.momentum) * var.at(f);
            }
        } else {
            mean = state.running_mean;
            var = state.running_var;
        }

        Tensor inv_std({features});
        for (int f = 0; f < features; ++f) inv_std.at(f) = 1.0 / std::sqrt(var.at(f) + state.eps);

        Node n;
        n.op = "batchnorm";
        n.inputs = {x.id, gamma.id, beta.id};
        n.value = Tensor(xv.shape);
        Tensor xhat(xv.shape);
        const std::size_t feat_stride = spatial;
        const std::size_t batch_stride = static_cast<std::size_t>(features) * spatial;
        for (int bi = 0; bi < batch; ++bi)
            for (int f = 0; f < features; ++f) {
                const std::size_t base = bi * batch_stride + f * feat_stride;
                for (std::size_t s = 0; s < spatial; ++s) {
                    const double xh = (xv.data[base + s] - mean.at(f)) * inv_std.at(f);
                    xhat.data[base + s] = xh;
                    n.value.data[base + s] = gv.at(f) * xh + bv.at(f);
                }
            }

        n.back = [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), train,
                  features, spatial, batch, m](Tape& t, const Tensor& g) {
            const Tensor& gv2 = t.val(gamma);
            Tensor gx(xhat.shape);
            Tensor ggamma({features});
            Tensor gbeta({features});
            const std::size_t feat_stride = spatial;
            const std::size_t batch_stride = static_cast<std::size_t>(features) * spatial;
            for (int f = 0; f < features; ++f) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (int bi = 0; bi < batch; ++bi) {
                    const std::size_t base = bi * batch_stride + f * feat_stride;
                    for (std::size_t s = 0; s < spatial; ++s) {
                        sum_g += g.data[base + s];
                        sum_gx += g.data[base + s] * xhat.data[base + s];
                    }
                }
                ggamma.at(f) = sum_gx;
                gbeta.at(f) = sum_g;
                const double gam = gv2.at(f), istd = inv_std.at(f);
                const double inv_m = 1.0 / static_cast<double>(m);
                for (int bi = 0; bi < batch; ++bi) {
                    const std::size_t base = bi * batch_stride + f * feat_stride;
                    for (std::size_t s = 0; s < spatial; ++s) {
                        if (train) {
                            gx.data[base + s] =
                                gam * istd *
                                (g.data[base + s] - inv_m * sum_g - xhat.data[base + s] * inv_m * sum_gx);
                        } else {
                            gx.data[base + s] = gam * istd * g.data[base + s];
                        }
                    }
                }
            }
            t.add_grad(x, gx);
            t.add_grad(gamma, ggamma);
            t.add_grad(beta, gbeta);
        };
        return push(std::move(n));
    }

    // Inverted dropout; identity (no node) in eval mode or when p == 0.
    Var dropout(Var x, double p, Mode mode, Rng& rng) {
        CF_CHECK(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
        if (mode == Mode::Eval || p == 0.0) return x;
        const Tensor& xv = val(x);
        std::vector<float> mask(xv.numel());
        const double keep = 1.0 - p;
        const double inv_keep = 1.0 / keep;
        Node n;
        n.op = "dropout";
        n.inputs = {x.id};
        n.value = xv;
        for (std::size_t i = 0; i < mask.size(); ++i) {
            const bool drop = rng.uniform() < p;
            mask[i] = drop ? 0.0f : 1.0f;
            n.value.data[i] = drop ? 0.0 : n.value.data[i] * inv_keep;
        }
        n.back = [x, mask = std::move(mask), inv_keep](Tape& t, const Tensor& g) {
            Tensor gx(g.shape);
            for (std::size_t i = 0; i < gx.data.size(); ++i)
                gx.data[i] = g.data[i] * mask[i] * inv_keep;
            t.add_grad(x, gx);
        };
        return push(std::move(n));
    }

    // Softmax + cross-entropy against an integer label, with log-sum-exp
    // stabilization. Returns the scalar loss; probabilities are written to
    // probs_out when given.
    Var softmax_cross_entropy(Var logits, int label, Tensor* probs_out = nullptr) {
        const Tensor& lv = val(logits);
        CF_CHECK(lv.rank() == 1, "softmax_cross_entropy: logits must be rank 1");
        const int classes = lv.dim(0);
        CF_CHECK(label >= 0 && label < classes, "softmax_cross_entropy: label out of range");

        double max_logit = lv.data[0];
        for (double v : lv.data) max_logit = std::max(max_logit, v);
        Tensor probs({classes});
        double z = 0.0;
        for (int c = 0; c < classes; ++c) {
            probs.at(c) = std::exp(lv.at(c) - max_logit);
            z += probs.at(c);
        }
        for (int c = 0; c < classes; ++c) probs.at(c) /= z;
        const double loss = std::log(z) - (lv.at(label) - max_logit);
        if (probs_out) *probs_out = probs;

        Node n;
        n.op = "softmax_ce";
        n.inputs = {logits.id};
        n.value = Tensor::scalar(loss);
        n.back = [logits, probs = std::move(probs), label](Tape& t, const Tensor& g) {
            Tensor gl = probs;
            gl.at(label) -= 1.0;
            for (double& v : gl.data) v *= g.data[0];
            t.add_grad(logits, gl);
        };
        return push(std::move(n));
    }

    // Reverse pass from a scalar loss node. Node gradients are rebuilt on each
    // call; parameter gradients accumulate across calls until reset.
    void backward(Var loss) {
        const Tensor& lv = val(loss);
        CF_CHECK(lv.numel() == 1, "backward: loss must be scalar, got " + lv.shape.str());
        for (Node& n : nodes_) n.grad = Tensor();
        nodes_[check(loss)].grad = Tensor::full(lv.shape, 1.0);

        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.data.empty()) continue;
            if (n.back) n.back(*this, n.grad);
            if (n.param) n.param->accumulate(n.grad);
        }
    }

    void add_grad(Var v, const Tensor& g) {
        Node& n = nodes_[check(v)];
        const Tensor& value = n.external ? *n.external : n.value;
        CF_CHECK(g.shape == value.shape, "gradient shape mismatch in backward");
        if (n.grad.data.empty()) {
            n.grad = g;
        } else {
            for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
        }
    }

    const Tensor& grad_of(Var v) const {
        const Node& n = nodes_[check(v)];
        CF_CHECK(!n.grad.data.empty(), "no gradient present for node");
        return n.grad;
    }

private:
    struct Node {
        Tensor value;
        const Tensor* external = nullptr;
        Tensor grad;
        const char* op = "";
        std::vector<int> inputs;
        std::function<void(Tape&, const Tensor&)> back;
        Parameter* param = nullptr;
    };

    std::vector<Node> nodes_;

    std::size_t check(Var v) const {
        CF_CHECK(v.id >= 0 && v.id < size(), "invalid graph node reference");
        return static_cast<std::size_t>(v.id);
    }

    int next_id() const { return size(); }

    const Tensor& node_value(int id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        return n.external ? *n.external : n.value;
    }

    Var push(Node&& n) {
        nodes_.push_back(std::move(n));
        return Var{size() - 1};
    }

    template <typename F>
    static void for_feature(const Tensor& x, int f, std::size_t spatial, F&& fn) {
        const int batch = x.dim(0);
        const int features = x.dim(1);
        const std::size_t batch_stride = static_cast<std::size_t>(features) * spatial;
        for (int bi = 0; bi < batch; ++bi) {
            const std::size_t base = bi * batch_stride + static_cast<std::size_t>(f) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) fn(x.data[base + s]);
        }
    }
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_parameter;
    std::size_t coords_checked = 0;
};

// Central finite differences against the tape's analytic gradients.
// `build` must construct the loss deterministically from current parameter
// values (stochastic layers frozen). With max_coords_per_param > 0, a seeded
// random subset of coordinates is probed per parameter.
template <typename BuildFn>
GradCheckReport grad_check(BuildFn&& build, const std::vector<Parameter*>& params,
                           double eps = 1e-5, int max_coords_per_param = 0,
                           std::uint64_t seed = 0x9d2c5680) {
    for (Parameter* p : params) p->reset_grad();
    std::vector<Tensor> analytic;
    {
        Tape tape;
        Var loss = build(tape);
        tape.backward(loss);
    }
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad_or_zero());

    auto eval_loss = [&]() {
        Tape tape;
        Var loss = build(tape);
        return tape.val(loss).data[0];
    };

    GradCheckReport report;
    Rng rng(seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        const std::size_t n = p.value.numel();
        std::vector<std::size_t> coords;
        if (max_coords_per_param <= 0 || n <= static_cast<std::size_t>(max_coords_per_param)) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (int i = 0; i < max_coords_per_param; ++i)
                coords.push_back(static_cast<std::size_t>(rng.uniform_int(n)));
        }
        for (std::size_t ci : coords) {
            const double saved = p.value.data[ci];
            p.value.data[ci] = saved + eps;
            const double lp = eval_loss();
            p.value.data[ci] = saved - eps;
            const double lm = eval_loss();
            p.value.data[ci] = saved;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double a = analytic[pi].data[ci];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            const double rel = std::fabs(a - numeric) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_parameter = p.name;
            }
        }
    }
    for (Parameter* p : params) p->reset_grad();
    return report;
}

}  // namespace crossflow::ad
