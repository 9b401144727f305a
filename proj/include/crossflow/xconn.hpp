#pragma once

#include <string>
#include <vector>

#include "crossflow/nn.hpp"

namespace crossflow::xconn {

using ad::Tape;
using ad::Var;

// Feature exchange between a 2D (convolutional) stream and a 1D (dense)
// stream. Both directions are learnable layer pipelines with PReLU on the
// connection layers. Cross-connections read an intermediate representation of
// the source stream; residual connections reuse the same pipeline shapes but
// read the raw stream input. Merging adds residual outputs into the target
// representation elementwise and concatenates cross-connection outputs on the
// channel (2D) or feature (1D) axis.

// Number of deconvolution input cells that grow back to exactly
// [target_h, target_w] under a stride-1 full transposed convolution.
inline int deconv_seed_cells(int target_h, int target_w, int kh, int kw, int* map_h = nullptr,
                             int* map_w = nullptr) {
    CF_CHECK(kh >= 1 && kw >= 1 && kh <= target_h && kw <= target_w,
             "connection kernel larger than merge target");
    const int mh = target_h - kh + 1;
    const int mw = target_w - kw + 1;
    if (map_h) *map_h = mh;
    if (map_w) *map_w = mw;
    return mh * mw;
}

// 1x1 convolution -> PReLU -> flatten -> dense -> PReLU.
struct Conn2Dto1D {
    nn::Conv2D conv;
    nn::PReLU conv_act;
    nn::Dense fc;
    nn::PReLU fc_act;
    Shape input_shape;  // [C,H,W], fixed at build time
    int out_features = 0;

    void init(const std::string& prefix, int c_in, int h, int w, int c_mid, int n_out, Rng& rng) {
        input_shape = Shape{c_in, h, w};
        out_features = n_out;
        conv.init(prefix + ".conv", c_mid, c_in, 1, 1, Padding::Same, rng);
        conv_act.init(prefix + ".conv_act", c_mid);
        fc.init(prefix + ".fc", c_mid * h * w, n_out, rng);
        fc_act.init(prefix + ".fc_act", n_out);
    }

    Var apply(Tape& t, Var source_2d) {
        CF_CHECK(t.val(source_2d).shape == input_shape,
                 "2D->1D connection input shape " + t.val(source_2d).shape.str() +
                     " != built shape " + input_shape.str());
        Var mapped = conv_act.apply(t, conv.apply(t, source_2d));
        return fc_act.apply(t, fc.apply(t, t.flatten(mapped)));
    }

    void collect(std::vector<ad::Parameter*>& out) {
        conv.collect(out);
        conv_act.collect(out);
        fc.collect(out);
        fc_act.collect(out);
    }
};

// Dense -> PReLU -> reshape to a single-channel map -> deconvolution -> PReLU.
// The dense width is (H-kh+1)*(W-kw+1) so the deconvolution lands exactly on
// the merge target's spatial dims.
struct Conn1Dto2D {
    nn::Dense fc;
    nn::PReLU fc_act;
    nn::Deconv2D deconv;
    nn::PReLU out_act;
    int map_h = 0, map_w = 0;
    int in_features = 0;
    Shape output_shape;  // [C,H,W]

    void init(const std::string& prefix, int n_in, int target_c, int target_h, int target_w,
              int kh, int kw, Rng& rng) {
        in_features = n_in;
        output_shape = Shape{target_c, target_h, target_w};
        const int cells = deconv_seed_cells(target_h, target_w, kh, kw, &map_h, &map_w);
        fc.init(prefix + ".fc", n_in, cells, rng);
        fc_act.init(prefix + ".fc_act", cells);
        deconv.init(prefix + ".deconv", target_c, 1, kh, kw, rng);
        out_act.init(prefix + ".out_act", target_c);
    }

    Var apply(Tape& t, Var source_1d) {
        CF_CHECK(t.val(source_1d).shape == Shape{in_features},
                 "1D->2D connection input shape " + t.val(source_1d).shape.str() +
                     " != built size [" + std::to_string(in_features) + "]");
        Var seeded = fc_act.apply(t, fc.apply(t, source_1d));
        Var map = t.reshape(seeded, {1, map_h, map_w});
        return out_act.apply(t, deconv.apply(t, map));
    }

    void collect(std::vector<ad::Parameter*>& out) {
        fc.collect(out);
        fc_act.collect(out);
        deconv.collect(out);
        out_act.collect(out);
    }
};

// Residual connections share the pipeline structure; only the wiring differs
// (they consume the raw stream input instead of an intermediate).
using ResConn2Dto1D = Conn2Dto1D;
using ResConn1Dto2D = Conn1Dto2D;

// target + sum(residuals), then concatenation of cross-connection outputs.
// `axis` is the channel axis for 2D targets and the feature axis for 1D.
// With no connections at all this is the identity.
inline Var merge(Tape& t, Var target, const std::vector<Var>& residual_outputs,
                 const std::vector<Var>& xconn_outputs, int axis) {
    Var merged = target;
    for (Var r : residual_outputs) {
        CF_CHECK(t.val(r).shape == t.val(merged).shape,
                 "residual output shape " + t.val(r).shape.str() + " != merge target " +
                     t.val(merged).shape.str());
        merged = t.add(merged, r);
    }
    if (xconn_outputs.empty()) return merged;
    std::vector<Var> parts;
    parts.push_back(merged);
    parts.insert(parts.end(), xconn_outputs.begin(), xconn_outputs.end());
    return t.concat(parts, axis);
}

}  // namespace crossflow::xconn
