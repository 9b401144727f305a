#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossflow/data.hpp"
#include "crossflow/nn.hpp"
#include "crossflow/xconn.hpp"

namespace crossflow::models {

using ad::Mode;
using ad::Parameter;
using ad::Tape;
using ad::Var;

enum class Architecture { CnnMlp, CnnMlpLstm };

inline std::string to_string(Architecture a) {
    return a == Architecture::CnnMlp ? "cnn_mlp" : "cnn_mlp_lstm";
}

inline Architecture architecture_from_string(const std::string& s) {
    if (s == "cnn_mlp") return Architecture::CnnMlp;
    if (s == "cnn_mlp_lstm") return Architecture::CnnMlpLstm;
    throw ValidationError("unknown architecture: " + s);
}

struct ModelConfig {
    Architecture arch = Architecture::CnnMlp;
    int num_classes = 26;
    int height = 80;
    int width = 60;
    int mfcc_dim = 26;
    int avg_windows = 11;  // frame windows averaged into the fixed-size input (cnn_mlp)
    bool use_xconns = true;
    bool use_resconns = true;
    bool lstm_mean_pool = false;  // mean over per-step hidden states instead of last state
    std::uint64_t seed = 0;

    void validate() const {
        if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
        if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0)
            throw ValidationError("height and width must be positive multiples of 4");
        if (mfcc_dim < 1) throw ValidationError("mfcc_dim must be >= 1");
        if (avg_windows < 1) throw ValidationError("avg_windows must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"architecture", to_string(arch)},
                {"num_classes", num_classes},
                {"height", height},
                {"width", width},
                {"mfcc_dim", mfcc_dim},
                {"avg_windows", avg_windows},
                {"use_xconns", use_xconns},
                {"use_resconns", use_resconns},
                {"lstm_mean_pool", lstm_mean_pool},
                {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        try {
            c.arch = architecture_from_string(j.at("architecture").get<std::string>());
            c.num_classes = j.at("num_classes").get<int>();
            c.height = j.value("height", 80);
            c.width = j.value("width", 60);
            c.mfcc_dim = j.value("mfcc_dim", 26);
            c.avg_windows = j.value("avg_windows", 11);
            c.use_xconns = j.value("use_xconns", true);
            c.use_resconns = j.value("use_resconns", true);
            c.lstm_mean_pool = j.value("lstm_mean_pool", false);
            c.seed = j.value("seed", 0ull);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("bad model config: " + std::string(e.what()));
        }
        c.validate();
        return c;
    }
};

// Per-architecture layer sizing. The geometry scales with the configured
// input dims; connection kernels keep their default sizes when they fit the
// merge target and are clamped to it otherwise.
struct Dims {
    int cnn_in_ch, mlp_in;
    int c1, c2;            // conv block channels
    int m1, m2;            // mlp dense widths
    int cnn_head;          // cnn stream output features
    int xc1_out, xc2_out;  // 2D->1D connection widths
    int k1h, k1w, k2h, k2w;  // 1D->2D deconvolution kernels
    int h2, w2, h4, w4;
    int c2_in, m2_in;      // post-merge widths feeding the second block
    int head_in;           // classifier-merge width (or per-frame feature width)

    static Dims compute(const ModelConfig& cfg) {
        const bool lstm = cfg.arch == Architecture::CnnMlpLstm;
        Dims d{};
        d.cnn_in_ch = lstm ? 1 : cfg.avg_windows;
        d.mlp_in = lstm ? cfg.mfcc_dim : cfg.avg_windows * cfg.mfcc_dim;
        d.c1 = lstm ? 8 : 16;
        d.c2 = lstm ? 16 : 32;
        d.m1 = lstm ? 32 : 128;
        d.m2 = lstm ? 32 : 128;
        d.cnn_head = lstm ? 64 : 256;
        d.xc1_out = lstm ? 32 : 64;
        d.xc2_out = lstm ? 64 : 128;
        d.h2 = cfg.height / 2;
        d.w2 = cfg.width / 2;
        d.h4 = cfg.height / 4;
        d.w4 = cfg.width / 4;
        const int k1 = lstm ? 16 : 8;
        const int k2 = lstm ? 8 : 4;
        d.k1h = std::min(k1, d.h2);
        d.k1w = std::min(k1, d.w2);
        d.k2h = std::min(k2, d.h4);
        d.k2w = std::min(k2, d.w4);
        d.c2_in = d.c1 + (cfg.use_xconns ? d.c1 : 0);
        d.m2_in = d.m1 + (cfg.use_xconns ? d.xc1_out : 0);
        d.head_in = d.cnn_head + d.m2 + (cfg.use_xconns ? d.xc2_out : 0);
        return d;
    }
};

// Inputs of one example, shaped for a specific architecture.
struct PreparedExample {
    Tensor img_stack;                // cnn_mlp: [T_avg,H,W]
    Tensor mfcc_flat;                // cnn_mlp: [T_avg*D]
    std::vector<Tensor> frames;      // cnn_mlp_lstm: [1,H,W] per frame
    std::vector<Tensor> mfcc_rows;   // cnn_mlp_lstm: [D] per frame
    int label = 0;
};

struct BatchResult {
    Var mean_loss;
    std::vector<Tensor> probs;
    std::vector<double> losses;
};

// The parameter registry points into the model's own members, so a model is
// pinned to its heap allocation: build() hands out a unique_ptr and instances
// are neither copyable nor movable.
class Model {
public:
    Model() = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = delete;
    Model& operator=(Model&&) = delete;

    ModelConfig config;
    Dims dims{};
    Mode mode = Mode::Eval;

    nn::BatchNorm bn_in;
    nn::Conv2D conv1_1, conv1_2;
    nn::BatchNorm bn_block1;
    nn::Conv2D conv2_1, conv2_2;
    nn::BatchNorm bn_block2;
    nn::Dense cnn_fc;
    nn::Dense mlp_fc1;
    nn::BatchNorm bn_mlp;
    nn::Dense mlp_fc2;
    xconn::Conn2Dto1D xc_2d1d_1, xc_2d1d_2;
    xconn::Conn1Dto2D xc_1d2d_1, xc_1d2d_2;
    xconn::ResConn2Dto1D rc_2d1d_1, rc_2d1d_2;
    xconn::ResConn1Dto2D rc_1d2d_1, rc_1d2d_2;
    nn::BatchNorm bn_merge;
    nn::Dense fc_merge;
    nn::LSTM lstm;
    nn::Dense fc_out;

    static std::unique_ptr<Model> build(const ModelConfig& cfg) {
        cfg.validate();
        auto model = std::make_unique<Model>();
        Model& m = *model;
        m.config = cfg;
        m.dims = Dims::compute(cfg);
        const Dims& d = m.dims;
        const bool is_lstm = cfg.arch == Architecture::CnnMlpLstm;
        Rng rng(derive_seed(cfg.seed, 0xC0DE));

        m.bn_in.init("cnn.bn_in", d.cnn_in_ch);
        m.reg(m.bn_in);
        m.conv1_1.init("cnn.conv1_1", d.c1, d.cnn_in_ch, 3, 3, Padding::Same, rng);
        m.reg(m.conv1_1);
        if (!is_lstm) {
            m.conv1_2.init("cnn.conv1_2", d.c1, d.c1, 3, 3, Padding::Same, rng);
            m.reg(m.conv1_2);
            m.bn_block1.init("cnn.bn_block1", d.c1);
            m.reg(m.bn_block1);
        }
        m.conv2_1.init("cnn.conv2_1", d.c2, d.c2_in, 3, 3, Padding::Same, rng);
        m.reg(m.conv2_1);
        if (!is_lstm) {
            m.conv2_2.init("cnn.conv2_2", d.c2, d.c2, 3, 3, Padding::Same, rng);
            m.reg(m.conv2_2);
            m.bn_block2.init("cnn.bn_block2", d.c2);
            m.reg(m.bn_block2);
        }
        const int c2_merged = d.c2 + (cfg.use_xconns ? d.c2 : 0);
        m.cnn_fc.init("cnn.fc", c2_merged * d.h4 * d.w4, d.cnn_head, rng);
        m.reg(m.cnn_fc);

        m.mlp_fc1.init("mlp.fc1", d.mlp_in, d.m1, rng);
        m.reg(m.mlp_fc1);
        if (!is_lstm) {
            m.bn_mlp.init("mlp.bn1", d.m1);
            m.reg(m.bn_mlp);
        }
        m.mlp_fc2.init("mlp.fc2", d.m2_in, d.m2, rng);
        m.reg(m.mlp_fc2);

        if (cfg.use_xconns) {
            m.xc_2d1d_1.init("xc_2d1d_1", d.c1, d.h2, d.w2, d.c1, d.xc1_out, rng);
            m.reg(m.xc_2d1d_1);
            m.xc_1d2d_1.init("xc_1d2d_1", d.m1, d.c1, d.h2, d.w2, d.k1h, d.k1w, rng);
            m.reg(m.xc_1d2d_1);
            m.xc_2d1d_2.init("xc_2d1d_2", d.c2, d.h4, d.w4, d.c2, d.xc2_out, rng);
            m.reg(m.xc_2d1d_2);
            m.xc_1d2d_2.init("xc_1d2d_2", d.m2, d.c2, d.h4, d.w4, d.k2h, d.k2w, rng);
            m.reg(m.xc_1d2d_2);
        }
        if (cfg.use_resconns) {
            m.rc_2d1d_1.init("rc_2d1d_1", d.cnn_in_ch, cfg.height, cfg.width, d.c1, d.m1, rng);
            m.reg(m.rc_2d1d_1);
            m.rc_1d2d_1.init("rc_1d2d_1", d.mlp_in, d.c1, d.h2, d.w2, d.k1h, d.k1w, rng);
            m.reg(m.rc_1d2d_1);
            m.rc_2d1d_2.init("rc_2d1d_2", d.cnn_in_ch, cfg.height, cfg.width, d.c2, d.m2, rng);
            m.reg(m.rc_2d1d_2);
            m.rc_1d2d_2.init("rc_1d2d_2", d.mlp_in, d.c2, d.h4, d.w4, d.k2h, d.k2w, rng);
            m.reg(m.rc_1d2d_2);
        }

        m.bn_merge.init("head.bn", d.head_in);
        m.reg(m.bn_merge);
        if (!is_lstm) {
            m.fc_merge.init("head.fc", d.head_in, 512, rng);
            m.reg(m.fc_merge);
            m.fc_out.init("head.out", 512, cfg.num_classes, rng);
            m.reg(m.fc_out);
        } else {
            m.lstm.init("lstm", d.head_in, 64, rng);
            m.reg(m.lstm);
            m.fc_out.init("head.out", 64, cfg.num_classes, rng);
            m.reg(m.fc_out);
        }

        std::set<std::string> names;
        for (Parameter* p : m.registry_)
            CF_CHECK(names.insert(p->name).second, "duplicate parameter name " + p->name);
        return model;
    }

    const std::vector<Parameter*>& registry() { return registry_; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const Parameter* p : registry_) n += p->value.numel();
        return n;
    }

    void zero_grads() {
        for (Parameter* p : registry_) p->reset_grad();
    }

    void set_mode(Mode m) { mode = m; }

    // -- input preparation --------------------------------------------------

    PreparedExample prepare(const data::Example& ex) const {
        ex.validate();
        CF_CHECK(ex.frames.dim(1) == config.height && ex.frames.dim(2) == config.width,
                 "example frame dims " + ex.frames.shape.str() + " do not match model config");
        CF_CHECK(ex.mfcc.dim(1) == config.mfcc_dim,
                 "example mfcc width does not match model config");
        PreparedExample prep;
        prep.label = ex.label;
        CF_CHECK(ex.label < config.num_classes, "example label out of range for model");
        if (config.arch == Architecture::CnnMlp) {
            data::Example avg = data::sliding_window_average(ex, config.avg_windows);
            prep.img_stack = std::move(avg.frames);
            prep.mfcc_flat = flatten(avg.mfcc);
        } else {
            const int t = ex.frame_count();
            const std::size_t frame_sz =
                static_cast<std::size_t>(config.height) * config.width;
            for (int s = 0; s < t; ++s) {
                Tensor f({1, config.height, config.width});
                std::copy(ex.frames.data.begin() + s * frame_sz,
                          ex.frames.data.begin() + (s + 1) * frame_sz, f.data.begin());
                prep.frames.push_back(std::move(f));
                Tensor row({config.mfcc_dim});
                std::copy(ex.mfcc.data.begin() + static_cast<std::size_t>(s) * config.mfcc_dim,
                          ex.mfcc.data.begin() + static_cast<std::size_t>(s + 1) * config.mfcc_dim,
                          row.data.begin());
                prep.mfcc_rows.push_back(std::move(row));
            }
        }
        return prep;
    }

    // -- forward ------------------------------------------------------------

    // Evaluation forward of one example; pure given the parameters.
    Tensor forward(const data::Example& ex) {
        PreparedExample prep = prepare(ex);
        Tape tape;
        Rng unused(0);
        record_taps_ = true;
        BatchResult r = forward_batch(tape, {&prep}, Mode::Eval, unused);
        record_taps_ = false;
        return r.probs[0];
    }

    BatchResult forward_batch(Tape& t, const std::vector<const PreparedExample*>& batch,
                              Mode run_mode, Rng& dropout_rng) {
        CF_CHECK(!batch.empty(), "forward_batch: empty batch");
        if (record_taps_) taps_.clear();
        if (config.arch == Architecture::CnnMlp) return forward_cnn_mlp(t, batch, run_mode, dropout_rng);
        return forward_lstm(t, batch, run_mode, dropout_rng);
    }

    // Named intermediate activations of the most recent tap-recorded forward
    // (single-example evaluation forwards record them for batch index 0).
    const std::map<std::string, Tensor>& taps() const { return taps_; }

    const Tensor& tap(const std::string& name) const {
        auto it = taps_.find(name);
        CF_CHECK(it != taps_.end(), "no recorded activation named " + name);
        return it->second;
    }

    bool has_connection(const std::string& id) const {
        if (id.rfind("xc_", 0) == 0) return config.use_xconns;
        if (id.rfind("rc_", 0) == 0) return config.use_resconns;
        return false;
    }

    // Runs one connection pipeline standalone on a raw input tensor, in eval
    // mode. The input must match what the connection consumes in the graph
    // (an intermediate representation for xc_*, a raw stream input for rc_*).
    Tensor connection_forward(const std::string& id, const Tensor& input) {
        CF_CHECK(has_connection(id), "model has no connection " + id);
        Tape t;
        Var in = t.input(input);
        Var out;
        if (id == "xc_2d1d_1") out = xc_2d1d_1.apply(t, in);
        else if (id == "xc_2d1d_2") out = xc_2d1d_2.apply(t, in);
        else if (id == "xc_1d2d_1") out = xc_1d2d_1.apply(t, in);
        else if (id == "xc_1d2d_2") out = xc_1d2d_2.apply(t, in);
        else if (id == "rc_2d1d_1") out = rc_2d1d_1.apply(t, in);
        else if (id == "rc_2d1d_2") out = rc_2d1d_2.apply(t, in);
        else if (id == "rc_1d2d_1") out = rc_1d2d_1.apply(t, in);
        else if (id == "rc_1d2d_2") out = rc_1d2d_2.apply(t, in);
        else throw ContractViolation("unknown connection id " + id);
        return t.val(out);
    }

    // -- parameter archive ----------------------------------------------------
    // "XFP1", then per parameter in registry order: name length (u32 LE),
    // name bytes, XFT tensor record.

    void save(const std::filesystem::path& path) const {
        std::string buf = "XFP1";
        for (const Parameter* p : registry_) {
            data::detail::put_u32(buf, static_cast<std::uint32_t>(p->name.size()));
            buf += p->name;
            buf += data::encode_xft(p->value);
        }
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot open for writing: " + path.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("write failed: " + path.string());
    }

    void load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open for reading: " + path.string());
        std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::size_t off = 0;
        if (buf.size() < 4 || buf.compare(0, 4, "XFP1") != 0)
            throw FormatError("bad parameter archive magic", 0);
        off = 4;
        for (Parameter* p : registry_) {
            const std::uint32_t name_len = data::detail::get_u32(buf, off, "name length");
            if (off + name_len > buf.size()) throw FormatError("truncated parameter name", off);
            const std::string name = buf.substr(off, name_len);
            off += name_len;
            if (name != p->name)
                throw ValidationError("archive parameter '" + name + "' does not match model '" +
                                      p->name + "'");
            Tensor value = data::decode_xft(buf, off);
            if (!(value.shape == p->value.shape))
                throw ValidationError("archive shape " + value.shape.str() + " for '" + name +
                                      "' does not match model " + p->value.shape.str());
            p->value = std::move(value);
        }
        if (off != buf.size()) throw FormatError("trailing bytes after parameter archive", off);
    }

    std::vector<std::pair<std::string, Shape>> describe() const {
        std::vector<std::pair<std::string, Shape>> out;
        for (const Parameter* p : registry_) out.emplace_back(p->name, p->value.shape);
        return out;
    }

private:
    std::vector<Parameter*> registry_;
    std::map<std::string, Tensor> taps_;
    bool record_taps_ = false;

    template <typename Layer>
    void reg(Layer& layer) {
        layer.collect(registry_);
    }

    void put_tap(const std::string& name, const Tape& t, Var v) {
        if (record_taps_) taps_[name] = t.val(v);
    }

    Var merge_with_dropout(Tape& t, Var target, const std::vector<Var>& residuals,
                           const std::vector<Var>& xconns, int axis, Mode run_mode, Rng& rng) {
        Var merged = xconn::merge(t, target, residuals, xconns, axis);
        if (residuals.empty() && xconns.empty()) return merged;
        return t.dropout(merged, 0.5, run_mode, rng);
    }

    BatchResult forward_cnn_mlp(Tape& t, const std::vector<const PreparedExample*>& batch,
                                Mode run_mode, Rng& rng) {
        const int n = static_cast<int>(batch.size());
        const bool xc = config.use_xconns, rc = config.use_resconns;

        std::vector<Var> img_in(n), mfcc_in(n);
        for (int i = 0; i < n; ++i) {
            CF_CHECK((batch[i]->img_stack.shape == Shape{dims.cnn_in_ch, config.height, config.width}),
                     "prepared image shape mismatch");
            CF_CHECK(batch[i]->mfcc_flat.shape == Shape{dims.mlp_in}, "prepared mfcc shape mismatch");
            img_in[i] = t.input(batch[i]->img_stack);
            mfcc_in[i] = t.input(batch[i]->mfcc_flat);
        }

        // CNN block 1
        Var bn_in_out = bn_in.apply(t, t.stack(img_in), run_mode);
        std::vector<Var> pre_bn1(n);
        for (int i = 0; i < n; ++i) {
            Var x = t.unstack(bn_in_out, i);
            if (i == 0) put_tap("cnn.bn_in", t, x);
            Var c = t.relu(conv1_1.apply(t, x));
            if (i == 0) put_tap("cnn.conv1_1", t, c);
            c = t.relu(conv1_2.apply(t, c));
            if (i == 0) put_tap("cnn.conv1_2", t, c);
            pre_bn1[i] = c;
        }
        Var bn1_out = bn_block1.apply(t, t.stack(pre_bn1), run_mode);
        std::vector<Var> cnn_d1(n);
        for (int i = 0; i < n; ++i) {
            Var p = t.maxpool2x2(t.unstack(bn1_out, i));
            if (i == 0) put_tap("cnn.pool1", t, p);
            cnn_d1[i] = t.dropout(p, 0.25, run_mode, rng);
        }

        // MLP depth 1
        std::vector<Var> pre_bnm(n);
        for (int i = 0; i < n; ++i) {
            Var h = t.relu(mlp_fc1.apply(t, mfcc_in[i]));
            if (i == 0) put_tap("mlp.fc1", t, h);
            pre_bnm[i] = h;
        }
        Var bnm_out = bn_mlp.apply(t, t.stack(pre_bnm), run_mode);
        std::vector<Var> mlp_d1(n);
        for (int i = 0; i < n; ++i) mlp_d1[i] = t.dropout(t.unstack(bnm_out, i), 0.5, run_mode, rng);

        // Depth-1 connections and merges
        std::vector<Var> cnn_m1(n), mlp_m1(n);
        for (int i = 0; i < n; ++i) {
            if (i == 0) {
                put_tap("cnn.d1", t, cnn_d1[i]);
                put_tap("mlp.d1", t, mlp_d1[i]);
            }
            std::vector<Var> res_to_cnn, xcs_to_cnn, res_to_mlp, xcs_to_mlp;
            if (rc) {
                res_to_cnn.push_back(rc_1d2d_1.apply(t, mfcc_in[i]));
                res_to_mlp.push_back(rc_2d1d_1.apply(t, img_in[i]));
                if (i == 0) {
                    put_tap("rc_1d2d_1.out", t, res_to_cnn[0]);
                    put_tap("rc_2d1d_1.out", t, res_to_mlp[0]);
                }
            }
            if (xc) {
                xcs_to_cnn.push_back(xc_1d2d_1.apply(t, mlp_d1[i]));
                xcs_to_mlp.push_back(xc_2d1d_1.apply(t, cnn_d1[i]));
                if (i == 0) {
                    put_tap("xc_1d2d_1.out", t, xcs_to_cnn[0]);
                    put_tap("xc_2d1d_1.out", t, xcs_to_mlp[0]);
                }
            }
            cnn_m1[i] = merge_with_dropout(t, cnn_d1[i], res_to_cnn, xcs_to_cnn, 0, run_mode, rng);
            mlp_m1[i] = merge_with_dropout(t, mlp_d1[i], res_to_mlp, xcs_to_mlp, 0, run_mode, rng);
            if (i == 0) {
                put_tap("cnn.merge1", t, cnn_m1[i]);
                put_tap("mlp.merge1", t, mlp_m1[i]);
            }
        }

        // CNN block 2
        std::vector<Var> pre_bn2(n);
        for (int i = 0; i < n; ++i) {
            Var c = t.relu(conv2_1.apply(t, cnn_m1[i]));
            if (i == 0) put_tap("cnn.conv2_1", t, c);
            c = t.relu(conv2_2.apply(t, c));
            if (i == 0) put_tap("cnn.conv2_2", t, c);
            pre_bn2[i] = c;
        }
        Var bn2_out = bn_block2.apply(t, t.stack(pre_bn2), run_mode);
        std::vector<Var> cnn_d2(n);
        for (int i = 0; i < n; ++i) {
            Var p = t.maxpool2x2(t.unstack(bn2_out, i));
            if (i == 0) put_tap("cnn.pool2", t, p);
            cnn_d2[i] = t.dropout(p, 0.25, run_mode, rng);
        }

        // MLP depth 2
        std::vector<Var> mlp_d2(n);
        for (int i = 0; i < n; ++i) {
            mlp_d2[i] = t.relu(mlp_fc2.apply(t, mlp_m1[i]));
            if (i == 0) put_tap("mlp.fc2", t, mlp_d2[i]);
        }

        // Depth-2 connections; the second 2D->1D cross-connection joins the
        // classifier merge directly rather than the MLP stream.
        std::vector<Var> cnn_m2(n), mlp_m2(n), xc2_head(n);
        for (int i = 0; i < n; ++i) {
            if (i == 0) put_tap("cnn.d2", t, cnn_d2[i]);
            std::vector<Var> res_to_cnn, xcs_to_cnn, res_to_mlp;
            if (rc) {
                res_to_cnn.push_back(rc_1d2d_2.apply(t, mfcc_in[i]));
                res_to_mlp.push_back(rc_2d1d_2.apply(t, img_in[i]));
                if (i == 0) {
                    put_tap("rc_1d2d_2.out", t, res_to_cnn[0]);
                    put_tap("rc_2d1d_2.out", t, res_to_mlp[0]);
                }
            }
            if (xc) {
                xcs_to_cnn.push_back(xc_1d2d_2.apply(t, mlp_d2[i]));
                xc2_head[i] = xc_2d1d_2.apply(t, cnn_d2[i]);
                if (i == 0) {
                    put_tap("xc_1d2d_2.out", t, xcs_to_cnn[0]);
                    put_tap("xc_2d1d_2.out", t, xc2_head[i]);
                }
            }
            cnn_m2[i] = merge_with_dropout(t, cnn_d2[i], res_to_cnn, xcs_to_cnn, 0, run_mode, rng);
            mlp_m2[i] = merge_with_dropout(t, mlp_d2[i], res_to_mlp, {}, 0, run_mode, rng);
            if (i == 0) {
                put_tap("cnn.merge2", t, cnn_m2[i]);
                put_tap("mlp.merge2", t, mlp_m2[i]);
            }
        }

        // Heads and classifier merge
        std::vector<Var> head_parts(n);
        for (int i = 0; i < n; ++i) {
            Var feat = t.relu(cnn_fc.apply(t, t.flatten(cnn_m2[i])));
            if (i == 0) put_tap("cnn.fc", t, feat);
            std::vector<Var> parts = {feat, mlp_m2[i]};
            if (xc) parts.push_back(xc2_head[i]);
            head_parts[i] = t.concat(parts, 0);
            if (i == 0) put_tap("head.concat", t, head_parts[i]);
        }
        Var bn_head_out = bn_merge.apply(t, t.stack(head_parts), run_mode);

        BatchResult result;
        std::vector<Var> losses;
        for (int i = 0; i < n; ++i) {
            Var h = t.dropout(t.unstack(bn_head_out, i), 0.5, run_mode, rng);
            h = t.relu(fc_merge.apply(t, h));
            if (i == 0) put_tap("head.fc", t, h);
            h = t.dropout(h, 0.5, run_mode, rng);
            Var logits = fc_out.apply(t, h);
            if (i == 0) put_tap("logits", t, logits);
            Tensor probs;
            Var loss = t.softmax_cross_entropy(logits, batch[i]->label, &probs);
            if (i == 0 && record_taps_) taps_["probs"] = probs;
            result.probs.push_back(std::move(probs));
            result.losses.push_back(t.val(loss).data[0]);
            losses.push_back(loss);
        }
        result.mean_loss = t.scale(t.add_n(losses), 1.0 / static_cast<double>(n));
        return result;
    }

    BatchResult forward_lstm(Tape& t, const std::vector<const PreparedExample*>& batch,
                             Mode run_mode, Rng& rng) {
        const int n = static_cast<int>(batch.size());
        const bool xc = config.use_xconns, rc = config.use_resconns;

        // Flatten all frames of all examples; batch statistics pool over them.
        std::vector<Var> frame_in, mfcc_in;
        std::vector<std::pair<int, int>> frame_span(n);  // [begin, count) per example
        for (int i = 0; i < n; ++i) {
            const PreparedExample& p = *batch[i];
            CF_CHECK(!p.frames.empty(), "lstm forward: example with no frames");
            CF_CHECK(p.frames.size() == p.mfcc_rows.size(), "modality length mismatch");
            frame_span[i] = {static_cast<int>(frame_in.size()), static_cast<int>(p.frames.size())};
            for (const Tensor& f : p.frames) frame_in.push_back(t.input(f));
            for (const Tensor& r : p.mfcc_rows) mfcc_in.push_back(t.input(r));
        }
        const int total_frames = static_cast<int>(frame_in.size());

        Var bn_in_out = bn_in.apply(t, t.stack(frame_in), run_mode);
        std::vector<Var> feats(total_frames);
        for (int f = 0; f < total_frames; ++f) {
            const bool tap0 = f == 0;
            Var x = t.unstack(bn_in_out, f);
            if (tap0) put_tap("cnn.bn_in", t, x);
            Var c = t.relu(conv1_1.apply(t, x));
            if (tap0) put_tap("cnn.conv1_1", t, c);
            Var c1 = t.maxpool2x2(c);
            if (tap0) put_tap("cnn.pool1", t, c1);
            Var m1 = t.relu(mlp_fc1.apply(t, mfcc_in[f]));
            if (tap0) put_tap("mlp.fc1", t, m1);

            std::vector<Var> res_to_cnn, xcs_to_cnn, res_to_mlp, xcs_to_mlp;
            if (rc) {
                res_to_cnn.push_back(rc_1d2d_1.apply(t, mfcc_in[f]));
                res_to_mlp.push_back(rc_2d1d_1.apply(t, frame_in[f]));
                if (tap0) {
                    put_tap("rc_1d2d_1.out", t, res_to_cnn[0]);
                    put_tap("rc_2d1d_1.out", t, res_to_mlp[0]);
                }
            }
            if (xc) {
                xcs_to_cnn.push_back(xc_1d2d_1.apply(t, m1));
                xcs_to_mlp.push_back(xc_2d1d_1.apply(t, c1));
                if (tap0) {
                    put_tap("xc_1d2d_1.out", t, xcs_to_cnn[0]);
                    put_tap("xc_2d1d_1.out", t, xcs_to_mlp[0]);
                }
            }
            Var cm1 = merge_with_dropout(t, c1, res_to_cnn, xcs_to_cnn, 0, run_mode, rng);
            Var mm1 = merge_with_dropout(t, m1, res_to_mlp, xcs_to_mlp, 0, run_mode, rng);
            if (tap0) {
                put_tap("cnn.merge1", t, cm1);
                put_tap("mlp.merge1", t, mm1);
            }

            Var c2 = t.maxpool2x2(t.relu(conv2_1.apply(t, cm1)));
            if (tap0) put_tap("cnn.pool2", t, c2);
            Var m2 = t.relu(mlp_fc2.apply(t, mm1));
            if (tap0) put_tap("mlp.fc2", t, m2);

            std::vector<Var> res2_to_cnn, xcs2_to_cnn, res2_to_mlp;
            Var xc2_out;
            if (rc) {
                res2_to_cnn.push_back(rc_1d2d_2.apply(t, mfcc_in[f]));
                res2_to_mlp.push_back(rc_2d1d_2.apply(t, frame_in[f]));
                if (tap0) {
                    put_tap("rc_1d2d_2.out", t, res2_to_cnn[0]);
                    put_tap("rc_2d1d_2.out", t, res2_to_mlp[0]);
                }
            }
            if (xc) {
                xcs2_to_cnn.push_back(xc_1d2d_2.apply(t, m2));
                xc2_out = xc_2d1d_2.apply(t, c2);
                if (tap0) {
                    put_tap("xc_1d2d_2.out", t, xcs2_to_cnn[0]);
                    put_tap("xc_2d1d_2.out", t, xc2_out);
                }
            }
            Var cm2 = merge_with_dropout(t, c2, res2_to_cnn, xcs2_to_cnn, 0, run_mode, rng);
            Var mm2 = merge_with_dropout(t, m2, res2_to_mlp, {}, 0, run_mode, rng);
            if (tap0) {
                put_tap("cnn.merge2", t, cm2);
                put_tap("mlp.merge2", t, mm2);
            }

            Var cnn_feat = t.relu(cnn_fc.apply(t, t.flatten(cm2)));
            if (tap0) put_tap("cnn.fc", t, cnn_feat);
            std::vector<Var> parts = {cnn_feat, mm2};
            if (xc) parts.push_back(xc2_out);
            feats[f] = t.concat(parts, 0);
            if (tap0) put_tap("frame.concat", t, feats[f]);
            if (f == total_frames - 1) put_tap("frame.concat.last", t, feats[f]);
        }

        Var bn_feat_out = bn_merge.apply(t, t.stack(feats), run_mode);

        BatchResult result;
        std::vector<Var> losses;
        for (int i = 0; i < n; ++i) {
            std::vector<Var> sequence;
            for (int s = 0; s < frame_span[i].second; ++s) {
                Var h = t.dropout(t.unstack(bn_feat_out, frame_span[i].first + s), 0.5, run_mode, rng);
                sequence.push_back(h);
            }
            Var hidden = lstm.apply(t, sequence, config.lstm_mean_pool);
            if (i == 0) put_tap("lstm.h", t, hidden);
            Var logits = fc_out.apply(t, hidden);
            if (i == 0) put_tap("logits", t, logits);
            Tensor probs;
            Var loss = t.softmax_cross_entropy(logits, batch[i]->label, &probs);
            if (i == 0 && record_taps_) taps_["probs"] = probs;
            result.probs.push_back(std::move(probs));
            result.losses.push_back(t.val(loss).data[0]);
            losses.push_back(loss);
        }
        result.mean_loss = t.scale(t.add_n(losses), 1.0 / static_cast<double>(n));
        return result;
    }
};

}  // namespace crossflow::models
