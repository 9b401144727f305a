#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossflow/models.hpp"

namespace crossflow::analysis {

// Squared-L2 differences between consecutive timesteps of the raw MFCC rows
// and of the first 1D->2D residual connection's outputs (post-activation,
// which is what the 2D stream receives), reported per deconvolution kernel
// and summed.
struct DiffSeries {
    std::vector<double> mfcc;                         // length T-1
    std::vector<double> img_total;                    // length T-1
    std::vector<std::vector<double>> img_per_kernel;  // [T-1][kernels]
};

inline DiffSeries diff_series(models::Model& model, const data::Example& ex) {
    CF_CHECK(model.config.arch == models::Architecture::CnnMlpLstm,
             "diff_series: model must be the recurrent architecture");
    CF_CHECK(model.config.use_resconns, "diff_series: model has no residual connections");
    ex.validate();
    const int t_len = ex.frame_count();
    CF_CHECK(t_len >= 2, "diff_series: need at least 2 frames");

    auto mfcc_row = [&](int s) {
        Tensor row({model.config.mfcc_dim});
        for (int j = 0; j < model.config.mfcc_dim; ++j) row.at(j) = ex.mfcc.at(s, j);
        return row;
    };

    DiffSeries series;
    Tensor prev_row = mfcc_row(0);
    Tensor prev_out = model.connection_forward("rc_1d2d_1", prev_row);
    const int kernels = prev_out.dim(0);
    const std::size_t plane = static_cast<std::size_t>(prev_out.dim(1)) * prev_out.dim(2);
    for (int s = 1; s < t_len; ++s) {
        Tensor row = mfcc_row(s);
        Tensor out = model.connection_forward("rc_1d2d_1", row);
        series.mfcc.push_back(squared_l2_diff(row, prev_row));
        std::vector<double> per_kernel(static_cast<std::size_t>(kernels), 0.0);
        double total = 0.0;
        for (int c = 0; c < kernels; ++c) {
            double acc = 0.0;
            const std::size_t base = static_cast<std::size_t>(c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = out.data[base + i] - prev_out.data[base + i];
                acc += d * d;
            }
            per_kernel[static_cast<std::size_t>(c)] = acc;
            total += acc;
        }
        series.img_per_kernel.push_back(std::move(per_kernel));
        series.img_total.push_back(total);
        prev_row = std::move(row);
        prev_out = std::move(out);
    }
    return series;
}

inline void write_diff_series_csv(const DiffSeries& series, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write diff series: " + path.string());
    const std::size_t kernels = series.img_per_kernel.empty() ? 0 : series.img_per_kernel[0].size();
    out << "t,diff_mfcc,diff_img";
    for (std::size_t c = 0; c < kernels; ++c) out << ",diff_img_k" << c;
    out << '\n';
    char buf[64];
    for (std::size_t s = 0; s < series.mfcc.size(); ++s) {
        out << (s + 1);
        std::snprintf(buf, sizeof(buf), ",%.12g", series.mfcc[s]);
        out << buf;
        std::snprintf(buf, sizeof(buf), ",%.12g", series.img_total[s]);
        out << buf;
        for (double v : series.img_per_kernel[s]) {
            std::snprintf(buf, sizeof(buf), ",%.12g", v);
            out << buf;
        }
        out << '\n';
    }
    if (!out) throw IoError("diff series write failed");
}

// One CSV row per example: id, person, label, then the connection's output
// vector from an evaluation forward. Suitable input for external embedding
// (t-SNE, PCA) tools.
struct FeatureExportInfo {
    std::size_t rows = 0;
    int width = 0;
};

inline FeatureExportInfo export_connection_features(models::Model& model, const data::Dataset& ds,
                                                    const std::string& connection_id,
                                                    const std::filesystem::path& path) {
    CF_CHECK(model.has_connection(connection_id), "unknown connection " + connection_id);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write features: " + path.string());

    FeatureExportInfo info;
    char buf[64];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const data::Example& ex = ds.examples[i];
        (void)model.forward(ex);
        const Tensor& feat = model.tap(connection_id + ".out");
        const Tensor flat = flatten(feat);
        if (i == 0) {
            info.width = static_cast<int>(flat.numel());
            out << "example_id,person_id,label";
            for (int j = 0; j < info.width; ++j) out << ",f" << j;
            out << '\n';
        }
        out << i << ',' << ex.person_id << ',' << ex.label;
        for (double v : flat.data) {
            std::snprintf(buf, sizeof(buf), ",%.9g", v);
            out << buf;
        }
        out << '\n';
        ++info.rows;
    }
    if (!out) throw IoError("feature write failed");
    return info;
}

// Quantitative proxy for class structure in exported features: mean cosine
// distance within classes vs across classes (no threshold asserted).
struct ClusterProxy {
    double mean_intra = 0.0;
    double mean_inter = 0.0;
    double ratio = 0.0;  // intra / inter; < 1 indicates class-consistent features
};

inline ClusterProxy clustering_proxy(const std::vector<Tensor>& features,
                                     const std::vector<int>& labels) {
    CF_CHECK(features.size() == labels.size() && features.size() >= 2,
             "clustering_proxy: need matched features and labels");
    auto cosine_distance = [](const Tensor& a, const Tensor& b) {
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t i = 0; i < a.numel(); ++i) {
            ab += a.data[i] * b.data[i];
            aa += a.data[i] * a.data[i];
            bb += b.data[i] * b.data[i];
        }
        const double denom = std::sqrt(aa) * std::sqrt(bb);
        if (denom == 0.0) return 1.0;
        return 1.0 - ab / denom;
    };
    double intra = 0, inter = 0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t i = 0; i < features.size(); ++i)
        for (std::size_t j = i + 1; j < features.size(); ++j) {
            const double d = cosine_distance(features[i], features[j]);
            if (labels[i] == labels[j]) {
                intra += d;
                ++n_intra;
            } else {
                inter += d;
                ++n_inter;
            }
        }
    ClusterProxy proxy;
    proxy.mean_intra = n_intra ? intra / static_cast<double>(n_intra) : 0.0;
    proxy.mean_inter = n_inter ? inter / static_cast<double>(n_inter) : 0.0;
    proxy.ratio = proxy.mean_inter > 0.0 ? proxy.mean_intra / proxy.mean_inter : 0.0;
    return proxy;
}

inline nlohmann::json clustering_summary(const ClusterProxy& proxy, const std::string& connection,
                                         std::size_t examples) {
    return {{"connection", connection},
            {"examples", examples},
            {"mean_intra_class_cosine_distance", proxy.mean_intra},
            {"mean_inter_class_cosine_distance", proxy.mean_inter},
            {"intra_over_inter_ratio", proxy.ratio}};
}

// Writes one binary PGM (P5) per channel, min-max normalized to 0..255.
// A constant channel maps to mid-gray 128.
inline std::vector<std::filesystem::path> export_feature_map(const Tensor& maps,
                                                             const std::string& out_prefix) {
    CF_CHECK(maps.rank() == 3, "export_feature_map: tensor must be [C,H,W]");
    const int channels = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
    std::vector<std::filesystem::path> written;
    for (int c = 0; c < channels; ++c) {
        double lo = maps.at(c, 0, 0), hi = maps.at(c, 0, 0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                lo = std::min(lo, maps.at(c, y, x));
                hi = std::max(hi, maps.at(c, y, x));
            }
        std::string bytes;
        bytes.reserve(static_cast<std::size_t>(h) * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                int v = 128;
                if (hi > lo)
                    v = static_cast<int>(std::lround((maps.at(c, y, x) - lo) / (hi - lo) * 255.0));
                bytes.push_back(static_cast<char>(static_cast<unsigned char>(v)));
            }
        const std::filesystem::path path = out_prefix + "_k" + std::to_string(c) + ".pgm";
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write image: " + path.string());
        out << "P5\n" << w << ' ' << h << "\n255\n";
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("image write failed");
        written.push_back(path);
    }
    return written;
}

}  // namespace crossflow::analysis
