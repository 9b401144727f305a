#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "crossflow/analysis.hpp"

using namespace crossflow;
using namespace crossflow::analysis;

namespace fs = std::filesystem;

namespace {

models::ModelConfig tiny_lstm_config() {
    models::ModelConfig c;
    c.arch = models::Architecture::CnnMlpLstm;
    c.num_classes = 2;
    c.height = 8;
    c.width = 8;
    c.mfcc_dim = 4;
    c.seed = 19;
    return c;
}

data::Example random_example(const models::ModelConfig& cfg, int t, std::uint64_t seed) {
    Rng rng(seed);
    data::Example ex;
    ex.frames = Tensor({t, cfg.height, cfg.width});
    for (double& v : ex.frames.data) v = rng.uniform(0, 1);
    ex.mfcc = Tensor({t, cfg.mfcc_dim});
    for (double& v : ex.mfcc.data) v = rng.uniform(-1, 1);
    ex.label = 1;
    ex.person_id = 3;
    return ex;
}

// Minimal P5 reader used only to verify written images.
struct Pgm {
    int width = 0, height = 0, maxval = 0;
    std::vector<unsigned char> pixels;
};

Pgm read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::string magic;
    in >> magic;
    REQUIRE(magic == "P5");
    Pgm img;
    in >> img.width >> img.height >> img.maxval;
    in.get();  // single whitespace after maxval
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    REQUIRE(in.good());
    return img;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("diff series") {
    auto model = models::Model::build(tiny_lstm_config());

    SUBCASE("constant sequence gives identically zero series") {
        data::Example ex = random_example(model->config, 1, 71);
        data::Example rep;
        rep.label = 0;
        rep.person_id = 0;
        rep.frames = Tensor({3, 8, 8});
        rep.mfcc = Tensor({3, 4});
        for (int s = 0; s < 3; ++s) {
            std::copy(ex.frames.data.begin(), ex.frames.data.end(),
                      rep.frames.data.begin() + s * 64);
            std::copy(ex.mfcc.data.begin(), ex.mfcc.data.end(), rep.mfcc.data.begin() + s * 4);
        }
        DiffSeries series = diff_series(*model, rep);
        REQUIRE(series.mfcc.size() == 2);
        for (double v : series.mfcc) CHECK(v == 0.0);
        for (double v : series.img_total) CHECK(v == 0.0);
    }

    SUBCASE("a single changed step localizes both series") {
        data::Example ex = random_example(model->config, 4, 73);
        // all rows equal except a jump between steps 1 and 2
        for (int s = 1; s < 4; ++s)
            for (int j = 0; j < 4; ++j) ex.mfcc.at(s, j) = ex.mfcc.at(0, j) + (s >= 2 ? 1.0 : 0.0);
        DiffSeries series = diff_series(*model, ex);
        CHECK(series.mfcc[0] == 0.0);
        CHECK(series.mfcc[1] > 0.0);
        CHECK(series.mfcc[2] == 0.0);
        CHECK(series.img_total[0] == 0.0);
        CHECK(series.img_total[1] > 0.0);
        CHECK(series.img_total[2] == 0.0);
    }

    SUBCASE("values match a scalar loop oracle") {
        data::Example ex = random_example(model->config, 3, 79);
        DiffSeries series = diff_series(*model, ex);
        for (int s = 1; s < 3; ++s) {
            double want_mfcc = 0.0;
            for (int j = 0; j < 4; ++j) {
                const double d = ex.mfcc.at(s, j) - ex.mfcc.at(s - 1, j);
                want_mfcc += d * d;
            }
            CHECK(std::fabs(series.mfcc[static_cast<std::size_t>(s - 1)] - want_mfcc) < 1e-12);

            Tensor row_a({4}), row_b({4});
            for (int j = 0; j < 4; ++j) {
                row_a.at(j) = ex.mfcc.at(s - 1, j);
                row_b.at(j) = ex.mfcc.at(s, j);
            }
            Tensor out_a = model->connection_forward("rc_1d2d_1", row_a);
            Tensor out_b = model->connection_forward("rc_1d2d_1", row_b);
            double want_img = 0.0;
            for (std::size_t i = 0; i < out_a.numel(); ++i) {
                const double d = out_b.data[i] - out_a.data[i];
                want_img += d * d;
            }
            CHECK(std::fabs(series.img_total[static_cast<std::size_t>(s - 1)] - want_img) < 1e-12);
            double per_kernel_sum = 0.0;
            for (double v : series.img_per_kernel[static_cast<std::size_t>(s - 1)]) per_kernel_sum += v;
            CHECK(std::fabs(per_kernel_sum - want_img) < 1e-12);
        }
    }

    SUBCASE("reversed sequence gives the reversed series") {
        data::Example ex = random_example(model->config, 5, 83);
        data::Example rev = ex;
        for (int s = 0; s < 5; ++s) {
            for (int j = 0; j < 4; ++j) rev.mfcc.at(s, j) = ex.mfcc.at(4 - s, j);
            for (int i = 0; i < 64; ++i)
                rev.frames.data[static_cast<std::size_t>(s) * 64 + i] =
                    ex.frames.data[static_cast<std::size_t>(4 - s) * 64 + i];
        }
        DiffSeries fwd = diff_series(*model, ex);
        DiffSeries bwd = diff_series(*model, rev);
        for (std::size_t s = 0; s < 4; ++s) {
            CHECK(fwd.mfcc[s] == doctest::Approx(bwd.mfcc[3 - s]).epsilon(1e-12));
            CHECK(fwd.img_total[s] == doctest::Approx(bwd.img_total[3 - s]).epsilon(1e-12));
        }
    }

    SUBCASE("scaling mfcc by 2 scales diff_mfcc by exactly 4") {
        data::Example ex = random_example(model->config, 3, 89);
        data::Example scaled = ex;
        for (double& v : scaled.mfcc.data) v *= 2.0;
        DiffSeries base = diff_series(*model, ex);
        DiffSeries big = diff_series(*model, scaled);
        for (std::size_t s = 0; s < base.mfcc.size(); ++s)
            CHECK(big.mfcc[s] == 4.0 * base.mfcc[s]);  // power-of-two scale: exact
    }

    SUBCASE("preconditions") {
        data::Example ex = random_example(model->config, 1, 97);
        CHECK_THROWS_AS(diff_series(*model, ex), ContractViolation);

        models::ModelConfig no_rc = tiny_lstm_config();
        no_rc.use_resconns = false;
        auto bare = models::Model::build(no_rc);
        data::Example ex2 = random_example(no_rc, 3, 97);
        CHECK_THROWS_AS(diff_series(*bare, ex2), ContractViolation);
    }

    SUBCASE("csv rows equal T-1 with per-kernel columns") {
        data::Example ex = random_example(model->config, 4, 101);
        DiffSeries series = diff_series(*model, ex);
        fs::path path = fs::temp_directory_path() / "crossflow_diffs.csv";
        write_diff_series_csv(series, path);
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        CHECK(line == "t,diff_mfcc,diff_img,diff_img_k0,diff_img_k1,diff_img_k2,diff_img_k3,"
                      "diff_img_k4,diff_img_k5,diff_img_k6,diff_img_k7");
        int rows = 0;
        while (std::getline(in, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 3);
    }
}

TEST_CASE("connection feature export") {
    auto model = models::Model::build(tiny_lstm_config());
    models::ModelConfig cm_cfg = tiny_lstm_config();
    cm_cfg.arch = models::Architecture::CnnMlp;
    cm_cfg.avg_windows = 1;
    auto cm = models::Model::build(cm_cfg);

    data::SyntheticSpec spec;
    spec.num_classes = 2;
    spec.num_persons = 2;
    spec.examples_per_person_per_class = 2;
    spec.t_min = 1;
    spec.t_max = 2;
    spec.height = 8;
    spec.width = 8;
    spec.mfcc_dim = 4;
    spec.seed = 31;
    data::Dataset ds = data::gen_synthetic(spec);

    fs::path path = fs::temp_directory_path() / "crossflow_features.csv";
    FeatureExportInfo info = export_connection_features(*cm, ds, "xc_2d1d_2", path);
    CHECK(info.rows == ds.size());
    CHECK(info.width == 128);  // second 2D->1D connection width

    SUBCASE("deterministic byte-for-byte") {
        std::string first = slurp(path);
        export_connection_features(*cm, ds, "xc_2d1d_2", path);
        CHECK(slurp(path) == first);
    }
    SUBCASE("identical examples produce identical rows") {
        data::Dataset twins;
        twins.num_classes = 2;
        twins.examples = {ds.examples[0], ds.examples[0]};
        fs::path p2 = fs::temp_directory_path() / "crossflow_twins.csv";
        export_connection_features(*cm, twins, "xc_2d1d_2", p2);
        std::ifstream in(p2);
        std::string header, r1, r2;
        std::getline(in, header);
        std::getline(in, r1);
        std::getline(in, r2);
        CHECK(r1.substr(1) == r2.substr(1));  // identical past the example id
    }
    SUBCASE("unknown connection rejected") {
        CHECK_THROWS_AS(export_connection_features(*cm, ds, "xc_bogus", path), ContractViolation);
        models::ModelConfig no_xc = cm_cfg;
        no_xc.use_xconns = false;
        auto bare = models::Model::build(no_xc);
        CHECK_THROWS_AS(export_connection_features(*bare, ds, "xc_2d1d_2", path),
                        ContractViolation);
    }
}

TEST_CASE("clustering proxy separates structured from shuffled labels") {
    Rng rng(107);
    std::vector<Tensor> feats;
    std::vector<int> labels;
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 10; ++i) {
            Tensor f({8});
            for (int j = 0; j < 8; ++j)
                f.at(j) = (c == 0 ? 1.0 : -1.0) * (j % 2 ? 1.0 : 0.5) + 0.05 * rng.normal();
            feats.push_back(f);
            labels.push_back(c);
        }
    ClusterProxy proxy = clustering_proxy(feats, labels);
    CHECK(proxy.mean_intra < proxy.mean_inter);
    CHECK(proxy.ratio < 1.0);
    nlohmann::json j = clustering_summary(proxy, "xc_2d1d_2", feats.size());
    CHECK(j.at("connection") == "xc_2d1d_2");
}

TEST_CASE("feature map export") {
    fs::path prefix = fs::temp_directory_path() / "crossflow_map";

    SUBCASE("min-max normalization by inspection") {
        Tensor maps({1, 2, 2}, {0, 1, 1, 0});
        auto files = export_feature_map(maps, prefix.string());
        REQUIRE(files.size() == 1);
        Pgm img = read_pgm(files[0]);
        CHECK(img.width == 2);
        CHECK(img.height == 2);
        CHECK(img.maxval == 255);
        CHECK(img.pixels == std::vector<unsigned char>{0, 255, 255, 0});
    }
    SUBCASE("constant channel becomes mid-gray") {
        Tensor maps = Tensor::full({2, 3, 3}, 7.0);
        auto files = export_feature_map(maps, prefix.string());
        REQUIRE(files.size() == 2);
        for (const auto& f : files) {
            Pgm img = read_pgm(f);
            for (unsigned char p : img.pixels) CHECK(p == 128);
        }
    }
    SUBCASE("round trip preserves pixel values and is deterministic") {
        Rng rng(109);
        Tensor maps({3, 5, 4});
        for (double& v : maps.data) v = rng.uniform(-2, 2);
        auto files = export_feature_map(maps, prefix.string());
        std::string bytes = slurp(files[1]);
        export_feature_map(maps, prefix.string());
        CHECK(slurp(files[1]) == bytes);

        Pgm img = read_pgm(files[1]);
        double lo = maps.at(1, 0, 0), hi = maps.at(1, 0, 0);
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 4; ++x) {
                lo = std::min(lo, maps.at(1, y, x));
                hi = std::max(hi, maps.at(1, y, x));
            }
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 4; ++x) {
                const int want =
                    static_cast<int>(std::lround((maps.at(1, y, x) - lo) / (hi - lo) * 255.0));
                CHECK(static_cast<int>(img.pixels[static_cast<std::size_t>(y) * 4 + x]) == want);
            }
    }
    SUBCASE("rank violation rejected") {
        CHECK_THROWS_AS(export_feature_map(Tensor({4, 4}), prefix.string()), ContractViolation);
    }
}
