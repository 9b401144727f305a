// crossflow command-line interface: synthetic data generation, training,
// cross-validation, ablation, interpretability exports and gradient checks.
//
// Exit codes: 0 success, 2 usage, 3 I/O failure, 4 validation/format error,
// 5 gradient-check failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "crossflow/analysis.hpp"
#include "crossflow/eval.hpp"
#include "crossflow/optim.hpp"

namespace fs = std::filesystem;
using namespace crossflow;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::uint64_t env_seed_fallback() {
    const char* env = std::getenv("XFLOW_SEED");
    if (!env) return 0;
    try {
        return std::stoull(env);
    } catch (...) {
        throw UsageError("XFLOW_SEED must be an unsigned integer");
    }
}

nlohmann::json load_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

void write_json(const nlohmann::json& j, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write: " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir.string());
}

struct RunConfig {
    models::ModelConfig model;
    fs::path dataset;
    fs::path out_dir = "out";
    optim::TrainConfig train;
    int k = 5;
    int repeats = 5;
    std::uint64_t seed = 0;

    static RunConfig parse(const nlohmann::json& j) {
        RunConfig rc;
        rc.model = models::ModelConfig::from_json(j);
        try {
            rc.dataset = j.at("dataset").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            throw ValidationError("config is missing \"dataset\"");
        }
        rc.out_dir = fs::path(j.value("out_dir", std::string("out")));
        rc.seed = j.contains("seed") ? j.at("seed").get<std::uint64_t>() : env_seed_fallback();
        rc.model.seed = rc.seed;
        rc.train.epochs = j.value("epochs", 300);
        rc.train.batch_size =
            j.value("batch_size", rc.model.arch == models::Architecture::CnnMlp ? 128 : 32);
        rc.train.seed = rc.seed;
        rc.k = j.value("k", 5);
        rc.repeats = j.value("repeats", 5);
        return rc;
    }
};

std::unique_ptr<models::Model> load_model_with_sidecar(const fs::path& archive) {
    if (!fs::exists(archive)) throw IoError("model archive not found: " + archive.string());
    fs::path sidecar = archive;
    sidecar.replace_extension(".json");
    if (!fs::exists(sidecar))
        throw IoError("model config sidecar not found: " + sidecar.string());
    auto model = models::Model::build(models::ModelConfig::from_json(load_json(sidecar)));
    model->load(archive);
    return model;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(int classes, int persons, int per_class, int t_min, int t_max, int height,
                 int width, int mfcc_dim, std::uint64_t seed, const fs::path& out) {
    if (classes < 2) throw UsageError("--classes must be at least 2");
    if (persons < 1 || per_class < 1) throw UsageError("--persons and --per-class must be positive");
    if (t_min < 1 || t_min > t_max) throw UsageError("need 1 <= t-min <= t-max");

    data::SyntheticSpec spec;
    spec.num_classes = classes;
    spec.num_persons = persons;
    spec.examples_per_person_per_class = per_class;
    spec.t_min = t_min;
    spec.t_max = t_max;
    spec.height = height;
    spec.width = width;
    spec.mfcc_dim = mfcc_dim;
    spec.seed = seed;
    data::Dataset ds = data::gen_synthetic(spec);
    data::save_dataset(ds, out);
    std::printf("wrote %zu examples (%d classes, %d persons) to %s\n", ds.size(), classes,
                persons, out.string().c_str());
    return 0;
}

int cmd_train(const fs::path& config_path) {
    RunConfig rc = RunConfig::parse(load_json(config_path));
    rc.train.validate();
    data::Dataset ds = data::load_dataset(rc.dataset);
    ensure_dir(rc.out_dir);

    auto model = models::Model::build(rc.model);
    optim::History history = optim::train(*model, ds, rc.train);
    optim::write_history_csv(history, rc.out_dir / "history.csv");
    model->save(rc.out_dir / "model.xfp");
    write_json(rc.model.to_json(), rc.out_dir / "model.json");

    const optim::EvalResult train_eval = optim::evaluate(*model, ds);
    write_json({{"train_accuracy", train_eval.accuracy},
                {"train_loss", train_eval.mean_loss},
                {"epochs", rc.train.epochs},
                {"examples", ds.size()},
                {"parameters", model->param_count()}},
               rc.out_dir / "train_summary.json");
    std::printf("trained %s for %d epochs: train accuracy %.4f, loss %.4f\n",
                models::to_string(rc.model.arch).c_str(), rc.train.epochs, train_eval.accuracy,
                train_eval.mean_loss);
    return 0;
}

int cmd_crossval(const fs::path& config_path, int jobs) {
    RunConfig rc = RunConfig::parse(load_json(config_path));
    data::Dataset ds = data::load_dataset(rc.dataset);
    ensure_dir(rc.out_dir);

    eval::CrossValConfig cv;
    cv.k = rc.k;
    cv.repeats = rc.repeats;
    cv.base_seed = rc.seed;
    cv.train = rc.train;
    cv.jobs = jobs;
    eval::CrossValReport report = eval::crossval(rc.model, ds, cv);
    eval::write_crossval_csv(report, rc.out_dir / "crossval.csv");
    write_json(eval::crossval_summary(report), rc.out_dir / "crossval.json");
    std::printf("crossval %s: k=%d repeats=%d mean accuracy %.4f\n",
                models::to_string(rc.model.arch).c_str(), rc.k, rc.repeats, report.mean_accuracy);
    return 0;
}

int cmd_ablate(const fs::path& config_path, int jobs) {
    RunConfig rc = RunConfig::parse(load_json(config_path));
    data::Dataset ds = data::load_dataset(rc.dataset);
    ensure_dir(rc.out_dir);

    eval::CrossValConfig cv;
    cv.k = rc.k;
    cv.repeats = rc.repeats;
    cv.base_seed = rc.seed;
    cv.train = rc.train;
    cv.jobs = jobs;
    eval::AblationTable table = eval::ablate(rc.model, ds, cv);
    eval::write_ablation_csv(table, rc.out_dir / "ablate.csv");
    write_json(eval::ablation_summary(table), rc.out_dir / "ablate.json");
    for (const eval::AblationRow& row : table.rows)
        std::printf("%-12s mean accuracy %.4f\n", row.name.c_str(), row.report.mean_accuracy);
    for (const auto& [name, t] : table.t_tests)
        std::printf("%-24s t=%.4f p=%.4g%s\n", name.c_str(), t.t, t.p,
                    t.significant ? " (significant at 0.05)" : "");
    return 0;
}

int cmd_analyze(const fs::path& model_path, const fs::path& dataset_dir, const std::string& what,
                const fs::path& out_dir, std::string connection, int example_index) {
    auto model = load_model_with_sidecar(model_path);
    data::Dataset ds = data::load_dataset(dataset_dir);
    ensure_dir(out_dir);
    if (ds.examples.empty()) throw ValidationError("dataset is empty");
    if (example_index < 0 || example_index >= static_cast<int>(ds.size()))
        throw ValidationError("--example out of range");

    if (what == "diffs") {
        const analysis::DiffSeries series =
            analysis::diff_series(*model, ds.examples[static_cast<std::size_t>(example_index)]);
        analysis::write_diff_series_csv(series, out_dir / "diffs.csv");
        std::printf("wrote %zu diff rows to %s\n", series.mfcc.size(),
                    (out_dir / "diffs.csv").string().c_str());
        return 0;
    }
    if (what == "features") {
        if (connection.empty()) connection = "xc_2d1d_2";
        const analysis::FeatureExportInfo info = analysis::export_connection_features(
            *model, ds, connection, out_dir / "features.csv");
        std::vector<Tensor> feats;
        std::vector<int> labels;
        for (const data::Example& ex : ds.examples) {
            (void)model->forward(ex);
            feats.push_back(flatten(model->tap(connection + ".out")));
            labels.push_back(ex.label);
        }
        write_json(analysis::clustering_summary(analysis::clustering_proxy(feats, labels),
                                                connection, ds.size()),
                   out_dir / "clustering.json");
        std::printf("wrote %zu rows x %d features to %s\n", info.rows, info.width,
                    (out_dir / "features.csv").string().c_str());
        return 0;
    }
    if (what == "maps") {
        if (connection.empty()) connection = "rc_1d2d_1";
        const data::Example& ex = ds.examples[static_cast<std::size_t>(example_index)];
        (void)model->forward(ex);
        const Tensor& maps = model->tap(connection + ".out");
        if (maps.rank() != 3)
            throw ValidationError("connection " + connection + " does not produce 2D maps");
        auto files = analysis::export_feature_map(maps, (out_dir / "map").string());
        std::printf("wrote %zu channel images under %s\n", files.size(),
                    (out_dir / "map_k*.pgm").string().c_str());
        return 0;
    }
    throw UsageError("--what must be one of diffs, features, maps");
}

int cmd_gradcheck(const std::string& arch) {
    double worst = 0.0;
    std::string worst_name;
    auto record = [&](const std::string& name, const ad::GradCheckReport& r) {
        std::printf("%-28s max relative error %.3e (%s)\n", name.c_str(), r.max_rel_error,
                    r.worst_parameter.c_str());
        if (r.max_rel_error > worst) {
            worst = r.max_rel_error;
            worst_name = name;
        }
    };

    Rng rng(1234);
    auto rand_tensor = [&](Shape s, double lo = -1.0, double hi = 1.0) {
        Tensor t(std::move(s));
        for (double& v : t.data) v = rng.uniform(lo, hi);
        return t;
    };

    {
        nn::Dense d;
        d.init("dense", 6, 4, rng);
        Tensor x = rand_tensor({6});
        record("dense", ad::grad_check(
                            [&](ad::Tape& t) { return t.sum(t.relu(d.apply(t, t.input(x)))); },
                            {&d.weight, &d.bias}));
    }
    {
        nn::Conv2D c;
        c.init("conv", 3, 2, 3, 3, Padding::Same, rng);
        Tensor x = rand_tensor({2, 6, 6});
        record("conv2d", ad::grad_check(
                             [&](ad::Tape& t) { return t.sum(c.apply(t, t.input(x))); },
                             {&c.kernels, &c.bias}));
    }
    {
        nn::Deconv2D d;
        d.init("deconv", 3, 2, 4, 4, rng);
        Tensor x = rand_tensor({2, 3, 3});
        record("deconv2d", ad::grad_check(
                               [&](ad::Tape& t) { return t.sum(d.apply(t, t.input(x))); },
                               {&d.kernels, &d.bias}));
    }
    {
        nn::PReLU p;
        p.init("prelu", 5);
        Tensor x = rand_tensor({5}, -2.0, 2.0);
        record("prelu", ad::grad_check(
                            [&](ad::Tape& t) { return t.sum(p.apply(t, t.input(x))); },
                            {&p.slopes}));
    }
    {
        nn::BatchNorm bn;
        bn.init("bn", 3);
        Tensor x = rand_tensor({4, 3});
        record("batchnorm(eval)",
               ad::grad_check(
                   [&](ad::Tape& t) { return t.sum(bn.apply(t, t.input(x), ad::Mode::Eval)); },
                   {&bn.gamma, &bn.beta}));
    }
    {
        nn::LSTM lstm;
        lstm.init("lstm", 3, 4, rng);
        std::vector<Tensor> xs = {rand_tensor({3}), rand_tensor({3}), rand_tensor({3})};
        Tensor w = rand_tensor({4});
        std::vector<ad::Parameter*> params;
        lstm.collect(params);
        record("lstm", ad::grad_check(
                           [&](ad::Tape& t) {
                               std::vector<ad::Var> seq;
                               for (const Tensor& x : xs) seq.push_back(t.input(x));
                               return t.sum(t.mul(lstm.apply(t, seq), t.input(w)));
                           },
                           params));
    }
    {
        xconn::Conn2Dto1D conn;
        conn.init("xc2d1d", 2, 4, 4, 2, 5, rng);
        Tensor x = rand_tensor({2, 4, 4});
        Tensor w = rand_tensor({5});
        std::vector<ad::Parameter*> params;
        conn.collect(params);
        record("connection 2d->1d",
               ad::grad_check(
                   [&](ad::Tape& t) {
                       return t.sum(t.mul(conn.apply(t, t.input(x)), t.input(w)));
                   },
                   params));
    }
    {
        xconn::Conn1Dto2D conn;
        conn.init("xc1d2d", 6, 2, 4, 4, 3, 3, rng);
        Tensor x = rand_tensor({6});
        Tensor w = rand_tensor({32});
        std::vector<ad::Parameter*> params;
        conn.collect(params);
        record("connection 1d->2d",
               ad::grad_check(
                   [&](ad::Tape& t) {
                       return t.sum(t.mul(t.flatten(conn.apply(t, t.input(x))), t.input(w)));
                   },
                   params));
    }

    auto full_model_check = [&](models::Architecture a, const char* name) {
        models::ModelConfig cfg;
        cfg.arch = a;
        cfg.num_classes = 2;
        cfg.height = 8;
        cfg.width = 8;
        cfg.mfcc_dim = 4;
        cfg.avg_windows = 1;
        cfg.seed = 5;
        auto model = models::Model::build(cfg);
        // Data seed pinned to keep the finite-difference window kink-free.
        Rng drng(a == models::Architecture::CnnMlp ? 107 : 105);
        data::Example ex;
        const int t_len = a == models::Architecture::CnnMlp ? 2 : 3;
        ex.frames = Tensor({t_len, 8, 8});
        for (double& v : ex.frames.data) v = drng.uniform(0, 1);
        ex.mfcc = Tensor({t_len, 4});
        for (double& v : ex.mfcc.data) v = drng.uniform(-1, 1);
        ex.label = 1;
        models::PreparedExample prep = model->prepare(ex);
        record(name, ad::grad_check(
                         [&](ad::Tape& t) {
                             Rng r2(1);
                             return model->forward_batch(t, {&prep}, ad::Mode::Eval, r2).mean_loss;
                         },
                         model->registry(), 1e-5, 3));
    };
    if (arch == "cnn_mlp" || arch == "both") full_model_check(models::Architecture::CnnMlp, "cnn_mlp (full)");
    if (arch == "cnn_mlp_lstm" || arch == "both")
        full_model_check(models::Architecture::CnnMlpLstm, "cnn_mlp_lstm (full)");

    std::printf("worst relative error %.3e (%s)\n", worst, worst_name.c_str());
    if (worst >= 1e-4) {
        std::fprintf(stderr, "gradient check FAILED (threshold 1e-4)\n");
        return 5;
    }
    return 0;
}

int cmd_info(const fs::path& model_path) {
    auto model = load_model_with_sidecar(model_path);
    std::printf("architecture: %s\n", models::to_string(model->config.arch).c_str());
    std::printf("classes: %d, input: %dx%d, mfcc dim: %d\n", model->config.num_classes,
                model->config.height, model->config.width, model->config.mfcc_dim);
    std::printf("cross-connections: %s, residual connections: %s\n",
                model->config.use_xconns ? "yes" : "no",
                model->config.use_resconns ? "yes" : "no");
    for (const auto& [name, shape] : model->describe())
        std::printf("  %-28s %s\n", name.c_str(), shape.str().c_str());
    std::printf("trainable parameters: %zu\n", model->param_count());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-modal audiovisual classification toolkit"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic aligned audiovisual dataset");
    int classes = 10, persons = 15, per_class = 5, t_min = 4, t_max = 8;
    int height = 40, width = 40, mfcc_dim = 26;
    std::uint64_t gen_seed = 0;
    bool gen_seed_set = false;
    std::string gen_out = "dataset";
    gen->add_option("--classes", classes, "number of classes");
    gen->add_option("--persons", persons, "number of persons");
    gen->add_option("--per-class", per_class, "examples per person per class");
    gen->add_option("--t-min", t_min, "minimum frames per example");
    gen->add_option("--t-max", t_max, "maximum frames per example");
    gen->add_option("--height", height, "frame height");
    gen->add_option("--width", width, "frame width");
    gen->add_option("--mfcc-dim", mfcc_dim, "MFCC coefficients per frame");
    gen->add_option("--seed", gen_seed, "generator seed")->each([&](const std::string&) {
        gen_seed_set = true;
    });
    gen->add_option("--out", gen_out, "output directory");

    // train / crossval / ablate
    std::string config_file;
    int jobs = 1;
    auto* train_cmd = app.add_subcommand("train", "train one model from a JSON config");
    train_cmd->add_option("--config", config_file, "JSON run config")->required();
    auto* crossval_cmd =
        app.add_subcommand("crossval", "person-grouped k-fold cross-validation");
    crossval_cmd->add_option("--config", config_file, "JSON run config")->required();
    crossval_cmd->add_option("--jobs", jobs, "parallel fold x repeat trainings");
    auto* ablate_cmd = app.add_subcommand("ablate", "run the four-configuration ablation grid");
    ablate_cmd->add_option("--config", config_file, "JSON run config")->required();
    ablate_cmd->add_option("--jobs", jobs, "parallel fold x repeat trainings");

    // analyze
    auto* analyze_cmd = app.add_subcommand("analyze", "interpretability exports");
    std::string model_file, dataset_dir, what, connection;
    std::string analyze_out = "analysis";
    int example_index = 0;
    analyze_cmd->add_option("--model", model_file, "parameter archive (.xfp)")->required();
    analyze_cmd->add_option("--dataset", dataset_dir, "dataset directory")->required();
    analyze_cmd->add_option("--what", what, "diffs | features | maps")->required();
    analyze_cmd->add_option("--out", analyze_out, "output directory");
    analyze_cmd->add_option("--connection", connection, "connection id (e.g. xc_2d1d_2)");
    analyze_cmd->add_option("--example", example_index, "example index for diffs/maps");

    // gradcheck / info
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    std::string arch = "both";
    gradcheck_cmd->add_option("--arch", arch, "cnn_mlp | cnn_mlp_lstm | both")
        ->check(CLI::IsMember({"cnn_mlp", "cnn_mlp_lstm", "both"}));
    auto* info_cmd = app.add_subcommand("info", "describe a saved model");
    info_cmd->add_option("--model", model_file, "parameter archive (.xfp)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(classes, persons, per_class, t_min, t_max, height, width,
                                mfcc_dim, gen_seed_set ? gen_seed : env_seed_fallback(), gen_out);
        if (train_cmd->parsed()) return cmd_train(config_file);
        if (crossval_cmd->parsed()) return cmd_crossval(config_file, jobs);
        if (ablate_cmd->parsed()) return cmd_ablate(config_file, jobs);
        if (analyze_cmd->parsed())
            return cmd_analyze(model_file, dataset_dir, what, analyze_out, connection,
                               example_index);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(arch);
        if (info_cmd->parsed()) return cmd_info(model_file);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return 4;
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 4;
    } catch (const ContractViolation& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
