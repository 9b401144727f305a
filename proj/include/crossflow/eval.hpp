#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "crossflow/optim.hpp"

namespace crossflow::eval {

// ---------------------------------------------------------------------------
// Student t tail probability via the regularized incomplete beta function,
// evaluated with a modified Lentz continued fraction.
// ---------------------------------------------------------------------------

namespace detail {

inline double betacf(double a, double b, double x) {
    constexpr double kEps = 1e-14;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) return h;
    }
    throw ContractViolation("incomplete beta continued fraction did not converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
    CF_CHECK(a > 0.0 && b > 0.0, "incomplete_beta: a,b must be positive");
    CF_CHECK(x >= 0.0 && x <= 1.0, "incomplete_beta: x outside [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double log_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log(1.0 - x);
    const double bt = std::exp(log_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * detail::betacf(a, b, x) / a;
    return 1.0 - bt * detail::betacf(b, a, 1.0 - x) / b;
}

// One-sided tail P(T_df > t).
inline double student_t_sf(double t, int df) {
    CF_CHECK(df >= 1, "student_t_sf: df must be >= 1");
    const double nu = static_cast<double>(df);
    const double x = nu / (nu + t * t);
    const double half_tail = 0.5 * incomplete_beta(0.5 * nu, 0.5, x);
    return t >= 0.0 ? half_tail : 1.0 - half_tail;
}

struct TTestResult {
    double t = 0.0;
    int df = 0;
    double p = 1.0;
    bool significant = false;
    bool two_sided = false;
};

// Paired t-test of a against b (one-sided: mean(a-b) > 0 unless two_sided).
// A zero-variance difference vector returns p = 1 (no evidence).
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b,
                                 bool two_sided = false) {
    CF_CHECK(a.size() == b.size(), "paired_t_test: length mismatch");
    const int k = static_cast<int>(a.size());
    CF_CHECK(k >= 2, "paired_t_test: need at least 2 pairs");

    double mean = 0.0;
    for (int i = 0; i < k; ++i) mean += a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)];
    mean /= k;
    double ss = 0.0;
    for (int i = 0; i < k; ++i) {
        const double d = a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)] - mean;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / (k - 1));

    TTestResult res;
    res.df = k - 1;
    res.two_sided = two_sided;
    if (sd == 0.0) {
        res.t = 0.0;
        res.p = 1.0;
        res.significant = false;
        return res;
    }
    res.t = mean * std::sqrt(static_cast<double>(k)) / sd;
    res.p = two_sided ? 2.0 * student_t_sf(std::fabs(res.t), res.df)
                      : student_t_sf(res.t, res.df);
    res.significant = res.p <= 0.05;
    return res;
}

// ---------------------------------------------------------------------------
// Cross-validation: per fold, `repeats` independently seeded trainings; the
// fold score is the best repeat, and the final accuracy is the mean of fold
// maxima.
// ---------------------------------------------------------------------------

struct CrossValConfig {
    int k = 5;
    int repeats = 5;
    std::uint64_t base_seed = 0;
    optim::TrainConfig train;
    int jobs = 1;
};

struct CrossValReport {
    std::vector<std::vector<double>> fold_accuracies;  // [fold][repeat]
    std::vector<double> fold_max;
    double mean_accuracy = 0.0;
    nlohmann::json config;
};

inline std::uint64_t fold_hash(const std::vector<data::Fold>& folds) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const data::Fold& f : folds)
        for (int idx : f.test_indices) {
            h ^= static_cast<std::uint64_t>(idx) + 0x9e3779b97f4a7c15ULL;
            h *= 1099511628211ULL;
        }
    return h;
}

inline CrossValReport crossval(const models::ModelConfig& model_cfg, const data::Dataset& ds,
                               const CrossValConfig& cfg) {
    CF_CHECK(cfg.repeats >= 1, "crossval: repeats must be >= 1");
    cfg.train.validate();
    const std::vector<data::Fold> folds = data::group_kfold(ds, cfg.k);

    CrossValReport report;
    report.fold_accuracies.assign(static_cast<std::size_t>(cfg.k),
                                  std::vector<double>(static_cast<std::size_t>(cfg.repeats), 0.0));

    struct Job {
        int fold, repeat;
    };
    std::vector<Job> jobs;
    for (int f = 0; f < cfg.k; ++f)
        for (int r = 0; r < cfg.repeats; ++r) jobs.push_back({f, r});

    auto run_job = [&](const Job& job) {
        models::ModelConfig mc = model_cfg;
        mc.seed = derive_seed(cfg.base_seed, static_cast<std::uint64_t>(job.fold),
                              static_cast<std::uint64_t>(job.repeat));
        optim::TrainConfig tc = cfg.train;
        tc.seed = mc.seed;
        auto model = models::Model::build(mc);
        const data::Fold& fold = folds[static_cast<std::size_t>(job.fold)];
        optim::TrainOptions opts;
        opts.subset = &fold.train_indices;
        optim::train(*model, ds, tc, opts);
        const optim::EvalResult r = optim::evaluate(*model, ds, &fold.test_indices);
        report.fold_accuracies[static_cast<std::size_t>(job.fold)][static_cast<std::size_t>(job.repeat)] =
            r.accuracy;
    };

    const int workers = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(jobs.size())));
    if (workers == 1) {
        for (const Job& job : jobs) run_job(job);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&]() {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= jobs.size()) return;
                    run_job(jobs[i]);
                }
            });
        for (std::thread& th : pool) th.join();
    }

    for (int f = 0; f < cfg.k; ++f) {
        double best = report.fold_accuracies[static_cast<std::size_t>(f)][0];
        for (double acc : report.fold_accuracies[static_cast<std::size_t>(f)])
            best = std::max(best, acc);
        report.fold_max.push_back(best);
        report.mean_accuracy += best;
    }
    report.mean_accuracy /= cfg.k;

    report.config = {{"model", model_cfg.to_json()},
                     {"k", cfg.k},
                     {"repeats", cfg.repeats},
                     {"base_seed", cfg.base_seed},
                     {"epochs", cfg.train.epochs},
                     {"batch_size", cfg.train.batch_size},
                     {"fold_hash", fold_hash(folds)}};
    return report;
}

// ---------------------------------------------------------------------------
// Ablation grid: {both, no x-conns, no res-conns, baseline} under identical
// folds and seed streams, plus paired t-tests against the baseline row.
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string name;
    bool use_xconns = false;
    bool use_resconns = false;
    CrossValReport report;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    std::vector<std::pair<std::string, TTestResult>> t_tests;
};

inline AblationTable ablate(const models::ModelConfig& base_cfg, const data::Dataset& ds,
                            const CrossValConfig& cfg) {
    const std::vector<std::tuple<std::string, bool, bool>> grid = {
        {"xflow", true, true},
        {"no_xconns", false, true},
        {"no_resconns", true, false},
        {"baseline", false, false},
    };
    AblationTable table;
    for (const auto& [name, xc, rc] : grid) {
        models::ModelConfig mc = base_cfg;
        mc.use_xconns = xc;
        mc.use_resconns = rc;
        AblationRow row{name, xc, rc, crossval(mc, ds, cfg)};
        table.rows.push_back(std::move(row));
    }
    const std::vector<double>& baseline = table.rows[3].report.fold_max;
    for (int i = 0; i < 3; ++i)
        table.t_tests.emplace_back(table.rows[static_cast<std::size_t>(i)].name + "_vs_baseline",
                                   paired_t_test(table.rows[static_cast<std::size_t>(i)].report.fold_max,
                                                 baseline));
    return table;
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

inline void write_crossval_csv(const CrossValReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path.string());
    out << "fold,repeat,accuracy\n";
    char buf[96];
    for (std::size_t f = 0; f < report.fold_accuracies.size(); ++f)
        for (std::size_t r = 0; r < report.fold_accuracies[f].size(); ++r) {
            std::snprintf(buf, sizeof(buf), "%zu,%zu,%.12g\n", f, r, report.fold_accuracies[f][r]);
            out << buf;
        }
    if (!out) throw IoError("report write failed");
}

inline nlohmann::json ttest_json(const TTestResult& r) {
    return {{"t", r.t}, {"df", r.df}, {"p", r.p}, {"significant", r.significant},
            {"two_sided", r.two_sided}};
}

inline nlohmann::json crossval_summary(const CrossValReport& report) {
    return {{"fold_accuracies", report.fold_accuracies},
            {"fold_max", report.fold_max},
            {"mean_accuracy", report.mean_accuracy},
            {"config", report.config}};
}

inline void write_ablation_csv(const AblationTable& table, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path.string());
    out << "config,fold,repeat,accuracy\n";
    char buf[128];
    for (const AblationRow& row : table.rows)
        for (std::size_t f = 0; f < row.report.fold_accuracies.size(); ++f)
            for (std::size_t r = 0; r < row.report.fold_accuracies[f].size(); ++r) {
                std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%.12g\n", row.name.c_str(), f, r,
                              row.report.fold_accuracies[f][r]);
                out << buf;
            }
    if (!out) throw IoError("report write failed");
}

inline nlohmann::json ablation_summary(const AblationTable& table) {
    nlohmann::json rows = nlohmann::json::array();
    for (const AblationRow& row : table.rows)
        rows.push_back({{"name", row.name},
                        {"use_xconns", row.use_xconns},
                        {"use_resconns", row.use_resconns},
                        {"mean_accuracy", row.report.mean_accuracy},
                        {"fold_max", row.report.fold_max},
                        {"fold_hash", row.report.config.at("fold_hash")}});
    nlohmann::json tests;
    for (const auto& [name, result] : table.t_tests) tests[name] = ttest_json(result);
    return {{"rows", rows}, {"t_tests", tests}};
}

}  // namespace crossflow::eval
