#include <doctest.h>

#include <cmath>

#include "crossflow/optim.hpp"

using namespace crossflow;
using namespace crossflow::ad;
using namespace crossflow::models;
using namespace crossflow::optim;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.arch = Architecture::CnnMlp;
    c.num_classes = 2;
    c.height = 8;
    c.width = 8;
    c.mfcc_dim = 4;
    c.avg_windows = 1;
    c.seed = 9;
    return c;
}

data::Dataset tiny_dataset(int n, int classes = 2, std::uint64_t seed = 5) {
    data::SyntheticSpec spec;
    spec.num_classes = classes;
    spec.num_persons = 2;
    spec.examples_per_person_per_class = std::max(1, n / (2 * classes));
    spec.t_min = 1;
    spec.t_max = 3;
    spec.height = 8;
    spec.width = 8;
    spec.mfcc_dim = 4;
    spec.seed = seed;
    return data::gen_synthetic(spec);
}

// Scalar Adam written independently of the library implementation.
struct RefAdam {
    double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double m = 0, v = 0;
    int t = 0;
    double update(double theta, double grad) {
        ++t;
        m = b1 * m + (1 - b1) * grad;
        v = b2 * v + (1 - b2) * grad * grad;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        return theta - lr * mh / (std::sqrt(vh) + eps);
    }
};

}  // namespace

TEST_CASE("adam") {
    SUBCASE("zero gradient leaves parameters unchanged, step counter advances") {
        Parameter p("p", Tensor({3}, {1, 2, 3}));
        Adam adam({&p});
        p.reset_grad();
        adam.step();
        CHECK(adam.step_count() == 1);
        CHECK(p.value.data == std::vector<double>{1, 2, 3});
    }
    SUBCASE("first step moves by about -lr*sign(g)") {
        Parameter p("p", Tensor({1}, {1.0}));
        Adam adam({&p});
        p.accumulate(Tensor({1}, {42.0}));
        adam.step();
        // Bias corrections cancel at t=1: update = lr * g / (|g| + eps).
        CHECK(p.value.data[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
    }
    SUBCASE("five steps on f(x)=x^2 match an independent reference trace to 1e-12") {
        Parameter p("p", Tensor({1}, {1.0}));
        Adam adam({&p});
        RefAdam ref;
        double theta = 1.0;
        for (int s = 0; s < 5; ++s) {
            p.reset_grad();
            p.accumulate(Tensor({1}, {2.0 * p.value.data[0]}));
            adam.step();
            theta = ref.update(theta, 2.0 * theta);
            CHECK(std::fabs(p.value.data[0] - theta) < 1e-12);
        }
    }
    SUBCASE("per-coordinate step magnitude stays below 10*lr on random traces") {
        Rng rng(401);
        Parameter p("p", Tensor({8}));
        Adam adam({&p});
        for (int s = 0; s < 50; ++s) {
            Tensor before = p.value;
            p.reset_grad();
            Tensor g({8});
            for (double& v : g.data) v = rng.uniform(-5, 5);
            p.accumulate(g);
            adam.step();
            for (std::size_t i = 0; i < 8; ++i)
                CHECK(std::fabs(p.value.data[i] - before.data[i]) <= 10 * 1e-3);
        }
    }
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.epochs = 1;
    cfg.batch_size = 1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("zero learning rate leaves parameters at their initial values") {
    auto m = Model::build(tiny_config());
    data::Dataset ds = tiny_dataset(8);
    std::vector<Tensor> before;
    for (Parameter* p : m->registry()) before.push_back(p->value);

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 3;
    cfg.adam.lr = 0.0;
    train(*m, ds, cfg);

    std::size_t i = 0;
    for (Parameter* p : m->registry()) CHECK(p->value.data == before[i++].data);
}

TEST_CASE("training is deterministic given the seed") {
    data::Dataset ds = tiny_dataset(8);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 17;

    auto run = [&]() {
        auto m = Model::build(tiny_config());
        return train(*m, ds, cfg);
    };
    History h1 = run();
    History h2 = run();
    REQUIRE(h1.epochs.size() == h2.epochs.size());
    for (std::size_t e = 0; e < h1.epochs.size(); ++e) {
        CHECK(h1.epochs[e].train_loss == h2.epochs[e].train_loss);  // bit-identical
        CHECK(h1.epochs[e].train_acc == h2.epochs[e].train_acc);
    }
}

// The strict 5-epoch-smoothed non-increase is asserted on the designated
// overfit task in the acceptance suite; here we only require that smoothed
// loss ends below where it started.
TEST_CASE("training reduces the smoothed loss on a small task") {
    auto m = Model::build(tiny_config());
    data::Dataset ds = tiny_dataset(8);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 4;
    cfg.seed = 23;
    History h = train(*m, ds, cfg);
    REQUIRE(h.epochs.size() == 20);
    auto smooth5 = [&](std::size_t e) {
        double s = 0;
        for (std::size_t j = e; j < e + 5; ++j) s += h.epochs[j].train_loss;
        return s / 5.0;
    };
    CHECK(smooth5(15) < smooth5(0));
}

TEST_CASE("evaluate") {
    data::Dataset ds = tiny_dataset(8, 2);

    SUBCASE("uniform predictor scores the label-0 fraction and loss ln C") {
        auto m = Model::build(tiny_config());
        // Zero the classifier head: logits are constant, argmax ties at 0.
        m->fc_out.weight.value = Tensor(m->fc_out.weight.value.shape);
        m->fc_out.bias.value = Tensor(m->fc_out.bias.value.shape);
        EvalResult r = evaluate(*m, ds);
        std::size_t zeros = 0;
        for (const auto& ex : ds.examples) zeros += ex.label == 0 ? 1 : 0;
        CHECK(r.accuracy == doctest::Approx(static_cast<double>(zeros) / ds.size()));
        CHECK(r.mean_loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("known predictions give exact accuracy 2/3") {
        auto m = Model::build(tiny_config());
        m->fc_out.weight.value = Tensor(m->fc_out.weight.value.shape);
        m->fc_out.bias.value = Tensor({2}, {0.0, 1.0});  // always predicts class 1
        data::Dataset three;
        three.num_classes = 2;
        three.examples = {ds.examples[0], ds.examples[1], ds.examples[2]};
        three.examples[0].label = 1;
        three.examples[1].label = 1;
        three.examples[2].label = 0;
        EvalResult r = evaluate(*m, three);
        CHECK(r.accuracy == doctest::Approx(2.0 / 3.0));
    }
    SUBCASE("evaluate twice gives identical results") {
        auto m = Model::build(tiny_config());
        EvalResult a = evaluate(*m, ds);
        EvalResult b = evaluate(*m, ds);
        CHECK(a.accuracy == b.accuracy);
        CHECK(a.mean_loss == b.mean_loss);
    }
    SUBCASE("empty dataset rejected") {
        auto m = Model::build(tiny_config());
        data::Dataset empty;
        empty.num_classes = 2;
        CHECK_THROWS_AS(evaluate(*m, empty), ContractViolation);
    }
}

TEST_CASE("history csv") {
    History h;
    h.epochs.push_back({0, 0.5, 0.25, -1.0});
    h.epochs.push_back({1, 0.25, 0.5, 0.75});
    auto path = std::filesystem::temp_directory_path() / "crossflow_history_test.csv";
    write_history_csv(h, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,train_loss,train_acc,val_acc");
    std::getline(in, line);
    CHECK(line == "0,0.5,0.25,");
    std::getline(in, line);
    CHECK(line == "1,0.25,0.5,0.75");
}
