#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <vector>

#include "crossflow/models.hpp"

namespace crossflow::optim {

using models::Model;
using models::PreparedExample;

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(const std::vector<ad::Parameter*>& params, AdamConfig cfg = {})
        : params_(params), cfg_(cfg) {
        for (ad::Parameter* p : params_) {
            first_.push_back(Tensor::zeros(p->value.shape));
            second_.push_back(Tensor::zeros(p->value.shape));
        }
    }

    // One update from the gradients currently accumulated in the parameters.
    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            ad::Parameter& p = *params_[i];
            const Tensor& g = p.grad_or_zero();
            Tensor& m = first_[i];
            Tensor& v = second_[i];
            for (std::size_t j = 0; j < g.numel(); ++j) {
                m.data[j] = cfg_.beta1 * m.data[j] + (1.0 - cfg_.beta1) * g.data[j];
                v.data[j] = cfg_.beta2 * v.data[j] + (1.0 - cfg_.beta2) * g.data[j] * g.data[j];
                const double m_hat = m.data[j] / bc1;
                const double v_hat = v.data[j] / bc2;
                p.value.data[j] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
            }
        }
    }

    long long step_count() const { return t_; }

private:
    std::vector<ad::Parameter*> params_;
    std::vector<Tensor> first_, second_;
    AdamConfig cfg_;
    long long t_ = 0;
};

struct TrainConfig {
    int epochs = 300;
    int batch_size = 128;
    std::uint64_t seed = 0;
    AdamConfig adam{};

    void validate() const {
        if (epochs < 1) throw ValidationError("epochs must be >= 1");
        if (batch_size < 2) throw ValidationError("batch_size must be >= 2 (batch norm)");
    }
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = -1.0;  // < 0 when no validation set was given

    bool has_val() const { return val_acc >= 0.0; }
};

struct History {
    std::vector<EpochStats> epochs;
};

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
};

inline int argmax(const Tensor& t) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(t.numel()); ++i)
        if (t.data[static_cast<std::size_t>(i)] > t.data[static_cast<std::size_t>(best)]) best = i;
    return best;
}

inline EvalResult evaluate(Model& model, const data::Dataset& ds,
                           const std::vector<int>* subset = nullptr) {
    std::vector<int> all;
    if (!subset) {
        all.resize(ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) all[i] = static_cast<int>(i);
        subset = &all;
    }
    CF_CHECK(!subset->empty(), "evaluate: empty dataset");
    EvalResult res;
    std::size_t correct = 0;
    for (int idx : *subset) {
        const data::Example& ex = ds.examples[static_cast<std::size_t>(idx)];
        Tensor probs = model.forward(ex);
        if (argmax(probs) == ex.label) ++correct;
        res.mean_loss -= std::log(std::max(probs.data[static_cast<std::size_t>(ex.label)], 1e-300));
    }
    res.accuracy = static_cast<double>(correct) / static_cast<double>(subset->size());
    res.mean_loss /= static_cast<double>(subset->size());
    return res;
}

struct TrainOptions {
    const std::vector<int>* subset = nullptr;      // train on these indices only
    const std::vector<int>* val_subset = nullptr;  // per-epoch held-out evaluation
    // Called after each epoch; return true to stop early.
    std::function<bool(const EpochStats&)> on_epoch;
};

// Seeded minibatch training: shuffle, forward/backward in training mode,
// Adam update. Deterministic given (seed, dataset, config). The incomplete
// final minibatch is kept unless it has a single example, which is folded
// into the previous batch.
inline History train(Model& model, const data::Dataset& ds, const TrainConfig& cfg,
                     const TrainOptions& opts = {}) {
    cfg.validate();
    std::vector<int> indices;
    if (opts.subset) {
        indices = *opts.subset;
    } else {
        indices.resize(ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) indices[i] = static_cast<int>(i);
    }
    CF_CHECK(indices.size() >= 2, "train: need at least 2 examples");

    std::vector<PreparedExample> prepared;
    prepared.reserve(ds.size());
    std::vector<int> prep_of(ds.size(), -1);
    for (int idx : indices) {
        if (prep_of[static_cast<std::size_t>(idx)] < 0) {
            prep_of[static_cast<std::size_t>(idx)] = static_cast<int>(prepared.size());
            prepared.push_back(model.prepare(ds.examples[static_cast<std::size_t>(idx)]));
        }
    }

    Rng shuffle_rng(derive_seed(cfg.seed, 11));
    Rng dropout_rng(derive_seed(cfg.seed, 13));
    Adam adam(const_cast<Model&>(model).registry(), cfg.adam);

    History history;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(indices);

        std::vector<std::vector<int>> batches;
        for (std::size_t pos = 0; pos < indices.size(); pos += cfg.batch_size) {
            const std::size_t end = std::min(pos + cfg.batch_size, indices.size());
            batches.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(pos),
                                 indices.begin() + static_cast<std::ptrdiff_t>(end));
        }
        if (batches.size() > 1 && batches.back().size() == 1) {
            batches[batches.size() - 2].push_back(batches.back()[0]);
            batches.pop_back();
        }

        double loss_sum = 0.0;
        std::size_t correct = 0;
        model.set_mode(ad::Mode::Train);
        for (const std::vector<int>& batch : batches) {
            ad::Tape tape;
            std::vector<const PreparedExample*> views;
            views.reserve(batch.size());
            for (int idx : batch)
                views.push_back(&prepared[static_cast<std::size_t>(prep_of[static_cast<std::size_t>(idx)])]);
            models::BatchResult result = model.forward_batch(tape, views, ad::Mode::Train, dropout_rng);
            for (std::size_t i = 0; i < batch.size(); ++i) {
                loss_sum += result.losses[i];
                if (argmax(result.probs[i]) == views[i]->label) ++correct;
            }
            tape.backward(result.mean_loss);
            adam.step();
            model.zero_grads();
        }
        model.set_mode(ad::Mode::Eval);

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<double>(indices.size());
        stats.train_acc = static_cast<double>(correct) / static_cast<double>(indices.size());
        if (opts.val_subset) stats.val_acc = evaluate(model, ds, opts.val_subset).accuracy;
        history.epochs.push_back(stats);
        if (opts.on_epoch && opts.on_epoch(stats)) break;
    }
    return history;
}

inline void write_history_csv(const History& history, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write history: " + path.string());
    out << "epoch,train_loss,train_acc,val_acc\n";
    char buf[128];
    for (const EpochStats& e : history.epochs) {
        if (e.has_val())
            std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g,%.12g\n", e.epoch, e.train_loss,
                          e.train_acc, e.val_acc);
        else
            std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g,\n", e.epoch, e.train_loss, e.train_acc);
        out << buf;
    }
    if (!out) throw IoError("history write failed");
}

}  // namespace crossflow::optim
