#include "stpredict/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "stpredict/evaluation.hpp"
#include "stpredict/rng.hpp"

namespace stpredict {

using nlohmann::json;

template <typename T>
LossReport mse_loss_report(const std::vector<Tensor<T>>& preds,
                           const Tensor<T>& frames, std::size_t J, std::size_t K) {
    const std::size_t steps = preds.size();
    if (steps != J + K - 1) {
        throw ShapeError("mse_loss_report: " + std::to_string(steps) +
                         " predictions for J=" + std::to_string(J) +
                         " K=" + std::to_string(K));
    }
    LossReport report;
    report.per_step.resize(steps);
    double total_sse = 0;
    double ape_free_sse = 0;
    std::size_t total_count = 0;
    for (std::size_t s = 0; s < steps; ++s) {
        auto target = frame_at(frames, s + 1);
        if (target.dims() != preds[s].dims()) {
            throw ShapeError("mse_loss_report: prediction " + format_dims(preds[s].dims()) +
                             " vs target " + format_dims(target.dims()));
        }
        const T* pp = preds[s].data();
        const T* pt = target.data();
        double sse = 0;
        for (std::size_t i = 0; i < target.numel(); ++i) {
            const double d = static_cast<double>(pp[i]) - static_cast<double>(pt[i]);
            sse += d * d;
        }
        report.per_step[s] = sse / static_cast<double>(target.numel());
        total_sse += sse;
        // predictions for t = 2..J are teacher forced (s + 2 <= J)
        if (s + 2 <= J) ape_free_sse += sse;
        total_count += target.numel();
    }
    report.total = total_sse / static_cast<double>(total_count);
    report.ape_free = ape_free_sse / static_cast<double>(total_count);
    report.ape = (total_sse - ape_free_sse) / static_cast<double>(total_count);
    return report;
}

template <typename T>
Tensor<T> mse_loss_graph(Graph<T>* g, const std::vector<Tensor<T>>& preds,
                         const Tensor<T>& frames) {
    Tensor<T> acc;
    for (std::size_t s = 0; s < preds.size(); ++s) {
        auto step = mse_mean(g, preds[s], frame_at(frames, s + 1));
        acc = acc.defined() ? add(g, acc, step) : step;
    }
    return scale(g, acc, T(1) / static_cast<T>(preds.size()));
}

template <typename T>
std::vector<std::vector<double>> frame_similarity_weights(const Tensor<T>& frames) {
    const std::size_t b = frames.dim(0), l = frames.dim(1);
    const std::size_t chunk = frames.numel() / (b * l);
    const std::size_t steps = l - 1;
    std::vector<std::vector<double>> weights(b, std::vector<double>(steps));
    std::vector<double> mean_frame(chunk);
    std::vector<double> logits(steps);
    for (std::size_t bi = 0; bi < b; ++bi) {
        // mean over the target frames t = 2 .. J+K
        std::fill(mean_frame.begin(), mean_frame.end(), 0.0);
        for (std::size_t s = 0; s < steps; ++s) {
            const T* f = frames.data() + (bi * l + s + 1) * chunk;
            for (std::size_t i = 0; i < chunk; ++i) mean_frame[i] += f[i];
        }
        for (auto& v : mean_frame) v /= static_cast<double>(steps);

        double max_logit = -1e300;
        for (std::size_t s = 0; s < steps; ++s) {
            const T* f = frames.data() + (bi * l + s + 1) * chunk;
            double dot = 0;
            for (std::size_t i = 0; i < chunk; ++i) dot += f[i] * mean_frame[i];
            logits[s] = -dot / (2.0 * static_cast<double>(chunk));
            max_logit = std::max(max_logit, logits[s]);
        }
        double denom = 0;
        for (std::size_t s = 0; s < steps; ++s) {
            logits[s] = std::exp(logits[s] - max_logit);
            denom += logits[s];
        }
        for (std::size_t s = 0; s < steps; ++s) weights[bi][s] = logits[s] / denom;
    }
    return weights;
}

template <typename T>
Tensor<T> weighted_mse_graph(Graph<T>* g, const std::vector<Tensor<T>>& preds,
                             const Tensor<T>& frames,
                             std::vector<std::vector<double>>* weights_out) {
    const std::size_t b = frames.dim(0);
    auto weights = frame_similarity_weights(frames);
    if (weights_out) *weights_out = weights;
    Tensor<T> acc;
    std::vector<T> roww(b);
    for (std::size_t s = 0; s < preds.size(); ++s) {
        for (std::size_t bi = 0; bi < b; ++bi) {
            roww[bi] = static_cast<T>(weights[bi][s] / static_cast<double>(b));
        }
        auto step = rowwise_weighted_mse(g, preds[s], frame_at(frames, s + 1), roww);
        acc = acc.defined() ? add(g, acc, step) : step;
    }
    return acc;
}

void write_history_jsonl(const TrainHistory& history, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write history '" + path + "'");
    for (const auto& r : history.records) {
        json j;
        j["iter"] = r.iter;
        j["total"] = r.total;
        j["ape_free"] = r.ape_free;
        j["ape"] = r.ape;
        j["h"] = r.h;
        if (r.val_nmse_db) j["val_nmse_db"] = *r.val_nmse_db;
        if (r.teacher_val_nmse_db) j["teacher_val_nmse_db"] = *r.teacher_val_nmse_db;
        os << j.dump() << "\n";
    }
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t iter,
                                       std::size_t pool, std::size_t batch,
                                       std::uint64_t stream_salt) {
    Rng rng(Rng::derive(Rng::derive(seed, stream_salt), iter));
    std::vector<std::size_t> out(batch);
    for (auto& v : out) v = rng.index(pool);
    return out;
}

namespace {

template <typename T>
Tensor<T> gather_windows(const Tensor<T>& windows, const std::vector<std::size_t>& idx) {
    const std::size_t chunk = windows.numel() / windows.dim(0);
    Tensor<T> out({idx.size(), windows.dim(1), windows.dim(2), windows.dim(3),
                   windows.dim(4)});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::memcpy(out.data() + i * chunk, windows.data() + idx[i] * chunk,
                    chunk * sizeof(T));
    }
    return out;
}

template <typename T>
double validation_nmse_db(const Model<T>& model, const Tensor<T>& val_windows,
                          std::size_t J, std::size_t K) {
    const auto summary = evaluate_model(model, val_windows, J, K, 1);
    return summary.nmse_db;
}

constexpr std::uint64_t kBatchStream = 0xBA7C;
constexpr std::uint64_t kUnlabeledStream = 0x0215;

}  // namespace

template <typename T>
TrainHistory supervised_train(Model<T>& model, const Tensor<T>& train_windows,
                              const Tensor<T>& val_windows, const TrainOptions& opts) {
    if (!train_windows.defined() || train_windows.ndim() != 5) {
        throw DataError("supervised_train: training windows missing");
    }
    if (train_windows.dim(1) != opts.J + opts.K) {
        throw ShapeError("supervised_train: window length " +
                         std::to_string(train_windows.dim(1)) + " != J+K=" +
                         std::to_string(opts.J + opts.K));
    }
    AdamState<T> adam;
    adam.lr = static_cast<T>(opts.lr);
    adam.init(model.params());

    TrainHistory history;
    const std::size_t pool = train_windows.dim(0);
    for (std::size_t iter = 0; iter < opts.iters; ++iter) {
        const auto idx = batch_indices(opts.seed, iter, pool, opts.batch, kBatchStream);
        auto batch = gather_windows(train_windows, idx);

        Graph<T> g;
        auto preds = rollout(&g, model, batch, opts.J, opts.K);
        auto loss = mse_loss_graph(&g, preds, batch);
        const auto report = mse_loss_report(preds, batch, opts.J, opts.K);
        if (!std::isfinite(report.total)) {
            throw NumericError("NaN loss at iteration " + std::to_string(iter));
        }
        g.backward(loss);
        adam_step(model.params(), adam);

        TrainRecord rec;
        rec.iter = iter;
        rec.total = report.total;
        rec.ape_free = report.ape_free;
        rec.ape = report.ape;
        if (val_windows.defined() && opts.val_every > 0 &&
            ((iter + 1) % opts.val_every == 0 || iter + 1 == opts.iters)) {
            rec.val_nmse_db = validation_nmse_db(model, val_windows, opts.J, opts.K);
        }
        history.records.push_back(rec);
    }
    return history;
}

template <typename T>
Tensor<T> subsample_windows(const Tensor<T>& windows, double fraction,
                            std::uint64_t seed) {
    if (fraction <= 0 || fraction > 1) {
        throw ConfigError("subsample fraction must lie in (0, 1]");
    }
    const std::size_t n = windows.dim(0);
    std::size_t keep = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(n)));
    keep = std::max<std::size_t>(1, std::min(keep, n));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(Rng::derive(seed, 0xF8AC));
    rng.shuffle(order);
    order.resize(keep);
    std::sort(order.begin(), order.end());
    const std::size_t chunk = windows.numel() / n;
    Tensor<T> subset({keep, windows.dim(1), windows.dim(2), windows.dim(3),
                      windows.dim(4)});
    for (std::size_t i = 0; i < keep; ++i) {
        std::memcpy(subset.data() + i * chunk, windows.data() + order[i] * chunk,
                    chunk * sizeof(T));
    }
    return subset;
}

template Tensor<float> subsample_windows<float>(const Tensor<float>&, double,
                                                std::uint64_t);
template Tensor<double> subsample_windows<double>(const Tensor<double>&, double,
                                                  std::uint64_t);

void MetaConfig::validate() const {
    if (student_lr <= 0 || teacher_lr <= 0) {
        throw ConfigError("meta: learning rates must be positive");
    }
    if (labeled_fraction <= 0 || labeled_fraction > 1) {
        throw ConfigError("meta: labeled_fraction must lie in (0, 1]");
    }
    if (feedback_clip < 0) throw ConfigError("meta: feedback_clip must be >= 0");
}

template <typename T>
MetaDiagnostics meta_step(Model<T>& teacher, Model<T>& student,
                          AdamState<T>& teacher_adam, const Tensor<T>& labeled_batch,
                          const Tensor<T>& unlabeled_batch, const MetaConfig& cfg,
                          std::size_t J, std::size_t K) {
    if (teacher.variant != student.variant) {
        throw ConfigError("meta_step: teacher and student variants differ (" +
                          teacher.variant.label() + " vs " + student.variant.label() + ")");
    }
    return meta_step_impl(teacher, student, teacher_adam, labeled_batch,
                          unlabeled_batch, cfg, J, K);
}

template <typename T>
TrainHistory meta_train(Model<T>& teacher, Model<T>& student,
                        const Tensor<T>& labeled_windows,
                        const Tensor<T>& unlabeled_windows,
                        const Tensor<T>& val_windows, const MetaConfig& cfg,
                        const TrainOptions& opts) {
    cfg.validate();

    // Optional label scarcity: keep a deterministic fraction of the labeled set.
    Tensor<T> labeled = labeled_windows;
    if (cfg.labeled_fraction < 1.0) {
        labeled = subsample_windows(labeled_windows, cfg.labeled_fraction, opts.seed);
    }

    if (!unlabeled_windows.defined() || unlabeled_windows.dim(0) == 0) {
        TrainOptions sup = opts;
        sup.lr = cfg.teacher_lr;
        auto teacher_hist = supervised_train(teacher, labeled, val_windows, sup);
        sup.lr = cfg.student_lr;
        auto student_hist = supervised_train(student, labeled, val_windows, sup);
        return student_hist;
    }

    AdamState<T> teacher_adam;
    teacher_adam.lr = static_cast<T>(cfg.teacher_lr);
    teacher_adam.init(teacher.params());

    TrainHistory history;
    const std::size_t labeled_pool = labeled.dim(0);
    const std::size_t unlabeled_pool = unlabeled_windows.dim(0);
    for (std::size_t iter = 0; iter < opts.iters; ++iter) {
        const auto lidx =
            batch_indices(opts.seed, iter, labeled_pool, opts.batch, kBatchStream);
        const auto uidx = batch_indices(opts.seed, iter, unlabeled_pool, opts.batch,
                                        kUnlabeledStream);
        auto lbatch = gather_windows(labeled, lidx);
        auto ubatch = gather_windows(unlabeled_windows, uidx);
        MetaDiagnostics diag;
        try {
            diag = meta_step(teacher, student, teacher_adam, lbatch, ubatch, cfg,
                             opts.J, opts.K);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (iteration " +
                               std::to_string(iter) + ")");
        }

        TrainRecord rec;
        rec.iter = iter;
        rec.total = diag.student_labeled_loss;
        rec.ape_free = diag.student_unlabeled_loss;
        rec.ape = diag.teacher_labeled_loss;
        rec.h = diag.h;
        if (val_windows.defined() && opts.val_every > 0 &&
            ((iter + 1) % opts.val_every == 0 || iter + 1 == opts.iters)) {
            rec.val_nmse_db = validation_nmse_db(student, val_windows, opts.J, opts.K);
            rec.teacher_val_nmse_db =
                validation_nmse_db(teacher, val_windows, opts.J, opts.K);
        }
        history.records.push_back(rec);
    }
    return history;
}

#define STPREDICT_INSTANTIATE_TRAINING(T)                                             \
    template LossReport mse_loss_report<T>(const std::vector<Tensor<T>>&,             \
                                           const Tensor<T>&, std::size_t,             \
                                           std::size_t);                              \
    template Tensor<T> mse_loss_graph<T>(Graph<T>*, const std::vector<Tensor<T>>&,    \
                                         const Tensor<T>&);                           \
    template std::vector<std::vector<double>> frame_similarity_weights<T>(            \
        const Tensor<T>&);                                                            \
    template Tensor<T> weighted_mse_graph<T>(Graph<T>*, const std::vector<Tensor<T>>&,\
                                             const Tensor<T>&,                        \
                                             std::vector<std::vector<double>>*);      \
    template TrainHistory supervised_train<T>(Model<T>&, const Tensor<T>&,            \
                                              const Tensor<T>&, const TrainOptions&); \
    template MetaDiagnostics meta_step<T>(Model<T>&, Model<T>&, AdamState<T>&,        \
                                          const Tensor<T>&, const Tensor<T>&,         \
                                          const MetaConfig&, std::size_t,             \
                                          std::size_t);                               \
    template TrainHistory meta_train<T>(Model<T>&, Model<T>&, const Tensor<T>&,       \
                                        const Tensor<T>&, const Tensor<T>&,           \
                                        const MetaConfig&, const TrainOptions&);

STPREDICT_INSTANTIATE_TRAINING(float)
STPREDICT_INSTANTIATE_TRAINING(double)

#undef STPREDICT_INSTANTIATE_TRAINING

}  // namespace stpredict
