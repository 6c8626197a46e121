#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "stpredict/adam.hpp"
#include "stpredict/network.hpp"

namespace stpredict {

// Loss split into its teacher-forced and autoregressive parts. Components
// share the total element count so total == ape_free + ape holds exactly.
struct LossReport {
    double total = 0;
    double ape_free = 0;
    double ape = 0;
    std::vector<double> per_step;  // per-step means, t = 2 .. J+K
};

template <typename T>
LossReport mse_loss_report(const std::vector<Tensor<T>>& preds,
                           const Tensor<T>& frames, std::size_t J, std::size_t K);

// Scalar graph loss: mean over steps of per-step element means (uniform step
// weights), used for supervised backward passes.
template <typename T>
Tensor<T> mse_loss_graph(Graph<T>* g, const std::vector<Tensor<T>>& preds,
                         const Tensor<T>& frames);

// Softmax frame-similarity weights per window; logits are
// -<frame_t, mean_frame>/(2*numel). Returns [n_windows][n_steps].
template <typename T>
std::vector<std::vector<double>> frame_similarity_weights(const Tensor<T>& frames);

// Weighted MSE: per-window softmax weights over steps applied to per-step
// window losses, averaged over the batch.
template <typename T>
Tensor<T> weighted_mse_graph(Graph<T>* g, const std::vector<Tensor<T>>& preds,
                             const Tensor<T>& frames,
                             std::vector<std::vector<double>>* weights_out = nullptr);

struct TrainRecord {
    std::size_t iter = 0;
    double total = 0;
    double ape_free = 0;
    double ape = 0;
    double h = 0;  // meta feedback scalar; 0 for supervised records
    std::optional<double> val_nmse_db;
    std::optional<double> teacher_val_nmse_db;
};

struct TrainHistory {
    std::vector<TrainRecord> records;
};

void write_history_jsonl(const TrainHistory& history, const std::string& path);

struct TrainOptions {
    std::size_t iters = 10000;
    std::size_t batch = 8;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    std::size_t J = 10;
    std::size_t K = 10;
    std::size_t val_every = 50;
};

// ADAM over minibatches of the window stack [n, L, D, H, W]. `val_windows`
// may be undefined; validation NMSE is then skipped.
template <typename T>
TrainHistory supervised_train(Model<T>& model, const Tensor<T>& train_windows,
                              const Tensor<T>& val_windows, const TrainOptions& opts);

struct MetaConfig {
    double student_lr = 1e-3;
    double teacher_lr = 1e-3;
    double labeled_fraction = 1.0;
    bool adaptive = false;
    double feedback_clip = 10.0;

    void validate() const;
};

struct MetaDiagnostics {
    double h_raw = 0;
    double h = 0;
    double student_unlabeled_loss = 0;
    double student_labeled_loss = 0;
    double teacher_unlabeled_loss = 0;
    double teacher_labeled_loss = 0;
    double student_grad_norm = 0;
    double teacher_grad_norm = 0;
};

// One meta-pseudo-label round: teacher emits pseudo targets on the unlabeled
// batch, the student takes an SGD step toward them, the labeled-loss change
// of the updated student feeds back into the teacher via the scalar h, and
// the teacher takes an ADAM step on feedback + its own labeled loss.
// Works on anything rollout() accepts that also exposes params().
// Defined at the end of this header.
template <typename T, typename ModelT>
MetaDiagnostics meta_step_impl(ModelT& teacher, ModelT& student,
                               AdamState<T>& teacher_adam, const Tensor<T>& labeled_batch,
                               const Tensor<T>& unlabeled_batch, const MetaConfig& cfg,
                               std::size_t J, std::size_t K);

template <typename T>
MetaDiagnostics meta_step(Model<T>& teacher, Model<T>& student,
                          AdamState<T>& teacher_adam, const Tensor<T>& labeled_batch,
                          const Tensor<T>& unlabeled_batch, const MetaConfig& cfg,
                          std::size_t J, std::size_t K);

// Loops meta_step over minibatches. An empty unlabeled set degenerates to
// supervised training of both networks on the labeled data.
template <typename T>
TrainHistory meta_train(Model<T>& teacher, Model<T>& student,
                        const Tensor<T>& labeled_windows,
                        const Tensor<T>& unlabeled_windows,
                        const Tensor<T>& val_windows, const MetaConfig& cfg,
                        const TrainOptions& opts);

// Deterministic minibatch index stream shared by every trainer.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t iter,
                                       std::size_t pool, std::size_t batch,
                                       std::uint64_t stream_salt);

// Deterministic fraction of a window stack (used for label scarcity studies);
// the same (windows, fraction, seed) triple always selects the same subset.
template <typename T>
Tensor<T> subsample_windows(const Tensor<T>& windows, double fraction,
                            std::uint64_t seed);

namespace detail {
template <typename T>
double grad_l2_norm(const std::vector<Tensor<T>>& params) {
    double acc = 0;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (const T v : p.grad_vec()) acc += static_cast<double>(v) * v;
    }
    return std::sqrt(acc);
}
}  // namespace detail


template <typename T, typename ModelT>
MetaDiagnostics meta_step_impl(ModelT& teacher, ModelT& student,
                               AdamState<T>& teacher_adam, const Tensor<T>& labeled_batch,
                               const Tensor<T>& unlabeled_batch, const MetaConfig& cfg,
                               std::size_t J, std::size_t K) {
    cfg.validate();
    MetaDiagnostics diag;

    // 1. pseudo targets: teacher rollout on the unlabeled batch, detached.
    auto pseudo = rollout<T, ModelT>(nullptr, teacher, unlabeled_batch, J, K);

    // 2. student SGD step toward the pseudo targets.
    std::vector<T> grad_u;
    std::vector<Tensor<T>> student_values;  // detached rollout at the old params
    {
        Graph<T> g;
        auto preds = rollout(&g, student, unlabeled_batch, J, K);
        Tensor<T> loss;
        for (std::size_t s = 0; s < preds.size(); ++s) {
            auto step = mse_mean(&g, preds[s], pseudo[s]);
            loss = loss.defined() ? add(&g, loss, step) : step;
        }
        loss = scale(&g, loss, T(1) / static_cast<T>(preds.size()));
        diag.student_unlabeled_loss = loss.item();
        if (!std::isfinite(diag.student_unlabeled_loss)) {
            throw NumericError("meta_step: NaN in the student pseudo-label loss");
        }
        g.backward(loss);
        for (const auto& p : student.params()) {
            const auto& gv = p.grad_vec();
            grad_u.insert(grad_u.end(), gv.begin(), gv.end());
        }
        diag.student_grad_norm = 0;
        for (const T v : grad_u) diag.student_grad_norm += static_cast<double>(v) * v;
        diag.student_grad_norm = std::sqrt(diag.student_grad_norm);
        if (!std::isfinite(diag.student_grad_norm)) {
            throw NumericError("meta_step: NaN in the student gradient");
        }
        for (auto& pred : preds) student_values.push_back(pred.detached());
        sgd_step(student.params(), static_cast<T>(cfg.student_lr));
    }

    // 3. feedback scalar from the updated student's labeled loss.
    {
        Graph<T> g;
        auto preds = rollout(&g, student, labeled_batch, J, K);
        auto loss = cfg.adaptive ? weighted_mse_graph(&g, preds, labeled_batch)
                                 : mse_loss_graph(&g, preds, labeled_batch);
        diag.student_labeled_loss = loss.item();
        if (!std::isfinite(diag.student_labeled_loss)) {
            throw NumericError("meta_step: NaN in the student labeled loss");
        }
        g.backward(loss);
        double dot = 0;
        std::size_t off = 0;
        for (const auto& p : student.params()) {
            const auto& gv = p.grad_vec();
            for (std::size_t i = 0; i < gv.size(); ++i) {
                dot += static_cast<double>(gv[i]) * static_cast<double>(grad_u[off + i]);
            }
            off += gv.size();
        }
        for (auto& p : student.params()) p.zero_grad();
        // The raw alignment <grad_l(theta_S'), grad_u> measures how the SGD
        // move along -grad_u changed the labeled loss; the teacher ascends
        // its pull on the student when that move helped, hence the minus.
        diag.h_raw = -cfg.student_lr * dot;
        if (!std::isfinite(diag.h_raw)) {
            throw NumericError("meta_step: NaN in the feedback scalar");
        }
        diag.h = std::clamp(diag.h_raw, -cfg.feedback_clip, cfg.feedback_clip);
    }

    // 4. teacher step: feedback-weighted pull toward the student plus its own
    // labeled loss.
    {
        if (diag.h != 0) {
            Graph<T> g;
            auto preds = rollout(&g, teacher, unlabeled_batch, J, K);
            Tensor<T> loss;
            for (std::size_t s = 0; s < preds.size(); ++s) {
                auto step = mse_mean(&g, preds[s], student_values[s]);
                loss = loss.defined() ? add(&g, loss, step) : step;
            }
            loss = scale(&g, loss, T(1) / static_cast<T>(preds.size()));
            diag.teacher_unlabeled_loss = loss.item();
            if (!std::isfinite(diag.teacher_unlabeled_loss)) {
                throw NumericError("meta_step: NaN in the teacher unlabeled loss");
            }
            auto scaled = scale(&g, loss, static_cast<T>(diag.h));
            g.backward(scaled);
        }
        Graph<T> g;
        auto preds = rollout(&g, teacher, labeled_batch, J, K);
        auto loss = cfg.adaptive ? weighted_mse_graph(&g, preds, labeled_batch)
                                 : mse_loss_graph(&g, preds, labeled_batch);
        diag.teacher_labeled_loss = loss.item();
        if (!std::isfinite(diag.teacher_labeled_loss)) {
            throw NumericError("meta_step: NaN in the teacher labeled loss");
        }
        g.backward(loss);
        diag.teacher_grad_norm = detail::grad_l2_norm(teacher.params());
        if (!std::isfinite(diag.teacher_grad_norm)) {
            throw NumericError("meta_step: NaN in the teacher gradient");
        }
        adam_step(teacher.params(), teacher_adam);
    }
    return diag;
}

}  // namespace stpredict
