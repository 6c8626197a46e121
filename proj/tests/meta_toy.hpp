#pragma once

// Two-parameter linear regression toy used to validate the meta feedback
// direction against the exact bilevel gradient (by central differences over
// the teacher parameters).

#include "stpredict/rng.hpp"
#include "stpredict/training.hpp"

namespace meta_toy {

using stpredict::AdamState;
using stpredict::Graph;
using stpredict::LayerState;
using stpredict::MetaConfig;
using stpredict::SharedState;
using stpredict::Tensor;

// y = theta_1 * x + theta_2 * x^2 per element.
struct LinearToyModel {
    Tensor<float> theta1, theta2;

    LinearToyModel(float a, float b) {
        theta1 = Tensor<float>::scalar(a);
        theta2 = Tensor<float>::scalar(b);
        theta1.set_requires_grad(true);
        theta2.set_requires_grad(true);
    }

    std::vector<Tensor<float>> params_storage;
    std::vector<Tensor<float>>& params() {
        if (params_storage.empty()) params_storage = {theta1, theta2};
        return params_storage;
    }

    void init_states(std::size_t, std::vector<LayerState<float>>&,
                     SharedState<float>&) const {}

    Tensor<float> step(Graph<float>* g, const Tensor<float>& frame,
                       std::vector<LayerState<float>>&, SharedState<float>&) const {
        auto x_sq = stpredict::mul(g, frame, frame);
        return stpredict::add(g, stpredict::mul(g, frame, theta1),
                              stpredict::mul(g, x_sq, theta2));
    }
};

// L_l(theta_S'(theta_T)) evaluated from scratch: teacher pseudo labels, one
// student SGD step, labeled loss at the updated student.
inline double bilevel_value(float t1, float t2, float s1, float s2,
                            const Tensor<float>& labeled, const Tensor<float>& unlabeled,
                            double eta) {
    LinearToyModel teacher(t1, t2);
    LinearToyModel student(s1, s2);
    auto pseudo = stpredict::rollout<float, LinearToyModel>(nullptr, teacher, unlabeled, 1, 1);
    Graph<float> g;
    auto preds = stpredict::rollout<float, LinearToyModel>(&g, student, unlabeled, 1, 1);
    auto loss = stpredict::mse_mean(&g, preds[0], pseudo[0]);
    g.backward(loss);
    const double g1 = student.theta1.grad_vec()[0];
    const double g2 = student.theta2.grad_vec()[0];
    LinearToyModel updated(static_cast<float>(s1 - eta * g1),
                           static_cast<float>(s2 - eta * g2));
    auto lpred = stpredict::rollout<float, LinearToyModel>(nullptr, updated, labeled, 1, 1);
    return stpredict::mse_mean<float>(nullptr, lpred[0],
                                      stpredict::frame_at(labeled, 1))
        .item();
}

// Runs `trials` random instances; returns how many had the meta feedback
// direction h * grad_theta_T L_u aligned with the finite-difference bilevel
// gradient.
inline int sign_agreement_trials(int trials, std::uint64_t seed, double eta = 0.05) {
    stpredict::Rng master(seed);
    int agree = 0;
    for (int trial = 0; trial < trials; ++trial) {
        stpredict::Rng rng(master.next_u64());
        auto draw_windows = [&](std::size_t n) {
            Tensor<float> w({n, 2, 1, 1, 1});
            for (std::size_t i = 0; i < w.numel(); ++i) {
                w.data()[i] = static_cast<float>(rng.uniform(-1.5, 1.5));
            }
            return w;
        };
        auto labeled = draw_windows(8);
        auto unlabeled = draw_windows(8);
        const float t1 = static_cast<float>(rng.uniform(-1, 1));
        const float t2 = static_cast<float>(rng.uniform(-1, 1));
        const float s1 = static_cast<float>(rng.uniform(-1, 1));
        const float s2 = static_cast<float>(rng.uniform(-1, 1));

        LinearToyModel teacher(t1, t2);
        LinearToyModel student(s1, s2);
        AdamState<float> adam;
        adam.init(teacher.params());
        MetaConfig cfg;
        cfg.student_lr = eta;
        cfg.feedback_clip = 1e9;

        // carrier gradient of MSE(teacher, detached student) at the pre-step
        // parameters
        auto student0 =
            stpredict::rollout<float, LinearToyModel>(nullptr, student, unlabeled, 1, 1);
        LinearToyModel teacher_probe(t1, t2);
        Graph<float> cg;
        auto tpred =
            stpredict::rollout<float, LinearToyModel>(&cg, teacher_probe, unlabeled, 1, 1);
        cg.backward(stpredict::mse_mean(&cg, tpred[0], student0[0].detached()));
        const double carrier1 = teacher_probe.theta1.grad_vec()[0];
        const double carrier2 = teacher_probe.theta2.grad_vec()[0];

        auto diag = stpredict::meta_step_impl(teacher, student, adam, labeled, unlabeled,
                                              cfg, 1, 1);
        const double fb1 = diag.h * carrier1;
        const double fb2 = diag.h * carrier2;

        const double h = 1e-3;
        const double d1 =
            (bilevel_value(static_cast<float>(t1 + h), t2, s1, s2, labeled, unlabeled, eta) -
             bilevel_value(static_cast<float>(t1 - h), t2, s1, s2, labeled, unlabeled, eta)) /
            (2 * h);
        const double d2 =
            (bilevel_value(t1, static_cast<float>(t2 + h), s1, s2, labeled, unlabeled, eta) -
             bilevel_value(t1, static_cast<float>(t2 - h), s1, s2, labeled, unlabeled, eta)) /
            (2 * h);
        if (fb1 * d1 + fb2 * d2 > 0) agree += 1;
    }
    return agree;
}

}  // namespace meta_toy
