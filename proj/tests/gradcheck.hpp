#pragma once

#include <functional>
#include <vector>

#include "p2d/rng.hpp"
#include "p2d/tensor.hpp"

namespace p2d::testing {

// Builds a scalar from leaf nodes; used for both the analytic pass and the
// perturbed numeric passes.
using ScalarBuilder =
    std::function<GradTape::Node(GradTape&, const std::vector<GradTape::Node>&)>;

struct GradCheck {
    double max_rel_err = 0.0;
    int checked = 0;
};

inline double eval_scalar(const ScalarBuilder& build, const std::vector<Tensor>& inputs) {
    GradTape tape(/*track_gradients=*/false);
    std::vector<GradTape::Node> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, false));
    return tape.value(build(tape, leaves)).data[0];
}

// Central finite differences, step h, against reverse-mode gradients.
inline GradCheck grad_check(const ScalarBuilder& build, std::vector<Tensor> inputs,
                            double h = 1e-5) {
    GradTape tape;
    std::vector<GradTape::Node> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
    GradTape::Node root = build(tape, leaves);
    tape.backward(root);

    GradCheck res;
    for (size_t i = 0; i < inputs.size(); ++i) {
        const Tensor& analytic = tape.grad(leaves[i]);
        for (size_t k = 0; k < inputs[i].data.size(); ++k) {
            const double saved = inputs[i].data[k];
            inputs[i].data[k] = saved + h;
            const double fp = eval_scalar(build, inputs);
            inputs[i].data[k] = saved - h;
            const double fm = eval_scalar(build, inputs);
            inputs[i].data[k] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic.data[k];
            const double err = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-6);
            res.max_rel_err = std::max(res.max_rel_err, err);
            ++res.checked;
        }
    }
    return res;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal(0.0, scale);
    return t;
}

}  // namespace p2d::testing
