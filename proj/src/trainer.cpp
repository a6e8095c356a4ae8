#include "p2d/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numbers>
#include <set>

#include "p2d/errors.hpp"
#include "p2d/rng.hpp"

namespace p2d {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct AdamState {
    Tensor m;
    Tensor v;
};

double lr_at(const TrainConfig& cfg, int step, int total_steps) {
    // step is 1-based
    const int warmup = std::max(1, static_cast<int>(std::ceil(cfg.warmup_frac * total_steps)));
    if (step <= warmup)
        return cfg.lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (total_steps <= warmup) return cfg.lr;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    const double floor = cfg.cosine_floor * cfg.lr;
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// One AdamW update for a single tensor. Decoupled decay first, then the
// bias-corrected moment step.
void adamw_update(Tensor& param, const Tensor& grad, AdamState& st, const TrainConfig& cfg,
                  double lr, int t) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (size_t i = 0; i < param.data.size(); ++i) {
        param.data[i] -= lr * cfg.weight_decay * param.data[i];
        st.m.data[i] = cfg.beta1 * st.m.data[i] + (1.0 - cfg.beta1) * grad.data[i];
        st.v.data[i] = cfg.beta2 * st.v.data[i] + (1.0 - cfg.beta2) * grad.data[i] * grad.data[i];
        const double mhat = st.m.data[i] / bc1;
        const double vhat = st.v.data[i] / bc2;
        param.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

struct StepPlan {
    std::vector<std::vector<size_t>> batches;  // sample indices per step
    std::vector<int> epoch_of_step;
};

StepPlan make_epoch_plan(size_t n, const TrainConfig& cfg) {
    StepPlan plan;
    std::vector<int64_t> fixed;
    if (cfg.fixed_order) {
        Rng rng(derive_seed(cfg.seed, 500));
        fixed = rng.perm(static_cast<int64_t>(n));
    }
    for (int e = 0; e < cfg.epochs; ++e) {
        std::vector<int64_t> order;
        if (cfg.fixed_order) {
            order = fixed;
        } else {
            Rng rng(derive_seed(cfg.seed, 500 + static_cast<uint64_t>(e)));
            order = rng.perm(static_cast<int64_t>(n));
        }
        for (size_t b = 0; b < n; b += static_cast<size_t>(cfg.batch_size)) {
            std::vector<size_t> batch;
            for (size_t i = b; i < std::min(n, b + static_cast<size_t>(cfg.batch_size)); ++i)
                batch.push_back(static_cast<size_t>(order[i]));
            plan.batches.push_back(std::move(batch));
            plan.epoch_of_step.push_back(e);
        }
    }
    return plan;
}

ModelCheckpoint train_core(const ModelCheckpoint& model,
                           const std::vector<TokenizedSample>& samples, const SparseMask& mask,
                           const TrainConfig& cfg, const StepPlan& plan, TrainReport* report,
                           MaskFormulation formulation) {
    cfg.validate();
    if (samples.empty()) throw ParamError("masked_train: empty dataset");
    if (mask.allow.size() != model.params.size())
        throw IncompatError("mask covers " + std::to_string(mask.allow.size()) +
                            " tensors, model has " + std::to_string(model.params.size()));
    for (const auto& [name, t] : model.params)
        if (!mask.allow.count(name))
            throw IncompatError("mask is missing tensor '" + name + "'");
    if (mask.permitted_tensors() == 0)
        throw ParamError("masked_train: mask permits no tensors");

    const auto t0 = Clock::now();
    ModelCheckpoint out = model;

    // optimizer_restricted keeps state only for permitted tensors;
    // gradient_masked keeps state everywhere and relies on zeroed gradients.
    std::map<std::string, AdamState> state;
    for (const auto& [name, t] : out.params) {
        if (formulation == MaskFormulation::optimizer_restricted && !mask.allows(name)) continue;
        state.emplace(name, AdamState{Tensor(t.shape), Tensor(t.shape)});
    }

    const int total_steps = static_cast<int>(plan.batches.size());
    std::vector<double> epoch_loss_sums(static_cast<size_t>(cfg.epochs), 0.0);
    std::vector<int> epoch_step_counts(static_cast<size_t>(cfg.epochs), 0);
    double last_loss = 0.0;

    for (int step = 1; step <= total_steps; ++step) {
        const std::vector<size_t>& batch = plan.batches[static_cast<size_t>(step - 1)];
        GradTape tape;
        ParamNodes params = make_param_leaves(
            tape, out, [&](const std::string& name) { return mask.allows(name); });
        std::vector<GradTape::Node> losses;
        losses.reserve(batch.size());
        for (size_t idx : batch) {
            const TokenizedSample& s = samples[idx];
            GradTape::Node logits = build_logits(tape, out.config, params, s.tokens, nullptr);
            losses.push_back(tape.cross_entropy(logits, s.targets));
        }
        GradTape::Node loss = tape.mean_scalars(losses);
        last_loss = tape.value(loss).data[0];
        if (!std::isfinite(last_loss))
            throw NumericError("non-finite loss at step " + std::to_string(step));
        tape.backward(loss);

        const double lr = lr_at(cfg, step, total_steps);
        // std::map order keeps per-tensor update sequence canonical.
        for (auto& [name, st] : state) {
            Tensor& param = out.params.at(name);
            if (formulation == MaskFormulation::gradient_masked && !mask.allows(name)) {
                // Masked gradient is identically zero, so the moments stay
                // zero and the parameter update vanishes; decay is scoped to
                // permitted tensors, so nothing moves here.
                for (size_t i = 0; i < st.m.data.size(); ++i) {
                    st.m.data[i] *= cfg.beta1;
                    st.v.data[i] *= cfg.beta2;
                }
                continue;
            }
            adamw_update(param, tape.grad(params.at(name)), st, cfg, lr, step);
        }

        const int e = plan.epoch_of_step[static_cast<size_t>(step - 1)];
        epoch_loss_sums[static_cast<size_t>(e)] += last_loss;
        epoch_step_counts[static_cast<size_t>(e)] += 1;
    }

    if (report) {
        report->final_loss = last_loss;
        report->epoch_losses.clear();
        for (size_t e = 0; e < epoch_loss_sums.size(); ++e)
            if (epoch_step_counts[e] > 0)
                report->epoch_losses.push_back(epoch_loss_sums[e] / epoch_step_counts[e]);
        report->wall_seconds = seconds_since(t0);
        report->trainable_fraction = static_cast<double>(mask.permitted_params(model)) /
                                     static_cast<double>(model.total_params());
        report->mask_derivation = mask.derivation;
        report->data_order_seed = cfg.seed;
        report->steps = total_steps;
    }
    return out;
}

}  // namespace

std::string mask_mode_name(MaskMode m) {
    switch (m) {
        case MaskMode::full: return "full";
        case MaskMode::p2d: return "p2d";
        case MaskMode::random: return "random";
    }
    throw ParamError("unknown mask mode");
}

bool SparseMask::allows(const std::string& name) const {
    auto it = allow.find(name);
    return it != allow.end() && it->second;
}

int64_t SparseMask::permitted_params(const ModelCheckpoint& m) const {
    int64_t n = 0;
    for (const auto& [name, t] : m.params)
        if (allows(name)) n += t.numel();
    return n;
}

int64_t SparseMask::permitted_tensors() const {
    int64_t n = 0;
    for (const auto& [name, ok] : allow)
        if (ok) ++n;
    return n;
}

SparseMask build_mask_full(const ModelConfig& cfg) {
    SparseMask mask;
    for (const std::string& name : param_names(cfg)) mask.allow[name] = true;
    mask.derivation = "full";
    return mask;
}

SparseMask build_mask_p2d(const ModelConfig& cfg, const std::vector<HeadId>& heads,
                          const std::string& headset_hash) {
    if (heads.empty()) throw ParamError("p2d mask needs a non-empty head set");
    std::set<std::pair<int, int>> seen;
    for (HeadId id : heads) {
        if (id.layer < 0 || id.layer >= cfg.n_layers || id.head < 0 || id.head >= cfg.n_heads)
            throw IncompatError("head (" + std::to_string(id.layer) + "," +
                                std::to_string(id.head) + ") outside config");
        if (!seen.insert({id.layer, id.head}).second)
            throw ParamError("duplicate head in head set");
    }
    SparseMask mask;
    for (const std::string& name : param_names(cfg)) mask.allow[name] = false;
    for (HeadId id : heads)
        for (const char* w : {"wq", "wk", "wv"})
            mask.allow.at(head_param_name(id, w)) = true;
    mask.derivation = "p2d:" + headset_hash;
    mask.heads = heads;
    std::sort(mask.heads.begin(), mask.heads.end());
    return mask;
}

SparseMask build_mask_random(const ModelConfig& cfg, double rho_p, uint64_t seed) {
    if (rho_p <= 0.0 || rho_p > 1.0)
        throw ParamError("rho_p must be in (0,1], got " + std::to_string(rho_p));
    const int n = cfg.total_heads();
    const int k = std::max<int>(1, static_cast<int>(std::ceil(rho_p * n)));
    Rng rng(derive_seed(seed, 700));
    std::vector<int64_t> picks = rng.choose(n, k);
    std::vector<HeadId> heads;
    heads.reserve(picks.size());
    for (int64_t p : picks)
        heads.push_back({static_cast<int>(p) / cfg.n_heads, static_cast<int>(p) % cfg.n_heads});
    SparseMask mask = build_mask_p2d(cfg, heads, "");
    mask.derivation = "random:" + std::to_string(seed);
    return mask;
}

void TrainConfig::validate() const {
    if (epochs <= 0 || batch_size <= 0 || lr <= 0.0 || beta1 <= 0.0 || beta2 <= 0.0 ||
        eps <= 0.0 || weight_decay < 0.0 || cosine_floor < 0.0)
        throw ParamError("train config fields must be positive");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
        throw ParamError("warmup fraction must be in [0,1)");
}

ModelCheckpoint masked_train(const ModelCheckpoint& model, const std::vector<Example>& data,
                             const SparseMask& mask, const TrainConfig& cfg,
                             TrainReport* report, MaskFormulation formulation) {
    std::vector<TokenizedSample> samples;
    samples.reserve(data.size());
    for (const Example& e : data) samples.push_back(render_training_sample(e));
    return masked_train_samples(model, samples, mask, cfg, report, formulation);
}

ModelCheckpoint masked_train_samples(const ModelCheckpoint& model,
                                     const std::vector<TokenizedSample>& samples,
                                     const SparseMask& mask, const TrainConfig& cfg,
                                     TrainReport* report, MaskFormulation formulation) {
    if (samples.empty()) throw ParamError("masked_train: empty dataset");
    const StepPlan plan = make_epoch_plan(samples.size(), cfg);
    return train_core(model, samples, mask, cfg, plan, report, formulation);
}

ModelCheckpoint train_full_batch_steps(const ModelCheckpoint& model,
                                       const std::vector<TokenizedSample>& samples,
                                       const SparseMask& mask, const TrainConfig& cfg,
                                       int n_steps, TrainReport* report) {
    if (n_steps <= 0) throw ParamError("n_steps must be >= 1, got " + std::to_string(n_steps));
    if (samples.empty()) throw ParamError("train_full_batch_steps: empty dataset");
    StepPlan plan;
    std::vector<size_t> all(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) all[i] = i;
    for (int s = 0; s < n_steps; ++s) {
        plan.batches.push_back(all);
        plan.epoch_of_step.push_back(0);
    }
    TrainConfig c = cfg;
    c.epochs = 1;  // epoch bookkeeping only
    return train_core(model, samples, mask, c, plan, report,
                      MaskFormulation::optimizer_restricted);
}

ScopeCheckResult weight_decay_scope_check(const ModelCheckpoint& before,
                                          const ModelCheckpoint& after,
                                          const SparseMask& mask) {
    ScopeCheckResult res;
    if (before.params.size() != after.params.size())
        throw IncompatError("scope check: checkpoints have different tensor sets");
    for (const auto& [name, t_before] : before.params) {
        if (mask.allows(name)) continue;
        const Tensor& t_after = after.params.at(name);
        if (t_before.shape != t_after.shape ||
            std::memcmp(t_before.data.data(), t_after.data.data(),
                        t_before.data.size() * sizeof(double)) != 0) {
            res.pass = false;
            res.offending.push_back(name);
        }
    }
    return res;
}

}  // namespace p2d
