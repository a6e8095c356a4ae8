#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "p2d/model.hpp"

namespace p2d {

enum class MaskMode { full, p2d, random };

std::string mask_mode_name(MaskMode m);

// Per-named-tensor update permission. In p2d/random mode only the wq/wk/wv
// tensors of selected heads are permitted; embeddings, feed-forward blocks,
// layer norms and output projections stay frozen.
struct SparseMask {
    std::map<std::string, bool> allow;  // one entry per model parameter
    std::string derivation;             // "full" | "p2d:<hash>" | "random:<seed>"
    std::vector<HeadId> heads;          // selected heads (empty in full mode)

    bool allows(const std::string& name) const;
    int64_t permitted_params(const ModelCheckpoint& m) const;
    int64_t permitted_tensors() const;
};

SparseMask build_mask_full(const ModelConfig& cfg);
SparseMask build_mask_p2d(const ModelConfig& cfg, const std::vector<HeadId>& heads,
                          const std::string& headset_hash);
SparseMask build_mask_random(const ModelConfig& cfg, double rho_p, uint64_t seed);

struct TrainConfig {
    int epochs = 3;
    int batch_size = 16;
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double warmup_frac = 0.1;
    double cosine_floor = 0.1;  // schedule decays to cosine_floor * lr
    uint64_t seed = 0;
    // Keeps one fixed sample order for all epochs instead of reshuffling;
    // the leave-one-out oracle relies on this to isolate a removal's effect.
    bool fixed_order = false;

    void validate() const;
};

struct TrainReport {
    double final_loss = 0.0;
    std::vector<double> epoch_losses;
    double wall_seconds = 0.0;
    double trainable_fraction = 0.0;
    std::string mask_derivation;
    uint64_t data_order_seed = 0;
    int steps = 0;
};

// Eq.-level choice of how the mask is enforced; both produce bit-identical
// trajectories and the tests cross-check them.
enum class MaskFormulation { optimizer_restricted, gradient_masked };

ModelCheckpoint masked_train(const ModelCheckpoint& model, const std::vector<Example>& data,
                             const SparseMask& mask, const TrainConfig& cfg,
                             TrainReport* report = nullptr,
                             MaskFormulation formulation = MaskFormulation::optimizer_restricted);

// Pre-tokenized variant (multi-span pretraining sequences use this directly).
ModelCheckpoint masked_train_samples(const ModelCheckpoint& model,
                                     const std::vector<TokenizedSample>& samples,
                                     const SparseMask& mask, const TrainConfig& cfg,
                                     TrainReport* report = nullptr,
                                     MaskFormulation formulation =
                                         MaskFormulation::optimizer_restricted);

// Exactly n_steps full-batch steps over all samples (proxy-building recipe).
ModelCheckpoint train_full_batch_steps(const ModelCheckpoint& model,
                                       const std::vector<TokenizedSample>& samples,
                                       const SparseMask& mask, const TrainConfig& cfg,
                                       int n_steps, TrainReport* report = nullptr);

struct ScopeCheckResult {
    bool pass = true;
    std::vector<std::string> offending;  // frozen tensors that changed
};

// Verifies no frozen tensor moved, decay included.
ScopeCheckResult weight_decay_scope_check(const ModelCheckpoint& before,
                                          const ModelCheckpoint& after,
                                          const SparseMask& mask);

}  // namespace p2d
