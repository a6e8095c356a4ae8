#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "p2d/fhi.hpp"
#include "p2d/model.hpp"
#include "p2d/trainer.hpp"

namespace p2d {

struct AblationTable {
    std::vector<std::pair<HeadId, double>> delta_p;  // canonical head order
    double base_score = 0.0;
    std::string task;

    double at(HeadId id) const;
};

// Returns a copy with head `id`'s value pathway zeroed (W_v = 0), which nulls
// the head's contribution to its layer output while preserving shapes.
ModelCheckpoint ablate_head(const ModelCheckpoint& model, HeadId id);

// Brute-force head importance: delta_p(h) = p(full) - p(without h), measured
// by evaluate() on the given split; top heads returned with the canonical
// tie-break.
std::pair<AblationTable, HeadSet> ablation_ranking(const ModelCheckpoint& model,
                                                   const std::vector<Example>& eval_split,
                                                   double rho_p);

struct InfluenceTable {
    std::vector<std::pair<int64_t, double>> delta_p;  // keyed by sample id
    double full_score = 0.0;
};

constexpr int kLooMaxDataset = 64;

// Leave-one-out data influence: N+1 retrainings of `base` on `dataset` (full
// parameters, identical seeds and fixed data order), each scored on
// eval_split. Guarded to datasets of at most kLooMaxDataset samples.
InfluenceTable loo_influence(const ModelCheckpoint& base, const std::vector<Example>& dataset,
                             const std::vector<Example>& eval_split, const TrainConfig& cfg);

constexpr int kW1LpMaxLength = 12;

// Exact minimum-cost transport between two probability vectors on the line
// with cost |i - j|, solved by successive-shortest-path min-cost flow.
// Independent of the closed-form w1_distance it validates.
double w1_lp(const Tensor& p, const Tensor& q);

}  // namespace p2d
