#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "p2d/aer.hpp"
#include "p2d/model.hpp"
#include "p2d/trainer.hpp"

namespace p2d {

enum class HeadScorer { w1, cosine, grad_norm };

std::string scorer_name(HeadScorer s);
HeadScorer scorer_from(const std::string& name);

struct FhiConfig {
    int n_examples = 100;
    int n_steps = 20;
    double tau = 0.1;
    HeadScorer scorer = HeadScorer::w1;

    void validate() const;
};

struct HeadScore {
    HeadId id;
    double score = 0.0;
};

struct HeadScoreTable {
    std::vector<HeadScore> scores;  // canonical (layer, head) order
    std::string scorer;
    std::string base_hash;
    std::string proxy_hash;

    double at(HeadId id) const;
    std::string content_hash() const;
};

struct HeadSet {
    std::vector<HeadId> heads;  // ranked: score desc, then layer asc, head asc
    double rho_p = 0.0;
    std::string table_hash;

    std::string content_hash() const;
};

// Builds the lightweight proxy: n_steps full-batch optimizer steps over
// n_examples drawn from the train pool, every parameter trainable. Elapsed
// time lands in the ledger's proxy_train phase when a ledger is given.
ModelCheckpoint train_proxy(const ModelCheckpoint& base, const std::vector<Example>& train_pool,
                            const FhiConfig& cfg, const TrainConfig& opt, uint64_t seed,
                            AerLedger* ledger = nullptr);

// Wq (d_model,d_head) @ Wk^T (d_head,d_model) @ Wv (d_model,d_head).
Tensor composite_matrix(const Tensor& wq, const Tensor& wk, const Tensor& wv);

// Row-major flatten of the composite followed by one global softmax.
Tensor head_distribution(const Tensor& composite, double tau);

// Closed-form transport distance on the flattened-index line with ground
// metric |i - j|: sum of absolute CDF differences.
double w1_distance(const Tensor& p, const Tensor& q);

// One score per head. w1/cosine compare the flattened-softmax signatures of
// base vs proxy; grad_norm accumulates each head's squared loss gradient over
// one calibration batch on the base model (proxy unused).
HeadScoreTable score_heads(const ModelCheckpoint& base, const ModelCheckpoint& proxy,
                           const FhiConfig& cfg,
                           const std::vector<Example>* calibration = nullptr,
                           uint64_t calibration_seed = 0, AerLedger* ledger = nullptr);

// Top ceil(rho_p * n) heads, minimum one; ties broken by (layer, head).
HeadSet select_heads(const HeadScoreTable& table, double rho_p);

// |a intersect b| / |a| for equally sized sets.
double headset_overlap(const HeadSet& a, const HeadSet& b);

// Persistence: score table + head set as JSON, score grid as CSV.
void save_score_table(const std::filesystem::path& path, const HeadScoreTable& table);
HeadScoreTable load_score_table(const std::filesystem::path& path);
void save_headset(const std::filesystem::path& path, const HeadSet& set);
HeadSet load_headset(const std::filesystem::path& path);
void save_score_grid_csv(const std::filesystem::path& path, const HeadScoreTable& table,
                         const ModelConfig& cfg);

}  // namespace p2d
