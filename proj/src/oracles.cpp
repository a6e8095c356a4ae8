#include "p2d/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "p2d/errors.hpp"

namespace p2d {

double AblationTable::at(HeadId id) const {
    for (const auto& [h, d] : delta_p)
        if (h == id) return d;
    throw IndexError("ablation table has no entry for head (" + std::to_string(id.layer) + "," +
                     std::to_string(id.head) + ")");
}

ModelCheckpoint ablate_head(const ModelCheckpoint& model, HeadId id) {
    if (id.layer < 0 || id.layer >= model.config.n_layers || id.head < 0 ||
        id.head >= model.config.n_heads)
        throw IndexError("ablate_head: head (" + std::to_string(id.layer) + "," +
                         std::to_string(id.head) + ") outside config");
    ModelCheckpoint out = model;
    Tensor& wv = out.params.at(head_param_name(id, "wv"));
    std::fill(wv.data.begin(), wv.data.end(), 0.0);
    return out;
}

std::pair<AblationTable, HeadSet> ablation_ranking(const ModelCheckpoint& model,
                                                   const std::vector<Example>& eval_split,
                                                   double rho_p) {
    if (eval_split.empty()) throw ParamError("ablation_ranking: empty eval split");
    if (rho_p <= 0.0 || rho_p > 1.0)
        throw ParamError("rho_p must be in (0,1], got " + std::to_string(rho_p));

    AblationTable table;
    table.base_score = evaluate(model, eval_split);
    for (HeadId id : all_heads(model.config)) {
        const ModelCheckpoint ablated = ablate_head(model, id);
        table.delta_p.push_back({id, table.base_score - evaluate(ablated, eval_split)});
    }

    HeadScoreTable as_scores;
    as_scores.scorer = "ablation";
    for (const auto& [id, d] : table.delta_p) as_scores.scores.push_back({id, d});
    HeadSet set = select_heads(as_scores, rho_p);
    return {table, set};
}

InfluenceTable loo_influence(const ModelCheckpoint& base, const std::vector<Example>& dataset,
                             const std::vector<Example>& eval_split, const TrainConfig& cfg) {
    if (dataset.empty()) throw ParamError("loo_influence: empty dataset");
    if (static_cast<int>(dataset.size()) > kLooMaxDataset)
        throw ParamError("loo_influence: dataset of " + std::to_string(dataset.size()) +
                         " exceeds the " + std::to_string(kLooMaxDataset) +
                         "-sample retraining guard");
    if (eval_split.empty()) throw ParamError("loo_influence: empty eval split");

    TrainConfig loo_cfg = cfg;
    loo_cfg.fixed_order = true;  // isolates the removal from order noise
    const SparseMask full = build_mask_full(base.config);

    const ModelCheckpoint trained_full = masked_train(base, dataset, full, loo_cfg);
    InfluenceTable table;
    table.full_score = evaluate(trained_full, eval_split);

    for (size_t i = 0; i < dataset.size(); ++i) {
        std::vector<Example> without;
        without.reserve(dataset.size() - 1);
        for (size_t j = 0; j < dataset.size(); ++j)
            if (j != i) without.push_back(dataset[j]);
        const ModelCheckpoint trained = masked_train(base, without, full, loo_cfg);
        table.delta_p.push_back({dataset[i].meta.id,
                                 table.full_score - evaluate(trained, eval_split)});
    }
    return table;
}

namespace {

// Successive shortest paths on the bipartite transport graph. Sizes are tiny
// (<= 12 x 12), so Bellman-Ford per augmentation is plenty.
struct FlowSolver {
    int n;  // support size on each side
    std::vector<double> supply, demand;
    std::vector<std::vector<double>> flow;

    explicit FlowSolver(const Tensor& p, const Tensor& q)
        : n(static_cast<int>(p.numel())),
          supply(p.data.begin(), p.data.end()),
          demand(q.data.begin(), q.data.end()),
          flow(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n), 0.0)) {}

    static double cost(int i, int j) { return std::abs(i - j); }

    double solve() {
        constexpr double kEps = 1e-15;
        while (true) {
            int src = -1;
            for (int i = 0; i < n; ++i)
                if (supply[static_cast<size_t>(i)] > kEps) {
                    src = i;
                    break;
                }
            if (src < 0) break;

            // Shortest path from any supplied source to any demanding sink in
            // the residual graph. Nodes: 0..n-1 = left, n..2n-1 = right.
            const int total = 2 * n;
            std::vector<double> dist(static_cast<size_t>(total),
                                     std::numeric_limits<double>::infinity());
            std::vector<int> prev(static_cast<size_t>(total), -1);
            for (int i = 0; i < n; ++i)
                if (supply[static_cast<size_t>(i)] > kEps) dist[static_cast<size_t>(i)] = 0.0;

            for (int it = 0; it < total; ++it) {
                bool changed = false;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                        // forward arc i -> j
                        const double fij = dist[static_cast<size_t>(i)] + cost(i, j);
                        if (fij + 1e-18 < dist[static_cast<size_t>(n + j)]) {
                            dist[static_cast<size_t>(n + j)] = fij;
                            prev[static_cast<size_t>(n + j)] = i;
                            changed = true;
                        }
                        // residual arc j -> i where flow exists
                        if (flow[static_cast<size_t>(i)][static_cast<size_t>(j)] > kEps) {
                            const double rji = dist[static_cast<size_t>(n + j)] - cost(i, j);
                            if (rji + 1e-18 < dist[static_cast<size_t>(i)]) {
                                dist[static_cast<size_t>(i)] = rji;
                                prev[static_cast<size_t>(i)] = n + j;
                                changed = true;
                            }
                        }
                    }
                if (!changed) break;
            }

            int sink = -1;
            double best = std::numeric_limits<double>::infinity();
            for (int j = 0; j < n; ++j)
                if (demand[static_cast<size_t>(j)] > kEps &&
                    dist[static_cast<size_t>(n + j)] < best) {
                    best = dist[static_cast<size_t>(n + j)];
                    sink = j;
                }
            if (sink < 0) break;

            // Trace sink back to its origin source; nodes alternate sides.
            std::vector<int> path{n + sink};
            while (prev[static_cast<size_t>(path.back())] != -1)
                path.push_back(prev[static_cast<size_t>(path.back())]);
            const int origin = path.back();

            double push = std::min(supply[static_cast<size_t>(origin)],
                                   demand[static_cast<size_t>(sink)]);
            for (size_t t = 0; t + 1 < path.size(); ++t) {
                const int to = path[t], from = path[t + 1];
                if (from >= n && to < n)  // residual arc, bounded by its flow
                    push = std::min(push, flow[static_cast<size_t>(to)]
                                              [static_cast<size_t>(from - n)]);
            }
            for (size_t t = 0; t + 1 < path.size(); ++t) {
                const int to = path[t], from = path[t + 1];
                if (from < n && to >= n)
                    flow[static_cast<size_t>(from)][static_cast<size_t>(to - n)] += push;
                else
                    flow[static_cast<size_t>(to)][static_cast<size_t>(from - n)] -= push;
            }
            supply[static_cast<size_t>(origin)] -= push;
            demand[static_cast<size_t>(sink)] -= push;
        }

        double total_cost = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                total_cost += flow[static_cast<size_t>(i)][static_cast<size_t>(j)] * cost(i, j);
        return total_cost;
    }
};

}  // namespace

double w1_lp(const Tensor& p, const Tensor& q) {
    if (p.numel() != q.numel())
        throw ParamError("w1_lp: lengths differ");
    if (p.numel() > kW1LpMaxLength)
        throw ParamError("w1_lp: length " + std::to_string(p.numel()) + " exceeds the " +
                         std::to_string(kW1LpMaxLength) + "-point guard");
    double sp = 0.0, sq = 0.0;
    for (double v : p.data) sp += v;
    for (double v : q.data) sq += v;
    if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
        throw ParamError("w1_lp: inputs must be normalized");
    FlowSolver solver(p, q);
    return solver.solve();
}

}  // namespace p2d
