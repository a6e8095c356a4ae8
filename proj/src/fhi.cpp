#include "p2d/fhi.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "p2d/errors.hpp"
#include "p2d/hash.hpp"
#include "p2d/rng.hpp"

namespace p2d {

namespace {
using ordered_json = nlohmann::ordered_json;
}

std::string scorer_name(HeadScorer s) {
    switch (s) {
        case HeadScorer::w1: return "w1";
        case HeadScorer::cosine: return "cosine";
        case HeadScorer::grad_norm: return "grad_norm";
    }
    throw ParamError("unknown scorer");
}

HeadScorer scorer_from(const std::string& name) {
    if (name == "w1") return HeadScorer::w1;
    if (name == "cosine") return HeadScorer::cosine;
    if (name == "grad_norm") return HeadScorer::grad_norm;
    throw ParamError("unknown scorer '" + name + "'");
}

void FhiConfig::validate() const {
    if (n_examples < 1) throw ParamError("fhi: n_examples must be >= 1");
    if (n_steps < 1) throw ParamError("fhi: n_steps must be >= 1");
    if (tau <= 0.0) throw ParamError("fhi: tau must be > 0");
}

double HeadScoreTable::at(HeadId id) const {
    for (const HeadScore& s : scores)
        if (s.id == id) return s.score;
    throw IndexError("score table has no entry for head (" + std::to_string(id.layer) + "," +
                     std::to_string(id.head) + ")");
}

std::string HeadScoreTable::content_hash() const {
    Fnv64 h;
    h.update(scorer);
    for (const HeadScore& s : scores) {
        h.update(static_cast<int64_t>(s.id.layer));
        h.update(static_cast<int64_t>(s.id.head));
        h.update(s.score);
    }
    return h.hex();
}

std::string HeadSet::content_hash() const {
    Fnv64 h;
    h.update(rho_p);
    for (HeadId id : heads) {
        h.update(static_cast<int64_t>(id.layer));
        h.update(static_cast<int64_t>(id.head));
    }
    return h.hex();
}

ModelCheckpoint train_proxy(const ModelCheckpoint& base, const std::vector<Example>& train_pool,
                            const FhiConfig& cfg, const TrainConfig& opt, uint64_t seed,
                            AerLedger* ledger) {
    cfg.validate();
    if (static_cast<int>(train_pool.size()) < cfg.n_examples)
        throw ParamError("proxy training needs >= " + std::to_string(cfg.n_examples) +
                         " pool examples, got " + std::to_string(train_pool.size()));
    PhaseTimer timer;
    Rng rng(derive_seed(seed, 900));
    std::vector<int64_t> picks =
        rng.choose(static_cast<int64_t>(train_pool.size()), cfg.n_examples);
    std::sort(picks.begin(), picks.end());
    std::vector<TokenizedSample> samples;
    samples.reserve(picks.size());
    for (int64_t i : picks)
        samples.push_back(render_training_sample(train_pool[static_cast<size_t>(i)]));

    TrainConfig proxy_cfg = opt;
    proxy_cfg.seed = derive_seed(seed, 901);
    const SparseMask full = build_mask_full(base.config);
    ModelCheckpoint proxy = train_full_batch_steps(base, samples, full, proxy_cfg, cfg.n_steps);
    if (ledger)
        ledger->record(Phase::proxy_train, timer.seconds(),
                       "steps=" + std::to_string(cfg.n_steps) +
                           " examples=" + std::to_string(cfg.n_examples));
    return proxy;
}

Tensor composite_matrix(const Tensor& wq, const Tensor& wk, const Tensor& wv) {
    if (!wq.is_matrix() || !wk.is_matrix() || !wv.is_matrix() || !wq.same_shape(wk) ||
        !wq.same_shape(wv))
        throw ShapeError("composite_matrix: projections must share shape, got " +
                         shape_str(wq.shape) + ", " + shape_str(wk.shape) + ", " +
                         shape_str(wv.shape));
    // (d_model, d_head) x (d_head, d_model) x (d_model, d_head)
    Tensor qk({wq.rows(), wk.rows()});
    const int64_t d = wq.rows(), dh = wq.cols();
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < dh; ++k) acc += wq.at(i, k) * wk.at(j, k);
            qk.at(i, j) = acc;
        }
    return matmul_plain(qk, wv);
}

Tensor head_distribution(const Tensor& composite, double tau) {
    return global_softmax_flat(composite, tau);
}

double w1_distance(const Tensor& p, const Tensor& q) {
    if (p.numel() != q.numel())
        throw ParamError("w1_distance: lengths differ, " + std::to_string(p.numel()) + " vs " +
                         std::to_string(q.numel()));
    double sp = 0.0, sq = 0.0;
    for (double v : p.data) sp += v;
    for (double v : q.data) sq += v;
    if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
        throw ParamError("w1_distance: inputs must sum to 1 (got " + std::to_string(sp) +
                         " and " + std::to_string(sq) + ")");
    // The last CDF point is 1 for both sides and contributes nothing.
    double cdf_p = 0.0, cdf_q = 0.0, dist = 0.0;
    for (size_t i = 0; i + 1 < p.data.size(); ++i) {
        cdf_p += p.data[i];
        cdf_q += q.data[i];
        dist += std::abs(cdf_p - cdf_q);
    }
    return dist;
}

namespace {

HeadScoreTable score_heads_static(const ModelCheckpoint& base, const ModelCheckpoint& proxy,
                                  const FhiConfig& cfg) {
    HeadScoreTable table;
    for (HeadId id : all_heads(base.config)) {
        const HeadParamsConst b = head_params(base, id);
        const HeadParamsConst p = head_params(proxy, id);
        const Tensor db = head_distribution(composite_matrix(b.wq, b.wk, b.wv), cfg.tau);
        const Tensor dp = head_distribution(composite_matrix(p.wq, p.wk, p.wv), cfg.tau);
        double score = 0.0;
        if (cfg.scorer == HeadScorer::w1) {
            score = w1_distance(db, dp);
        } else {
            double dot = 0.0, nb = 0.0, np = 0.0;
            for (size_t i = 0; i < db.data.size(); ++i) {
                dot += db.data[i] * dp.data[i];
                nb += db.data[i] * db.data[i];
                np += dp.data[i] * dp.data[i];
            }
            score = 1.0 - dot / (std::sqrt(nb) * std::sqrt(np));
        }
        table.scores.push_back({id, score});
    }
    return table;
}

HeadScoreTable score_heads_grad_norm(const ModelCheckpoint& base, const FhiConfig& cfg,
                                     const std::vector<Example>* calibration, uint64_t seed) {
    if (!calibration || calibration->empty())
        throw ParamError("grad_norm scorer needs a calibration pool");
    if (static_cast<int>(calibration->size()) < cfg.n_examples)
        throw ParamError("grad_norm scorer needs >= " + std::to_string(cfg.n_examples) +
                         " calibration examples");
    Rng rng(derive_seed(seed, 910));
    std::vector<int64_t> picks =
        rng.choose(static_cast<int64_t>(calibration->size()), cfg.n_examples);
    std::sort(picks.begin(), picks.end());

    GradTape tape;
    ParamNodes params = make_param_leaves(tape, base, [](const std::string&) { return true; });
    std::vector<GradTape::Node> losses;
    for (int64_t i : picks) {
        const TokenizedSample s = render_training_sample((*calibration)[static_cast<size_t>(i)]);
        losses.push_back(
            tape.cross_entropy(build_logits(tape, base.config, params, s.tokens, nullptr),
                               s.targets));
    }
    GradTape::Node loss = tape.mean_scalars(losses);
    tape.backward(loss);

    HeadScoreTable table;
    for (HeadId id : all_heads(base.config)) {
        double acc = 0.0;
        for (const char* w : {"wq", "wk", "wv"}) {
            const Tensor& g = tape.grad(params.at(head_param_name(id, w)));
            for (double v : g.data) acc += v * v;
        }
        table.scores.push_back({id, acc});
    }
    return table;
}

}  // namespace

HeadScoreTable score_heads(const ModelCheckpoint& base, const ModelCheckpoint& proxy,
                           const FhiConfig& cfg, const std::vector<Example>* calibration,
                           uint64_t calibration_seed, AerLedger* ledger) {
    cfg.validate();
    if (!(base.config == proxy.config))
        throw IncompatError("score_heads: base and proxy configs differ");
    PhaseTimer timer;
    HeadScoreTable table = cfg.scorer == HeadScorer::grad_norm
                               ? score_heads_grad_norm(base, cfg, calibration, calibration_seed)
                               : score_heads_static(base, proxy, cfg);
    table.scorer = scorer_name(cfg.scorer);
    table.base_hash = base.content_hash();
    table.proxy_hash = proxy.content_hash();
    for (const HeadScore& s : table.scores)
        if (!std::isfinite(s.score)) throw NumericError("non-finite head score");
    if (ledger) ledger->record(Phase::head_score, timer.seconds(), table.scorer);
    return table;
}

HeadSet select_heads(const HeadScoreTable& table, double rho_p) {
    if (rho_p <= 0.0 || rho_p > 1.0)
        throw ParamError("rho_p must be in (0,1], got " + std::to_string(rho_p));
    if (table.scores.empty()) throw ParamError("select_heads: empty score table");
    const int n = static_cast<int>(table.scores.size());
    const int k = std::max<int>(1, static_cast<int>(std::ceil(rho_p * n)));

    std::vector<HeadScore> ranked = table.scores;
    std::sort(ranked.begin(), ranked.end(), [](const HeadScore& a, const HeadScore& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });

    HeadSet set;
    set.rho_p = rho_p;
    set.table_hash = table.content_hash();
    set.heads.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) set.heads.push_back(ranked[static_cast<size_t>(i)].id);
    return set;
}

double headset_overlap(const HeadSet& a, const HeadSet& b) {
    if (a.heads.empty() || a.heads.size() != b.heads.size())
        throw ParamError("headset_overlap: sets must be equal-sized and non-empty (got " +
                         std::to_string(a.heads.size()) + " and " +
                         std::to_string(b.heads.size()) + ")");
    std::vector<HeadId> sa = a.heads, sb = b.heads;
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    std::vector<HeadId> inter;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
    return static_cast<double>(inter.size()) / static_cast<double>(sa.size());
}

void save_score_table(const std::filesystem::path& path, const HeadScoreTable& table) {
    ordered_json j;
    j["scorer"] = table.scorer;
    j["base_hash"] = table.base_hash;
    j["proxy_hash"] = table.proxy_hash;
    ordered_json arr = ordered_json::array();
    for (const HeadScore& s : table.scores)
        arr.push_back({{"layer", s.id.layer}, {"head", s.id.head}, {"score", s.score}});
    j["scores"] = arr;
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
}

HeadScoreTable load_score_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    ordered_json j = ordered_json::parse(in);
    HeadScoreTable table;
    table.scorer = j.at("scorer").get<std::string>();
    table.base_hash = j.at("base_hash").get<std::string>();
    table.proxy_hash = j.at("proxy_hash").get<std::string>();
    for (const auto& s : j.at("scores"))
        table.scores.push_back({{s.at("layer").get<int>(), s.at("head").get<int>()},
                                s.at("score").get<double>()});
    return table;
}

void save_headset(const std::filesystem::path& path, const HeadSet& set) {
    ordered_json j;
    j["rho_p"] = set.rho_p;
    j["table_hash"] = set.table_hash;
    ordered_json arr = ordered_json::array();
    for (HeadId id : set.heads) arr.push_back({{"layer", id.layer}, {"head", id.head}});
    j["heads"] = arr;
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
}

HeadSet load_headset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    ordered_json j = ordered_json::parse(in);
    HeadSet set;
    set.rho_p = j.at("rho_p").get<double>();
    set.table_hash = j.at("table_hash").get<std::string>();
    for (const auto& h : j.at("heads"))
        set.heads.push_back({h.at("layer").get<int>(), h.at("head").get<int>()});
    return set;
}

void save_score_grid_csv(const std::filesystem::path& path, const HeadScoreTable& table,
                         const ModelConfig& cfg) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "layer";
    for (int h = 0; h < cfg.n_heads; ++h) out << ",head" << h;
    out << "\n";
    for (int l = 0; l < cfg.n_layers; ++l) {
        out << l;
        for (int h = 0; h < cfg.n_heads; ++h) {
            out << "," << table.at({l, h});
        }
        out << "\n";
    }
}

}  // namespace p2d
