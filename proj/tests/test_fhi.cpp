#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "p2d/corpus.hpp"
#include "p2d/errors.hpp"
#include "p2d/fhi.hpp"
#include "p2d/model.hpp"
#include "p2d/oracles.hpp"
#include "p2d/rng.hpp"

using namespace p2d;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_head = 8;
    cfg.vocab_size = 64;
    cfg.max_context = 64;
    return cfg;
}

Tensor normalized_random(int n, Rng& rng) {
    Tensor t({n});
    double sum = 0.0;
    for (double& v : t.data) {
        v = rng.real01() + 1e-6;
        sum += v;
    }
    for (double& v : t.data) v /= sum;
    return t;
}

}  // namespace

TEST_CASE("composite matrix algebra") {
    // identity-padded Wq, Wk: composite equals the identity product applied to Wv
    Tensor wq = Tensor::zeros({4, 2});
    Tensor wk = Tensor::zeros({4, 2});
    wq.at(0, 0) = wq.at(1, 1) = 1.0;
    wk.at(0, 0) = wk.at(1, 1) = 1.0;
    Tensor wv({4, 2});
    for (size_t i = 0; i < wv.data.size(); ++i) wv.data[i] = static_cast<double>(i + 1);

    const Tensor comp = composite_matrix(wq, wk, wv);
    // Wq Wk^T = diag(1,1,0,0), so rows 0,1 of Wv survive and rows 2,3 vanish
    for (int64_t j = 0; j < 2; ++j) {
        CHECK(comp.at(0, j) == wv.at(0, j));
        CHECK(comp.at(1, j) == wv.at(1, j));
        CHECK(comp.at(2, j) == 0.0);
        CHECK(comp.at(3, j) == 0.0);
    }

    const Tensor zero = composite_matrix(wq, wk, Tensor::zeros({4, 2}));
    for (double v : zero.data) CHECK(v == 0.0);

    // random triples match an explicit two-step reference product
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor q({4, 2}), k({4, 2}), v({4, 2});
        for (auto* t : {&q, &k, &v})
            for (double& x : t->data) x = rng.normal();
        Tensor kt({2, 4});
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t j = 0; j < 2; ++j) kt.at(j, i) = k.at(i, j);
        const Tensor expect = matmul_plain(matmul_plain(q, kt), v);
        const Tensor got = composite_matrix(q, k, v);
        for (size_t i = 0; i < expect.data.size(); ++i)
            CHECK(std::abs(got.data[i] - expect.data[i]) < 1e-12);
    }

    CHECK_THROWS_AS(composite_matrix(wq, wk, Tensor::zeros({4, 3})), ShapeError);
}

TEST_CASE("head distribution") {
    const Tensor constant = Tensor::full({3, 2}, 1.7);
    const Tensor u = head_distribution(constant, 0.5);
    for (double v : u.data) CHECK(std::abs(v - 1.0 / 6) < 1e-12);
    double sum = 0.0;
    for (double v : u.data) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-12);

    // sharp temperature concentrates on the max entry
    Tensor m = Tensor::matrix({{0.0, 0.1}, {0.9, 0.2}});
    const Tensor sharp = head_distribution(m, 0.01);
    CHECK(sharp.data[2] > 0.999);  // flattened index of the 0.9

    // direct evaluation at tau=0.1 for [[1,2],[3,4]]
    const Tensor d = head_distribution(Tensor::matrix({{1, 2}, {3, 4}}), 0.1);
    long double z = 0.0L;
    for (double x : {1.0, 2.0, 3.0, 4.0}) z += expl(static_cast<long double>(x) / 0.1L);
    for (size_t i = 0; i < 4; ++i) {
        const long double expect = expl(static_cast<long double>(i + 1) / 0.1L) / z;
        CHECK(std::abs(d.data[i] - static_cast<double>(expect)) < 1e-12);
    }

    CHECK_THROWS_AS(head_distribution(m, 0.0), ParamError);
}

TEST_CASE("w1 closed form fixed points and metric properties") {
    CHECK(w1_distance(Tensor::row({0.2, 0.3, 0.5}), Tensor::row({0.2, 0.3, 0.5})) == 0.0);
    CHECK(w1_distance(Tensor::row({1, 0, 0}), Tensor::row({0, 0, 1})) ==
          doctest::Approx(2.0).epsilon(1e-15));
    CHECK(w1_distance(Tensor::row({0.5, 0.5}), Tensor::row({1, 0})) ==
          doctest::Approx(0.5).epsilon(1e-15));

    CHECK_THROWS_AS(w1_distance(Tensor::row({1, 0}), Tensor::row({1, 0, 0})), ParamError);
    CHECK_THROWS_AS(w1_distance(Tensor::row({0.7, 0.7}), Tensor::row({1, 0})), ParamError);

    Rng rng(11);
    for (int rep = 0; rep < 100; ++rep) {
        const int n = 2 + static_cast<int>(rng.below(7));
        const Tensor a = normalized_random(n, rng);
        const Tensor b = normalized_random(n, rng);
        const Tensor c = normalized_random(n, rng);
        const double ab = w1_distance(a, b);
        const double ba = w1_distance(b, a);
        const double ac = w1_distance(a, c);
        const double cb = w1_distance(c, b);
        CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
        CHECK(ab >= 0.0);
        CHECK(ab <= ac + cb + 1e-12);  // triangle inequality
        CHECK(std::abs(w1_distance(a, a)) <= 1e-12);
    }
}

TEST_CASE("w1 closed form equals the LP transport oracle") {
    Rng rng(13);
    for (int n = 2; n <= 8; ++n) {
        for (int rep = 0; rep < 25; ++rep) {
            const Tensor a = normalized_random(n, rng);
            const Tensor b = normalized_random(n, rng);
            CHECK(std::abs(w1_distance(a, b) - w1_lp(a, b)) < 1e-9);
        }
    }
}

TEST_CASE("score_heads zero drift and perturbation response") {
    auto base = ModelCheckpoint::init_random(tiny_config(), 21);
    FhiConfig cfg;
    cfg.tau = 0.1;

    const HeadScoreTable zero = score_heads(base, base, cfg);
    CHECK(zero.scores.size() == 4);
    for (const HeadScore& s : zero.scores) CHECK(s.score == 0.0);

    FhiConfig cos_cfg = cfg;
    cos_cfg.scorer = HeadScorer::cosine;
    for (const HeadScore& s : score_heads(base, base, cos_cfg).scores)
        CHECK(std::abs(s.score) <= 1e-12);

    // perturbing exactly one head's W_v makes it the unique top score, and
    // doubling the perturbation does not decrease that score
    ModelCheckpoint proxy = base;
    Tensor& wv = proxy.params.at("layer01.head00.wv");
    Tensor bump(wv.shape);
    Rng rng(5);
    for (double& v : bump.data) v = rng.normal(0.0, 0.05);
    for (size_t i = 0; i < wv.data.size(); ++i) wv.data[i] += bump.data[i];

    const HeadScoreTable t1 = score_heads(base, proxy, cfg);
    const HeadId bumped{1, 0};
    for (const HeadScore& s : t1.scores)
        if (!(s.id == bumped)) CHECK(t1.at(bumped) > s.score);

    ModelCheckpoint proxy2 = base;
    Tensor& wv2 = proxy2.params.at("layer01.head00.wv");
    for (size_t i = 0; i < wv2.data.size(); ++i) wv2.data[i] += 2.0 * bump.data[i];
    const HeadScoreTable t2 = score_heads(base, proxy2, cfg);
    CHECK(t2.at(bumped) >= t1.at(bumped));

    auto other = ModelCheckpoint::init_random({4, 8, 128, 16, 64, 256}, 1);
    CHECK_THROWS_AS(score_heads(base, other, cfg), IncompatError);
}

TEST_CASE("grad_norm scorer is exactly zero at a head-level plateau") {
    // zero unembedding: logits are identically zero, so no gradient reaches
    // any upstream tensor and every head score is exactly 0
    auto base = ModelCheckpoint::init_random(tiny_config(), 22);
    Tensor& unembed = base.params.at("unembed");
    std::fill(unembed.data.begin(), unembed.data.end(), 0.0);

    auto pool = generate(TaskKind::mod_add, 20, 0.0, 1);
    FhiConfig cfg;
    cfg.scorer = HeadScorer::grad_norm;
    cfg.n_examples = 10;
    const HeadScoreTable t = score_heads(base, base, cfg, &pool, 7);
    for (const HeadScore& s : t.scores) CHECK(s.score == 0.0);

    // and with a live unembedding the scores are positive
    auto live = ModelCheckpoint::init_random(tiny_config(), 23);
    const HeadScoreTable lt = score_heads(live, live, cfg, &pool, 7);
    for (const HeadScore& s : lt.scores) CHECK(s.score > 0.0);
}

TEST_CASE("select_heads ranking rules") {
    HeadScoreTable table;
    for (int h = 0; h < 784; ++h) table.scores.push_back({{0, h}, 0.0});
    CHECK(select_heads(table, 0.10).heads.size() == 79);

    HeadScoreTable t32;
    for (int h = 0; h < 32; ++h) t32.scores.push_back({{0, h}, static_cast<double>(h % 7)});
    CHECK(select_heads(t32, 0.10).heads.size() == 4);
    CHECK(select_heads(t32, 1.0).heads.size() == 32);

    // rho=1 returns the canonical order under ties
    HeadScoreTable flat;
    for (int l = 0; l < 2; ++l)
        for (int h = 0; h < 2; ++h) flat.scores.push_back({{l, h}, 1.0});
    const HeadSet all = select_heads(flat, 1.0);
    CHECK(all.heads == std::vector<HeadId>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});

    // insertion order does not matter
    HeadScoreTable shuffled = flat;
    std::swap(shuffled.scores[0], shuffled.scores[3]);
    std::swap(shuffled.scores[1], shuffled.scores[2]);
    CHECK(select_heads(shuffled, 0.5).heads == select_heads(flat, 0.5).heads);

    CHECK_THROWS_AS(select_heads(flat, 0.0), ParamError);
    CHECK_THROWS_AS(select_heads(flat, 1.5), ParamError);
}

TEST_CASE("headset overlap") {
    HeadSet a, b;
    a.heads = {{0, 0}, {0, 1}, {1, 0}};
    b.heads = {{1, 0}, {0, 1}, {0, 0}};
    CHECK(headset_overlap(a, a) == doctest::Approx(1.0));
    CHECK(headset_overlap(a, b) == doctest::Approx(1.0));  // order-insensitive

    HeadSet c;
    c.heads = {{2, 0}, {2, 1}, {2, 2}};
    CHECK(headset_overlap(a, c) == doctest::Approx(0.0));

    HeadSet small;
    small.heads = {{0, 0}};
    CHECK_THROWS_AS(headset_overlap(a, small), ParamError);
}

TEST_CASE("proxy training contract") {
    FhiConfig defaults;
    CHECK(defaults.n_steps == 20);
    CHECK(defaults.n_examples == 100);
    CHECK(defaults.tau == 0.1);

    auto base = ModelCheckpoint::init_random(tiny_config(), 30);
    auto pool = generate(TaskKind::mod_add, 40, 0.0, 31);
    FhiConfig cfg;
    cfg.n_examples = 12;
    cfg.n_steps = 2;
    TrainConfig opt;
    opt.lr = 1e-3;

    AerLedger ledger;
    const ModelCheckpoint p1 = train_proxy(base, pool, cfg, opt, 5, &ledger);
    const ModelCheckpoint p2 = train_proxy(base, pool, cfg, opt, 5);
    CHECK(p1.content_hash() == p2.content_hash());
    CHECK(p1.content_hash() != base.content_hash());
    CHECK(ledger.t_sel() > 0.0);
    CHECK(ledger.records().size() == 1);
    CHECK(ledger.records()[0].phase == Phase::proxy_train);

    std::vector<Example> small(pool.begin(), pool.begin() + 5);
    CHECK_THROWS_AS(train_proxy(base, small, cfg, opt, 5), ParamError);

    FhiConfig bad = cfg;
    bad.n_steps = 0;
    CHECK_THROWS_AS(train_proxy(base, pool, bad, opt, 5), ParamError);
}

TEST_CASE("score table persistence and csv grid") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "p2d_fhi_test";
    fs::create_directories(dir);

    auto base = ModelCheckpoint::init_random(tiny_config(), 40);
    ModelCheckpoint proxy = base;
    proxy.params.at("layer00.head01.wv").data[3] += 0.1;
    FhiConfig cfg;
    const HeadScoreTable table = score_heads(base, proxy, cfg);
    save_score_table(dir / "scores.json", table);
    const HeadScoreTable loaded = load_score_table(dir / "scores.json");
    CHECK(loaded.content_hash() == table.content_hash());

    const HeadSet set = select_heads(table, 0.5);
    save_headset(dir / "headset.json", set);
    const HeadSet lset = load_headset(dir / "headset.json");
    CHECK(lset.heads == set.heads);
    CHECK(lset.rho_p == set.rho_p);

    save_score_grid_csv(dir / "grid.csv", table, base.config);
    CHECK(fs::file_size(dir / "grid.csv") > 0);
    fs::remove_all(dir);
}
