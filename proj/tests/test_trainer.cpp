#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>

#include "gradcheck.hpp"
#include "p2d/corpus.hpp"
#include "p2d/errors.hpp"
#include "p2d/model.hpp"
#include "p2d/rng.hpp"
#include "p2d/trainer.hpp"

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

TrainConfig fast_train(uint64_t seed) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.seed = seed;
    return cfg;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("mask construction") {
    const ModelConfig cfg = tiny_config();
    const SparseMask full = build_mask_full(cfg);
    for (const auto& [name, ok] : full.allow) CHECK(ok);
    CHECK(full.derivation == "full");

    const std::vector<HeadId> heads{{0, 0}, {1, 1}};
    const SparseMask p2d = build_mask_p2d(cfg, heads, "abcd");
    CHECK(p2d.permitted_tensors() == 6);  // 3 tensors per head
    CHECK(p2d.allows("layer00.head00.wq"));
    CHECK(p2d.allows("layer01.head01.wv"));
    CHECK(!p2d.allows("layer00.head01.wq"));
    CHECK(!p2d.allows("tok_emb"));
    CHECK(!p2d.allows("layer00.attn_out"));
    CHECK(!p2d.allows("layer00.mlp.fc_w"));
    CHECK(p2d.derivation == "p2d:abcd");

    const SparseMask r1 = build_mask_random(cfg, 0.5, 7);
    const SparseMask r2 = build_mask_random(cfg, 0.5, 7);
    CHECK(r1.heads == r2.heads);
    CHECK(r1.heads.size() == 2);  // ceil(0.5 * 4)

    CHECK_THROWS_AS(build_mask_p2d(cfg, {}, ""), ParamError);
    CHECK_THROWS_AS(build_mask_p2d(cfg, {{5, 0}}, ""), IncompatError);
    CHECK_THROWS_AS(build_mask_p2d(cfg, {{0, 0}, {0, 0}}, ""), ParamError);
    CHECK_THROWS_AS(build_mask_random(cfg, 0.0, 1), ParamError);
}

TEST_CASE("whole-model gradient passes finite differences") {
    // one full forward+loss through every layer type
    auto model = ModelCheckpoint::init_random(tiny_config(), 3);
    const TokenizedSample s = render_training_sample(
        {"addmod", "1+2 (mod 53)", "3", {"mod_add", false, 0}});

    GradTape tape;
    ParamNodes params = make_param_leaves(tape, model, [](const std::string&) { return true; });
    GradTape::Node loss =
        tape.cross_entropy(build_logits(tape, model.config, params, s.tokens, nullptr),
                           s.targets);
    tape.backward(loss);

    // spot-check three representative tensors against central differences
    Rng rng(5);
    for (const std::string name :
         {"layer00.head01.wq", "layer01.mlp.fc_w", "unembed"}) {
        const Tensor& g = tape.grad(params.at(name));
        double max_err = 0.0;
        for (int probe = 0; probe < 10; ++probe) {
            const size_t k = static_cast<size_t>(
                rng.below(model.params.at(name).data.size()));
            const double h = 1e-5;
            ModelCheckpoint pert = model;
            pert.params.at(name).data[k] += h;
            GradTape tp(false);
            ParamNodes pp = make_param_leaves(tp, pert, nullptr);
            const double fp = tp.value(tp.cross_entropy(
                build_logits(tp, pert.config, pp, s.tokens, nullptr), s.targets)).data[0];
            pert.params.at(name).data[k] -= 2 * h;
            GradTape tm(false);
            ParamNodes pm = make_param_leaves(tm, pert, nullptr);
            const double fm = tm.value(tm.cross_entropy(
                build_logits(tm, pert.config, pm, s.tokens, nullptr), s.targets)).data[0];
            const double numeric = (fp - fm) / (2 * h);
            const double a = g.data[k];
            max_err = std::max(max_err,
                               std::abs(a - numeric) /
                                   std::max(std::abs(a) + std::abs(numeric), 1e-6));
        }
        INFO(name);
        CHECK(max_err < 1e-4);
    }
}

TEST_CASE("frozen tensors stay byte-identical under the p2d mask") {
    auto model = ModelCheckpoint::init_random(tiny_config(), 4);
    auto data = generate(TaskKind::mod_add, 24, 0.0, 6);
    const SparseMask mask = build_mask_p2d(model.config, {{0, 1}}, "h");

    TrainReport report;
    const ModelCheckpoint trained = masked_train(model, data, mask, fast_train(1), &report);

    int changed = 0;
    for (const auto& [name, before] : model.params) {
        const Tensor& after = trained.params.at(name);
        if (mask.allows(name)) {
            if (!tensors_equal(before, after)) ++changed;
        } else {
            CHECK(tensors_equal(before, after));
        }
    }
    CHECK(changed == 3);  // the selected head moved

    // exact trainable fraction: 3 tensors of 16x8 over the total
    const double expect = static_cast<double>(3 * 16 * 8) /
                          static_cast<double>(model.total_params());
    CHECK(report.trainable_fraction == expect);
    CHECK(report.mask_derivation == "p2d:h");

    const ScopeCheckResult ok = weight_decay_scope_check(model, trained, mask);
    CHECK(ok.pass);

    // negative control: corrupt a frozen tensor and the check names it
    ModelCheckpoint tampered = trained;
    tampered.params.at("tok_emb").data[0] += 1e-9;
    const ScopeCheckResult bad = weight_decay_scope_check(model, tampered, mask);
    CHECK(!bad.pass);
    REQUIRE(bad.offending.size() == 1);
    CHECK(bad.offending[0] == "tok_emb");
}

TEST_CASE("gradient-mask and optimizer-restriction formulations coincide") {
    auto model = ModelCheckpoint::init_random(tiny_config(), 5);
    auto data = generate(TaskKind::mod_add, 20, 0.0, 7);
    const SparseMask mask = build_mask_p2d(model.config, {{0, 0}, {1, 0}}, "h");

    TrainConfig cfg = fast_train(2);
    cfg.epochs = 2;  // 10 steps at batch 4 over 20 samples
    const ModelCheckpoint a =
        masked_train(model, data, mask, cfg, nullptr, MaskFormulation::optimizer_restricted);
    const ModelCheckpoint b =
        masked_train(model, data, mask, cfg, nullptr, MaskFormulation::gradient_masked);
    CHECK(a.content_hash() == b.content_hash());
}

TEST_CASE("training is deterministic and loss decreases") {
    auto model = ModelCheckpoint::init_random(tiny_config(), 6);
    auto data = generate(TaskKind::mod_add, 32, 0.0, 8);
    const SparseMask mask = build_mask_full(model.config);

    TrainConfig cfg = fast_train(3);
    cfg.epochs = 3;
    TrainReport r1, r2;
    const ModelCheckpoint a = masked_train(model, data, mask, cfg, &r1);
    const ModelCheckpoint b = masked_train(model, data, mask, cfg, &r2);
    CHECK(a.content_hash() == b.content_hash());
    CHECK(r1.final_loss == r2.final_loss);
    CHECK(r1.epoch_losses.front() > r1.epoch_losses.back());
    CHECK(r1.wall_seconds > 0.0);
    CHECK(r1.steps == 3 * 8);
}

TEST_CASE("degenerate inputs are rejected") {
    auto model = ModelCheckpoint::init_random(tiny_config(), 7);
    auto data = generate(TaskKind::mod_add, 16, 0.0, 9);
    const SparseMask mask = build_mask_full(model.config);
    CHECK_THROWS_AS(masked_train(model, {}, mask, fast_train(1)), ParamError);

    SparseMask none = mask;
    for (auto& [name, ok] : none.allow) ok = false;
    CHECK_THROWS_AS(masked_train(model, data, none, fast_train(1)), ParamError);
}

TEST_CASE("non-finite loss reports the failing step") {
    auto model = ModelCheckpoint::init_random(tiny_config(), 8);
    auto data = generate(TaskKind::mod_add, 16, 0.0, 10);
    TrainConfig cfg = fast_train(4);
    cfg.lr = 1e18;  // blows up within a couple of steps
    cfg.epochs = 5;
    try {
        masked_train(model, data, build_mask_full(model.config), cfg);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("decay-only update when permitted gradients are exactly zero") {
    // A head with W_v = 0 has exactly zero gradient on W_q and W_k; permit
    // only those two tensors and a single step must change them by the decay
    // factor alone (the Adam term vanishes at zero gradient).
    auto model = ModelCheckpoint::init_random(tiny_config(), 9);
    auto& wv = model.params.at("layer00.head00.wv");
    std::fill(wv.data.begin(), wv.data.end(), 0.0);

    SparseMask mask = build_mask_full(model.config);
    for (auto& [name, ok] : mask.allow) ok = false;
    mask.allow.at("layer00.head00.wq") = true;
    mask.allow.at("layer00.head00.wk") = true;
    mask.derivation = "test";

    auto data = generate(TaskKind::mod_add, 10, 0.0, 11);
    TrainConfig cfg = fast_train(5);
    cfg.epochs = 1;
    cfg.batch_size = 10;  // exactly one step
    const ModelCheckpoint after = masked_train(model, data, mask, cfg);

    const double lr1 = cfg.lr;  // single-step schedule: warmup peak == lr
    for (const std::string name : {"layer00.head00.wq", "layer00.head00.wk"}) {
        const Tensor& before_t = model.params.at(name);
        const Tensor& after_t = after.params.at(name);
        for (size_t i = 0; i < before_t.data.size(); ++i) {
            const double expect = before_t.data[i] - lr1 * cfg.weight_decay * before_t.data[i];
            CHECK(after_t.data[i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
    // everything else frozen
    const ScopeCheckResult scope = weight_decay_scope_check(model, after, mask);
    CHECK(scope.pass);
}

TEST_CASE("full-batch stepper") {
    auto model = ModelCheckpoint::init_random(tiny_config(), 10);
    auto data = generate(TaskKind::mod_add, 10, 0.0, 12);
    std::vector<TokenizedSample> samples;
    for (const Example& e : data) samples.push_back(render_training_sample(e));
    const SparseMask full = build_mask_full(model.config);

    const ModelCheckpoint one = train_full_batch_steps(model, samples, full, fast_train(6), 1);
    CHECK(one.content_hash() != model.content_hash());
    CHECK_THROWS_AS(train_full_batch_steps(model, samples, full, fast_train(6), 0), ParamError);
}
