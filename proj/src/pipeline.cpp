#include "p2d/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"
#include "p2d/errors.hpp"
#include "p2d/hash.hpp"
#include "p2d/rng.hpp"

namespace p2d {

namespace {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// --- Pretraining stream ------------------------------------------------------

// Multi-example context: instruction followed by several rendered examples,
// loss on every output span (kv contexts score only repeat occurrences, which
// is where the in-context lookup signal lives).
TokenizedSample stitch_context(const std::string& instruction,
                               const std::vector<Example>& examples,
                               const std::vector<bool>& score_flags) {
    TokenizedSample s;
    s.tokens = tok::encode(instruction + "|");
    s.targets.assign(s.tokens.size(), -1);
    for (size_t i = 0; i < examples.size(); ++i) {
        const Example& e = examples[i];
        const std::vector<int> prompt = tok::encode(e.input + "=");
        const std::vector<int> answer = tok::encode(e.output + "#");
        for (int t : prompt) {
            s.tokens.push_back(t);
            s.targets.push_back(-1);
        }
        const int ans_begin = static_cast<int>(s.tokens.size());
        for (int t : answer) {
            s.tokens.push_back(t);
            s.targets.push_back(-1);
        }
        if (score_flags[i]) {
            if (s.answer_begin == 0) {
                s.answer_begin = ans_begin;
                s.answer_len = static_cast<int>(answer.size()) - 1;
            }
            for (int t = ans_begin; t < static_cast<int>(s.tokens.size()); ++t)
                s.targets[static_cast<size_t>(t) - 1] = s.tokens[static_cast<size_t>(t)];
        }
    }
    return s;
}

TokenizedSample pretrain_sample_mod_add(Rng& rng) {
    const int count = 1 + static_cast<int>(rng.below(5));
    std::vector<Example> examples;
    std::vector<bool> score;
    for (int i = 0; i < count; ++i) {
        examples.push_back(sample_mod_add(rng, i));
        score.push_back(true);
    }
    return stitch_context("addmod", examples, score);
}

TokenizedSample pretrain_sample_copy_reverse(Rng& rng) {
    const int count = 1 + static_cast<int>(rng.below(5));
    std::vector<Example> examples;
    std::vector<bool> score;
    for (int i = 0; i < count; ++i) {
        examples.push_back(sample_copy_reverse(rng, i));
        score.push_back(true);
    }
    return stitch_context("reverse", examples, score);
}

TokenizedSample pretrain_sample_kv(Rng& rng) {
    // Fresh codebook every context: the value of a key is only learnable by
    // reading an earlier occurrence, which is what trains in-context recall.
    const std::string symbols = kv_value_symbols();
    const int n_keys = 2 + static_cast<int>(rng.below(3));  // 2..4 keys
    std::vector<std::string> keys;
    std::vector<std::string> values;
    std::set<std::string> seen;
    while (static_cast<int>(keys.size()) < n_keys) {
        std::string k;
        k.push_back(static_cast<char>('a' + rng.below(26)));
        k.push_back(static_cast<char>('a' + rng.below(26)));
        if (!seen.insert(k).second) continue;
        keys.push_back(k);
        values.push_back(std::string(1, symbols[rng.below(symbols.size())]));
    }
    const int n_pairs = n_keys + 2 + static_cast<int>(rng.below(3));  // guarantees repeats
    std::vector<Example> examples;
    std::vector<bool> score;
    std::set<size_t> shown;
    for (int i = 0; i < n_pairs; ++i) {
        size_t k;
        if (i < n_keys) {
            k = static_cast<size_t>(i);  // first pass introduces every key
        } else {
            k = static_cast<size_t>(rng.below(keys.size()));
        }
        Example e;
        e.instruction = "recall";
        e.input = keys[k];
        e.output = values[k];
        e.meta = {"kv_recall", false, i};
        examples.push_back(std::move(e));
        score.push_back(shown.count(k) > 0);
        shown.insert(k);
    }
    return stitch_context("recall", examples, score);
}

}  // namespace

void PretrainSpec::validate() const {
    if (steps <= 0 || batch <= 0 || lr <= 0.0)
        throw ParamError("pretrain spec fields must be positive");
    if (mix.empty()) throw ParamError("pretrain mix is empty");
    double total = 0.0;
    for (const auto& [kind, w] : mix) {
        task_kind_from(kind);
        if (w < 0.0) throw ParamError("pretrain mix weights must be >= 0");
        total += w;
    }
    if (total <= 0.0) throw ParamError("pretrain mix weights sum to zero");
}

ModelCheckpoint pretrain_base(const PretrainSpec& spec, const ModelConfig& cfg) {
    spec.validate();
    cfg.validate();
    ModelCheckpoint model = ModelCheckpoint::init_random(cfg, derive_seed(spec.seed, 10));

    double total = 0.0;
    for (const auto& [kind, w] : spec.mix) total += w;

    Rng rng(derive_seed(spec.seed, 11));
    const int64_t n_samples = static_cast<int64_t>(spec.steps) * spec.batch;
    std::vector<TokenizedSample> samples;
    samples.reserve(static_cast<size_t>(n_samples));
    for (int64_t i = 0; i < n_samples; ++i) {
        double pick = rng.real01() * total;
        std::string kind = spec.mix.rbegin()->first;
        for (const auto& [name, w] : spec.mix) {
            if (pick < w) {
                kind = name;
                break;
            }
            pick -= w;
        }
        switch (task_kind_from(kind)) {
            case TaskKind::mod_add: samples.push_back(pretrain_sample_mod_add(rng)); break;
            case TaskKind::kv_recall: samples.push_back(pretrain_sample_kv(rng)); break;
            case TaskKind::copy_reverse:
                samples.push_back(pretrain_sample_copy_reverse(rng));
                break;
        }
    }

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = spec.batch;
    tc.lr = spec.lr;
    tc.seed = derive_seed(spec.seed, 12);
    const SparseMask full = build_mask_full(cfg);
    return masked_train_samples(model, samples, full, tc);
}

// --- Config serialization ------------------------------------------------------

std::string PipelineConfig::to_json() const {
    ordered_json j;
    j["preset"] = preset;
    j["model"] = {{"n_layers", model.n_layers},     {"n_heads", model.n_heads},
                  {"d_model", model.d_model},       {"d_head", model.d_head},
                  {"vocab_size", model.vocab_size}, {"max_context", model.max_context}};
    j["corpus"] = {{"task", task}, {"pool_size", pool_size}, {"corruption", corruption}};
    ordered_json mix;
    for (const auto& [kind, w] : pretrain.mix) mix[kind] = w;
    j["pretrain"] = {{"steps", pretrain.steps},
                     {"batch", pretrain.batch},
                     {"lr", pretrain.lr},
                     {"seed", pretrain.seed},
                     {"mix", mix}};
    j["stages"] = {
        {"selection", selection}, {"mask", mask}, {"rho_p", rho_p}, {"rho_d", rho_d}};
    j["fhi"] = {{"n_examples", fhi.n_examples},
                {"n_steps", fhi.n_steps},
                {"tau", fhi.tau},
                {"scorer", scorer_name(fhi.scorer)}};
    j["probe"] = {{"n_demos", probe.n_demos},
                  {"n_queries", probe.n_queries},
                  {"min_appearances", probe.min_appearances}};
    j["train"] = {{"epochs", train.epochs},
                  {"batch_size", train.batch_size},
                  {"lr", train.lr},
                  {"beta1", train.beta1},
                  {"beta2", train.beta2},
                  {"weight_decay", train.weight_decay},
                  {"warmup_frac", train.warmup_frac},
                  {"cosine_floor", train.cosine_floor}};
    j["run_seed"] = run_seed;
    return j.dump(2);
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
    ordered_json j = ordered_json::parse(text);
    PipelineConfig c;
    c.preset = j.value("preset", "custom");
    if (j.contains("model")) {
        const auto& m = j["model"];
        c.model.n_layers = m.value("n_layers", c.model.n_layers);
        c.model.n_heads = m.value("n_heads", c.model.n_heads);
        c.model.d_model = m.value("d_model", c.model.d_model);
        c.model.d_head = m.value("d_head", c.model.d_head);
        c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
        c.model.max_context = m.value("max_context", c.model.max_context);
    }
    if (j.contains("corpus")) {
        const auto& g = j["corpus"];
        c.task = g.value("task", c.task);
        c.pool_size = g.value("pool_size", c.pool_size);
        c.corruption = g.value("corruption", c.corruption);
    }
    if (j.contains("pretrain")) {
        const auto& p = j["pretrain"];
        c.pretrain.steps = p.value("steps", c.pretrain.steps);
        c.pretrain.batch = p.value("batch", c.pretrain.batch);
        c.pretrain.lr = p.value("lr", c.pretrain.lr);
        c.pretrain.seed = p.value("seed", c.pretrain.seed);
        if (p.contains("mix")) {
            c.pretrain.mix.clear();
            for (const auto& [kind, w] : p["mix"].items())
                c.pretrain.mix[kind] = w.get<double>();
        }
    }
    if (j.contains("stages")) {
        const auto& s = j["stages"];
        c.selection = s.value("selection", c.selection);
        c.mask = s.value("mask", c.mask);
        c.rho_p = s.value("rho_p", c.rho_p);
        c.rho_d = s.value("rho_d", c.rho_d);
    }
    if (j.contains("fhi")) {
        const auto& f = j["fhi"];
        c.fhi.n_examples = f.value("n_examples", c.fhi.n_examples);
        c.fhi.n_steps = f.value("n_steps", c.fhi.n_steps);
        c.fhi.tau = f.value("tau", c.fhi.tau);
        c.fhi.scorer = scorer_from(f.value("scorer", std::string("w1")));
    }
    if (j.contains("probe")) {
        const auto& p = j["probe"];
        c.probe.n_demos = p.value("n_demos", c.probe.n_demos);
        c.probe.n_queries = p.value("n_queries", c.probe.n_queries);
        c.probe.min_appearances = p.value("min_appearances", c.probe.min_appearances);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        c.train.epochs = t.value("epochs", c.train.epochs);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.lr = t.value("lr", c.train.lr);
        c.train.beta1 = t.value("beta1", c.train.beta1);
        c.train.beta2 = t.value("beta2", c.train.beta2);
        c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
        c.train.warmup_frac = t.value("warmup_frac", c.train.warmup_frac);
        c.train.cosine_floor = t.value("cosine_floor", c.train.cosine_floor);
    }
    c.run_seed = j.value("run_seed", c.run_seed);
    return c;
}

void PipelineConfig::validate() const {
    model.validate();
    pretrain.validate();
    fhi.validate();
    task_kind_from(task);
    for (const std::string* s : {&selection, &mask})
        if (*s != "p2d" && *s != "random" && *s != "full")
            throw ParamError("stage mode must be p2d|random|full, got '" + *s + "'");
    if (rho_p <= 0.0 || rho_p > 1.0 || rho_d <= 0.0 || rho_d > 1.0)
        throw ParamError("rho_p and rho_d must be in (0,1]");
    if (pool_size < 10) throw ParamError("pool_size must be >= 10");
    if (corruption < 0.0 || corruption >= 1.0) throw ParamError("corruption must be in [0,1)");
}

PipelineConfig preset_config(const std::string& name, uint64_t seed) {
    PipelineConfig c;
    c.preset = name;
    c.run_seed = seed;
    c.train.lr = 1e-3;  // toy-width learning rate; spec default 2e-5 is for the
                        // paper-scale recipe and is overridable everywhere
    if (name == "full-sft") {
        c.selection = "full";
        c.mask = "full";
        c.rho_d = 1.0;
        c.rho_p = 1.0;
    } else if (name == "p2d-10-10") {
        c.selection = "p2d";
        c.mask = "p2d";
    } else if (name == "random-random") {
        c.selection = "random";
        c.mask = "random";
    } else if (name == "p2d-denoise") {
        c.task = "kv_recall";
        c.pool_size = 300;
        c.corruption = 0.3;
        c.selection = "p2d";
        c.mask = "p2d";
        c.probe.min_appearances = 16;
    } else if (name == "p2d-mini") {
        c.task = "mod_add";
        c.pool_size = 240;
        c.corruption = 0.3;
        c.selection = "p2d";
        c.mask = "p2d";
        c.pretrain.steps = 60;
        c.pretrain.batch = 8;
        c.train.epochs = 1;
    } else {
        throw ParamError("unknown preset '" + name + "'");
    }
    return c;
}

std::vector<std::string> known_presets() {
    return {"full-sft", "p2d-10-10", "random-random", "p2d-denoise", "p2d-mini"};
}

// --- Pipeline ------------------------------------------------------------------

RunResult run_pipeline(const PipelineConfig& cfg, const fs::path& out_dir,
                       const std::optional<fs::path>& base_ckpt,
                       const std::optional<fs::path>& reference_dir) {
    cfg.validate();
    if (fs::exists(out_dir) && !fs::is_empty(out_dir))
        throw ParamError("run directory " + out_dir.string() +
                         " already exists; runs are append-only");
    fs::create_directories(out_dir);

    RunResult result;
    result.dir = out_dir;
    AerLedger ledger;

    // corpus
    const uint64_t gen_seed = derive_seed(cfg.run_seed, 1);
    const uint64_t split_seed = derive_seed(cfg.run_seed, 2);
    const std::vector<Example> pool =
        generate(task_kind_from(cfg.task), cfg.pool_size, cfg.corruption, gen_seed);
    const auto [train_ids, test_ids] = split_pool(pool, split_seed);
    save_corpus_jsonl(out_dir / "corpus.jsonl", pool);
    CorpusManifest cm;
    cm.kind = cfg.task;
    cm.pool_size = cfg.pool_size;
    cm.corruption_rate = cfg.corruption;
    cm.generator_seed = gen_seed;
    cm.split_seed = split_seed;
    cm.train_ids = train_ids;
    cm.test_ids = test_ids;
    save_manifest(out_dir / "corpus_manifest.json", cm);
    result.artifact_hashes["corpus"] = corpus_hash(pool);

    // base model (cost shared by every arm; outside the AER terms)
    ModelCheckpoint base = base_ckpt ? load_checkpoint(*base_ckpt)
                                     : pretrain_base(cfg.pretrain, cfg.model);
    if (!(base.config == cfg.model))
        throw IncompatError("base checkpoint config does not match pipeline config");
    save_checkpoint(out_dir / "base.ckpt", base);
    result.artifact_hashes["base"] = base.content_hash();

    std::vector<Example> train_pool;
    train_pool.reserve(train_ids.size());
    for (int64_t id : train_ids) train_pool.push_back(pool[static_cast<size_t>(id)]);

    // Stage I: head identification (needed when either stage uses p2d heads)
    std::optional<HeadSet> headset;
    if (cfg.selection == "p2d" || cfg.mask == "p2d") {
        const uint64_t fhi_seed = derive_seed(cfg.run_seed, 3);
        const ModelCheckpoint proxy =
            train_proxy(base, train_pool, cfg.fhi, cfg.train, fhi_seed, &ledger);
        save_checkpoint(out_dir / "proxy.ckpt", proxy);
        result.artifact_hashes["proxy"] = proxy.content_hash();
        const HeadScoreTable table =
            score_heads(base, proxy, cfg.fhi, &train_pool, fhi_seed, &ledger);
        save_score_table(out_dir / "head_scores.json", table);
        save_score_grid_csv(out_dir / "head_scores.csv", table, cfg.model);
        headset = select_heads(table, cfg.rho_p);
        save_headset(out_dir / "headset.json", *headset);
        result.artifact_hashes["headset"] = headset->content_hash();
    }

    // Stage II: data selection (every mode emits the length-bias audit)
    std::vector<int64_t> selected;
    {
        ProbeConfig probe = cfg.probe;
        probe.rho_d = cfg.rho_d;
        probe.seed = derive_seed(cfg.run_seed, 4);
        SelectionReport report;
        if (cfg.selection == "p2d") {
            report = select_data(base, pool, train_ids, *headset, probe, &ledger);
        } else {
            PhaseTimer timer;
            const int64_t n = static_cast<int64_t>(train_ids.size());
            const int64_t k = std::max<int64_t>(
                1, static_cast<int64_t>(std::ceil(cfg.rho_d * static_cast<double>(n))));
            std::vector<int64_t> picked;
            if (cfg.selection == "random") {
                Rng rng(derive_seed(cfg.run_seed, 6));
                for (int64_t i : rng.choose(n, k))
                    picked.push_back(train_ids[static_cast<size_t>(i)]);
                std::sort(picked.begin(), picked.end());
            } else {
                picked = train_ids;
            }
            report.selected = picked;
            for (int64_t id : picked) report.final_scores.push_back({id, 0.0});
            report.pool_stats = length_stats(train_ids, pool);
            report.selected_stats = length_stats(picked, pool);
            int64_t corr_pool = 0, corr_sel = 0;
            for (int64_t id : train_ids)
                corr_pool += pool[static_cast<size_t>(id)].meta.corrupted ? 1 : 0;
            for (int64_t id : picked)
                corr_sel += pool[static_cast<size_t>(id)].meta.corrupted ? 1 : 0;
            report.corrupted_fraction_pool =
                static_cast<double>(corr_pool) / static_cast<double>(train_ids.size());
            report.corrupted_fraction_selected =
                static_cast<double>(corr_sel) / static_cast<double>(picked.size());
            ledger.record(Phase::data_select, timer.seconds(), "mode=" + cfg.selection);
        }
        SelectionReport* rep = &report;
        save_selection_report(out_dir / "selection.json", *rep, probe);
        save_score_histogram_csv(out_dir / "selection_scores.csv", *rep);
        ordered_json audit;
        audit["pool_mean_tokens"] = rep->pool_stats.mean_tokens;
        audit["pool_mean_words"] = rep->pool_stats.mean_words;
        audit["selected_mean_tokens"] = rep->selected_stats.mean_tokens;
        audit["selected_mean_words"] = rep->selected_stats.mean_words;
        audit["pool_corrupted_fraction"] = rep->corrupted_fraction_pool;
        audit["selected_corrupted_fraction"] = rep->corrupted_fraction_selected;
        write_text(out_dir / "length_audit.json", audit.dump(2) + "\n");
        selected = rep->selected;
        result.artifact_hashes["selection"] = selection_hash(*rep);
    }

    // Stage III: sparse adaptation
    {
        SparseMask mask;
        if (cfg.mask == "full") {
            mask = build_mask_full(cfg.model);
        } else if (cfg.mask == "p2d") {
            mask = build_mask_p2d(cfg.model, headset->heads, headset->content_hash());
        } else {
            mask = build_mask_random(cfg.model, cfg.rho_p, derive_seed(cfg.run_seed, 7));
        }
        std::vector<Example> train_data;
        train_data.reserve(selected.size());
        for (int64_t id : selected) train_data.push_back(pool[static_cast<size_t>(id)]);
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(cfg.run_seed, 5);
        TrainReport report;
        const ModelCheckpoint trained = masked_train(base, train_data, mask, tc, &report);
        ledger.record(Phase::adapt_train, report.wall_seconds,
                      "mask=" + cfg.mask + " samples=" + std::to_string(train_data.size()));
        save_checkpoint(out_dir / "trained.ckpt", trained);
        result.artifact_hashes["trained"] = trained.content_hash();

        ordered_json tr;
        tr["final_loss"] = report.final_loss;
        tr["epoch_losses"] = report.epoch_losses;
        tr["wall_seconds"] = report.wall_seconds;
        tr["trainable_fraction"] = report.trainable_fraction;
        tr["mask_derivation"] = report.mask_derivation;
        tr["steps"] = report.steps;
        write_text(out_dir / "train_report.json", tr.dump(2) + "\n");

        // evaluation on the clean members of the held-out split
        PhaseTimer timer;
        std::vector<Example> test_clean;
        for (int64_t id : test_ids)
            if (!pool[static_cast<size_t>(id)].meta.corrupted)
                test_clean.push_back(pool[static_cast<size_t>(id)]);
        if (test_clean.empty()) throw ParamError("no clean test examples to evaluate");
        result.base_em = evaluate(base, test_clean);
        result.final_em = evaluate(trained, test_clean);
        ledger.record(Phase::eval, timer.seconds(),
                      "n_test=" + std::to_string(test_clean.size()));

        ordered_json ev;
        ev["base_em"] = result.base_em;
        ev["final_em"] = result.final_em;
        ev["n_test_clean"] = test_clean.size();
        write_text(out_dir / "eval.json", ev.dump(2) + "\n");
    }

    ledger.save(out_dir / "ledger.json");

    if (reference_dir) {
        const AerLedger ref = AerLedger::load(*reference_dir / "ledger.json");
        const double t_fft = ref.t_train();
        const AerReport aer = compute_aer(ledger, t_fft);
        result.aer = aer;
        result.has_aer = true;
        ordered_json aj;
        aj["aer"] = aer.aer;
        aj["decomposition"] = aer.decomposition;
        aj["t_sel"] = aer.t_sel;
        aj["t_train"] = aer.t_train;
        aj["t_fft"] = aer.t_fft;
        write_text(out_dir / "aer.json", aj.dump(2) + "\n");
    }

    ordered_json manifest;
    manifest["tool_version"] = kToolVersion;
    manifest["preset"] = cfg.preset;
    manifest["config"] = ordered_json::parse(cfg.to_json());
    ordered_json hashes;
    for (const auto& [k, v] : result.artifact_hashes) hashes[k] = v;
    manifest["artifact_hashes"] = hashes;
    manifest["final_em"] = result.final_em;
    manifest["base_em"] = result.base_em;
    write_text(out_dir / "run_manifest.json", manifest.dump(2) + "\n");
    return result;
}

RunResult rerun_from_manifest(const fs::path& manifest_path, const fs::path& out_dir) {
    ordered_json manifest = ordered_json::parse(read_text(manifest_path));
    PipelineConfig cfg = PipelineConfig::from_json(manifest.at("config").dump());
    return run_pipeline(cfg, out_dir);
}

std::vector<MatrixRow> experiment_matrix(const std::vector<std::string>& presets,
                                         const std::vector<uint64_t>& seeds,
                                         const fs::path& out_dir,
                                         const std::optional<fs::path>& base_ckpt) {
    if (presets.empty()) throw ParamError("experiment matrix needs at least one preset");
    if (seeds.empty()) throw ParamError("experiment matrix needs at least one seed");
    if (std::find(presets.begin(), presets.end(), "full-sft") == presets.end())
        throw ParamError("experiment matrix needs the full-sft reference preset");

    // All presets must describe the same corpus, backbone and model.
    const PipelineConfig first = preset_config(presets.front(), seeds.front());
    for (const std::string& name : presets) {
        const PipelineConfig c = preset_config(name, seeds.front());
        if (c.task != first.task || c.pool_size != first.pool_size ||
            c.corruption != first.corruption || !(c.model == first.model))
            throw IncompatError("preset '" + name + "' uses a different corpus or model");
    }

    fs::create_directories(out_dir);
    fs::path base_path;
    if (base_ckpt) {
        base_path = *base_ckpt;
    } else {
        base_path = out_dir / "base.ckpt";
        if (!fs::exists(base_path))
            save_checkpoint(base_path, pretrain_base(first.pretrain, first.model));
    }

    std::vector<MatrixRow> rows;
    for (const std::string& name : presets) rows.push_back({name, {}, {}, 0.0, 0.0});

    for (uint64_t seed : seeds) {
        const fs::path ref_dir = out_dir / ("full-sft-s" + std::to_string(seed));
        // reference first so every other arm can normalize against it
        std::vector<std::string> ordered{"full-sft"};
        for (const std::string& name : presets)
            if (name != "full-sft") ordered.push_back(name);
        for (const std::string& name : ordered) {
            PipelineConfig cfg = preset_config(name, seed);
            const fs::path dir = out_dir / (name + "-s" + std::to_string(seed));
            const std::optional<fs::path> ref =
                name == "full-sft" ? std::nullopt : std::optional<fs::path>(ref_dir);
            const RunResult r = run_pipeline(cfg, dir, base_path, ref);
            for (MatrixRow& row : rows)
                if (row.preset == name) {
                    row.em.push_back(r.final_em);
                    if (r.has_aer) row.aer.push_back(r.aer.aer);
                }
        }
    }

    for (MatrixRow& row : rows) {
        for (double v : row.em) row.mean_em += v;
        row.mean_em /= static_cast<double>(row.em.size());
        if (!row.aer.empty()) {
            for (double v : row.aer) row.mean_aer += v;
            row.mean_aer /= static_cast<double>(row.aer.size());
        } else {
            row.mean_aer = 1.0;  // the reference leg by definition
        }
    }

    ordered_json table = ordered_json::array();
    std::string csv = "preset,mean_em,mean_aer,per_seed_em,per_seed_aer\n";
    for (const MatrixRow& row : rows) {
        ordered_json j;
        j["preset"] = row.preset;
        j["em"] = row.em;
        j["aer"] = row.aer;
        j["mean_em"] = row.mean_em;
        j["mean_aer"] = row.mean_aer;
        table.push_back(j);
        csv += row.preset + "," + std::to_string(row.mean_em) + "," +
               std::to_string(row.mean_aer) + ",";
        for (size_t i = 0; i < row.em.size(); ++i) csv += (i ? ";" : "") + std::to_string(row.em[i]);
        csv += ",";
        for (size_t i = 0; i < row.aer.size(); ++i)
            csv += (i ? ";" : "") + std::to_string(row.aer[i]);
        csv += "\n";
    }
    write_text(out_dir / "matrix.json", table.dump(2) + "\n");
    write_text(out_dir / "matrix.csv", csv);
    return rows;
}

}  // namespace p2d
