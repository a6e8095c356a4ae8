// Command-line front end for the sparse head-adaptation pipeline.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "p2d/aer.hpp"
#include "p2d/corpus.hpp"
#include "p2d/errors.hpp"
#include "p2d/fhi.hpp"
#include "p2d/model.hpp"
#include "p2d/oracles.hpp"
#include "p2d/pipeline.hpp"
#include "p2d/rng.hpp"
#include "p2d/selector.hpp"
#include "p2d/trainer.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;
constexpr int kExitCheck = 4;

fs::path resolve_out(const std::string& out) {
    fs::path p(out);
    if (p.is_absolute()) return p;
    if (const char* root = std::getenv("P2D_RUN_ROOT")) return fs::path(root) / p;
    return p;
}

std::vector<double> parse_weights(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
}

p2d::Tensor weights_tensor(const std::string& csv) {
    const std::vector<double> w = parse_weights(csv);
    p2d::Tensor t({static_cast<int64_t>(w.size())});
    t.data = w;
    return t;
}

std::vector<p2d::Example> subset_by_ids(const std::vector<p2d::Example>& pool,
                                        const std::vector<int64_t>& ids) {
    std::vector<p2d::Example> out;
    out.reserve(ids.size());
    for (int64_t id : ids) {
        if (id < 0 || id >= static_cast<int64_t>(pool.size()))
            throw p2d::IndexError("sample id " + std::to_string(id) + " outside pool");
        out.push_back(pool[static_cast<size_t>(id)]);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"p2d: task-sensitive head identification, parameter-guided data selection, "
                 "and sparse head adaptation on a toy transformer"};
    app.require_subcommand(1);

    // ---- gen ----------------------------------------------------------------
    auto* gen = app.add_subcommand("gen", "generate a task corpus with 90/10 split manifest");
    std::string gen_kind = "mod_add", gen_out = "corpus.jsonl";
    int64_t gen_n = 1000;
    double gen_corrupt = 0.0;
    uint64_t gen_seed = 42, gen_split_seed = 0;
    gen->add_option("--kind", gen_kind, "mod_add|kv_recall|copy_reverse");
    gen->add_option("--n", gen_n, "pool size");
    gen->add_option("--corrupt", gen_corrupt, "corrupted-label fraction in [0,1)");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--split-seed", gen_split_seed, "split seed (defaults to seed)");
    gen->add_option("--out", gen_out, "corpus output path (.jsonl)");

    // ---- pretrain -------------------------------------------------------------
    auto* pre = app.add_subcommand("pretrain", "train a base model on streamed task contexts");
    int pre_steps = 600, pre_batch = 32;
    double pre_lr = 1e-3;
    uint64_t pre_seed = 7;
    std::string pre_out = "base.ckpt", pre_mix = "mod_add:0.5,kv_recall:0.3,copy_reverse:0.2";
    pre->add_option("--steps", pre_steps, "optimizer steps");
    pre->add_option("--batch", pre_batch, "contexts per step");
    pre->add_option("--lr", pre_lr, "peak learning rate");
    pre->add_option("--seed", pre_seed, "seed");
    pre->add_option("--mix", pre_mix, "task mix, e.g. mod_add:0.5,kv_recall:0.5");
    pre->add_option("--out", pre_out, "checkpoint output path");

    // ---- fhi ----------------------------------------------------------------
    auto* fhi = app.add_subcommand("fhi", "stage I: proxy training and head scoring");
    std::string fhi_base, fhi_pool, fhi_out = "fhi_out", fhi_scorer = "w1";
    double fhi_rho = 0.10, fhi_tau = 0.1, fhi_lr = 1e-3;
    int fhi_steps = 20, fhi_examples = 100;
    uint64_t fhi_seed = 42;
    fhi->add_option("--base", fhi_base, "base checkpoint")->required();
    fhi->add_option("--pool", fhi_pool, "corpus jsonl")->required();
    fhi->add_option("--rho-p", fhi_rho, "head fraction");
    fhi->add_option("--scorer", fhi_scorer, "w1|cosine|grad_norm");
    fhi->add_option("--tau", fhi_tau, "softmax temperature");
    fhi->add_option("--steps", fhi_steps, "proxy steps");
    fhi->add_option("--examples", fhi_examples, "proxy examples");
    fhi->add_option("--lr", fhi_lr, "proxy learning rate");
    fhi->add_option("--seed", fhi_seed, "seed");
    fhi->add_option("--out", fhi_out, "output directory");

    // ---- select ---------------------------------------------------------------
    auto* sel = app.add_subcommand("select", "stage II: parameter-guided data selection");
    std::string sel_model, sel_headset, sel_pool, sel_out = "select_out";
    double sel_rho = 0.10;
    uint64_t sel_seed = 42;
    int sel_demos = 5, sel_queries = 3, sel_minapp = 3;
    sel->add_option("--model", sel_model, "probing checkpoint")->required();
    sel->add_option("--headset", sel_headset, "headset json")->required();
    sel->add_option("--pool", sel_pool, "corpus jsonl")->required();
    sel->add_option("--rho-d", sel_rho, "data fraction");
    sel->add_option("--seed", sel_seed, "seed");
    sel->add_option("--demos", sel_demos, "demonstrations per iteration");
    sel->add_option("--queries", sel_queries, "queries per iteration");
    sel->add_option("--min-appearances", sel_minapp, "demo coverage per sample");
    sel->add_option("--out", sel_out, "output directory");

    // ---- train ----------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "stage III: gradient-masked adaptation");
    std::string tr_model, tr_data, tr_mask = "full", tr_headset, tr_ids, tr_out = "train_out";
    double tr_rho = 0.10, tr_lr = 2e-5;
    int tr_epochs = 3, tr_batch = 16;
    uint64_t tr_seed = 42;
    tr->add_option("--model", tr_model, "starting checkpoint")->required();
    tr->add_option("--data", tr_data, "corpus jsonl")->required();
    tr->add_option("--ids", tr_ids, "selection json restricting training ids");
    tr->add_option("--mask", tr_mask, "full|random|p2d");
    tr->add_option("--headset", tr_headset, "headset json (p2d mask)");
    tr->add_option("--rho-p", tr_rho, "head fraction (random mask)");
    tr->add_option("--epochs", tr_epochs, "epochs");
    tr->add_option("--batch", tr_batch, "batch size");
    tr->add_option("--lr", tr_lr, "peak learning rate");
    tr->add_option("--seed", tr_seed, "seed");
    tr->add_option("--out", tr_out, "output directory");

    // ---- eval -----------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "exact-match evaluation");
    std::string ev_model, ev_data;
    bool ev_clean = false;
    double ev_expect_min = -1.0;
    ev->add_option("--model", ev_model, "checkpoint")->required();
    ev->add_option("--data", ev_data, "corpus jsonl")->required();
    ev->add_flag("--clean-only", ev_clean, "skip corrupted-label examples");
    ev->add_option("--expect-min", ev_expect_min, "exit 4 when score is below this");

    // ---- oracle ---------------------------------------------------------------
    auto* orc = app.add_subcommand("oracle", "brute-force references");
    orc->require_subcommand(1);
    auto* orc_heads = orc->add_subcommand("heads", "head-ablation ranking");
    std::string oh_model, oh_data, oh_out = "ablation.json";
    double oh_rho = 0.10;
    orc_heads->add_option("--model", oh_model)->required();
    orc_heads->add_option("--data", oh_data)->required();
    orc_heads->add_option("--rho-p", oh_rho);
    orc_heads->add_option("--out", oh_out);
    auto* orc_data = orc->add_subcommand("data", "leave-one-out influence");
    std::string od_model, od_data, od_eval, od_out = "influence.json";
    int od_epochs = 1, od_batch = 8;
    double od_lr = 1e-3;
    uint64_t od_seed = 42;
    orc_data->add_option("--model", od_model)->required();
    orc_data->add_option("--data", od_data)->required();
    orc_data->add_option("--eval", od_eval)->required();
    orc_data->add_option("--epochs", od_epochs);
    orc_data->add_option("--batch", od_batch);
    orc_data->add_option("--lr", od_lr);
    orc_data->add_option("--seed", od_seed);
    orc_data->add_option("--out", od_out);
    auto* orc_w1 = orc->add_subcommand("w1", "LP transport distance");
    std::string ow_p, ow_q;
    orc_w1->add_option("--p", ow_p, "comma-separated probabilities")->required();
    orc_w1->add_option("--q", ow_q, "comma-separated probabilities")->required();

    // ---- aer ------------------------------------------------------------------
    auto* aer = app.add_subcommand("aer", "alignment efficiency ratio from run ledgers");
    std::string aer_run, aer_ref;
    double aer_below = -1.0;
    aer->add_option("--run-dir", aer_run, "run directory")->required();
    aer->add_option("--reference-dir", aer_ref, "full-SFT reference run")->required();
    aer->add_option("--check-below", aer_below, "exit 4 unless AER is below this");

    // ---- pipeline ----------------------------------------------------------------
    auto* pipe = app.add_subcommand("pipeline", "run the full three-stage pipeline");
    std::string pp_preset = "p2d-10-10", pp_out = "run", pp_base, pp_ref, pp_config,
                pp_manifest;
    uint64_t pp_seed = 42;
    pipe->add_option("--preset", pp_preset, "full-sft|p2d-10-10|random-random|p2d-denoise|p2d-mini");
    pipe->add_option("--seed", pp_seed, "run seed");
    pipe->add_option("--out", pp_out, "run directory");
    pipe->add_option("--base", pp_base, "base checkpoint (pretrained when omitted)");
    pipe->add_option("--reference", pp_ref, "full-SFT reference run directory");
    pipe->add_option("--config", pp_config, "pipeline config json (overrides preset)");
    pipe->add_option("--from-manifest", pp_manifest, "replay a run manifest");

    // ---- matrix --------------------------------------------------------------
    auto* mat = app.add_subcommand("matrix", "preset x seed comparison table");
    std::string mx_presets = "full-sft,random-random,p2d-10-10", mx_seeds = "42,43,44",
                mx_out = "matrix", mx_base;
    mat->add_option("--presets", mx_presets, "comma-separated presets (full-sft required)");
    mat->add_option("--seeds", mx_seeds, "comma-separated seeds");
    mat->add_option("--out", mx_out, "output directory");
    mat->add_option("--base", mx_base, "base checkpoint shared by all runs");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const fs::path out = resolve_out(gen_out);
            const auto pool = p2d::generate(p2d::task_kind_from(gen_kind), gen_n, gen_corrupt,
                                            gen_seed);
            if (gen_split_seed == 0) gen_split_seed = gen_seed;
            const auto [train_ids, test_ids] = p2d::split_pool(pool, gen_split_seed);
            p2d::save_corpus_jsonl(out, pool);
            p2d::CorpusManifest m;
            m.kind = gen_kind;
            m.pool_size = gen_n;
            m.corruption_rate = gen_corrupt;
            m.generator_seed = gen_seed;
            m.split_seed = gen_split_seed;
            m.train_ids = train_ids;
            m.test_ids = test_ids;
            p2d::save_manifest(out.string() + ".manifest.json", m);
            std::cout << "wrote " << out.string() << " (" << pool.size() << " examples, hash "
                      << p2d::corpus_hash(pool) << ")\n";
        } else if (*pre) {
            p2d::PretrainSpec spec;
            spec.steps = pre_steps;
            spec.batch = pre_batch;
            spec.lr = pre_lr;
            spec.seed = pre_seed;
            spec.mix.clear();
            std::stringstream ss(pre_mix);
            std::string item;
            while (std::getline(ss, item, ',')) {
                const size_t colon = item.find(':');
                if (colon == std::string::npos)
                    throw p2d::ParamError("mix entries look like kind:weight");
                spec.mix[item.substr(0, colon)] = std::stod(item.substr(colon + 1));
            }
            const p2d::ModelCheckpoint base = p2d::pretrain_base(spec, p2d::ModelConfig{});
            const fs::path out = resolve_out(pre_out);
            p2d::save_checkpoint(out, base);
            std::cout << "wrote " << out.string() << " (hash " << base.content_hash() << ")\n";
        } else if (*fhi) {
            const auto base = p2d::load_checkpoint(fhi_base);
            const auto pool = p2d::load_corpus_jsonl(fhi_pool);
            const auto manifest = p2d::load_manifest(fhi_pool + ".manifest.json");
            const auto train_pool = subset_by_ids(pool, manifest.train_ids);
            p2d::FhiConfig cfg;
            cfg.n_steps = fhi_steps;
            cfg.n_examples = fhi_examples;
            cfg.tau = fhi_tau;
            cfg.scorer = p2d::scorer_from(fhi_scorer);
            p2d::TrainConfig opt;
            opt.lr = fhi_lr;
            const fs::path out = resolve_out(fhi_out);
            fs::create_directories(out);
            p2d::AerLedger ledger;
            const auto proxy = p2d::train_proxy(base, train_pool, cfg, opt, fhi_seed, &ledger);
            p2d::save_checkpoint(out / "proxy.ckpt", proxy);
            const auto table = p2d::score_heads(base, proxy, cfg, &train_pool, fhi_seed, &ledger);
            p2d::save_score_table(out / "head_scores.json", table);
            p2d::save_score_grid_csv(out / "head_scores.csv", table, base.config);
            const auto set = p2d::select_heads(table, fhi_rho);
            p2d::save_headset(out / "headset.json", set);
            ledger.save(out / "ledger.json");
            std::cout << "selected " << set.heads.size() << " of " << table.scores.size()
                      << " heads -> " << (out / "headset.json").string() << "\n";
        } else if (*sel) {
            const auto model = p2d::load_checkpoint(sel_model);
            const auto headset = p2d::load_headset(sel_headset);
            const auto pool = p2d::load_corpus_jsonl(sel_pool);
            const auto manifest = p2d::load_manifest(sel_pool + ".manifest.json");
            p2d::ProbeConfig cfg;
            cfg.n_demos = sel_demos;
            cfg.n_queries = sel_queries;
            cfg.min_appearances = sel_minapp;
            cfg.rho_d = sel_rho;
            cfg.seed = sel_seed;
            const fs::path out = resolve_out(sel_out);
            fs::create_directories(out);
            p2d::AerLedger ledger;
            const auto report =
                p2d::select_data(model, pool, manifest.train_ids, headset, cfg, &ledger);
            p2d::save_selection_report(out / "selection.json", report, cfg);
            p2d::save_score_histogram_csv(out / "selection_scores.csv", report);
            ledger.save(out / "ledger.json");
            std::cout << "selected " << report.selected.size() << " of "
                      << manifest.train_ids.size() << " samples (corrupted fraction "
                      << report.corrupted_fraction_selected << " vs pool "
                      << report.corrupted_fraction_pool << ")\n";
        } else if (*tr) {
            const auto model = p2d::load_checkpoint(tr_model);
            const auto pool = p2d::load_corpus_jsonl(tr_data);
            std::vector<p2d::Example> data = pool;
            if (!tr_ids.empty()) {
                std::ifstream in(tr_ids);
                if (!in) throw p2d::IoError("cannot open " + tr_ids);
                const ordered_json j = ordered_json::parse(in);
                data = subset_by_ids(pool, j.at("selected").get<std::vector<int64_t>>());
            }
            p2d::SparseMask mask;
            if (tr_mask == "full") {
                mask = p2d::build_mask_full(model.config);
            } else if (tr_mask == "random") {
                mask = p2d::build_mask_random(model.config, tr_rho, tr_seed);
            } else if (tr_mask == "p2d") {
                if (tr_headset.empty())
                    throw p2d::ParamError("p2d mask needs --headset");
                const auto hs = p2d::load_headset(tr_headset);
                mask = p2d::build_mask_p2d(model.config, hs.heads, hs.content_hash());
            } else {
                throw p2d::ParamError("mask must be full|random|p2d");
            }
            p2d::TrainConfig cfg;
            cfg.epochs = tr_epochs;
            cfg.batch_size = tr_batch;
            cfg.lr = tr_lr;
            cfg.seed = tr_seed;
            const fs::path out = resolve_out(tr_out);
            fs::create_directories(out);
            p2d::TrainReport report;
            const auto trained = p2d::masked_train(model, data, mask, cfg, &report);
            p2d::save_checkpoint(out / "trained.ckpt", trained);
            ordered_json tr_json;
            tr_json["final_loss"] = report.final_loss;
            tr_json["epoch_losses"] = report.epoch_losses;
            tr_json["wall_seconds"] = report.wall_seconds;
            tr_json["trainable_fraction"] = report.trainable_fraction;
            tr_json["mask_derivation"] = report.mask_derivation;
            tr_json["steps"] = report.steps;
            std::ofstream(out / "train_report.json") << tr_json.dump(2) << "\n";
            std::cout << "trained " << data.size() << " samples, final loss "
                      << report.final_loss << ", trainable fraction "
                      << report.trainable_fraction << "\n";
        } else if (*ev) {
            const auto model = p2d::load_checkpoint(ev_model);
            auto pool = p2d::load_corpus_jsonl(ev_data);
            if (ev_clean) {
                std::vector<p2d::Example> clean;
                for (const auto& e : pool)
                    if (!e.meta.corrupted) clean.push_back(e);
                pool = clean;
            }
            const double em = p2d::evaluate(model, pool);
            std::cout << "exact_match " << em << " over " << pool.size() << " examples\n";
            if (ev_expect_min >= 0.0 && em < ev_expect_min) return kExitCheck;
        } else if (*orc_heads) {
            const auto model = p2d::load_checkpoint(oh_model);
            const auto pool = p2d::load_corpus_jsonl(oh_data);
            const auto [table, set] = p2d::ablation_ranking(model, pool, oh_rho);
            ordered_json j;
            j["base_score"] = table.base_score;
            ordered_json arr = ordered_json::array();
            for (const auto& [id, d] : table.delta_p)
                arr.push_back({{"layer", id.layer}, {"head", id.head}, {"delta_p", d}});
            j["delta_p"] = arr;
            ordered_json top = ordered_json::array();
            for (const auto& id : set.heads)
                top.push_back({{"layer", id.layer}, {"head", id.head}});
            j["top_heads"] = top;
            std::ofstream(resolve_out(oh_out)) << j.dump(2) << "\n";
            std::cout << "base score " << table.base_score << ", wrote " << oh_out << "\n";
        } else if (*orc_data) {
            const auto model = p2d::load_checkpoint(od_model);
            const auto data = p2d::load_corpus_jsonl(od_data);
            const auto eval_split = p2d::load_corpus_jsonl(od_eval);
            p2d::TrainConfig cfg;
            cfg.epochs = od_epochs;
            cfg.batch_size = od_batch;
            cfg.lr = od_lr;
            cfg.seed = od_seed;
            const auto table = p2d::loo_influence(model, data, eval_split, cfg);
            ordered_json j;
            j["full_score"] = table.full_score;
            ordered_json arr = ordered_json::array();
            for (const auto& [id, d] : table.delta_p)
                arr.push_back({{"id", id}, {"delta_p", d}});
            j["delta_p"] = arr;
            std::ofstream(resolve_out(od_out)) << j.dump(2) << "\n";
            std::cout << "full score " << table.full_score << ", wrote " << od_out << "\n";
        } else if (*orc_w1) {
            const double d = p2d::w1_lp(weights_tensor(ow_p), weights_tensor(ow_q));
            std::cout << d << "\n";
        } else if (*aer) {
            const auto ledger = p2d::AerLedger::load(fs::path(aer_run) / "ledger.json");
            const auto ref = p2d::AerLedger::load(fs::path(aer_ref) / "ledger.json");
            const auto report = p2d::compute_aer(ledger, ref.t_train());
            std::cout << "AER " << report.decomposition << " (t_sel " << report.t_sel
                      << "s, t_train " << report.t_train << "s, t_fft " << report.t_fft
                      << "s)\n";
            if (aer_below > 0.0 && !(report.aer < aer_below)) return kExitCheck;
        } else if (*pipe) {
            const fs::path out = resolve_out(pp_out);
            p2d::RunResult result;
            if (!pp_manifest.empty()) {
                result = p2d::rerun_from_manifest(pp_manifest, out);
            } else {
                p2d::PipelineConfig cfg;
                if (!pp_config.empty()) {
                    std::ifstream in(pp_config);
                    if (!in) throw p2d::IoError("cannot open " + pp_config);
                    std::string text((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
                    cfg = p2d::PipelineConfig::from_json(text);
                    cfg.run_seed = pp_seed;
                } else {
                    cfg = p2d::preset_config(pp_preset, pp_seed);
                }
                std::optional<fs::path> base =
                    pp_base.empty() ? std::nullopt : std::optional<fs::path>(pp_base);
                std::optional<fs::path> ref =
                    pp_ref.empty() ? std::nullopt : std::optional<fs::path>(pp_ref);
                result = p2d::run_pipeline(cfg, out, base, ref);
            }
            std::cout << "run " << result.dir.string() << ": base EM " << result.base_em
                      << " -> final EM " << result.final_em;
            if (result.has_aer) std::cout << ", AER " << result.aer.decomposition;
            std::cout << "\n";
        } else if (*mat) {
            auto split_csv = [](const std::string& s) {
                std::vector<std::string> out;
                std::stringstream ss(s);
                std::string item;
                while (std::getline(ss, item, ',')) out.push_back(item);
                return out;
            };
            std::vector<uint64_t> seeds;
            for (const std::string& s : split_csv(mx_seeds))
                seeds.push_back(std::stoull(s));
            std::optional<fs::path> base =
                mx_base.empty() ? std::nullopt : std::optional<fs::path>(mx_base);
            const auto rows =
                p2d::experiment_matrix(split_csv(mx_presets), seeds, resolve_out(mx_out), base);
            for (const auto& row : rows) {
                std::cout << row.preset << ": mean EM " << row.mean_em << ", mean AER "
                          << row.mean_aer << " | per-seed EM";
                for (double v : row.em) std::cout << " " << v;
                std::cout << "\n";
            }
        }
        return kExitOk;
    } catch (const p2d::ParamError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const p2d::IncompatError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "stage failure: " << e.what() << "\n";
        return kExitStage;
    }
}
