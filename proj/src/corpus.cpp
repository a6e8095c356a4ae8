#include "p2d/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "p2d/errors.hpp"
#include "p2d/hash.hpp"
#include "p2d/rng.hpp"

namespace p2d {

namespace {

using ordered_json = nlohmann::ordered_json;

std::vector<std::string> make_codebook_keys(Rng& rng, int count) {
    std::set<std::string> seen;
    std::vector<std::string> keys;
    while (static_cast<int>(keys.size()) < count) {
        std::string k;
        k.push_back(static_cast<char>('a' + rng.below(26)));
        k.push_back(static_cast<char>('a' + rng.below(26)));
        if (seen.insert(k).second) keys.push_back(k);
    }
    return keys;
}


void corrupt_example(Example& e, Rng& rng) {
    const std::string truth = e.output;
    if (e.meta.kind == "mod_add") {
        int wrong;
        do {
            wrong = static_cast<int>(rng.below(kModAddModulus));
        } while (std::to_string(wrong) == truth);
        e.output = std::to_string(wrong);
    } else if (e.meta.kind == "kv_recall") {
        const std::string symbols = kv_value_symbols();
        std::string wrong;
        do {
            wrong = std::string(1, symbols[rng.below(symbols.size())]);
        } while (wrong == truth);
        e.output = wrong;
    } else {
        std::string wrong;
        do {
            wrong.clear();
            for (size_t i = 0; i < truth.size(); ++i)
                wrong.push_back(static_cast<char>('a' + rng.below(26)));
        } while (wrong == truth);
        e.output = wrong;
    }
    e.meta.corrupted = true;
}

}  // namespace

// The full alphabet minus the three structural characters, giving an
// effectively uniform 61-way answer space.
std::string kv_value_symbols() {
    std::string out;
    for (char c : tok::alphabet())
        if (c != '=' && c != '#' && c != '|') out.push_back(c);
    return out;
}

Example sample_mod_add(Rng& rng, int64_t id) {
    const int p = kModAddModulus;
    const int a = static_cast<int>(rng.below(p));
    const int b = static_cast<int>(rng.below(p));
    Example e;
    e.instruction = "addmod";
    e.input = std::to_string(a) + "+" + std::to_string(b) + " (mod " + std::to_string(p) + ")";
    e.output = std::to_string((a + b) % p);
    e.meta = {"mod_add", false, id};
    return e;
}

Example sample_copy_reverse(Rng& rng, int64_t id) {
    const int len = 3 + static_cast<int>(rng.below(4));
    std::string s;
    for (int i = 0; i < len; ++i) s.push_back(static_cast<char>('a' + rng.below(26)));
    Example e;
    e.instruction = "reverse";
    e.input = s;
    e.output = std::string(s.rbegin(), s.rend());
    e.meta = {"copy_reverse", false, id};
    return e;
}

std::string task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::mod_add: return "mod_add";
        case TaskKind::kv_recall: return "kv_recall";
        case TaskKind::copy_reverse: return "copy_reverse";
    }
    throw ParamError("unknown task kind");
}

TaskKind task_kind_from(const std::string& name) {
    if (name == "mod_add") return TaskKind::mod_add;
    if (name == "kv_recall") return TaskKind::kv_recall;
    if (name == "copy_reverse") return TaskKind::copy_reverse;
    throw ParamError("unknown task kind '" + name + "'");
}

std::vector<Example> generate(TaskKind kind, int64_t n, double corruption_rate, uint64_t seed) {
    if (corruption_rate < 0.0 || corruption_rate >= 1.0)
        throw ParamError("corruption rate must be in [0,1), got " + std::to_string(corruption_rate));
    if (n < 10) throw ParamError("corpus size must be >= 10, got " + std::to_string(n));

    Rng rng(derive_seed(seed, 1));
    std::vector<Example> pool;
    pool.reserve(static_cast<size_t>(n));

    if (kind == TaskKind::kv_recall) {
        // One fixed codebook per corpus; every example about a key agrees with it.
        Rng book_rng(derive_seed(seed, 2));
        const std::vector<std::string> keys = make_codebook_keys(book_rng, kKvKeyCount);
        const std::string symbols = kv_value_symbols();
        std::vector<std::string> values;
        values.reserve(keys.size());
        for (size_t i = 0; i < keys.size(); ++i)
            values.push_back(std::string(1, symbols[book_rng.below(symbols.size())]));
        for (int64_t id = 0; id < n; ++id) {
            const size_t k = static_cast<size_t>(rng.below(keys.size()));
            Example e;
            e.instruction = "recall";
            e.input = keys[k];
            e.output = values[k];
            e.meta = {"kv_recall", false, id};
            pool.push_back(std::move(e));
        }
    } else {
        for (int64_t id = 0; id < n; ++id)
            pool.push_back(kind == TaskKind::mod_add ? sample_mod_add(rng, id)
                                                     : sample_copy_reverse(rng, id));
    }

    const int64_t n_corrupt = static_cast<int64_t>(corruption_rate * static_cast<double>(n));
    if (n_corrupt > 0) {
        Rng pick_rng(derive_seed(seed, 3));
        std::vector<int64_t> order = pick_rng.perm(n);
        Rng corrupt_rng(derive_seed(seed, 4));
        for (int64_t i = 0; i < n_corrupt; ++i)
            corrupt_example(pool[static_cast<size_t>(order[static_cast<size_t>(i)])], corrupt_rng);
    }
    return pool;
}

std::pair<std::vector<int64_t>, std::vector<int64_t>> split_pool(
    const std::vector<Example>& pool, uint64_t seed) {
    const int64_t n = static_cast<int64_t>(pool.size());
    if (n < 10) throw ParamError("split needs a pool of >= 10, got " + std::to_string(n));
    Rng rng(derive_seed(seed, 11));
    std::vector<int64_t> order = rng.perm(n);
    const int64_t n_test = n / 10;
    std::vector<int64_t> test(order.begin(), order.begin() + n_test);
    std::vector<int64_t> train(order.begin() + n_test, order.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

LengthStats length_stats(const std::vector<int64_t>& subset_ids,
                         const std::vector<Example>& pool) {
    if (subset_ids.empty()) throw ParamError("length_stats: empty subset");
    double tokens = 0.0, words = 0.0;
    for (int64_t id : subset_ids) {
        if (id < 0 || id >= static_cast<int64_t>(pool.size()))
            throw IndexError("length_stats: id " + std::to_string(id) + " outside pool");
        const std::string text = sample_text(pool[static_cast<size_t>(id)]);
        tokens += static_cast<double>(tok::encode(text).size());
        std::istringstream ss(text);
        std::string w;
        while (ss >> w) words += 1.0;
    }
    const double n = static_cast<double>(subset_ids.size());
    return {tokens / n, words / n};
}

std::string sample_text(const Example& e) {
    return e.instruction + "|" + e.input + "=" + e.output;
}

std::string example_body(const Example& e) { return e.input + "=" + e.output + "#"; }

TokenizedSample render_training_sample(const Example& e) {
    const std::vector<int> instr = tok::encode(e.instruction + "|");
    const std::vector<int> input = tok::encode(e.input + "=");
    const std::vector<int> output = tok::encode(e.output + "#");

    TokenizedSample s;
    s.tokens = instr;
    s.tokens.insert(s.tokens.end(), input.begin(), input.end());
    s.answer_begin = static_cast<int>(s.tokens.size());
    s.answer_len = static_cast<int>(output.size()) - 1;  // '#' excluded from the span
    s.tokens.insert(s.tokens.end(), output.begin(), output.end());

    s.targets.assign(s.tokens.size(), -1);
    // loss covers output plus the terminator
    for (int t = s.answer_begin; t < static_cast<int>(s.tokens.size()); ++t)
        s.targets[static_cast<size_t>(t) - 1] = s.tokens[static_cast<size_t>(t)];
    return s;
}

void save_corpus_jsonl(const std::filesystem::path& path, const std::vector<Example>& pool) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const Example& e : pool) {
        ordered_json j;
        j["instruction"] = e.instruction;
        j["input"] = e.input;
        j["output"] = e.output;
        j["meta"] = {{"kind", e.meta.kind}, {"corrupted", e.meta.corrupted}, {"id", e.meta.id}};
        out << j.dump() << "\n";
    }
}

std::vector<Example> load_corpus_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<Example> pool;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        Example e;
        e.instruction = j.at("instruction").get<std::string>();
        e.input = j.at("input").get<std::string>();
        e.output = j.at("output").get<std::string>();
        e.meta.kind = j.at("meta").at("kind").get<std::string>();
        e.meta.corrupted = j.at("meta").at("corrupted").get<bool>();
        e.meta.id = j.at("meta").at("id").get<int64_t>();
        pool.push_back(std::move(e));
    }
    return pool;
}

void save_manifest(const std::filesystem::path& path, const CorpusManifest& m) {
    ordered_json j;
    j["kind"] = m.kind;
    j["pool_size"] = m.pool_size;
    j["corruption_rate"] = m.corruption_rate;
    j["generator_seed"] = m.generator_seed;
    j["split_seed"] = m.split_seed;
    j["train_ids"] = m.train_ids;
    j["test_ids"] = m.test_ids;
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    ordered_json j = ordered_json::parse(in);
    CorpusManifest m;
    m.kind = j.at("kind").get<std::string>();
    m.pool_size = j.at("pool_size").get<int64_t>();
    m.corruption_rate = j.at("corruption_rate").get<double>();
    m.generator_seed = j.at("generator_seed").get<uint64_t>();
    m.split_seed = j.at("split_seed").get<uint64_t>();
    m.train_ids = j.at("train_ids").get<std::vector<int64_t>>();
    m.test_ids = j.at("test_ids").get<std::vector<int64_t>>();
    return m;
}

std::string corpus_hash(const std::vector<Example>& pool) {
    Fnv64 h;
    for (const Example& e : pool) {
        h.update(e.instruction);
        h.update(e.input);
        h.update(e.output);
        h.update(e.meta.kind);
        h.update(static_cast<uint64_t>(e.meta.corrupted));
        h.update(e.meta.id);
    }
    return h.hex();
}

}  // namespace p2d
