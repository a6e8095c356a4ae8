#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <map>
#include <set>

#include "p2d/corpus.hpp"
#include "p2d/errors.hpp"
#include "p2d/rng.hpp"
#include "p2d/tokenizer.hpp"

using namespace p2d;

namespace {

int parse_mod_add_truth(const std::string& input) {
    // "12+45 (mod 53)"
    const size_t plus = input.find('+');
    const size_t space = input.find(' ');
    const int a = std::stoi(input.substr(0, plus));
    const int b = std::stoi(input.substr(plus + 1, space - plus - 1));
    return (a + b) % kModAddModulus;
}

}  // namespace

TEST_CASE("tokenizer alphabet") {
    CHECK(tok::alphabet().size() == 64);
    std::set<char> uniq(tok::alphabet().begin(), tok::alphabet().end());
    CHECK(uniq.size() == 64);

    Rng rng(3);
    for (int rep = 0; rep < 50; ++rep) {
        std::string s;
        for (int i = 0; i < 20; ++i)
            s.push_back(tok::alphabet()[rng.below(64)]);
        CHECK(tok::decode(tok::encode(s)) == s);
    }
    CHECK_THROWS_AS(tok::encode("UPPER"), ParamError);
    CHECK_THROWS_AS(tok::char_of(64), IndexError);
}

TEST_CASE("mod_add generator arithmetic and format") {
    auto pool = generate(TaskKind::mod_add, 200, 0.0, 99);
    REQUIRE(pool.size() == 200);
    for (const Example& e : pool) {
        CHECK(!e.meta.corrupted);
        CHECK(e.input.find(" (mod 53)") != std::string::npos);
        CHECK(std::stoi(e.output) == parse_mod_add_truth(e.input));
    }
    // the documented worked example: 12+45 (mod 53) = 4
    CHECK(parse_mod_add_truth("12+45 (mod 53)") == 4);
}

TEST_CASE("corruption counts and truthfulness") {
    auto pool = generate(TaskKind::mod_add, 1000, 0.3, 5);
    int64_t corrupted = 0;
    for (const Example& e : pool) {
        if (e.meta.corrupted) {
            ++corrupted;
            CHECK(std::stoi(e.output) != parse_mod_add_truth(e.input));
        } else {
            CHECK(std::stoi(e.output) == parse_mod_add_truth(e.input));
        }
    }
    CHECK(corrupted == 300);

    auto clean = generate(TaskKind::copy_reverse, 100, 0.0, 5);
    for (const Example& e : clean) CHECK(!e.meta.corrupted);

    CHECK_THROWS_AS(generate(TaskKind::mod_add, 100, 1.0, 1), ParamError);
    CHECK_THROWS_AS(generate(TaskKind::mod_add, 100, -0.1, 1), ParamError);
    CHECK_THROWS_AS(generate(TaskKind::mod_add, 5, 0.0, 1), ParamError);
}

TEST_CASE("copy_reverse and kv_recall generators") {
    auto rev = generate(TaskKind::copy_reverse, 50, 0.2, 17);
    for (const Example& e : rev) {
        const std::string expect(e.input.rbegin(), e.input.rend());
        if (e.meta.corrupted) {
            CHECK(e.output != expect);
            CHECK(e.output.size() == expect.size());  // format preserved
        } else {
            CHECK(e.output == expect);
        }
    }

    auto kv = generate(TaskKind::kv_recall, 300, 0.3, 17);
    // clean examples sharing a key agree; corrupted ones disagree with them
    std::map<std::string, std::string> truth;
    for (const Example& e : kv)
        if (!e.meta.corrupted) truth[e.input] = e.output;
    std::set<std::string> keys;
    for (const Example& e : kv) {
        keys.insert(e.input);
        if (!e.meta.corrupted) CHECK(e.output == truth.at(e.input));
        else if (truth.count(e.input)) CHECK(e.output != truth.at(e.input));
    }
    CHECK(keys.size() == kKvKeyCount);
}

TEST_CASE("generator determinism") {
    auto a = generate(TaskKind::kv_recall, 100, 0.25, 42);
    auto b = generate(TaskKind::kv_recall, 100, 0.25, 42);
    auto c = generate(TaskKind::kv_recall, 100, 0.25, 43);
    CHECK(corpus_hash(a) == corpus_hash(b));
    CHECK(corpus_hash(a) != corpus_hash(c));
}

TEST_CASE("split ratios, determinism and partition") {
    auto pool = generate(TaskKind::mod_add, 1000, 0.0, 1);
    auto [train, test] = split_pool(pool, 9);
    CHECK(train.size() == 900);
    CHECK(test.size() == 100);

    auto [train2, test2] = split_pool(pool, 9);
    CHECK(train == train2);
    CHECK(test == test2);

    auto [train3, test3] = split_pool(pool, 10);
    CHECK(train != train3);

    std::set<int64_t> all(train.begin(), train.end());
    all.insert(test.begin(), test.end());
    CHECK(all.size() == 1000);
    CHECK(*all.begin() == 0);
    CHECK(*all.rbegin() == 999);

    std::vector<Example> tiny(pool.begin(), pool.begin() + 5);
    CHECK_THROWS_AS(split_pool(tiny, 1), ParamError);
}

TEST_CASE("length stats") {
    std::vector<Example> pool{{"ab", "cd", "efg", {"mod_add", false, 0}}};
    // sample text "ab|cd=efg" = 9 tokens, 1 word
    auto st = length_stats({0}, pool);
    CHECK(st.mean_tokens == doctest::Approx(9.0));
    CHECK(st.mean_words == doctest::Approx(1.0));

    auto big = generate(TaskKind::mod_add, 100, 0.0, 2);
    std::vector<int64_t> ids;
    for (int64_t i = 0; i < 100; ++i) ids.push_back(i);
    auto s1 = length_stats(ids, big);
    auto s2 = length_stats(ids, big);
    CHECK(s1.mean_tokens == s2.mean_tokens);
    CHECK(s1.mean_words == s2.mean_words);
    CHECK_THROWS_AS(length_stats({}, big), ParamError);
}

TEST_CASE("rendering sample targets and spans") {
    const Example e{"addmod", "1+2 (mod 53)", "3", {"mod_add", false, 7}};
    const TokenizedSample s = render_training_sample(e);
    // "addmod|" (7) + "1+2 (mod 53)=" (13) + "3#" (2)
    CHECK(s.tokens.size() == 22);
    CHECK(s.answer_begin == 20);
    CHECK(s.answer_len == 1);
    CHECK(tok::decode({s.tokens[20], s.tokens[21]}) == "3#");
    // loss positions: 19 predicts '3', 20 predicts '#', everything else off
    for (size_t t = 0; t < s.targets.size(); ++t) {
        if (t == 19) CHECK(s.targets[t] == tok::id_of('3'));
        else if (t == 20) CHECK(s.targets[t] == tok::id_of('#'));
        else CHECK(s.targets[t] == -1);
    }
}

TEST_CASE("jsonl round trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "p2d_corpus_test";
    fs::create_directories(dir);
    auto pool = generate(TaskKind::kv_recall, 50, 0.2, 8);
    save_corpus_jsonl(dir / "c.jsonl", pool);
    auto loaded = load_corpus_jsonl(dir / "c.jsonl");
    CHECK(corpus_hash(loaded) == corpus_hash(pool));

    CorpusManifest m;
    m.kind = "kv_recall";
    m.pool_size = 50;
    m.corruption_rate = 0.2;
    m.generator_seed = 8;
    m.split_seed = 9;
    m.train_ids = {0, 1, 2};
    m.test_ids = {3, 4};
    save_manifest(dir / "m.json", m);
    auto lm = load_manifest(dir / "m.json");
    CHECK(lm.kind == m.kind);
    CHECK(lm.train_ids == m.train_ids);
    CHECK(lm.test_ids == m.test_ids);
    fs::remove_all(dir);
}
