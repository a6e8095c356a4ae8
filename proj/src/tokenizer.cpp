#include "p2d/tokenizer.hpp"

#include <array>

#include "p2d/errors.hpp"

namespace p2d {
namespace tok {

namespace {

const std::string kAlphabet =
    "abcdefghijklmnopqrstuvwxyz"
    "0123456789"
    " +-*/=%(),.:;?|#@!$&[]{}<>^~";

std::array<int, 256> build_lookup() {
    std::array<int, 256> t{};
    t.fill(-1);
    for (size_t i = 0; i < kAlphabet.size(); ++i)
        t[static_cast<unsigned char>(kAlphabet[i])] = static_cast<int>(i);
    return t;
}

const std::array<int, 256>& lookup() {
    static const std::array<int, 256> t = build_lookup();
    return t;
}

}  // namespace

const std::string& alphabet() { return kAlphabet; }

int id_of(char c) {
    const int id = lookup()[static_cast<unsigned char>(c)];
    if (id < 0)
        throw ParamError(std::string("tokenizer: character '") + c + "' not in alphabet");
    return id;
}

char char_of(int id) {
    if (id < 0 || id >= kVocabSize)
        throw IndexError("tokenizer: id " + std::to_string(id) + " outside [0,64)");
    return kAlphabet[static_cast<size_t>(id)];
}

std::vector<int> encode(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(id_of(c));
    return out;
}

std::string decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(char_of(id));
    return out;
}

int sep_id() { return id_of('|'); }
int eq_id() { return id_of('='); }
int end_id() { return id_of('#'); }

}  // namespace tok
}  // namespace p2d
