#pragma once

#include <string>
#include <vector>

namespace p2d {

// Character-level tokenizer over a fixed 64-symbol alphabet. Token id ==
// position in the alphabet, so vocabulary size is exactly 64 and encoding
// is trivially reversible.
namespace tok {

constexpr int kVocabSize = 64;

// Layout: 26 lowercase letters, 10 digits, 28 punctuation/structural symbols.
const std::string& alphabet();

int id_of(char c);          // throws ParamError on characters outside the alphabet
char char_of(int id);       // throws IndexError on ids outside [0, 64)

std::vector<int> encode(const std::string& text);
std::string decode(const std::vector<int>& ids);

// Structural symbols used by the task renderings.
int sep_id();      // '|' between instruction and body
int eq_id();       // '=' between input and output
int end_id();      // '#' terminating an output

}  // namespace tok

}  // namespace p2d
