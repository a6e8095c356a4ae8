#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

namespace p2d {

// FNV-1a 64-bit. Artifact hashes are provenance fingerprints, not security
// boundaries, so a fast non-cryptographic hash is the right tool.
class Fnv64 {
public:
    void update(const void* bytes, size_t n) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ull;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    void update(double v) { update(&v, sizeof v); }
    void update(uint64_t v) { update(&v, sizeof v); }
    void update(int64_t v) { update(&v, sizeof v); }
    void update(int32_t v) { update(&v, sizeof v); }

    uint64_t digest() const { return state_; }

    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx",
                      static_cast<unsigned long long>(state_));
        return std::string(buf);
    }

private:
    uint64_t state_ = 0xcbf29ce484222325ull;
};

inline std::string hash_bytes_hex(const std::vector<unsigned char>& bytes) {
    Fnv64 h;
    if (!bytes.empty()) h.update(bytes.data(), bytes.size());
    return h.hex();
}

inline std::string hash_string_hex(const std::string& s) {
    Fnv64 h;
    h.update(s);
    return h.hex();
}

}  // namespace p2d
