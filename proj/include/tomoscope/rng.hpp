#pragma once

#include <cstdint>

namespace tomo {

// Counter-based generator: every draw is a pure hash of (seed, stream key),
// so identical keys give identical draws regardless of evaluation order.
// That makes probe simulation order-independent and safe to parallelize.
class KeyedRng {
  public:
    explicit KeyedRng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    // Uniform in [0, 1) for stream key (source, probe, link, salt).
    double uniform(std::uint64_t source, std::uint64_t probe, std::uint64_t link,
                   std::uint64_t salt = 0) const {
        std::uint64_t h = mix(seed_ ^ 0x8f1bbcdcbfa53e0bULL);
        h = mix(h ^ (source + 0x2545f4914f6cdd1dULL));
        h = mix(h ^ (probe + 0x9e3779b97f4a7c15ULL));
        h = mix(h ^ (link + 0xd6e8feb86659fd93ULL));
        h = mix(h ^ (salt + 0xa0761d6478bd642fULL));
        return static_cast<double>(h >> 11) * 0x1.0p-53;
    }

  private:
    static std::uint64_t mix(std::uint64_t z) {  // splitmix64 finalizer
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
};

}  // namespace tomo
