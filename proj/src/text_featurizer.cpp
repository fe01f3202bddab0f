#include "palign/text_featurizer.hpp"

#include <cctype>

#include "palign/errors.hpp"
#include "palign/rng.hpp"

namespace palign {

std::vector<std::string> tokenize_text(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isalnum(ch)) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        } else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
}

namespace {

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

VecD surrogate_text_features(const std::string& text, std::size_t dim, std::uint64_t seed) {
    if (dim == 0) throw ConfigError("surrogate featurizer: dim must be >= 1");
    const auto tokens = tokenize_text(text);
    if (tokens.empty())
        throw ValidationError("surrogate featurizer: no featurizable content in \"" + text + "\"");

    VecD out(dim, 0.0);
    const std::uint64_t seed_mix = splitmix64(seed);
    for (const auto& tok : tokens) {
        const std::uint64_t h = splitmix64(fnv1a64(tok) ^ seed_mix);
        // Expand the token hash into a pseudo-random unit vector using pure
        // integer mixing so the result is identical on every platform.
        VecD tv(dim);
        for (std::size_t k = 0; k < dim; ++k) {
            const std::uint64_t bits = splitmix64(h + k);
            tv[k] = 2.0 * (static_cast<double>(bits >> 11) * 0x1.0p-53) - 1.0;
        }
        const double n = norm2(tv);
        for (std::size_t k = 0; k < dim; ++k) out[k] += tv[k] / n;
    }
    const double n = norm2(out);
    if (!(n > 1e-12))
        throw NumericalError("surrogate featurizer: token vectors cancelled to zero");
    for (auto& x : out) x /= n;
    return out;
}

}  // namespace palign
