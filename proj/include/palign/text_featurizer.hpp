#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "palign/linalg.hpp"

namespace palign {

/// Deterministic stand-in for an external text encoder. Tokenizes on
/// non-alphanumeric boundaries (ASCII lowercased), hashes each token with a
/// seeded 64-bit FNV-1a, expands the hash into a pseudo-random unit vector and
/// returns the normalized token sum. Pure integer hashing and a fixed
/// expansion make the output stable across runs and platforms.
VecD surrogate_text_features(const std::string& text, std::size_t dim, std::uint64_t seed);

std::vector<std::string> tokenize_text(const std::string& text);

}  // namespace palign
