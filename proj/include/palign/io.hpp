#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "palign/categories.hpp"
#include "palign/embedding.hpp"
#include "palign/io_types.hpp"
#include "palign/linalg.hpp"

namespace palign {

// ---------------------------------------------------------------------------
// Embedding files: "EMB1" magic, u32 count, u32 dim, u32 reserved (all LE),
// then count*dim float32 LE row-major.
// ---------------------------------------------------------------------------

struct EmbeddingFile {
    std::size_t count = 0;
    std::size_t dim = 0;
    Mat<float> data;

    MatD as_double() const { return data.cast<double>(); }
};

EmbeddingFile read_embeddings(const std::string& path);
void write_embeddings(const std::string& path, const Mat<float>& matrix);
void write_embeddings(const std::string& path, const MatD& matrix);

// ---------------------------------------------------------------------------
// Manifests: UTF-8 JSON lines {"id", "label" | "labels", "embedding_index",
// "text"?}. Multi-label lines expand to one record per label. Labels are
// abbreviations validated against the registry; errors carry line numbers.
// ---------------------------------------------------------------------------

std::vector<TripletRecord> read_manifest(const std::string& path,
                                         const CategoryRegistry& registry,
                                         std::optional<std::size_t> embedding_count = std::nullopt);

// ---------------------------------------------------------------------------
// Model files: JSON with shape metadata and hex-encoded IEEE-754 payloads so
// 64-bit round trips are bit-exact.
// ---------------------------------------------------------------------------

void save_model(const ModelState& model, const std::string& path);
ModelState load_model(const std::string& path);

/// nlohmann parse wrapper that reports duplicate object keys (the stock parser
/// silently keeps the last) and rewraps parse errors as FormatError.
std::string json_duplicate_key_check(const std::string& text);

/// IEEE-754 doubles as big-endian hex, 16 chars per value; exact round trips.
std::string hex_encode(const VecD& values);
VecD hex_decode(const std::string& hex, std::size_t count, const std::string& what);

}  // namespace palign
