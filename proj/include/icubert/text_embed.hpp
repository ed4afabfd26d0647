#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "icubert/types.hpp"

namespace icubert {

inline constexpr int kDefaultPretrainedDim = 768;

// One row of the external text encoder's output space.
struct PretrainedVector {
    std::vector<float> values;

    int dim() const { return static_cast<int>(values.size()); }
    friend bool operator==(const PretrainedVector&, const PretrainedVector&) = default;
};

// Source of frozen text embeddings. Implementations are safe for concurrent lookups.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual int dim() const = 0;
    virtual std::string_view kind() const = 0;
    // Reference stays valid for the provider's lifetime.
    virtual const PretrainedVector& lookup(const std::string& text) const = 0;
};

// Unit-norm vectors expanded from SHA-256(seed || text).
class StubProvider final : public EmbeddingProvider {
public:
    explicit StubProvider(int dim = kDefaultPretrainedDim, std::uint64_t seed = 0);

    int dim() const override { return dim_; }
    std::string_view kind() const override { return "deterministic_stub"; }
    const PretrainedVector& lookup(const std::string& text) const override;

    // Uncached generation; lookup() memoizes this.
    static PretrainedVector generate(std::string_view text, int dim, std::uint64_t seed);

private:
    int dim_;
    std::uint64_t seed_;
    mutable std::mutex mutex_;
    mutable std::unordered_map<std::string, std::unique_ptr<PretrainedVector>> cache_;
};

// Precomputed table loaded from an "EHRV1" file, optionally backed by a fallback.
class FileCacheProvider final : public EmbeddingProvider {
public:
    FileCacheProvider(std::map<std::string, PretrainedVector> table, int dim,
                      std::shared_ptr<const EmbeddingProvider> fallback = nullptr);

    static FileCacheProvider load(const std::string& path, std::shared_ptr<const EmbeddingProvider> fallback = nullptr);

    int dim() const override { return dim_; }
    std::string_view kind() const override { return "file_cache"; }
    const PretrainedVector& lookup(const std::string& text) const override;

    const std::map<std::string, PretrainedVector>& table() const { return table_; }

private:
    std::map<std::string, PretrainedVector> table_;
    int dim_;
    std::shared_ptr<const EmbeddingProvider> fallback_;
};

// Layout: "EHRV1", u32 count, u32 dim, then per entry u32 key length, key
// bytes, dim little-endian f32. Entries are written in key order.
std::string encode_embedding_cache(const std::map<std::string, PretrainedVector>& table, int dim);
std::map<std::string, PretrainedVector> decode_embedding_cache(std::string_view bytes, int* dim_out = nullptr);
void write_embedding_cache(const std::string& path, const std::map<std::string, PretrainedVector>& table, int dim);

PretrainedVector embed_text(const EmbeddingProvider& provider, const std::string& text);

// Every entry equal to x. Throws NonFiniteValue for NaN/inf.
PretrainedVector fill(double x, int dim);

// Feature or value pre-embedding of a token: either a concrete vector or one of
// the learned special vectors owned by the embedder.
struct PreEmbedding {
    std::optional<Special> special;
    PretrainedVector vector;
};

PreEmbedding feature_pre_embedding(const Token& token, const EmbeddingProvider& provider);
// fill(number) for continuous values, text embedding for categories. PAD is rejected.
PreEmbedding value_pre_embedding(const Token& token, const EmbeddingProvider& provider);

}  // namespace icubert
