#include "icubert/text_embed.hpp"

#include <array>
#include <cmath>

#include <openssl/sha.h>

#include "icubert/errors.hpp"
#include "icubert/io.hpp"
#include "icubert/random.hpp"

namespace icubert {

StubProvider::StubProvider(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 1) throw Error(Errc::shape_mismatch, "embedding dimension must be positive");
}

PretrainedVector StubProvider::generate(std::string_view text, int dim, std::uint64_t seed) {
    if (text.empty()) throw Error(Errc::invalid_token, "cannot embed empty text");
    std::string message(8, '\0');
    for (int i = 0; i < 8; ++i) message[static_cast<std::size_t>(i)] = static_cast<char>((seed >> (8 * i)) & 0xFFu);
    message.append(text);

    std::array<unsigned char, SHA256_DIGEST_LENGTH> digest{};
    SHA256(reinterpret_cast<const unsigned char*>(message.data()), message.size(), digest.data());
    std::array<std::uint64_t, 4> words{};
    for (std::size_t w = 0; w < 4; ++w) {
        for (std::size_t b = 0; b < 8; ++b) words[w] |= static_cast<std::uint64_t>(digest[8 * w + b]) << (8 * b);
    }

    Rng rng(derive_seed(words[0], words[1], words[2], words[3]));
    std::vector<double> raw(static_cast<std::size_t>(dim));
    double norm2 = 0.0;
    for (double& x : raw) {
        x = rng.normal();
        norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    PretrainedVector out;
    out.values.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) out.values[i] = static_cast<float>(raw[i] * inv);
    return out;
}

const PretrainedVector& StubProvider::lookup(const std::string& text) const {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(text);
    if (it == cache_.end()) {
        it = cache_.emplace(text, std::make_unique<PretrainedVector>(generate(text, dim_, seed_))).first;
    }
    return *it->second;
}

FileCacheProvider::FileCacheProvider(std::map<std::string, PretrainedVector> table, int dim,
                                     std::shared_ptr<const EmbeddingProvider> fallback)
    : table_(std::move(table)), dim_(dim), fallback_(std::move(fallback)) {
    for (const auto& [key, v] : table_) {
        if (v.dim() != dim_) throw Error(Errc::shape_mismatch, "cache entry '" + key + "' has wrong dimension");
    }
    if (fallback_ && fallback_->dim() != dim_) throw Error(Errc::shape_mismatch, "fallback dimension differs");
}

FileCacheProvider FileCacheProvider::load(const std::string& path, std::shared_ptr<const EmbeddingProvider> fallback) {
    int dim = 0;
    auto table = decode_embedding_cache(read_file(path), &dim);
    return FileCacheProvider(std::move(table), dim, std::move(fallback));
}

const PretrainedVector& FileCacheProvider::lookup(const std::string& text) const {
    auto it = table_.find(text);
    if (it != table_.end()) return it->second;
    if (fallback_) return fallback_->lookup(text);
    throw Error(Errc::cache_miss, text);
}

namespace {
constexpr std::string_view kCacheMagic = "EHRV1";
}

std::string encode_embedding_cache(const std::map<std::string, PretrainedVector>& table, int dim) {
    ByteWriter w;
    w.put_bytes(kCacheMagic);
    w.put_u32(static_cast<std::uint32_t>(table.size()));
    w.put_u32(static_cast<std::uint32_t>(dim));
    for (const auto& [key, v] : table) {
        if (v.dim() != dim) throw Error(Errc::shape_mismatch, "cache entry '" + key + "' has wrong dimension");
        w.put_u32(static_cast<std::uint32_t>(key.size()));
        w.put_bytes(key);
        for (float x : v.values) w.put_f32(x);
    }
    return w.bytes();
}

std::map<std::string, PretrainedVector> decode_embedding_cache(std::string_view bytes, int* dim_out) {
    ByteReader r(bytes);
    std::string_view magic;
    if (!r.get_bytes(kCacheMagic.size(), magic) || magic != kCacheMagic) {
        throw Error(Errc::format_error, "embedding cache: bad magic");
    }
    std::uint32_t count = 0;
    std::uint32_t dim = 0;
    if (!r.get_u32(count) || !r.get_u32(dim)) throw Error(Errc::format_error, "embedding cache: truncated header");
    if (dim == 0) throw Error(Errc::format_error, "embedding cache: zero dimension");

    std::map<std::string, PretrainedVector> table;
    for (std::uint32_t e = 0; e < count; ++e) {
        std::uint32_t len = 0;
        std::string_view key;
        if (!r.get_u32(len) || !r.get_bytes(len, key)) throw Error(Errc::format_error, "embedding cache: truncated entry");
        if (len == 0) throw Error(Errc::format_error, "embedding cache: empty key");
        if (r.remaining() / 4 < dim) throw Error(Errc::format_error, "embedding cache: truncated vector");
        PretrainedVector v;
        v.values.resize(dim);
        for (float& x : v.values) {
            r.get_f32(x);
            if (!std::isfinite(x)) throw Error(Errc::format_error, "embedding cache: non-finite entry");
        }
        if (!table.emplace(std::string(key), std::move(v)).second) {
            throw Error(Errc::format_error, "embedding cache: duplicate key");
        }
    }
    if (!r.at_end()) throw Error(Errc::format_error, "embedding cache: trailing bytes");
    if (dim_out) *dim_out = static_cast<int>(dim);
    return table;
}

void write_embedding_cache(const std::string& path, const std::map<std::string, PretrainedVector>& table, int dim) {
    write_file_atomic(path, encode_embedding_cache(table, dim));
}

PretrainedVector embed_text(const EmbeddingProvider& provider, const std::string& text) {
    if (text.empty()) throw Error(Errc::invalid_token, "cannot embed empty text");
    return provider.lookup(text);
}

PretrainedVector fill(double x, int dim) {
    if (!std::isfinite(x)) throw Error(Errc::non_finite_value, "fill of non-finite value");
    return PretrainedVector{std::vector<float>(static_cast<std::size_t>(dim), static_cast<float>(x))};
}

PreEmbedding feature_pre_embedding(const Token& token, const EmbeddingProvider& provider) {
    if (auto s = parse_special(token.feature_text)) return {s, {}};
    return {std::nullopt, embed_text(provider, token.feature_text)};
}

PreEmbedding value_pre_embedding(const Token& token, const EmbeddingProvider& provider) {
    if (const auto* s = std::get_if<Special>(&token.value)) {
        if (*s == Special::pad) throw Error(Errc::invalid_token, "PAD has no value pre-embedding");
        return {*s, {}};
    }
    if (const auto* x = std::get_if<double>(&token.value)) return {std::nullopt, fill(*x, provider.dim())};
    return {std::nullopt, embed_text(provider, std::get<std::string>(token.value))};
}

}  // namespace icubert
