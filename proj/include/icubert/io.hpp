#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <type_traits>

namespace icubert {

// Writes to "<path>.tmp" and renames over path.
void write_file_atomic(const std::string& path, std::string_view bytes);
std::string read_file(const std::string& path);

// Little-endian binary encoding used by the cache and checkpoint formats.
class ByteWriter {
public:
    void put_bytes(std::string_view bytes) { out_.append(bytes); }
    void put_u32(std::uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
        out_.append(b, 4);
    }
    void put_f32(float f) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof bits);
        put_u32(bits);
    }
    const std::string& bytes() const { return out_; }

private:
    std::string out_;
};

// Reads return false on truncation instead of throwing; callers map that to their own error.
class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    bool get_bytes(std::size_t n, std::string_view& out) {
        if (data_.size() - pos_ < n) return false;
        out = data_.substr(pos_, n);
        pos_ += n;
        return true;
    }
    bool get_u32(std::uint32_t& v) {
        std::string_view b;
        if (!get_bytes(4, b)) return false;
        v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
        return true;
    }
    bool get_f32(float& f) {
        std::uint32_t bits;
        if (!get_u32(bits)) return false;
        std::memcpy(&f, &bits, sizeof f);
        return true;
    }
    bool at_end() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::string_view data_;
    std::size_t pos_ = 0;
};

}  // namespace icubert
