#pragma once

// Minimal protobuf wire-format encoder/decoder: varints, fixed32/64 and
// length-delimited fields. Enough to write and read the message subset the
// exporter uses; unknown fields are skipped on read.

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "mobileage/error.hpp"

namespace mobileage::pb {

enum WireType : std::uint32_t { Varint = 0, Fixed64 = 1, Bytes = 2, Fixed32 = 5 };

class Writer {
public:
    void varint(std::uint64_t v)
    {
        while (v >= 0x80) {
            buf_.push_back(static_cast<char>((v & 0x7F) | 0x80));
            v >>= 7;
        }
        buf_.push_back(static_cast<char>(v));
    }
    void tag(std::uint32_t field, WireType wt) { varint((std::uint64_t{field} << 3) | wt); }

    void int_field(std::uint32_t field, std::int64_t v)
    {
        tag(field, Varint);
        varint(static_cast<std::uint64_t>(v));
    }
    void float_field(std::uint32_t field, float v)
    {
        tag(field, Fixed32);
        char b[4];
        std::memcpy(b, &v, 4);
        buf_.append(b, 4);
    }
    void bytes_field(std::uint32_t field, std::string_view v)
    {
        tag(field, Bytes);
        varint(v.size());
        buf_.append(v);
    }
    void message_field(std::uint32_t field, const Writer& m) { bytes_field(field, m.buf_); }
    /// Packed repeated int64.
    void packed_ints(std::uint32_t field, const std::vector<std::int64_t>& v)
    {
        Writer inner;
        for (auto x : v) inner.varint(static_cast<std::uint64_t>(x));
        bytes_field(field, inner.buf_);
    }

    [[nodiscard]] const std::string& bytes() const noexcept { return buf_; }

private:
    std::string buf_;
};

struct Field {
    std::uint32_t number = 0;
    WireType type = Varint;
    std::uint64_t value = 0;     // Varint, Fixed32, Fixed64
    std::string_view bytes;      // Bytes

    [[nodiscard]] std::int64_t as_int() const { return static_cast<std::int64_t>(value); }
    [[nodiscard]] float as_float() const
    {
        const auto u = static_cast<std::uint32_t>(value);
        float f;
        std::memcpy(&f, &u, 4);
        return f;
    }
    [[nodiscard]] std::string str() const { return std::string(bytes); }
};

class Reader {
public:
    explicit Reader(std::string_view data) : data_(data) {}

    [[nodiscard]] bool done() const noexcept { return pos_ >= data_.size(); }

    Field next()
    {
        Field f;
        const auto key = varint();
        f.number = static_cast<std::uint32_t>(key >> 3);
        f.type = static_cast<WireType>(key & 7);
        switch (f.type) {
        case Varint: f.value = varint(); break;
        case Fixed64: f.value = fixed(8); break;
        case Fixed32: f.value = fixed(4); break;
        case Bytes: {
            const auto n = varint();
            if (n > data_.size() - pos_) throw DataError("protobuf: truncated length-delimited field");
            f.bytes = data_.substr(pos_, n);
            pos_ += n;
            break;
        }
        default: throw DataError("protobuf: unsupported wire type " + std::to_string(static_cast<int>(f.type)));
        }
        return f;
    }

    /// Decodes a packed (or single unpacked) repeated varint field.
    static void append_ints(const Field& f, std::vector<std::int64_t>& out)
    {
        if (f.type == Varint) {
            out.push_back(f.as_int());
            return;
        }
        Reader r(f.bytes);
        while (!r.done()) out.push_back(static_cast<std::int64_t>(r.varint()));
    }

    std::uint64_t varint()
    {
        std::uint64_t v = 0;
        for (int shift = 0; shift < 64; shift += 7) {
            if (pos_ >= data_.size()) throw DataError("protobuf: truncated varint");
            const auto b = static_cast<std::uint8_t>(data_[pos_++]);
            v |= std::uint64_t{b & 0x7FU} << shift;
            if (!(b & 0x80)) return v;
        }
        throw DataError("protobuf: varint too long");
    }

private:
    std::uint64_t fixed(std::size_t n)
    {
        if (n > data_.size() - pos_) throw DataError("protobuf: truncated fixed field");
        std::uint64_t v = 0;
        std::memcpy(&v, data_.data() + pos_, n);
        pos_ += n;
        return v;
    }

    std::string_view data_;
    std::size_t pos_ = 0;
};

} // namespace mobileage::pb
