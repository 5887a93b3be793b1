#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "mobileage/error.hpp"
#include "mobileage/tensor.hpp"

namespace mobileage {

using TensorMap = std::map<std::string, Tensor>;

/// Named tensors plus a JSON metadata document.
///
/// On disk: 8-byte magic "MAGETNSR", u64 little-endian header length, the
/// JSON header (metadata + tensor index with byte offsets), then the raw
/// float32 payload in index order. Floats are stored bit-for-bit so a
/// save/load round trip is exact.
struct TensorArchive {
    nlohmann::json metadata = nlohmann::json::object();
    TensorMap tensors;
};

namespace detail {
inline constexpr char kArchiveMagic[8] = {'M', 'A', 'G', 'E', 'T', 'N', 'S', 'R'};
static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");
} // namespace detail

inline std::string serialize_archive(const TensorArchive& archive)
{
    nlohmann::json index = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : archive.tensors) {
        index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.size() * sizeof(float);
    }
    nlohmann::json header{{"metadata", archive.metadata}, {"tensors", index}};
    const std::string head = header.dump();
    std::string out(detail::kArchiveMagic, 8);
    const std::uint64_t len = head.size();
    out.append(reinterpret_cast<const char*>(&len), sizeof(len));
    out += head;
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : archive.tensors)
        out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
    return out;
}

inline TensorArchive parse_archive(const std::string& bytes, const std::string& origin = "<memory>")
{
    if (bytes.size() < 16 || std::memcmp(bytes.data(), detail::kArchiveMagic, 8) != 0)
        throw DataError("not a tensor archive: " + origin);
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 8, sizeof(len));
    if (16 + len > bytes.size()) throw DataError("truncated archive header: " + origin);
    const auto header = nlohmann::json::parse(bytes.substr(16, len), nullptr, false);
    if (header.is_discarded()) throw DataError("corrupt archive header: " + origin);
    const std::size_t base = 16 + len;
    TensorArchive archive;
    archive.metadata = header.value("metadata", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
        const Shape shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const auto n = static_cast<std::size_t>(shape_numel(shape));
        if (base + offset + n * sizeof(float) > bytes.size())
            throw DataError("truncated tensor '" + entry.at("name").get<std::string>() + "' in " + origin);
        std::vector<float> values(n);
        std::memcpy(values.data(), bytes.data() + base + offset, n * sizeof(float));
        archive.tensors.emplace(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
    }
    return archive;
}

inline std::string read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Write via a temporary sibling and rename, so readers never observe a
/// partially written file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void save_archive(const std::filesystem::path& path, const TensorArchive& archive)
{
    write_file_atomic(path, serialize_archive(archive));
}

inline TensorArchive load_archive(const std::filesystem::path& path)
{
    return parse_archive(read_file_bytes(path), path.string());
}

} // namespace mobileage
