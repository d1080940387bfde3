#pragma once

// Binary checkpoint format:
//
//   8 bytes   magic "VLKITCKP"
//   u32 LE    format version
//   u64 LE    header length in bytes
//   header    UTF-8 JSON: format_version, model_config, seed, step and the
//             ordered parameter list {name, shape, offset, group}; offsets
//             are byte offsets into the payload
//   payload   little-endian f32 values of every parameter, back to back
//
// There is no checksum: truncation and shape inconsistencies are detected,
// flipped payload values are not.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vlkit/config.hpp"
#include "vlkit/params.hpp"

namespace vlkit {

inline constexpr char kCheckpointMagic[8] = {'V', 'L', 'K', 'I', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind {
    io,
    bad_magic,
    version_mismatch,
    truncated,
    malformed_header,
    shape_mismatch,
    missing_parameter,
    unexpected_parameter,
};

inline std::string to_string(CheckpointErrorKind k) {
    switch (k) {
    case CheckpointErrorKind::io: return "io";
    case CheckpointErrorKind::bad_magic: return "bad_magic";
    case CheckpointErrorKind::version_mismatch: return "version_mismatch";
    case CheckpointErrorKind::truncated: return "truncated";
    case CheckpointErrorKind::malformed_header: return "malformed_header";
    case CheckpointErrorKind::shape_mismatch: return "shape_mismatch";
    case CheckpointErrorKind::missing_parameter: return "missing_parameter";
    case CheckpointErrorKind::unexpected_parameter: return "unexpected_parameter";
    }
    return "?";
}

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(CheckpointErrorKind kind, const std::string& message)
        : std::runtime_error("checkpoint " + to_string(kind) + ": " + message), kind_(kind) {}
    CheckpointErrorKind kind() const noexcept { return kind_; }

private:
    CheckpointErrorKind kind_;
};

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;  // bytes into the payload
    std::string group;

    std::size_t numel() const { return shape_numel(shape); }
};

struct Checkpoint {
    std::uint32_t format_version = kCheckpointVersion;
    ModelConfig model_config;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::vector<CheckpointEntry> entries;
    std::vector<float> payload;

    const CheckpointEntry* find(const std::string& name) const {
        for (const auto& e : entries) {
            if (e.name == name) return &e;
        }
        return nullptr;
    }

    std::span<const float> values(const CheckpointEntry& e) const {
        return std::span<const float>(payload).subspan(e.offset / sizeof(float), e.numel());
    }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline json checkpoint_header(const Checkpoint& ckpt) {
    json params = json::array();
    for (const auto& e : ckpt.entries) {
        params.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}, {"group", e.group}});
    }
    return json{{"format_version", ckpt.format_version},
                {"model_config", ckpt.model_config},
                {"seed", ckpt.seed},
                {"step", ckpt.step},
                {"parameters", params}};
}

} // namespace detail

/// Snapshot of a parameter store as a checkpoint (values cast to f32).
template <typename T>
Checkpoint make_checkpoint(const ParameterStore<T>& store, const ModelConfig& config, std::uint64_t step) {
    Checkpoint ckpt;
    ckpt.model_config = config;
    ckpt.seed = config.seed;
    ckpt.step = step;
    ckpt.payload.reserve(store.total_count());
    for (const auto& p : store.entries()) {
        ckpt.entries.push_back({p.name, p.value.shape(), ckpt.payload.size() * sizeof(float),
                                std::string(group_name(p.group))});
        for (T v : p.value.data()) ckpt.payload.push_back(static_cast<float>(v));
    }
    return ckpt;
}

/// Writes to a temporary sibling then renames, so an existing file at `path`
/// survives a failed write.
inline void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::string header = detail::checkpoint_header(ckpt).dump();
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + tmp.string() + " for writing");
        os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
        detail::write_u32(os, ckpt.format_version);
        detail::write_u64(os, header.size());
        os.write(header.data(), static_cast<std::streamsize>(header.size()));
        os.write(reinterpret_cast<const char*>(ckpt.payload.data()),
                 static_cast<std::streamsize>(ckpt.payload.size() * sizeof(float)));
        if (!os) throw CheckpointError(CheckpointErrorKind::io, "write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw CheckpointError(CheckpointErrorKind::io, "cannot move checkpoint into " + path.string() + ": " + ec.message());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path.string());
    const auto file_size = std::filesystem::file_size(path);

    char magic[8];
    if (!is.read(magic, 8)) throw CheckpointError(CheckpointErrorKind::truncated, path.string() + ": missing magic");
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw CheckpointError(CheckpointErrorKind::bad_magic, path.string() + " is not a checkpoint file");
    }
    std::uint32_t version = 0;
    std::uint64_t header_len = 0;
    if (!is.read(reinterpret_cast<char*>(&version), 4) || !is.read(reinterpret_cast<char*>(&header_len), 8)) {
        throw CheckpointError(CheckpointErrorKind::truncated, path.string() + ": incomplete preamble");
    }
    if (version != kCheckpointVersion) {
        throw CheckpointError(CheckpointErrorKind::version_mismatch, "file version " + std::to_string(version) +
                                                                         ", supported " +
                                                                         std::to_string(kCheckpointVersion));
    }
    if (header_len > file_size - 20) {
        throw CheckpointError(CheckpointErrorKind::truncated, "header length exceeds file size");
    }
    std::string header_text(header_len, '\0');
    is.read(header_text.data(), static_cast<std::streamsize>(header_len));

    Checkpoint ckpt;
    ckpt.format_version = version;
    std::uint64_t expected_bytes = 0;
    try {
        const auto header = json::parse(header_text);
        if (header.at("format_version").get<std::uint32_t>() != version) {
            throw CheckpointError(CheckpointErrorKind::malformed_header, "header version disagrees with preamble");
        }
        ckpt.model_config = header.at("model_config").get<ModelConfig>();
        ckpt.seed = header.at("seed").get<std::uint64_t>();
        ckpt.step = header.at("step").get<std::uint64_t>();
        for (const auto& p : header.at("parameters")) {
            CheckpointEntry e{p.at("name").get<std::string>(), p.at("shape").get<Shape>(),
                              p.at("offset").get<std::uint64_t>(), p.at("group").get<std::string>()};
            if (e.offset != expected_bytes) {
                throw CheckpointError(CheckpointErrorKind::malformed_header,
                                      "parameter '" + e.name + "' offset " + std::to_string(e.offset) +
                                          " leaves a gap or overlap (expected " + std::to_string(expected_bytes) + ")");
            }
            expected_bytes += e.numel() * sizeof(float);
            ckpt.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointErrorKind::malformed_header, e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(CheckpointErrorKind::malformed_header, e.what());
    }

    const std::uint64_t payload_bytes = file_size - 20 - header_len;
    if (payload_bytes != expected_bytes) {
        throw CheckpointError(payload_bytes < expected_bytes ? CheckpointErrorKind::truncated
                                                             : CheckpointErrorKind::malformed_header,
                              "payload holds " + std::to_string(payload_bytes) + " bytes, header describes " +
                                  std::to_string(expected_bytes));
    }
    ckpt.payload.resize(expected_bytes / sizeof(float));
    is.read(reinterpret_cast<char*>(ckpt.payload.data()), static_cast<std::streamsize>(expected_bytes));
    if (!is) throw CheckpointError(CheckpointErrorKind::truncated, "payload read failed");
    return ckpt;
}

/// Overwrites every parameter of `store` from `ckpt`; names and shapes must
/// match exactly in both directions.
template <typename T>
void restore_parameters(ParameterStore<T>& store, const Checkpoint& ckpt) {
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : ckpt.entries) by_name.emplace(e.name, &e);
    for (auto& p : store.entries()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            throw CheckpointError(CheckpointErrorKind::missing_parameter, "'" + p.name + "' not in checkpoint");
        }
        if (it->second->shape != p.value.shape()) {
            throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                                  "'" + p.name + "' model " + shape_str(p.value.shape()) + " vs checkpoint " +
                                      shape_str(it->second->shape));
        }
        auto src = ckpt.values(*it->second);
        auto dst = p.value.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
        by_name.erase(it);
    }
    if (!by_name.empty()) {
        throw CheckpointError(CheckpointErrorKind::unexpected_parameter,
                              "'" + by_name.begin()->first + "' has no counterpart in the model");
    }
}

} // namespace vlkit
