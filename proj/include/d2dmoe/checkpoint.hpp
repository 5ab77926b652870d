#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "d2dmoe/model.hpp"

namespace d2dmoe {

// File layout: 8-byte magic "D2DMOE\0\1", u64 little-endian header length,
// UTF-8 JSON header, zero padding to a 64-byte boundary, then f32 blobs.
// Tensor offsets are relative to the start of the blob section and are
// multiples of 64.
inline constexpr char kCheckpointMagic[8] = {'D', '2', 'D', 'M', 'O', 'E', '\0', '\1'};

std::vector<std::uint8_t> serialize_model(const DenseModel& model);
// Throws FormatError on any inconsistency; never returns a partial model.
DenseModel deserialize_model(std::span<const std::uint8_t> bytes);

// Writes to a sibling temp file and renames it into place.
void save_checkpoint(const DenseModel& model, const std::filesystem::path& path);
DenseModel load_checkpoint(const std::filesystem::path& path);

// Whole-file helpers shared with the other artifact writers.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace d2dmoe
