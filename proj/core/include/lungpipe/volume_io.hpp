// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lungpipe/volume.hpp"

namespace lungpipe {

/// Sidecar metadata for a flat little-endian voxel file.
struct VolumeHeader {
  Dims3 dims{};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::string dtype;  // "i16" or "f32"
  std::string patient_id;
};

/// Sidecar path for a voxel file: same stem, ".json" extension.
std::filesystem::path sidecar_path(const std::filesystem::path& voxel_path);

void write_volume(const std::filesystem::path& path, const HUVolume& volume);
void write_volume(const std::filesystem::path& path, const Grid3<float>& voxels,
                  const std::array<double, 3>& spacing_mm, const std::string& patient_id);

VolumeHeader read_volume_header(const std::filesystem::path& path);
HUVolume read_hu_volume(const std::filesystem::path& path);
Grid3<float> read_f32_volume(const std::filesystem::path& path, VolumeHeader* header = nullptr);

/// One line of the dataset manifest (JSON lines).
struct ManifestRecord {
  std::string patient_id;
  std::string volume_path;
  std::optional<bool> cancer;
  std::vector<NoduleAnnotation> nodules;
};

std::string to_json_line(const ManifestRecord& record);
ManifestRecord manifest_record_from_json(const std::string& line);

void write_manifest(const std::filesystem::path& path, std::span<const ManifestRecord> records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Writes `text` atomically enough for our purposes (truncate + write).
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace lungpipe
