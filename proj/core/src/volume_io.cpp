// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace lungpipe {
namespace {

using nlohmann::json;

template <typename T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <typename T>
void write_raw(const std::filesystem::path& path, std::span<const T> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  std::vector<T> buffer(values.begin(), values.end());
  for (T& v : buffer) v = to_little_endian(v);
  out.write(reinterpret_cast<const char*>(buffer.data()), static_cast<std::streamsize>(buffer.size() * sizeof(T)));
  if (!out) throw ValidationError("short write to " + path.string());
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<T> buffer(count);
  in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(T))) {
    throw ValidationError(path.string() + ": expected " + std::to_string(count * sizeof(T)) + " bytes");
  }
  for (T& v : buffer) v = to_little_endian(v);
  return buffer;
}

void write_header(const std::filesystem::path& path, const VolumeHeader& h) {
  json j;
  j["dims"] = {h.dims.x, h.dims.y, h.dims.z};
  j["spacing_mm"] = {h.spacing_mm[0], h.spacing_mm[1], h.spacing_mm[2]};
  j["dtype"] = h.dtype;
  j["patient_id"] = h.patient_id;
  write_text_file(sidecar_path(path), j.dump() + "\n");
}

json nodule_to_json(const NoduleAnnotation& n) {
  json j;
  j["center_vox"] = {n.center.x, n.center.y, n.center.z};
  j["radius_vox"] = n.radius;
  j["label"] = n.label ? json(to_string(*n.label)) : json(nullptr);
  return j;
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& voxel_path) {
  std::filesystem::path p = voxel_path;
  p.replace_extension(".json");
  return p;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  out << text;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_volume(const std::filesystem::path& path, const HUVolume& volume) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_raw<std::int16_t>(path, volume.voxels.values());
  write_header(path, {volume.voxels.dims(), volume.spacing_mm, "i16", volume.patient_id});
}

void write_volume(const std::filesystem::path& path, const Grid3<float>& voxels,
                  const std::array<double, 3>& spacing_mm, const std::string& patient_id) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_raw<float>(path, voxels.values());
  write_header(path, {voxels.dims(), spacing_mm, "f32", patient_id});
}

VolumeHeader read_volume_header(const std::filesystem::path& path) {
  VolumeHeader h;
  try {
    const json j = json::parse(read_text_file(sidecar_path(path)));
    h.dims = {j.at("dims").at(0).get<int>(), j.at("dims").at(1).get<int>(), j.at("dims").at(2).get<int>()};
    for (int a = 0; a < 3; ++a) h.spacing_mm[a] = j.at("spacing_mm").at(a).get<double>();
    h.dtype = j.at("dtype").get<std::string>();
    h.patient_id = j.value("patient_id", std::string{});
  } catch (const json::exception& e) {
    throw ValidationError("malformed sidecar for " + path.string() + ": " + e.what());
  }
  if (h.dims.x < 1 || h.dims.y < 1 || h.dims.z < 1) {
    throw ValidationError("sidecar for " + path.string() + " has non-positive dims");
  }
  if (h.dtype != "i16" && h.dtype != "f32") {
    throw ValidationError("unsupported dtype '" + h.dtype + "' in " + path.string());
  }
  return h;
}

HUVolume read_hu_volume(const std::filesystem::path& path) {
  const VolumeHeader h = read_volume_header(path);
  if (h.dtype != "i16") throw ValidationError(path.string() + " is not an i16 volume");
  HUVolume v;
  v.voxels = Grid3<std::int16_t>(h.dims, 0);
  v.voxels.storage() = read_raw<std::int16_t>(path, h.dims.count());
  v.spacing_mm = h.spacing_mm;
  v.patient_id = h.patient_id;
  return v;
}

Grid3<float> read_f32_volume(const std::filesystem::path& path, VolumeHeader* header) {
  const VolumeHeader h = read_volume_header(path);
  if (h.dtype != "f32") throw ValidationError(path.string() + " is not an f32 volume");
  Grid3<float> g(h.dims, 0.0f);
  g.storage() = read_raw<float>(path, h.dims.count());
  if (header) *header = h;
  return g;
}

std::string to_json_line(const ManifestRecord& r) {
  json j;
  j["patient_id"] = r.patient_id;
  j["volume_path"] = r.volume_path;
  j["cancer"] = r.cancer ? json(*r.cancer) : json(nullptr);
  j["nodules"] = json::array();
  for (const NoduleAnnotation& n : r.nodules) j["nodules"].push_back(nodule_to_json(n));
  return j.dump();
}

ManifestRecord manifest_record_from_json(const std::string& line) {
  ManifestRecord r;
  try {
    const json j = json::parse(line);
    r.patient_id = j.at("patient_id").get<std::string>();
    r.volume_path = j.at("volume_path").get<std::string>();
    if (j.contains("cancer") && !j["cancer"].is_null()) r.cancer = j["cancer"].get<bool>();
    for (const json& n : j.value("nodules", json::array())) {
      NoduleAnnotation a;
      for (int k = 0; k < 3; ++k) a.center[k] = n.at("center_vox").at(k).get<double>();
      a.radius = n.at("radius_vox").get<double>();
      if (!(a.radius > 0.0)) throw ValidationError("nodule radius must be > 0 for " + r.patient_id);
      if (n.contains("label") && !n["label"].is_null()) {
        const std::string s = n["label"].get<std::string>();
        if (s == "malignant") {
          a.label = NoduleLabel::kMalignant;
        } else if (s == "benign") {
          a.label = NoduleLabel::kBenign;
        } else {
          throw ValidationError("unknown nodule label '" + s + "'");
        }
      }
      r.nodules.push_back(a);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed manifest line: ") + e.what());
  }
  return r;
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestRecord> records) {
  std::string text;
  for (const ManifestRecord& r : records) text += to_json_line(r) + "\n";
  write_text_file(path, text);
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::vector<ManifestRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(manifest_record_from_json(line));
  }
  return out;
}

}  // namespace lungpipe
