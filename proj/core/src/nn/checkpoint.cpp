// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/nn/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace lungpipe::nn {
namespace {

constexpr std::array<char, 8> kMagic{'L', 'P', 'C', 'K', 'P', 'T', '0', '1'};

template <typename U>
U swap_bytes(U v) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<U>(bytes);
}

template <typename U>
void put(std::ostream& os, U v) {
  if constexpr (std::endian::native == std::endian::big) v = swap_bytes(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& is, const std::string& what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw ValidationError("checkpoint: truncated " + what);
  if constexpr (std::endian::native == std::endian::big) v = swap_bytes(v);
  return v;
}

std::string get_string(std::istream& is, std::uint32_t len, const std::string& what) {
  std::string s(len, '\0');
  if (len > 0 && !is.read(s.data(), len)) throw ValidationError("checkpoint: truncated " + what);
  return s;
}

}  // namespace

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return &t;
  }
  return nullptr;
}

template <typename T>
Checkpoint make_checkpoint(Network<T>& net, CheckpointMeta meta) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  if (ckpt.meta.architecture_id.empty()) ckpt.meta.architecture_id = net.architecture_id();
  for (auto& p : net.named_parameters()) ckpt.arrays.emplace_back(p.name, p.param->value.template cast<float>());
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ValidationError("checkpoint: cannot open " + path.string() + " for writing");
  nlohmann::json meta = {{"architecture_id", ckpt.meta.architecture_id},
                         {"step", ckpt.meta.step},
                         {"rng_seed", ckpt.meta.rng_seed},
                         {"config", nlohmann::json::parse(ckpt.meta.config_json)}};
  const std::string text = meta.dump();
  os.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& [name, t] : ckpt.arrays) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape5& s = t.shape();
    for (int d : {s.n, s.c, s.d, s.h, s.w}) put<std::int32_t>(os, d);
    for (float v : t.values()) put<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw ValidationError("checkpoint: write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("checkpoint: cannot open " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw ValidationError("checkpoint: " + path.string() + " is not a checkpoint archive");
  }
  Checkpoint ckpt;
  const auto meta_len = get<std::uint32_t>(is, "metadata length");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(get_string(is, meta_len, "metadata"));
    ckpt.meta.architecture_id = meta.at("architecture_id").get<std::string>();
    ckpt.meta.step = meta.at("step").get<std::int64_t>();
    ckpt.meta.rng_seed = meta.at("rng_seed").get<std::uint64_t>();
    ckpt.meta.config_json = meta.value("config", nlohmann::json::object()).dump();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  const auto count = get<std::uint32_t>(is, "array count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = get<std::uint32_t>(is, "array name");
    std::string name = get_string(is, name_len, "array name");
    Shape5 s;
    s.n = get<std::int32_t>(is, "shape");
    s.c = get<std::int32_t>(is, "shape");
    s.d = get<std::int32_t>(is, "shape");
    s.h = get<std::int32_t>(is, "shape");
    s.w = get<std::int32_t>(is, "shape");
    if (s.n < 0 || s.c < 0 || s.d < 0 || s.h < 0 || s.w < 0) throw ValidationError("checkpoint: negative shape in " + name);
    Tensor<float> t(s);
    for (float& v : t.values()) v = std::bit_cast<float>(get<std::uint32_t>(is, "values of " + name));
    ckpt.arrays.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

template <typename T>
void load_parameters(const Checkpoint& ckpt, Network<T>& net) {
  if (!net.architecture_id().empty() && ckpt.meta.architecture_id != net.architecture_id()) {
    throw ValidationError("checkpoint architecture '" + ckpt.meta.architecture_id + "' does not match '" +
                          net.architecture_id() + "'");
  }
  for (auto& p : net.named_parameters()) {
    const Tensor<float>* t = ckpt.find(p.name);
    if (t == nullptr) throw ValidationError("checkpoint: missing parameter " + p.name);
    require_shape(t->shape(), p.param->value.shape(), "checkpoint parameter " + p.name);
    p.param->value = t->template cast<T>();
  }
}

template Checkpoint make_checkpoint<float>(Network<float>&, CheckpointMeta);
template Checkpoint make_checkpoint<double>(Network<double>&, CheckpointMeta);
template void load_parameters<float>(const Checkpoint&, Network<float>&);
template void load_parameters<double>(const Checkpoint&, Network<double>&);

}  // namespace lungpipe::nn
