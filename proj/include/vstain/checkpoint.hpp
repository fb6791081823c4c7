// Checkpoint file format.
//
//   bytes 0..4   "VSGAN"
//   byte  5      format version
//   bytes 6..13  header length, u64 little-endian
//   header       JSON text: configs, loss weights, provenance, optimizer
//                scalars and the tensor table (name, shape, absolute offset)
//   payload      float32 little-endian, each tensor starting on a 64-byte
//                boundary, zero padding between tensors
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vstain/error.hpp"
#include "vstain/loss.hpp"
#include "vstain/networks.hpp"
#include "vstain/tensor.hpp"

namespace vstain {

inline constexpr char kCheckpointMagic[5] = {'V', 'S', 'G', 'A', 'N'};
inline constexpr std::uint8_t kCheckpointVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

struct OptimizerSnapshot {
  double learning_rate = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;

  friend bool operator==(const OptimizerSnapshot&, const OptimizerSnapshot&) = default;
};

struct Checkpoint {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  LossWeights weights;
  std::int64_t iteration = 0;
  std::uint64_t seed = 0;
  std::string preset;
  /// Present only when Adam moments are stored; their tensors are named
  /// "adam.gen.m/<param>" and so on.
  std::optional<OptimizerSnapshot> gen_optimizer;
  std::optional<OptimizerSnapshot> disc_optimizer;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline std::size_t align_up(std::size_t v, std::size_t a) { return (v + a - 1) / a * a; }

inline nlohmann::json optimizer_json(const OptimizerSnapshot& o) {
  return {{"learning_rate", o.learning_rate}, {"beta1", o.beta1}, {"beta2", o.beta2},
          {"epsilon", o.epsilon},             {"step", o.step}};
}

inline OptimizerSnapshot optimizer_from_json(const nlohmann::json& j) {
  OptimizerSnapshot o;
  j.at("learning_rate").get_to(o.learning_rate);
  j.at("beta1").get_to(o.beta1);
  j.at("beta2").get_to(o.beta2);
  j.at("epsilon").get_to(o.epsilon);
  j.at("step").get_to(o.step);
  return o;
}

inline void put_u32_le(std::string& out, std::size_t pos, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out[pos + b] = static_cast<char>((v >> (8 * b)) & 0xff);
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int b = 7; b >= 0; --b) v = (v << 8) | p[b];
  return v;
}

}  // namespace detail

/// Serializes a checkpoint to bytes. Equal checkpoints give equal bytes.
inline std::string encode_checkpoint(const Checkpoint& c) {
  // Offsets depend on the header length, and the header contains the offsets,
  // so iterate until the layout is stable (two passes in practice).
  std::size_t payload_start = 0;
  nlohmann::json header;
  std::string header_text;
  std::vector<std::size_t> offsets;
  for (int pass = 0; pass < 8; ++pass) {
    offsets.clear();
    nlohmann::json table = nlohmann::json::array();
    std::size_t pos = payload_start;
    for (const auto& [name, t] : c.tensors) {
      pos = detail::align_up(pos, kPayloadAlignment);
      offsets.push_back(pos);
      table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", pos}});
      pos += t.size() * 4;
    }
    header = nlohmann::json{{"generator", c.generator},
                            {"discriminator", c.discriminator},
                            {"weights", {{"lambda", c.weights.lambda}, {"alpha", c.weights.alpha}}},
                            {"provenance", {{"iteration", c.iteration}, {"seed", c.seed}, {"preset", c.preset}}},
                            {"tensors", table},
                            {"payload_end", pos}};
    if (c.gen_optimizer) header["optimizer"]["generator"] = detail::optimizer_json(*c.gen_optimizer);
    if (c.disc_optimizer) header["optimizer"]["discriminator"] = detail::optimizer_json(*c.disc_optimizer);
    header_text = header.dump();
    const std::size_t start = detail::align_up(14 + header_text.size(), kPayloadAlignment);
    if (start == payload_start) break;
    payload_start = start;
  }

  const std::size_t end = header.at("payload_end").get<std::size_t>();
  std::string out(std::max(end, payload_start), '\0');
  std::copy(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), out.begin());
  out[5] = static_cast<char>(kCheckpointVersion);
  const std::uint64_t len = header_text.size();
  for (int b = 0; b < 8; ++b) out[6 + b] = static_cast<char>((len >> (8 * b)) & 0xff);
  std::copy(header_text.begin(), header_text.end(), out.begin() + 14);
  for (std::size_t k = 0; k < c.tensors.size(); ++k) {
    const auto& t = c.tensors[k].second;
    for (std::size_t i = 0; i < t.size(); ++i) detail::put_u32_le(out, offsets[k] + 4 * i, std::bit_cast<std::uint32_t>(t[i]));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  using K = CheckpointError::Kind;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 6 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin())) {
    throw CheckpointError(K::bad_magic, "not a checkpoint file (bad magic)");
  }
  if (p[5] != kCheckpointVersion) {
    throw CheckpointError(K::version_mismatch, "checkpoint version " + std::to_string(p[5]) + ", expected " +
                                                   std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < 14) throw CheckpointError(K::truncated, "checkpoint truncated inside the preamble");
  const std::uint64_t len = detail::get_u64_le(p + 6);
  if (len > bytes.size() - 14) throw CheckpointError(K::truncated, "checkpoint truncated inside the header");

  Checkpoint c;
  nlohmann::json header;
  std::vector<std::pair<std::size_t, Shape>> layout;
  try {
    header = nlohmann::json::parse(bytes.begin() + 14, bytes.begin() + 14 + static_cast<std::ptrdiff_t>(len));
    header.at("generator").get_to(c.generator);
    header.at("discriminator").get_to(c.discriminator);
    c.weights.lambda = header.at("weights").at("lambda").get<double>();
    c.weights.alpha = header.at("weights").at("alpha").get<double>();
    const auto& prov = header.at("provenance");
    prov.at("iteration").get_to(c.iteration);
    prov.at("seed").get_to(c.seed);
    prov.at("preset").get_to(c.preset);
    if (header.contains("optimizer")) {
      const auto& o = header["optimizer"];
      if (o.contains("generator")) c.gen_optimizer = detail::optimizer_from_json(o["generator"]);
      if (o.contains("discriminator")) c.disc_optimizer = detail::optimizer_from_json(o["discriminator"]);
    }
    for (const auto& e : header.at("tensors")) {
      c.tensors.emplace_back(e.at("name").get<std::string>(), Tensor<float>());
      layout.emplace_back(e.at("offset").get<std::size_t>(), e.at("shape").get<Shape>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(K::corrupt_header, std::string("checkpoint header unreadable: ") + e.what());
  }

  // The table must describe aligned, ordered, non-overlapping regions after the header.
  std::size_t pos = detail::align_up(14 + len, kPayloadAlignment);
  for (std::size_t k = 0; k < layout.size(); ++k) {
    const auto& [offset, shape] = layout[k];
    if (offset % kPayloadAlignment != 0 || offset < pos) {
      throw CheckpointError(K::corrupt_header, "tensor table entry " + c.tensors[k].first + " has a bad offset");
    }
    pos = offset + shape_size(shape) * 4;
  }
  const auto payload_end = header["payload_end"];
  if (!payload_end.is_number_unsigned() || payload_end.get<std::size_t>() != pos) {
    throw CheckpointError(K::corrupt_header, "tensor table disagrees with the declared payload size");
  }
  if (bytes.size() < pos) {
    throw CheckpointError(K::truncated, "checkpoint payload truncated: " + std::to_string(bytes.size()) + " of " +
                                            std::to_string(pos) + " bytes");
  }
  if (bytes.size() > pos) {
    throw CheckpointError(K::corrupt_header, "trailing bytes after checkpoint payload");
  }
  for (std::size_t k = 0; k < layout.size(); ++k) {
    const auto& [offset, shape] = layout[k];
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const unsigned char* q = p + offset + 4 * i;
      const std::uint32_t u = q[0] | (q[1] << 8) | (q[2] << 16) | (static_cast<std::uint32_t>(q[3]) << 24);
      t[i] = std::bit_cast<float>(u);
    }
    c.tensors[k].second = std::move(t);
  }
  return c;
}

/// Writes to a sibling temporary file and renames it over `path`.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = encode_checkpoint(c);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw CheckpointError(CheckpointError::Kind::io, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::io, "cannot rename onto " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace vstain
