#pragma once

#include <cstdint>
#include <string>

#include "oucopula/data/dataset.hpp"
#include "oucopula/io/binary.hpp"

namespace oucopula::data {

inline constexpr char kContainerMagic[4] = {'O', 'U', 'D', '1'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 24;

/// Serializes to the OUD1 layout: magic, version, n, C, H, W (u32 each), then per
/// record the OS and OD images as little-endian f32 and the four labels as f64,
/// then a u32-length-prefixed JSON metadata block.
inline std::vector<unsigned char> encode_container(const DatasetContainer& ds) {
  ds.validate();
  io::ByteWriter w;
  w.bytes(kContainerMagic, 4);
  w.put<std::uint32_t>(kContainerVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.channels()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.height()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.width()));
  for (const auto& r : ds.records) {
    for (double v : r.os_image.values()) w.put<float>(static_cast<float>(v));
    for (double v : r.od_image.values()) w.put<float>(static_cast<float>(v));
    for (double v : r.labels) w.put<double>(v);
  }
  nlohmann::json meta;
  meta["provenance"] = to_string(ds.provenance);
  meta["generator"] = ds.generator;
  const std::string text = meta.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.text(text);
  return w.buffer();
}

inline void write_container(const DatasetContainer& ds, const std::string& path) {
  io::ByteWriter w;
  const auto bytes = encode_container(ds);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline DatasetContainer decode_container(io::ByteReader& r) {
  const std::string magic = r.text(4, "magic");
  if (magic != std::string(kContainerMagic, 4)) {
    throw FormatError("not a dataset container: expected magic 'OUD1' at byte offset 0");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kContainerVersion) r.fail("unsupported OUD1 version " + std::to_string(version));
  const auto n = r.get<std::uint32_t>("record count");
  const auto c = r.get<std::uint32_t>("channels");
  const auto h = r.get<std::uint32_t>("height");
  const auto wd = r.get<std::uint32_t>("width");
  if (n == 0 || c == 0 || h == 0 || wd == 0) r.fail("empty dimensions in header");
  const std::size_t plane = std::size_t{c} * h * wd;
  r.need(std::size_t{n} * (2 * plane * 4 + 32), "records");

  DatasetContainer ds;
  ds.records.resize(n);
  for (auto& rec : ds.records) {
    rec.os_image = nd::Tensor(nd::Shape{c, h, wd});
    rec.od_image = nd::Tensor(nd::Shape{c, h, wd});
    for (double& v : rec.os_image.values()) v = static_cast<double>(r.get<float>("OS image"));
    for (double& v : rec.od_image.values()) v = static_cast<double>(r.get<float>("OD image"));
    for (double& v : rec.labels) v = r.get<double>("labels");
  }
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  const std::string text = r.text(meta_len, "metadata");
  if (r.remaining() != 0) r.fail("unexpected trailing bytes");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset container: malformed metadata JSON: ") + e.what());
  }
  const std::string prov = meta.value("provenance", "external");
  ds.provenance = prov == "synthetic" ? Provenance::synthetic : Provenance::external;
  ds.generator = meta.value("generator", nlohmann::json::object());
  return ds;
}

inline DatasetContainer read_container(const std::string& path) {
  io::ByteReader r = io::ByteReader::from_file(path);
  return decode_container(r);
}

}  // namespace oucopula::data
