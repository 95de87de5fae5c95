#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "oucopula/data/dataset.hpp"
#include "oucopula/io/binary.hpp"

namespace oucopula::data {

/// Decodes an uncompressed Netpbm image (P2/P5 grayscale, P3/P6 RGB) into a
/// C x H x W tensor scaled to [0, 1].
inline nd::Tensor read_netpbm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;

  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) -> unsigned long {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) {
      throw FormatError(path + ": expected " + std::string(what) + " at byte offset " + std::to_string(pos));
    }
    unsigned long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError(path + ": not a PGM/PPM file");
  const char kind = static_cast<char>(bytes[1]);
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
    throw FormatError(path + ": unsupported Netpbm variant P" + std::string(1, kind));
  }
  pos = 2;
  const unsigned long width = number("width"), height = number("height"), maxval = number("maxval");
  if (width == 0 || height == 0 || maxval == 0 || maxval > 65535) throw FormatError(path + ": invalid header");
  const std::size_t channels = (kind == '3' || kind == '6') ? 3 : 1;
  const bool binary = kind == '5' || kind == '6';
  const std::size_t sample_bytes = maxval < 256 ? 1 : 2;
  if (binary) ++pos;  // single whitespace after maxval

  nd::Tensor img(nd::Shape{channels, height, width});
  const double scale = 1.0 / static_cast<double>(maxval);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        unsigned long v;
        if (binary) {
          if (pos + sample_bytes > bytes.size()) {
            throw FormatError(path + ": truncated pixel data at byte offset " + std::to_string(pos));
          }
          v = sample_bytes == 1 ? bytes[pos] : (static_cast<unsigned long>(bytes[pos]) << 8) | bytes[pos + 1];
          pos += sample_bytes;
        } else {
          v = number("pixel value");
        }
        if (v > maxval) throw FormatError(path + ": pixel value exceeds maxval");
        img[(c * height + y) * width + x] = static_cast<double>(static_cast<float>(static_cast<double>(v) * scale));
      }
    }
  }
  return img;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && std::isspace(static_cast<unsigned char>(cell.back()))) cell.pop_back();
    std::size_t b = 0;
    while (b < cell.size() && std::isspace(static_cast<unsigned char>(cell[b]))) ++b;
    out.push_back(cell.substr(b));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": '" + s + "' is not a number");
  }
}

/// Builds a container from a manifest CSV `id,os_path,od_path,os_se,os_al,od_se,od_al`.
/// Image paths are resolved relative to the manifest's directory.
inline DatasetContainer read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest '" + path + "'");
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> expected{"id", "os_path", "od_path", "os_se", "os_al", "od_se", "od_al"};
  if (split_csv_line(line) != expected) {
    throw FormatError(path + ": header must be id,os_path,od_path,os_se,os_al,od_se,od_al");
  }
  DatasetContainer ds;
  ds.provenance = Provenance::external;
  std::vector<std::string> ids;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path + ":" + std::to_string(lineno);
    if (cells.size() != expected.size()) throw FormatError(where + ": expected 7 columns");
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path fp(p);
      return (fp.is_absolute() ? fp : base / fp).string();
    };
    PatientRecord rec;
    rec.os_image = read_netpbm(resolve(cells[1]));
    rec.od_image = read_netpbm(resolve(cells[2]));
    for (std::size_t k = 0; k < kLabelCount; ++k) rec.labels[k] = parse_double(cells[3 + k], where);
    ids.push_back(cells[0]);
    ds.records.push_back(std::move(rec));
  }
  try {
    ds.validate();
  } catch (const ShapeError& e) {
    throw FormatError(path + ": " + e.what());
  }
  ds.generator = nlohmann::json::object();
  ds.generator["manifest"] = std::filesystem::path(path).filename().string();
  ds.generator["ids"] = ids;
  return ds;
}

}  // namespace oucopula::data
