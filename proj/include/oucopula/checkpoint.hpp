#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "oucopula/backbone.hpp"
#include "oucopula/config_json.hpp"
#include "oucopula/copula.hpp"
#include "oucopula/io/binary.hpp"
#include "oucopula/train.hpp"

namespace oucopula {

inline constexpr char kCheckpointMagic[4] = {'O', 'U', 'C', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A trained model with everything needed to reproduce its predictions.
///
/// `config` must hold the model configuration under "model"; the rest of the
/// object is an opaque echo (training, split and data settings).
struct Checkpoint {
  nlohmann::ordered_json config;
  BiChannelModel model;
  Standardizer standardizer;
  std::optional<CopulaParams> copula;
};

namespace detail {

inline void put_entry(io::ByteWriter& w, const std::string& key, const std::vector<std::size_t>& dims,
                      const double* data) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(key.size()));
  w.text(key);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dims.size()));
  std::size_t n = 1;
  for (std::size_t d : dims) {
    w.put<std::uint64_t>(d);
    n *= d;
  }
  for (std::size_t i = 0; i < n; ++i) w.put<double>(data[i]);
}

struct Entry {
  std::vector<std::size_t> dims;
  std::vector<double> values;
};

}  // namespace detail

/// OUCM layout: magic "OUCM", u32 version, u64 config length + UTF-8 JSON config,
/// u32 entry count, then per entry: u32 key length + key, u32 rank, u64 dims,
/// little-endian f64 values. Entries are parameters by path, batch-norm running
/// statistics, normalization statistics and (when present) copula parameters.
inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string cfg = ck.config.dump();
  w.put<std::uint64_t>(cfg.size());
  w.text(cfg);

  const BiChannelModel& m = ck.model;
  const Standardizer& st = ck.standardizer;
  std::uint32_t count = static_cast<std::uint32_t>(m.params.size() + 2 * m.bn_states.size() + 4);
  if (ck.copula) count += 2;
  w.put<std::uint32_t>(count);
  for (const auto& p : m.params) {
    const auto dims = p.value.shape().dims();
    detail::put_entry(w, p.path, {dims.begin(), dims.end()}, p.value.data());
  }
  for (std::size_t i = 0; i < m.bn_states.size(); ++i) {
    const auto& s = m.bn_states[i];
    detail::put_entry(w, m.bn_names[i] + ".running_mean", {s.running_mean.size()}, s.running_mean.data());
    detail::put_entry(w, m.bn_names[i] + ".running_var", {s.running_var.size()}, s.running_var.data());
  }
  detail::put_entry(w, "normalization.label_mean", {kLabelCount}, st.label_mean.data());
  detail::put_entry(w, "normalization.label_sd", {kLabelCount}, st.label_sd.data());
  detail::put_entry(w, "normalization.image_mean", {st.image_mean.size()}, st.image_mean.data());
  detail::put_entry(w, "normalization.image_sd", {st.image_sd.size()}, st.image_sd.data());
  if (ck.copula) {
    const auto p = static_cast<std::size_t>(ck.copula->dim());
    const Eigen::VectorXd sigma = ck.copula->sigma;
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> gamma = ck.copula->gamma;
    detail::put_entry(w, "copula.sigma", {p}, sigma.data());
    detail::put_entry(w, "copula.gamma", {p, p}, gamma.data());
  }
  return w.buffer();
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  io::ByteWriter w;
  const auto bytes = encode_checkpoint(ck);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline Checkpoint decode_checkpoint(io::ByteReader& r) {
  if (r.text(4, "magic") != std::string(kCheckpointMagic, 4)) {
    throw FormatError("not a checkpoint: expected magic 'OUCM' at byte offset 0");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) r.fail("unsupported OUCM version " + std::to_string(version));
  const auto cfg_len = r.get<std::uint64_t>("config length");
  r.need(cfg_len, "config");
  const std::string cfg_text = r.text(static_cast<std::size_t>(cfg_len), "config");
  Checkpoint ck;
  try {
    ck.config = nlohmann::ordered_json::parse(cfg_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed config JSON: ") + e.what());
  }
  if (!ck.config.contains("model")) throw FormatError("checkpoint: config lacks the 'model' section");

  std::map<std::string, detail::Entry> entries;
  const auto count = r.get<std::uint32_t>("entry count");
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto key_len = r.get<std::uint32_t>("key length");
    std::string key = r.text(key_len, "key");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 4) r.fail("entry '" + key + "' has rank " + std::to_string(rank));
    detail::Entry entry;
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      entry.dims.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("dimension")));
      n *= entry.dims.back();
    }
    r.need(n * 8, "values of '" + key + "'");
    entry.values.resize(n);
    for (double& v : entry.values) v = r.get<double>("value");
    if (!entries.emplace(key, std::move(entry)).second) r.fail("duplicate entry '" + key + "'");
  }
  if (r.remaining() != 0) r.fail("unexpected trailing bytes");

  auto take = [&](const std::string& key) {
    auto it = entries.find(key);
    if (it == entries.end()) throw FormatError("checkpoint: missing entry '" + key + "'");
    detail::Entry e = std::move(it->second);
    entries.erase(it);
    return e;
  };
  auto fill = [&](const std::string& key, std::span<double> dst, std::span<const std::size_t> dims) {
    detail::Entry e = take(key);
    if (!std::equal(e.dims.begin(), e.dims.end(), dims.begin(), dims.end())) {
      throw FormatError("checkpoint: entry '" + key + "' has the wrong shape");
    }
    std::copy(e.values.begin(), e.values.end(), dst.begin());
  };

  ck.model = build_model(backbone_config_from_json(ck.config["model"]), 0);
  for (auto& p : ck.model.params) fill(p.path, p.value.values(), p.value.shape().dims());
  for (std::size_t i = 0; i < ck.model.bn_states.size(); ++i) {
    auto& s = ck.model.bn_states[i];
    const std::size_t c = s.running_mean.size();
    fill(ck.model.bn_names[i] + ".running_mean", s.running_mean.values(), std::array{c});
    fill(ck.model.bn_names[i] + ".running_var", s.running_var.values(), std::array{c});
  }
  Standardizer& st = ck.standardizer;
  fill("normalization.label_mean", st.label_mean, std::array{kLabelCount});
  fill("normalization.label_sd", st.label_sd, std::array{kLabelCount});
  const std::size_t c = ck.model.config.in_channels;
  st.image_mean.resize(c);
  st.image_sd.resize(c);
  fill("normalization.image_mean", st.image_mean, std::array{c});
  fill("normalization.image_sd", st.image_sd, std::array{c});
  if (entries.contains("copula.sigma")) {
    detail::Entry sigma = take("copula.sigma");
    detail::Entry gamma = take("copula.gamma");
    const std::size_t p = sigma.values.size();
    if (sigma.dims.size() != 1 || gamma.dims != std::vector<std::size_t>{p, p}) {
      throw FormatError("checkpoint: copula entries have inconsistent shapes");
    }
    Eigen::VectorXd s = Eigen::Map<Eigen::VectorXd>(sigma.values.data(), static_cast<Eigen::Index>(p));
    Eigen::MatrixXd g = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        gamma.values.data(), static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
    const bool repaired = ck.config.contains("copula") && ck.config["copula"].value("repaired", false);
    ck.copula = make_copula_params(s, g, repaired);
  }
  if (!entries.empty()) throw FormatError("checkpoint: unexpected entry '" + entries.begin()->first + "'");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  io::ByteReader r = io::ByteReader::from_file(path);
  return decode_checkpoint(r);
}

}  // namespace oucopula
