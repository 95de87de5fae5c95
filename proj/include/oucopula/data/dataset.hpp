#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oucopula/backbone.hpp"
#include "oucopula/nd/tensor.hpp"

namespace oucopula::data {

using Labels = std::array<double, kLabelCount>;

/// One subject: both eyes (C x H x W each) and the four labels
/// (OS-SE, OS-AL, OD-SE, OD-AL).
struct PatientRecord {
  nd::Tensor os_image;
  nd::Tensor od_image;
  Labels labels{};

  bool operator==(const PatientRecord&) const = default;
};

enum class Provenance { synthetic, external };

inline std::string to_string(Provenance p) { return p == Provenance::synthetic ? "synthetic" : "external"; }

struct DatasetContainer {
  std::vector<PatientRecord> records;
  Provenance provenance = Provenance::synthetic;
  nlohmann::json generator = nlohmann::json::object();  // generator echo, empty for external data

  std::size_t size() const { return records.size(); }
  std::size_t channels() const { return records.empty() ? 0 : records.front().os_image.dim(0); }
  std::size_t height() const { return records.empty() ? 0 : records.front().os_image.dim(1); }
  std::size_t width() const { return records.empty() ? 0 : records.front().os_image.dim(2); }

  /// Checks the container invariants: nonempty, homogeneous C x H x W images, finite labels.
  void validate() const {
    if (records.empty()) throw ShapeError("dataset: no records");
    const nd::Shape& ref = records.front().os_image.shape();
    if (ref.rank() != 3) throw ShapeError("dataset: images must be C x H x W, got " + ref.str());
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (!(r.os_image.shape() == ref) || !(r.od_image.shape() == ref)) {
        throw ShapeError("dataset: record " + std::to_string(i) + " has image shape " + r.os_image.shape().str() + "/" +
                         r.od_image.shape().str() + ", expected " + ref.str());
      }
      for (double v : r.labels) {
        if (!std::isfinite(v)) throw ShapeError("dataset: record " + std::to_string(i) + " has a non-finite label");
      }
    }
  }
};

/// Stacks the chosen eye of the given records into an N x C x H x W batch.
inline nd::Tensor stack_images(const DatasetContainer& ds, std::span<const std::size_t> indices, EyeChannel eye) {
  const std::size_t c = ds.channels(), h = ds.height(), w = ds.width(), plane = c * h * w;
  nd::Tensor out(nd::Shape{indices.size(), c, h, w});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& rec = ds.records.at(indices[i]);
    const nd::Tensor& img = eye == EyeChannel::os ? rec.os_image : rec.od_image;
    std::copy(img.data(), img.data() + plane, out.data() + i * plane);
  }
  return out;
}

}  // namespace oucopula::data
