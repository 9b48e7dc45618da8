#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ecls/box.hpp"

namespace ecls {

/// H x W x C image of unit-interval intensities, row-major with interleaved channels.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int y, int x, int c) noexcept { return data[index(y, x, c)]; }
  double at(int y, int x, int c) const noexcept { return data[index(y, x, c)]; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Rounds every intensity to the nearest k/255, the precision of the file format.
inline void quantize(Image& img) {
  for (double& v : img.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

enum class Split { train, test };

struct FrameRecord {
  Image image;
  std::vector<Box> gt_boxes;
  std::vector<int> gt_classes;
  std::int64_t frame_index = 0;
  bool is_labeled = false;
  Split split = Split::train;

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

/// Boxes and classes of a frame as parallel spans, the unit the detector
/// assigns targets from. Used for both ground truth and pseudo labels.
struct LabelView {
  std::span<const Box> boxes;
  std::span<const int> classes;
};

inline LabelView ground_truth(const FrameRecord& f) { return {f.gt_boxes, f.gt_classes}; }

}  // namespace ecls
