#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace mixtrain {

/// Planar (channel, row, column) raster of floats.
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels = 3, float fill = 0.0f)
      : height_(height), width_(width), channels_(channels),
        data_(static_cast<std::size_t>(height) * width * channels, fill) {
    if (height <= 0 || width <= 0 || channels <= 0) {
      throw std::invalid_argument("Image: dimensions must be positive");
    }
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  float at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<float> pixels() { return data_; }
  std::span<const float> pixels() const { return data_; }
  std::span<float> plane(int c) {
    return std::span<float>(data_).subspan(static_cast<std::size_t>(c) * height_ * width_,
                                           static_cast<std::size_t>(height_) * width_);
  }
  std::span<const float> plane(int c) const {
    return std::span<const float>(data_).subspan(static_cast<std::size_t>(c) * height_ * width_,
                                                 static_cast<std::size_t>(height_) * width_);
  }

  /// Mean over all channels and pixels.
  float mean() const;
  /// Per-channel means.
  std::vector<float> channel_means() const;

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> data_;
};

}  // namespace mixtrain
