#include "mixtrain/image.hpp"

namespace mixtrain {

float Image::mean() const {
  if (data_.empty()) return 0.0f;
  double acc = 0.0;
  for (float v : data_) acc += v;
  return static_cast<float>(acc / static_cast<double>(data_.size()));
}

std::vector<float> Image::channel_means() const {
  std::vector<float> out(channels_, 0.0f);
  for (int c = 0; c < channels_; ++c) {
    double acc = 0.0;
    for (float v : plane(c)) acc += v;
    out[c] = static_cast<float>(acc / (static_cast<double>(height_) * width_));
  }
  return out;
}

}  // namespace mixtrain
