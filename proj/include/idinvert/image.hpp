#pragma once

// Image currency of the project: a CHW array with values in [-1, 1].

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "idinvert/autodiff.hpp"

namespace idinvert {

struct ImageTensor {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<double> data;  // CHW

  ImageTensor() = default;
  ImageTensor(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const ImageTensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

/// Raised for undecodable or malformed image payloads.
class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace image {

/// 8-bit RGB PNG of the image, mapping [-1, 1] to [0, 255] with rounding.
std::vector<std::uint8_t> encode_png(const ImageTensor& img);
ImageTensor decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::filesystem::path& path, const ImageTensor& img);
ImageTensor read_png(const std::filesystem::path& path);

/// Aspect-preserving center crop followed by box-filter resampling to res x res.
ImageTensor center_crop_resize(const ImageTensor& img, int res);

/// Stacks images into an [N, C, H, W] tensor.
ad::Tensor to_batch(std::span<const ImageTensor> images);
ImageTensor from_batch(const ad::Tensor& batch, int index);
std::vector<ImageTensor> unbatch(const ad::Tensor& batch);

/// Tiles images into a grid (rows x cols), padding with `fill`.
ImageTensor tile(std::span<const ImageTensor> images, int cols, double fill = -1.0);

}  // namespace image
}  // namespace idinvert
