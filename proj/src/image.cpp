#include "idinvert/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace idinvert::image {

namespace {

std::uint8_t to_byte(double v) {
  const double s = std::clamp((v + 1.0) * 0.5, 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::lround(s));
}

}  // namespace

std::vector<std::uint8_t> encode_png(const ImageTensor& img) {
  if (img.channels != 3 && img.channels != 1) throw ImageError("encode_png: unsupported channel count");
  if (img.width <= 0 || img.height <= 0) throw ImageError("encode_png: empty image");
  const int hw = img.height * img.width;
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(hw) * img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        pixels[(static_cast<std::size_t>(y) * img.width + x) * img.channels + c] = to_byte(img.at(c, y, x));

  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(img.width);
  desc.height = static_cast<png_uint_32>(img.height);
  desc.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&desc, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw ImageError(std::string("png encode failed: ") + desc.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&desc, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw ImageError(std::string("png encode failed: ") + desc.message);
  }
  out.resize(size);
  return out;
}

ImageTensor decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw ImageError("payload is not a PNG image");
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&desc, bytes.data(), bytes.size())) {
    throw ImageError(std::string("png decode failed: ") + desc.message);
  }
  desc.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(desc));
  if (!png_image_finish_read(&desc, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&desc);
    throw ImageError(std::string("png decode failed: ") + desc.message);
  }
  ImageTensor img(3, static_cast<int>(desc.height), static_cast<int>(desc.width));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] / 255.0 * 2.0 - 1.0;
  return img;
}

void write_png(const std::filesystem::path& path, const ImageTensor& img) {
  auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ImageTensor read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

ImageTensor center_crop_resize(const ImageTensor& img, int res) {
  if (res <= 0) throw ImageError("invalid target resolution");
  const int side = std::min(img.height, img.width);
  if (side <= 0) throw ImageError("empty image");
  const int y0 = (img.height - side) / 2;
  const int x0 = (img.width - side) / 2;
  ImageTensor out(img.channels, res, res);
  const double scale = static_cast<double>(side) / res;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) {
        // Box filter over the source footprint of the destination pixel.
        const double sy0 = y * scale, sy1 = (y + 1) * scale;
        const double sx0 = x * scale, sx1 = (x + 1) * scale;
        double acc = 0.0, wsum = 0.0;
        for (int sy = static_cast<int>(std::floor(sy0)); sy < static_cast<int>(std::ceil(sy1)); ++sy) {
          const double wy = std::min<double>(sy + 1, sy1) - std::max<double>(sy, sy0);
          for (int sx = static_cast<int>(std::floor(sx0)); sx < static_cast<int>(std::ceil(sx1)); ++sx) {
            const double wx = std::min<double>(sx + 1, sx1) - std::max<double>(sx, sx0);
            acc += wy * wx * img.at(c, y0 + sy, x0 + sx);
            wsum += wy * wx;
          }
        }
        out.at(c, y, x) = acc / wsum;
      }
    }
  }
  return out;
}

ad::Tensor to_batch(std::span<const ImageTensor> images) {
  if (images.empty()) throw ad::ShapeError("to_batch of empty image list");
  const auto& first = images.front();
  ad::Tensor out({static_cast<int>(images.size()), first.channels, first.height, first.width});
  auto dst = out.data();
  std::size_t off = 0;
  for (const auto& img : images) {
    if (!img.same_shape(first)) throw ad::ShapeError("to_batch: images differ in shape");
    std::copy(img.data.begin(), img.data.end(), dst.begin() + static_cast<std::ptrdiff_t>(off));
    off += img.size();
  }
  return out;
}

ImageTensor from_batch(const ad::Tensor& batch, int index) {
  if (batch.rank() != 4) throw ad::ShapeError("from_batch expects [N,C,H,W]");
  ImageTensor img(batch.dim(1), batch.dim(2), batch.dim(3));
  const std::size_t n = img.size();
  auto src = batch.data();
  std::copy(src.begin() + static_cast<std::ptrdiff_t>(n * index), src.begin() + static_cast<std::ptrdiff_t>(n * (index + 1)),
            img.data.begin());
  return img;
}

std::vector<ImageTensor> unbatch(const ad::Tensor& batch) {
  std::vector<ImageTensor> out;
  for (int i = 0; i < batch.dim(0); ++i) out.push_back(from_batch(batch, i));
  return out;
}

ImageTensor tile(std::span<const ImageTensor> images, int cols, double fill) {
  if (images.empty() || cols <= 0) throw ImageError("tile: nothing to tile");
  const auto& f = images.front();
  const int rows = static_cast<int>((images.size() + cols - 1) / cols);
  ImageTensor out(f.channels, rows * (f.height + 1) - 1, cols * (f.width + 1) - 1, fill);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
    for (int ch = 0; ch < f.channels; ++ch)
      for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x) out.at(ch, r * (f.height + 1) + y, c * (f.width + 1) + x) = images[i].at(ch, y, x);
  }
  return out;
}

}  // namespace idinvert::image
