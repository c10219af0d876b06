#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fvla {

/// Row-major H x W x 3 image with values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, float fill = 0.0f);

  float& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
  float at(int r, int c, int ch) const { return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// 8-bit RGB PNG; values are rounded to the nearest 1/255.
std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_png(std::span<const std::uint8_t> bytes);
void save_png(const Image& image, const std::filesystem::path& path);
Image load_png(const std::filesystem::path& path);

double mse(const Image& a, const Image& b);

}  // namespace fvla
