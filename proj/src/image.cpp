#include "fvla/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "fvla/error.hpp"

namespace fvla {

Image::Image(int h, int w, float fill) : height(h), width(w) {
  if (h < 1 || w < 1) throw Error(ErrorCode::InvalidArgument, "image dimensions must be positive");
  data.assign(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * 3, fill);
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  std::vector<std::uint8_t> pixels(image.data.size());
  for (std::size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data[i], 0.0f, 1.0f) * 255.0f));

  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(png, size, 0, pixels.data(), 0, nullptr))
    throw Error(ErrorCode::IoError, std::string("png encode: ") + png.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, pixels.data(), 0, nullptr))
    throw Error(ErrorCode::IoError, std::string("png encode: ") + png.message);
  out.resize(size);
  return out;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
    throw Error(ErrorCode::FormatError, std::string("png decode: ") + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr))
    throw Error(ErrorCode::FormatError, std::string("png decode: ") + png.message);
  Image image(static_cast<int>(png.height), static_cast<int>(png.width));
  for (std::size_t i = 0; i < pixels.size(); ++i) image.data[i] = static_cast<float>(pixels[i]) / 255.0f;
  return image;
}

void save_png(const Image& image, const std::filesystem::path& path) {
  const auto bytes = encode_png(image);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image load_png(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

double mse(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width)
    throw Error(ErrorCode::InvalidArgument, "mse of images with different shapes");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

}  // namespace fvla
