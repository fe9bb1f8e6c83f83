#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace spd {

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t* at(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  bool operator==(const Image&) const = default;
};

/// PNG encoding; `text` entries become tEXt chunks. No timestamp chunk is
/// written, so equal inputs give equal bytes.
std::vector<std::uint8_t> encode_png(const Image& image, const std::map<std::string, std::string>& text = {});
Image decode_png(const std::vector<std::uint8_t>& bytes, std::map<std::string, std::string>* text = nullptr);

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);
void write_file(const std::string& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::string& path);

/// Lower-case hex SHA-256.
std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::string& path);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);

}  // namespace spd
