#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace bhdrag {

/// Stored PNG sample = HU + 1024, so air (-1000 HU) lands at 24 and the
/// calibrated floor (-1024 HU) at 0. Values are clamped into u16 range.
inline constexpr int kHuPngOffset = 1024;

/// Raw Hounsfield-unit slice, row-major.
struct HuImage {
  int height = 0;
  int width = 0;
  std::vector<std::int16_t> hu;

  std::int16_t at(int row, int col) const { return hu[static_cast<std::size_t>(row) * width + col]; }
  std::int16_t& at(int row, int col) { return hu[static_cast<std::size_t>(row) * width + col]; }

  bool operator==(const HuImage&) const = default;
};

/// Windowed slice with every pixel in [0, 1], row-major.
struct NormalizedImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  double at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
  double& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * width + col]; }
};

/// Writes a 16-bit grayscale PNG holding HU + 1024.
void write_hu_png(const std::filesystem::path& path, const HuImage& image);

/// Reads a 16-bit grayscale PNG written by write_hu_png.
HuImage read_hu_png(const std::filesystem::path& path);

/// Reads the raw bytes of a file, e.g. for base64-embedding a PNG.
std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);

}  // namespace bhdrag
