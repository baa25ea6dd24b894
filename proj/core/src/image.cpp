#include "bhdrag/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "bhdrag/error.hpp"

namespace bhdrag {

namespace {

struct FileHandle {
  std::FILE* fp = nullptr;
  ~FileHandle() {
    if (fp) std::fclose(fp);
  }
};

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() { png_destroy_write_struct(&png, &info); }
};

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, &info, nullptr); }
};

}  // namespace

void write_hu_png(const std::filesystem::path& path, const HuImage& image) {
  if (image.height <= 0 || image.width <= 0 ||
      image.hu.size() != static_cast<std::size_t>(image.height) * image.width) {
    fail(ErrorCode::DimMismatch, "HU image dims do not match buffer");
  }

  FileHandle file;
  file.fp = std::fopen(path.string().c_str(), "wb");
  if (!file.fp) fail(ErrorCode::IoError, "cannot open '" + path.string() + "' for writing");

  PngWriteGuard guard;
  guard.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!guard.png) fail(ErrorCode::IoError, "png_create_write_struct failed");
  guard.info = png_create_info_struct(guard.png);
  if (!guard.info) fail(ErrorCode::IoError, "png_create_info_struct failed");

  // Rows packed big-endian per the PNG spec, 2 bytes per sample.
  std::vector<unsigned char> row(static_cast<std::size_t>(image.width) * 2);

  if (setjmp(png_jmpbuf(guard.png))) {
    fail(ErrorCode::IoError, "libpng write error on '" + path.string() + "'");
  }

  png_init_io(guard.png, file.fp);
  png_set_IHDR(guard.png, guard.info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(guard.png, guard.info);

  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      const int stored = std::clamp(static_cast<int>(image.at(r, c)) + kHuPngOffset, 0, 65535);
      row[2 * c] = static_cast<unsigned char>((stored >> 8) & 0xff);
      row[2 * c + 1] = static_cast<unsigned char>(stored & 0xff);
    }
    png_write_row(guard.png, row.data());
  }
  png_write_end(guard.png, nullptr);
}

HuImage read_hu_png(const std::filesystem::path& path) {
  FileHandle file;
  file.fp = std::fopen(path.string().c_str(), "rb");
  if (!file.fp) fail(ErrorCode::IoError, "cannot open '" + path.string() + "' for reading");

  PngReadGuard guard;
  guard.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!guard.png) fail(ErrorCode::IoError, "png_create_read_struct failed");
  guard.info = png_create_info_struct(guard.png);
  if (!guard.info) fail(ErrorCode::IoError, "png_create_info_struct failed");

  HuImage image;
  std::vector<unsigned char> row;

  if (setjmp(png_jmpbuf(guard.png))) {
    fail(ErrorCode::FormatError, "libpng read error on '" + path.string() + "'");
  }

  png_init_io(guard.png, file.fp);
  png_read_info(guard.png, guard.info);

  const png_uint_32 width = png_get_image_width(guard.png, guard.info);
  const png_uint_32 height = png_get_image_height(guard.png, guard.info);
  const int bit_depth = png_get_bit_depth(guard.png, guard.info);
  const int color_type = png_get_color_type(guard.png, guard.info);
  if (bit_depth != 16 || color_type != PNG_COLOR_TYPE_GRAY) {
    fail(ErrorCode::FormatError,
         "'" + path.string() + "' is not a 16-bit grayscale PNG");
  }

  image.height = static_cast<int>(height);
  image.width = static_cast<int>(width);
  image.hu.resize(static_cast<std::size_t>(height) * width);
  row.resize(static_cast<std::size_t>(width) * 2);

  for (png_uint_32 r = 0; r < height; ++r) {
    png_read_row(guard.png, row.data(), nullptr);
    for (png_uint_32 c = 0; c < width; ++c) {
      const int stored = (static_cast<int>(row[2 * c]) << 8) | row[2 * c + 1];
      const int hu = std::clamp(stored - kHuPngOffset, -32768, 32767);
      image.hu[static_cast<std::size_t>(r) * width + c] = static_cast<std::int16_t>(hu);
    }
  }
  png_read_end(guard.png, nullptr);
  return image;
}

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open '" + path.string() + "' for reading");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>());
}

}  // namespace bhdrag
