#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bhdrag/image.hpp"
#include "bhdrag/types.hpp"

namespace bhdrag {

/// One patient scan: signed HU voxels, depth x height x width, row-major
/// with x fastest.
struct Volume3D {
  int depth = 0;   // transverse frame count
  int height = 0;  // coronal frame count
  int width = 0;   // sagittal frame count
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::string patient_id;
  ClassLabel class_label = ClassLabel::BHD;
  std::vector<std::int16_t> voxels;

  std::int16_t at(int z, int y, int x) const {
    return voxels[(static_cast<std::size_t>(z) * height + y) * width + x];
  }

  /// Throws InvalidVolume unless dims >= 1, spacing > 0 and the voxel
  /// buffer matches the dims.
  void validate() const;
};

/// Volume files come as a JSON header (dims, spacing_mm, patient_id,
/// class_label) next to a raw little-endian int16 voxel file with the same
/// stem and a .raw extension.
Volume3D load_volume(const std::filesystem::path& header_path);
void save_volume(const std::filesystem::path& header_path, const Volume3D& volume);

/// The 2-D section of `volume` at `frame` along the axis of `view`.
/// Transverse frames are height x width, coronal depth x width,
/// sagittal depth x height.
HuImage extract_slice(const Volume3D& volume, ViewPlane view, int frame);

std::string make_slice_id(const std::string& patient_id, ViewPlane view, int frame);

struct SlicedVolume {
  std::vector<SliceRecord> records;
  std::vector<HuImage> images;  // aligned with records
};

/// Cuts the volume into one slice per index along each of the three view
/// axes. Records carry split = train until splits are assigned.
SlicedVolume slice_volume(const Volume3D& volume);

/// Same, but also writes each slice as a PNG under image_dir and fills
/// image_ref with ref_prefix + slice_id + ".png".
std::vector<SliceRecord> slice_volume(const Volume3D& volume,
                                      const std::filesystem::path& image_dir,
                                      const std::string& ref_prefix = "images/");

}  // namespace bhdrag
