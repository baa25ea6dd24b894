// bhdrag-make-demo: writes small synthetic CT volumes with class-dependent
// cyst patterns so the full pipeline can be exercised without clinical
// data. The patterns are caricatures, not clinical simulations.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bhdrag/error.hpp"
#include "bhdrag/rng.hpp"
#include "bhdrag/types.hpp"
#include "bhdrag/volume.hpp"

namespace fs = std::filesystem;

namespace {

struct CystStyle {
  int count;
  double min_radius;
  double max_radius;
  double z_stretch;      // >1 elongates along z (lentiform look)
  double lower_bias;     // 0 = uniform, 1 = concentrated in lower half
  double upper_bias;     // analogous for the upper half
};

CystStyle style_for(bhdrag::ClassLabel label) {
  switch (label) {
    case bhdrag::ClassLabel::BHD:
      return {6, 2.5, 4.5, 1.8, 0.7, 0.0};
    case bhdrag::ClassLabel::LAM:
      return {24, 1.0, 2.0, 1.0, 0.0, 0.0};
    case bhdrag::ClassLabel::PLCH:
      return {14, 1.2, 3.0, 0.7, 0.0, 0.7};
    case bhdrag::ClassLabel::LIP:
      return {4, 1.0, 1.8, 1.0, 0.0, 0.0};
  }
  return {8, 1.0, 2.0, 1.0, 0.0, 0.0};
}

bhdrag::Volume3D make_volume(const std::string& patient_id, bhdrag::ClassLabel label, int size,
                             bhdrag::Rng& rng) {
  bhdrag::Volume3D volume;
  volume.depth = size;
  volume.height = size;
  volume.width = size;
  volume.spacing_mm = {1.0, 1.0, 1.0};
  volume.patient_id = patient_id;
  volume.class_label = label;
  volume.voxels.resize(static_cast<std::size_t>(size) * size * size);

  for (auto& v : volume.voxels) {
    const double hu = -850.0 + 35.0 * rng.next_gaussian();
    v = static_cast<std::int16_t>(std::clamp(hu, -1000.0, -600.0));
  }

  const CystStyle style = style_for(label);
  for (int c = 0; c < style.count; ++c) {
    const double span = style.max_radius - style.min_radius;
    const double rx = style.min_radius + span * rng.next_real();
    const double ry = style.min_radius + span * rng.next_real();
    const double rz = rx * style.z_stretch;

    double cz = rng.next_real();
    if (style.lower_bias > 0 && rng.next_real() < style.lower_bias) {
      cz = 0.5 + 0.5 * cz;  // lower half (higher z index)
    } else if (style.upper_bias > 0 && rng.next_real() < style.upper_bias) {
      cz = 0.5 * cz;
    }
    const double cx = 0.15 + 0.7 * rng.next_real();
    const double cy = 0.15 + 0.7 * rng.next_real();
    const double zc = cz * (size - 1);
    const double yc = cy * (size - 1);
    const double xc = cx * (size - 1);

    for (int z = 0; z < size; ++z) {
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double dz = (z - zc) / rz;
          const double dy = (y - yc) / ry;
          const double dx = (x - xc) / rx;
          if (dz * dz + dy * dy + dx * dx <= 1.0) {
            volume.voxels[(static_cast<std::size_t>(z) * size + y) * size + x] = -990;
          }
        }
      }
    }
  }
  return volume;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate synthetic demo CT volumes"};
  std::string out_dir = "demo/volumes";
  int patients_per_class = 3;
  int size = 24;
  std::uint64_t seed = 1;
  app.add_option("--out", out_dir, "Output directory")->capture_default_str();
  app.add_option("--patients-per-class", patients_per_class, "Volumes per disease class")
      ->capture_default_str();
  app.add_option("--size", size, "Cubic volume edge length in voxels")->capture_default_str();
  app.add_option("--seed", seed, "Generation seed")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(out_dir);
    const bhdrag::ClassLabel classes[] = {bhdrag::ClassLabel::BHD, bhdrag::ClassLabel::LAM,
                                          bhdrag::ClassLabel::PLCH, bhdrag::ClassLabel::LIP};
    const char* prefixes[] = {"bhd", "lam", "plch", "lip"};
    bhdrag::Rng rng(seed);
    int written = 0;
    for (int c = 0; c < 4; ++c) {
      for (int i = 0; i < patients_per_class; ++i) {
        char patient_id[32];
        std::snprintf(patient_id, sizeof(patient_id), "%s%02d", prefixes[c], i + 1);
        bhdrag::Rng patient_rng = rng.fork(static_cast<std::uint64_t>(c) * 1000 + i);
        const bhdrag::Volume3D volume = make_volume(patient_id, classes[c], size, patient_rng);
        bhdrag::save_volume(fs::path(out_dir) / (std::string(patient_id) + ".json"), volume);
        ++written;
      }
    }
    std::printf("wrote %d volumes under %s\n", written, out_dir.c_str());
  } catch (const bhdrag::Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
  return 0;
}
