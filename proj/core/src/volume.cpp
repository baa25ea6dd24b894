#include "bhdrag/volume.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>

#include "bhdrag/binio.hpp"
#include "bhdrag/error.hpp"

namespace bhdrag {

namespace {

std::filesystem::path raw_path_for(const std::filesystem::path& header_path) {
  std::filesystem::path p = header_path;
  p.replace_extension(".raw");
  return p;
}

char view_tag(ViewPlane view) {
  switch (view) {
    case ViewPlane::Transverse: return 't';
    case ViewPlane::Sagittal: return 's';
    case ViewPlane::Coronal: return 'c';
  }
  return '?';
}

}  // namespace

void Volume3D::validate() const {
  if (depth < 1 || height < 1 || width < 1) {
    fail(ErrorCode::InvalidVolume, "volume dims must all be >= 1");
  }
  for (double s : spacing_mm) {
    if (!(s > 0.0)) fail(ErrorCode::InvalidVolume, "voxel spacing must be positive");
  }
  const std::size_t expected =
      static_cast<std::size_t>(depth) * height * width;
  if (voxels.size() != expected) {
    fail(ErrorCode::InvalidVolume, "voxel buffer size does not match dims");
  }
  if (patient_id.empty()) {
    fail(ErrorCode::InvalidVolume, "volume has no patient_id");
  }
}

Volume3D load_volume(const std::filesystem::path& header_path) {
  std::ifstream in(header_path);
  if (!in) fail(ErrorCode::IoError, "cannot open '" + header_path.string() + "'");
  nlohmann::json header;
  try {
    in >> header;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, "bad volume header '" + header_path.string() + "': " + e.what());
  }

  Volume3D volume;
  try {
    const auto dims = header.at("dims");
    volume.depth = dims.at(0).get<int>();
    volume.height = dims.at(1).get<int>();
    volume.width = dims.at(2).get<int>();
    const auto spacing = header.at("spacing_mm");
    for (int i = 0; i < 3; ++i) volume.spacing_mm[i] = spacing.at(i).get<double>();
    volume.patient_id = header.at("patient_id").get<std::string>();
    volume.class_label = parse_class_label(header.at("class_label").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, "bad volume header '" + header_path.string() + "': " + e.what());
  }

  if (volume.depth < 1 || volume.height < 1 || volume.width < 1) {
    fail(ErrorCode::InvalidVolume, "volume dims must all be >= 1");
  }
  const std::size_t count =
      static_cast<std::size_t>(volume.depth) * volume.height * volume.width;

  const auto raw = raw_path_for(header_path);
  std::ifstream data(raw, std::ios::binary);
  if (!data) fail(ErrorCode::IoError, "cannot open voxel file '" + raw.string() + "'");
  std::vector<char> bytes(count * 2);
  data.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(data.gcount()) != bytes.size()) {
    fail(ErrorCode::InvalidVolume, "voxel file '" + raw.string() + "' shorter than dims imply");
  }

  volume.voxels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto lo = static_cast<unsigned char>(bytes[2 * i]);
    const auto hi = static_cast<unsigned char>(bytes[2 * i + 1]);
    volume.voxels[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
  }
  volume.validate();
  return volume;
}

void save_volume(const std::filesystem::path& header_path, const Volume3D& volume) {
  volume.validate();

  nlohmann::ordered_json header;
  header["dims"] = {volume.depth, volume.height, volume.width};
  header["spacing_mm"] = {volume.spacing_mm[0], volume.spacing_mm[1], volume.spacing_mm[2]};
  header["patient_id"] = volume.patient_id;
  header["class_label"] = to_string(volume.class_label);

  std::ofstream out(header_path);
  if (!out) fail(ErrorCode::IoError, "cannot open '" + header_path.string() + "' for writing");
  out << header.dump(2) << "\n";

  std::ofstream data(raw_path_for(header_path), std::ios::binary | std::ios::trunc);
  if (!data) fail(ErrorCode::IoError, "cannot open voxel file for writing");
  for (std::int16_t v : volume.voxels) {
    const auto u = static_cast<std::uint16_t>(v);
    const char bytes[2] = {static_cast<char>(u & 0xff), static_cast<char>(u >> 8)};
    data.write(bytes, 2);
  }
}

HuImage extract_slice(const Volume3D& volume, ViewPlane view, int frame) {
  HuImage image;
  switch (view) {
    case ViewPlane::Transverse:
      image.height = volume.height;
      image.width = volume.width;
      image.hu.resize(static_cast<std::size_t>(image.height) * image.width);
      for (int y = 0; y < volume.height; ++y)
        for (int x = 0; x < volume.width; ++x) image.at(y, x) = volume.at(frame, y, x);
      break;
    case ViewPlane::Coronal:
      image.height = volume.depth;
      image.width = volume.width;
      image.hu.resize(static_cast<std::size_t>(image.height) * image.width);
      for (int z = 0; z < volume.depth; ++z)
        for (int x = 0; x < volume.width; ++x) image.at(z, x) = volume.at(z, frame, x);
      break;
    case ViewPlane::Sagittal:
      image.height = volume.depth;
      image.width = volume.height;
      image.hu.resize(static_cast<std::size_t>(image.height) * image.width);
      for (int z = 0; z < volume.depth; ++z)
        for (int y = 0; y < volume.height; ++y) image.at(z, y) = volume.at(z, y, frame);
      break;
  }
  return image;
}

std::string make_slice_id(const std::string& patient_id, ViewPlane view, int frame) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "_%c%04d", view_tag(view), frame);
  return patient_id + buf;
}

SlicedVolume slice_volume(const Volume3D& volume) {
  volume.validate();

  SlicedVolume out;
  const auto add_view = [&](ViewPlane view, int count) {
    for (int frame = 0; frame < count; ++frame) {
      SliceRecord record;
      record.slice_id = make_slice_id(volume.patient_id, view, frame);
      record.patient_id = volume.patient_id;
      record.class_label = volume.class_label;
      record.view = view;
      record.frame_index = static_cast<std::uint32_t>(frame);
      record.split = Split::Train;
      out.records.push_back(std::move(record));
      out.images.push_back(extract_slice(volume, view, frame));
    }
  };
  add_view(ViewPlane::Transverse, volume.depth);
  add_view(ViewPlane::Coronal, volume.height);
  add_view(ViewPlane::Sagittal, volume.width);
  return out;
}

std::vector<SliceRecord> slice_volume(const Volume3D& volume,
                                      const std::filesystem::path& image_dir,
                                      const std::string& ref_prefix) {
  SlicedVolume sliced = slice_volume(volume);
  std::filesystem::create_directories(image_dir);
  for (std::size_t i = 0; i < sliced.records.size(); ++i) {
    auto& record = sliced.records[i];
    const std::string name = record.slice_id + ".png";
    write_hu_png(image_dir / name, sliced.images[i]);
    record.image_ref = ref_prefix + name;
  }
  return std::move(sliced.records);
}

}  // namespace bhdrag
