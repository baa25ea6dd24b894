#include "bhdrag/featurizer.hpp"

#include <algorithm>
#include <cmath>

#include "bhdrag/binio.hpp"
#include "bhdrag/error.hpp"

namespace bhdrag {

double lung_window_value(double hu, double center, double width) {
  if (!(width > 0.0)) fail(ErrorCode::InvalidWindow, "window width must be positive");
  const double low = center - width / 2.0;
  return std::clamp((hu - low) / width, 0.0, 1.0);
}

NormalizedImage lung_window(const HuImage& slice, double center, double width) {
  if (!(width > 0.0)) fail(ErrorCode::InvalidWindow, "window width must be positive");
  NormalizedImage out;
  out.height = slice.height;
  out.width = slice.width;
  out.pixels.resize(slice.hu.size());
  for (std::size_t i = 0; i < slice.hu.size(); ++i) {
    out.pixels[i] = lung_window_value(static_cast<double>(slice.hu[i]), center, width);
  }
  return out;
}

NormalizedImage resize_bilinear(const NormalizedImage& image, int target) {
  if (target < 1) fail(ErrorCode::InvalidTarget, "resize target must be >= 1");
  if (image.height < 1 || image.width < 1) {
    fail(ErrorCode::DimMismatch, "source image must be at least 1x1");
  }

  NormalizedImage out;
  out.height = target;
  out.width = target;
  out.pixels.resize(static_cast<std::size_t>(target) * target);

  // Corner-aligned: output corner samples coincide with input corners.
  const auto src_coord = [](int dst, int dst_size, int src_size) {
    if (dst_size == 1 || src_size == 1) {
      return (src_size - 1) / 2.0;
    }
    return static_cast<double>(dst) * (src_size - 1) / (dst_size - 1);
  };

  for (int r = 0; r < target; ++r) {
    const double sy = src_coord(r, target, image.height);
    const int y0 = std::min(static_cast<int>(sy), image.height - 1);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double fy = sy - y0;
    for (int c = 0; c < target; ++c) {
      const double sx = src_coord(c, target, image.width);
      const int x0 = std::min(static_cast<int>(sx), image.width - 1);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double fx = sx - x0;

      const double top = image.at(y0, x0) * (1.0 - fx) + image.at(y0, x1) * fx;
      const double bottom = image.at(y1, x0) * (1.0 - fx) + image.at(y1, x1) * fx;
      out.at(r, c) = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

int gradient_orientation_bin(double gx, double gy) {
  // Bin k covers [-pi + k*pi/4, -pi + (k+1)*pi/4); angle 0 lands in bin 4.
  const double angle = std::atan2(gy, gx);
  int bin = static_cast<int>((angle + M_PI) * (8.0 / (2.0 * M_PI)));
  if (bin >= 8) bin = 7;
  if (bin < 0) bin = 0;
  return bin;
}

FeatureVector baseline_features(const NormalizedImage& image) {
  if (image.height != kFeatureImageSize || image.width != kFeatureImageSize) {
    fail(ErrorCode::DimMismatch, "baseline features expect a 256x256 image");
  }

  FeatureVector features;
  features.source = FeatureVector::Source::Baseline;
  features.values.reserve(kBaselineFeatureDim);

  constexpr int kGrid = 8;
  constexpr int kPatch = kFeatureImageSize / kGrid;  // 32
  constexpr int kBins = 32;
  constexpr int kOrientations = 8;
  constexpr int kGradGrid = 4;
  constexpr int kGradCell = kFeatureImageSize / kGradGrid;  // 64

  // Patch means then patch standard deviations, 8x8 each.
  std::vector<double> means(kGrid * kGrid, 0.0), stds(kGrid * kGrid, 0.0);
  for (int pr = 0; pr < kGrid; ++pr) {
    for (int pc = 0; pc < kGrid; ++pc) {
      double sum = 0.0, sum_sq = 0.0;
      for (int r = pr * kPatch; r < (pr + 1) * kPatch; ++r) {
        for (int c = pc * kPatch; c < (pc + 1) * kPatch; ++c) {
          const double v = image.at(r, c);
          sum += v;
          sum_sq += v * v;
        }
      }
      const double n = kPatch * kPatch;
      const double mean = sum / n;
      means[pr * kGrid + pc] = mean;
      stds[pr * kGrid + pc] = std::sqrt(std::max(0.0, sum_sq / n - mean * mean));
    }
  }
  features.values.insert(features.values.end(), means.begin(), means.end());
  features.values.insert(features.values.end(), stds.begin(), stds.end());

  // 32-bin intensity histogram, normalized to total mass 1.
  std::vector<double> histogram(kBins, 0.0);
  for (double v : image.pixels) {
    int bin = static_cast<int>(v * kBins);
    if (bin >= kBins) bin = kBins - 1;
    histogram[bin] += 1.0;
  }
  const double pixel_count = static_cast<double>(image.pixels.size());
  for (double& h : histogram) h /= pixel_count;
  features.values.insert(features.values.end(), histogram.begin(), histogram.end());

  // Gradient-magnitude histogram: 8 orientations per 4x4 grid cell, using
  // central differences on interior pixels, mean magnitude per cell pixel.
  std::vector<double> gradients(kGradGrid * kGradGrid * kOrientations, 0.0);
  for (int r = 1; r < kFeatureImageSize - 1; ++r) {
    for (int c = 1; c < kFeatureImageSize - 1; ++c) {
      const double gx = (image.at(r, c + 1) - image.at(r, c - 1)) / 2.0;
      const double gy = (image.at(r + 1, c) - image.at(r - 1, c)) / 2.0;
      const double magnitude = std::sqrt(gx * gx + gy * gy);
      if (magnitude == 0.0) continue;
      const int cell = (r / kGradCell) * kGradGrid + (c / kGradCell);
      gradients[cell * kOrientations + gradient_orientation_bin(gx, gy)] += magnitude;
    }
  }
  const double cell_pixels = static_cast<double>(kGradCell) * kGradCell;
  for (double& g : gradients) g /= cell_pixels;
  features.values.insert(features.values.end(), gradients.begin(), gradients.end());

  // Reserved padding up to the fixed width.
  features.values.resize(kBaselineFeatureDim, 0.0);
  return features;
}

void FeatureSet::add(const std::string& slice_id, FeatureVector features) {
  if (features.values.empty()) {
    fail(ErrorCode::FeatureDimMismatch, "feature vector for '" + slice_id + "' is empty");
  }
  for (double v : features.values) {
    if (!std::isfinite(v)) {
      fail(ErrorCode::FeatureDimMismatch, "non-finite feature value for '" + slice_id + "'");
    }
  }
  const int dim = static_cast<int>(features.values.size());
  if (dim_ == 0) {
    dim_ = dim;
  } else if (dim != dim_) {
    fail(ErrorCode::FeatureDimMismatch,
         "feature '" + slice_id + "' has length " + std::to_string(dim) + ", store holds " +
             std::to_string(dim_));
  }
  if (by_id_.count(slice_id)) {
    fail(ErrorCode::DuplicateFeature, "duplicate feature id '" + slice_id + "'");
  }
  by_id_[slice_id] = ids_.size();
  ids_.push_back(slice_id);
  values_.push_back(std::move(features));
}

const FeatureVector* FeatureSet::find(const std::string& slice_id) const {
  const auto it = by_id_.find(slice_id);
  return it == by_id_.end() ? nullptr : &values_[it->second];
}

const FeatureVector& FeatureSet::require(const std::string& slice_id) const {
  const FeatureVector* features = find(slice_id);
  if (!features) fail(ErrorCode::MissingFeature, "no features for slice '" + slice_id + "'");
  return *features;
}

void save_features(const std::filesystem::path& path, const FeatureSet& features) {
  BinWriter out(path);
  out.magic("BHDF");
  out.u32(1);
  out.u32(static_cast<std::uint32_t>(features.dim()));
  out.u64(features.size());
  for (const auto& id : features.ids()) {
    out.string16(id);
    for (double v : features.require(id).values) out.f32(static_cast<float>(v));
  }
  out.finish();
}

FeatureSet load_features(const std::filesystem::path& path) {
  BinReader in(path);
  in.expect_magic("BHDF");
  const std::uint32_t version = in.u32();
  if (version != 1) {
    fail(ErrorCode::FormatError, "unsupported feature file version " + std::to_string(version));
  }
  const std::uint32_t dim = in.u32();
  const std::uint64_t count = in.u64();
  if (dim == 0) fail(ErrorCode::FormatError, "feature file declares dim 0");

  FeatureSet features;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string id = in.string16();
    FeatureVector v;
    v.source = FeatureVector::Source::External;
    v.values.resize(dim);
    for (std::uint32_t d = 0; d < dim; ++d) v.values[d] = static_cast<double>(in.f32());
    features.add(id, std::move(v));
  }
  return features;
}

}  // namespace bhdrag
