#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "bhdrag/image.hpp"

namespace bhdrag {

inline constexpr double kDefaultWindowCenter = -600.0;
inline constexpr double kDefaultWindowWidth = 1500.0;
inline constexpr int kFeatureImageSize = 256;
inline constexpr int kBaselineFeatureDim = 332;

struct FeatureVector {
  enum class Source { Baseline, External };

  std::vector<double> values;
  Source source = Source::Baseline;
};

/// pixel = clamp((hu - (center - width/2)) / width, 0, 1)
NormalizedImage lung_window(const HuImage& slice, double center = kDefaultWindowCenter,
                            double width = kDefaultWindowWidth);

double lung_window_value(double hu, double center = kDefaultWindowCenter,
                         double width = kDefaultWindowWidth);

/// Corner-aligned bilinear resampling to target x target.
NormalizedImage resize_bilinear(const NormalizedImage& image, int target = kFeatureImageSize);

/// Deterministic 332-dim descriptor of a 256x256 windowed slice:
/// 8x8 patch means (64), 8x8 patch stds (64), 32-bin intensity histogram
/// summing to 1, 8-orientation x 4x4-grid gradient-magnitude histogram
/// (128), 44 zeros of reserved padding.
FeatureVector baseline_features(const NormalizedImage& image);

/// Orientation bin of a gradient (gx, gy) under the binning the gradient
/// histogram uses; exposed for tests.
int gradient_orientation_bin(double gx, double gy);

/// Feature store keyed by slice_id. One feature length per store.
class FeatureSet {
 public:
  FeatureSet() = default;

  /// Throws FeatureDimMismatch on a length conflict, DuplicateFeature on a
  /// repeated id.
  void add(const std::string& slice_id, FeatureVector features);

  const FeatureVector* find(const std::string& slice_id) const;

  /// Throws MissingFeature when absent.
  const FeatureVector& require(const std::string& slice_id) const;

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  int dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }

 private:
  std::vector<std::string> ids_;  // insertion order
  std::vector<FeatureVector> values_;
  std::map<std::string, std::size_t> by_id_;
  int dim_ = 0;
};

/// Feature file ("BHDF"): u32 version, u32 dim, u64 count, then per record
/// u16 id length, id bytes, dim float32 little-endian.
void save_features(const std::filesystem::path& path, const FeatureSet& features);
FeatureSet load_features(const std::filesystem::path& path);

}  // namespace bhdrag
