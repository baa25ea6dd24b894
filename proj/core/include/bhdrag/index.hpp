#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <string>
#include <unordered_set>
#include <vector>

#include "bhdrag/retriever.hpp"
#include "bhdrag/types.hpp"

namespace bhdrag {

/// Flat exact-search store of unit-norm corpus embeddings. Immutable once
/// built; concurrent searches are safe.
class CosineIndex {
 public:
  CosineIndex() = default;
  CosineIndex(int embed_dim, int feature_dim);

  /// Row must be unit-norm within 1e-6 and the id unused.
  void add(const std::string& slice_id, const Eigen::VectorXf& embedding);

  std::size_t count() const { return ids_.size(); }
  int embed_dim() const { return embed_dim_; }
  int feature_dim() const { return feature_dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  bool contains(const std::string& slice_id) const;

  Eigen::VectorXf row(std::size_t i) const { return rows_.row(static_cast<Eigen::Index>(i)); }

  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& rows() const {
    return rows_;
  }

 private:
  std::vector<std::string> ids_;
  std::unordered_set<std::string> id_set_;  // mirrors ids_ for O(1) contains
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows_;
  std::size_t capacity_ = 0;
  int embed_dim_ = 0;
  int feature_dim_ = 0;

  friend CosineIndex load_index(const std::filesystem::path&);
};

/// Embeds every corpus entry (manifest order) into one index row.
CosineIndex build_index(const std::vector<CorpusEntry>& corpus, const FeatureSet& features,
                        const EmbeddingHead& head);

struct ScoredId {
  std::string slice_id;
  double similarity = 0.0;

  bool operator==(const ScoredId&) const = default;
};

/// Exact top-k by cosine similarity, descending, ties broken by ascending
/// slice_id. Returns min(k, count) results; k < 1 is a config error and an
/// empty index is EmptyIndex.
std::vector<ScoredId> search_topk(const CosineIndex& index, const Eigen::VectorXd& query, int k);

/// Same, restricted to rows whose id passes the filter. An empty filtered
/// candidate set yields an empty result.
std::vector<ScoredId> search_topk(const CosineIndex& index, const Eigen::VectorXd& query, int k,
                                  const std::function<bool(const std::string&)>& admit);

/// Index file ("BHDX"): u32 version, u32 embed_dim, u64 count, then per
/// row u16 id length, id bytes, embed_dim float32 little-endian.
void save_index(const std::filesystem::path& path, const CosineIndex& index);
CosineIndex load_index(const std::filesystem::path& path);

}  // namespace bhdrag
