#include "bhdrag/index.hpp"

#include <algorithm>
#include <cmath>

#include "bhdrag/binio.hpp"
#include "bhdrag/error.hpp"

namespace bhdrag {

CosineIndex::CosineIndex(int embed_dim, int feature_dim)
    : embed_dim_(embed_dim), feature_dim_(feature_dim) {
  if (embed_dim < 2) fail(ErrorCode::ConfigError, "embed_dim must be >= 2");
}

void CosineIndex::add(const std::string& slice_id, const Eigen::VectorXf& embedding) {
  if (embedding.size() != embed_dim_) {
    fail(ErrorCode::DimMismatch, "embedding length does not match index embed_dim");
  }
  const double norm = embedding.cast<double>().norm();
  if (std::abs(norm - 1.0) > 1e-6) {
    fail(ErrorCode::DegenerateEmbedding,
         "index row for '" + slice_id + "' is not unit-norm (|v| = " + std::to_string(norm) + ")");
  }
  if (contains(slice_id)) {
    fail(ErrorCode::DuplicateFeature, "duplicate index id '" + slice_id + "'");
  }
  if (ids_.size() == capacity_) {
    capacity_ = capacity_ == 0 ? 16 : capacity_ * 2;
    rows_.conservativeResize(static_cast<Eigen::Index>(capacity_), embed_dim_);
  }
  rows_.row(static_cast<Eigen::Index>(ids_.size())) = embedding;
  ids_.push_back(slice_id);
  id_set_.insert(slice_id);
}

bool CosineIndex::contains(const std::string& slice_id) const {
  return id_set_.count(slice_id) != 0;
}

CosineIndex build_index(const std::vector<CorpusEntry>& corpus, const FeatureSet& features,
                        const EmbeddingHead& head) {
  CosineIndex index(head.embed_dim(), head.feature_dim());
  for (const auto& entry : corpus) {
    const FeatureVector* f = features.find(entry.slice.slice_id);
    if (!f) {
      fail(ErrorCode::MissingFeature, "no features for corpus slice '" + entry.slice.slice_id + "'");
    }
    const Eigen::VectorXd y = embed(head, f->values);
    index.add(entry.slice.slice_id, y.cast<float>());
  }
  return index;
}

namespace {

std::vector<ScoredId> topk_over(const CosineIndex& index, const Eigen::VectorXd& query, int k,
                                const std::vector<std::size_t>& candidates) {
  // (similarity desc, id asc) is a total order, so results are unique even
  // across duplicated vectors.
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(candidates.size());
  for (std::size_t row : candidates) {
    double sim = 0.0;
    for (int d = 0; d < index.embed_dim(); ++d) {
      sim += query(d) * static_cast<double>(index.rows()(static_cast<Eigen::Index>(row), d));
    }
    scored.emplace_back(sim, row);
  }

  const auto better = [&](const std::pair<double, std::size_t>& a,
                          const std::pair<double, std::size_t>& b) {
    if (a.first != b.first) return a.first > b.first;
    return index.ids()[a.second] < index.ids()[b.second];
  };

  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep),
                    scored.end(), better);

  std::vector<ScoredId> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    out.push_back({index.ids()[scored[i].second], scored[i].first});
  }
  return out;
}

}  // namespace

std::vector<ScoredId> search_topk(const CosineIndex& index, const Eigen::VectorXd& query, int k) {
  if (k < 1) fail(ErrorCode::ConfigError, "k must be >= 1");
  if (index.count() == 0) fail(ErrorCode::EmptyIndex, "search over an empty index");
  if (query.size() != index.embed_dim()) {
    fail(ErrorCode::DimMismatch, "query embedding length does not match index");
  }
  std::vector<std::size_t> all(index.count());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return topk_over(index, query, k, all);
}

std::vector<ScoredId> search_topk(const CosineIndex& index, const Eigen::VectorXd& query, int k,
                                  const std::function<bool(const std::string&)>& admit) {
  if (k < 1) fail(ErrorCode::ConfigError, "k must be >= 1");
  if (index.count() == 0) fail(ErrorCode::EmptyIndex, "search over an empty index");
  if (query.size() != index.embed_dim()) {
    fail(ErrorCode::DimMismatch, "query embedding length does not match index");
  }
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < index.count(); ++i) {
    if (admit(index.ids()[i])) candidates.push_back(i);
  }
  return topk_over(index, query, k, candidates);
}

void save_index(const std::filesystem::path& path, const CosineIndex& index) {
  BinWriter out(path);
  out.magic("BHDX");
  out.u32(1);
  out.u32(static_cast<std::uint32_t>(index.embed_dim()));
  out.u64(index.count());
  for (std::size_t i = 0; i < index.count(); ++i) {
    out.string16(index.ids()[i]);
    for (int d = 0; d < index.embed_dim(); ++d) {
      out.f32(index.rows()(static_cast<Eigen::Index>(i), d));
    }
  }
  out.finish();
}

CosineIndex load_index(const std::filesystem::path& path) {
  BinReader in(path);
  in.expect_magic("BHDX");
  const std::uint32_t version = in.u32();
  if (version != 1) {
    fail(ErrorCode::FormatError, "unsupported index version " + std::to_string(version));
  }
  const std::uint32_t embed_dim = in.u32();
  const std::uint64_t count = in.u64();
  if (embed_dim < 2) fail(ErrorCode::FormatError, "index declares embed_dim < 2");

  CosineIndex index(static_cast<int>(embed_dim), 0);
  index.rows_.resize(static_cast<Eigen::Index>(count), embed_dim);
  index.capacity_ = count;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string id = in.string16();
    if (!index.id_set_.insert(id).second) {
      fail(ErrorCode::FormatError, "duplicate id '" + id + "' in index file");
    }
    for (std::uint32_t d = 0; d < embed_dim; ++d) {
      index.rows_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = in.f32();
    }
    index.ids_.push_back(std::move(id));
  }
  return index;
}

}  // namespace bhdrag
