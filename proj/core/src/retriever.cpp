#include "bhdrag/retriever.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

#include "bhdrag/binio.hpp"
#include "bhdrag/error.hpp"

namespace bhdrag {

namespace {

constexpr double kDegenerateNorm = 1e-12;

double softplus(double z) {
  // log(1 + e^z) without overflow on either side.
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

EmbeddingHead EmbeddingHead::random_init(int embed_dim, int feature_dim, Rng& rng) {
  if (embed_dim < 2) fail(ErrorCode::ConfigError, "embed_dim must be >= 2");
  if (feature_dim < 1) fail(ErrorCode::ConfigError, "feature_dim must be >= 1");
  EmbeddingHead head;
  head.W.resize(embed_dim, feature_dim);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  for (int r = 0; r < embed_dim; ++r) {
    for (int c = 0; c < feature_dim; ++c) {
      head.W(r, c) = stddev * rng.next_gaussian();
    }
  }
  head.b = Eigen::VectorXd::Zero(embed_dim);
  return head;
}

Eigen::VectorXd embed(const EmbeddingHead& head, std::span<const double> features) {
  if (static_cast<int>(features.size()) != head.feature_dim()) {
    fail(ErrorCode::DimMismatch,
         "feature length " + std::to_string(features.size()) + " does not match head feature_dim " +
             std::to_string(head.feature_dim()));
  }
  const Eigen::Map<const Eigen::VectorXd> f(features.data(),
                                            static_cast<Eigen::Index>(features.size()));
  Eigen::VectorXd u = head.W * f + head.b;
  const double norm = u.norm();
  if (norm < kDegenerateNorm) {
    fail(ErrorCode::DegenerateEmbedding, "pre-normalization embedding vanished");
  }
  return u / norm;
}

namespace {

struct ViewPools {
  std::vector<std::size_t> bhd;
  std::vector<std::size_t> non_bhd;
};

const std::vector<std::size_t>& pool_for(const ViewPools& pools, BinaryLabel label) {
  return label == BinaryLabel::BHD ? pools.bhd : pools.non_bhd;
}

}  // namespace

std::vector<Triplet> sample_triplets(const std::vector<SliceRecord>& train_records,
                                     int batch_size, Rng& rng) {
  if (batch_size < 1) fail(ErrorCode::ConfigError, "batch_size must be >= 1");

  constexpr std::array<ViewPlane, 3> kViews = {ViewPlane::Transverse, ViewPlane::Sagittal,
                                               ViewPlane::Coronal};
  std::array<ViewPools, 3> pools;
  for (std::size_t i = 0; i < train_records.size(); ++i) {
    const auto& record = train_records[i];
    auto& pool = pools[static_cast<std::size_t>(record.view)];
    (to_binary(record.class_label) == BinaryLabel::BHD ? pool.bhd : pool.non_bhd).push_back(i);
  }

  // A view can host an anchor of a given class iff it has two slices of
  // that class (anchor != positive) and one of the other.
  const auto feasible_views = [&](BinaryLabel anchor_class) {
    std::vector<std::size_t> views;
    for (std::size_t v = 0; v < kViews.size(); ++v) {
      const auto& same = pool_for(pools[v], anchor_class);
      const auto& other = pool_for(
          pools[v], anchor_class == BinaryLabel::BHD ? BinaryLabel::NonBHD : BinaryLabel::BHD);
      if (same.size() >= 2 && !other.empty()) views.push_back(v);
    }
    return views;
  };

  const std::vector<std::size_t> bhd_views = feasible_views(BinaryLabel::BHD);
  const std::vector<std::size_t> non_bhd_views = feasible_views(BinaryLabel::NonBHD);
  if (bhd_views.empty() && non_bhd_views.empty()) {
    fail(ErrorCode::TripletInfeasible,
         "no view holds two slices of one binary class plus one of the other");
  }

  std::vector<Triplet> triplets;
  triplets.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    BinaryLabel anchor_class = (i % 2 == 0) ? BinaryLabel::BHD : BinaryLabel::NonBHD;
    const auto* views = anchor_class == BinaryLabel::BHD ? &bhd_views : &non_bhd_views;
    if (views->empty()) {
      anchor_class =
          anchor_class == BinaryLabel::BHD ? BinaryLabel::NonBHD : BinaryLabel::BHD;
      views = anchor_class == BinaryLabel::BHD ? &bhd_views : &non_bhd_views;
    }

    const std::size_t view = (*views)[rng.next_below(views->size())];
    const auto& same = pool_for(pools[view], anchor_class);
    const auto& other = pool_for(
        pools[view], anchor_class == BinaryLabel::BHD ? BinaryLabel::NonBHD : BinaryLabel::BHD);

    const std::size_t anchor_pick = rng.next_below(same.size());
    std::size_t positive_pick = rng.next_below(same.size() - 1);
    if (positive_pick >= anchor_pick) ++positive_pick;
    const std::size_t negative_pick = rng.next_below(other.size());

    Triplet triplet;
    triplet.anchor = train_records[same[anchor_pick]].slice_id;
    triplet.positive = train_records[same[positive_pick]].slice_id;
    triplet.negative = train_records[other[negative_pick]].slice_id;
    triplet.view = kViews[view];
    triplets.push_back(std::move(triplet));
  }
  return triplets;
}

void CosFaceConfig::validate() const {
  if (!(scale > 0.0)) fail(ErrorCode::ConfigError, "scale s must be positive");
  if (!(margin >= 0.0 && margin < 1.0)) fail(ErrorCode::ConfigError, "margin m must be in [0, 1)");
  if (batch_size < 1) fail(ErrorCode::ConfigError, "batch_size must be >= 1");
  if (epochs < 0) fail(ErrorCode::ConfigError, "epochs must be >= 0");
  if (!(learning_rate > 0.0)) fail(ErrorCode::ConfigError, "learning_rate must be positive");
  if (weight_decay < 0.0) fail(ErrorCode::ConfigError, "weight_decay must be >= 0");
  if (embed_dim < 2) fail(ErrorCode::ConfigError, "embed_dim must be >= 2");
}

double cosface_term(double cos_pos, double cos_neg, double scale, double margin) {
  return softplus(scale * cos_neg - scale * (cos_pos - margin));
}

double cosface_loss(const std::vector<std::array<Eigen::VectorXd, 3>>& batch, double scale,
                    double margin) {
  if (batch.empty()) fail(ErrorCode::EmptyBatch, "cosface loss over an empty batch");
  if (!(scale > 0.0)) fail(ErrorCode::ConfigError, "scale s must be positive");

  double total = 0.0;
  for (const auto& [anchor, positive, negative] : batch) {
    total += cosface_term(anchor.dot(positive), anchor.dot(negative), scale, margin);
  }
  return total / static_cast<double>(batch.size());
}

TripletBatch gather_batch(const std::vector<Triplet>& triplets, const FeatureSet& features) {
  if (triplets.empty()) fail(ErrorCode::EmptyBatch, "empty triplet batch");
  const int dim = features.dim();
  const auto n = static_cast<Eigen::Index>(triplets.size());

  TripletBatch batch;
  batch.anchors.resize(dim, n);
  batch.positives.resize(dim, n);
  batch.negatives.resize(dim, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& triplet = triplets[static_cast<std::size_t>(i)];
    const auto copy_column = [&](Eigen::MatrixXd& dst, const std::string& id) {
      const auto& values = features.require(id).values;
      dst.col(i) = Eigen::Map<const Eigen::VectorXd>(values.data(),
                                                     static_cast<Eigen::Index>(values.size()));
    };
    copy_column(batch.anchors, triplet.anchor);
    copy_column(batch.positives, triplet.positive);
    copy_column(batch.negatives, triplet.negative);
  }
  return batch;
}

namespace {

/// Columns of U normalized to unit length; norms returned alongside.
void normalize_columns(const Eigen::MatrixXd& pre, Eigen::MatrixXd& unit, Eigen::VectorXd& norms) {
  norms = pre.colwise().norm().transpose();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (norms(i) < kDegenerateNorm) {
      fail(ErrorCode::DegenerateEmbedding, "pre-normalization embedding vanished in batch");
    }
  }
  unit = pre * norms.cwiseInverse().asDiagonal();
}

/// Pulls a gradient on unit vectors back through the normalization:
/// g_u = (g_y - (y . g_y) y) / ||u||.
Eigen::MatrixXd normalization_backward(const Eigen::MatrixXd& unit, const Eigen::MatrixXd& grad_y,
                                       const Eigen::VectorXd& norms) {
  const Eigen::VectorXd projections = unit.cwiseProduct(grad_y).colwise().sum().transpose();
  const Eigen::MatrixXd grad_u = grad_y - unit * projections.asDiagonal();
  return grad_u * norms.cwiseInverse().asDiagonal();
}

}  // namespace

double cosface_loss_and_grad(const EmbeddingHead& head, const TripletBatch& batch, double scale,
                             double margin, HeadGradients* gradients) {
  const int n = batch.size();
  if (n == 0) fail(ErrorCode::EmptyBatch, "cosface loss over an empty batch");
  if (!(scale > 0.0)) fail(ErrorCode::ConfigError, "scale s must be positive");

  const Eigen::MatrixXd pre_a = (head.W * batch.anchors).colwise() + head.b;
  const Eigen::MatrixXd pre_p = (head.W * batch.positives).colwise() + head.b;
  const Eigen::MatrixXd pre_n = (head.W * batch.negatives).colwise() + head.b;

  Eigen::MatrixXd y_a, y_p, y_n;
  Eigen::VectorXd norm_a, norm_p, norm_n;
  normalize_columns(pre_a, y_a, norm_a);
  normalize_columns(pre_p, y_p, norm_p);
  normalize_columns(pre_n, y_n, norm_n);

  const Eigen::VectorXd cos_pos = y_a.cwiseProduct(y_p).colwise().sum().transpose();
  const Eigen::VectorXd cos_neg = y_a.cwiseProduct(y_n).colwise().sum().transpose();
  const Eigen::VectorXd z =
      scale * (cos_neg - cos_pos + Eigen::VectorXd::Constant(cos_pos.size(), margin));

  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) loss += softplus(z(i));
  loss /= static_cast<double>(n);

  if (gradients) {
    // d loss / d cos_neg_i = s * sigmoid(z_i) / N, and the negation of it
    // for cos_pos_i.
    Eigen::VectorXd weight(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      weight(i) = scale * sigmoid(z(i)) / static_cast<double>(n);
    }

    const Eigen::MatrixXd grad_ya = (y_n - y_p) * weight.asDiagonal();
    const Eigen::MatrixXd grad_yp = -(y_a * weight.asDiagonal());
    const Eigen::MatrixXd grad_yn = y_a * weight.asDiagonal();

    const Eigen::MatrixXd grad_ua = normalization_backward(y_a, grad_ya, norm_a);
    const Eigen::MatrixXd grad_up = normalization_backward(y_p, grad_yp, norm_p);
    const Eigen::MatrixXd grad_un = normalization_backward(y_n, grad_yn, norm_n);

    gradients->dW = grad_ua * batch.anchors.transpose() + grad_up * batch.positives.transpose() +
                    grad_un * batch.negatives.transpose();
    gradients->db = grad_ua.rowwise().sum() + grad_up.rowwise().sum() + grad_un.rowwise().sum();
  }
  return loss;
}

TrainResult train(const std::vector<SliceRecord>& train_records, const FeatureSet& features,
                  const CosFaceConfig& config) {
  config.validate();
  if (features.empty()) fail(ErrorCode::MissingFeature, "feature set is empty");

  Rng rng(config.seed);
  TrainResult result;
  result.head = EmbeddingHead::random_init(config.embed_dim, features.dim(), rng);
  if (config.epochs == 0) return result;

  // Probe feasibility once so an impossible train set fails fast.
  {
    Rng probe(config.seed);
    (void)sample_triplets(train_records, 1, probe);
  }

  const int steps_per_epoch =
      std::max<int>(1, static_cast<int>(train_records.size()) / config.batch_size);

  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEpsilon = 1e-8;

  Eigen::MatrixXd m_w = Eigen::MatrixXd::Zero(result.head.W.rows(), result.head.W.cols());
  Eigen::MatrixXd v_w = m_w;
  Eigen::VectorXd m_b = Eigen::VectorXd::Zero(result.head.b.size());
  Eigen::VectorXd v_b = m_b;
  long step = 0;

  HeadGradients gradients;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.learning_rate * 0.5 *
                      (1.0 + std::cos(M_PI * static_cast<double>(epoch) / config.epochs));

    double epoch_loss = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      const std::vector<Triplet> triplets =
          sample_triplets(train_records, config.batch_size, rng);
      const TripletBatch batch = gather_batch(triplets, features);
      const double loss =
          cosface_loss_and_grad(result.head, batch, config.scale, config.margin, &gradients);
      if (!std::isfinite(loss)) {
        fail(ErrorCode::TrainingDiverged,
             "loss became non-finite at epoch " + std::to_string(epoch));
      }
      epoch_loss += loss;

      ++step;
      const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));

      m_w = kBeta1 * m_w + (1.0 - kBeta1) * gradients.dW;
      v_w = (kBeta2 * v_w.array() + (1.0 - kBeta2) * gradients.dW.array().square()).matrix();
      m_b = kBeta1 * m_b + (1.0 - kBeta1) * gradients.db;
      v_b = (kBeta2 * v_b.array() + (1.0 - kBeta2) * gradients.db.array().square()).matrix();

      // Decoupled weight decay: the penalty skips the moment estimates.
      result.head.W -= lr * ((m_w / bias1).array() / ((v_w / bias2).array().sqrt() + kEpsilon))
                                .matrix() +
                       lr * config.weight_decay * result.head.W;
      result.head.b -=
          lr * ((m_b / bias1).array() / ((v_b / bias2).array().sqrt() + kEpsilon)).matrix();
    }
    result.epoch_loss.push_back(epoch_loss / steps_per_epoch);
  }
  return result;
}

void save_head(const std::filesystem::path& path, const EmbeddingHead& head) {
  BinWriter out(path);
  out.magic("BHDH");
  out.u32(1);
  out.u32(static_cast<std::uint32_t>(head.embed_dim()));
  out.u32(static_cast<std::uint32_t>(head.feature_dim()));
  out.u64(static_cast<std::uint64_t>(head.W.size() + head.b.size()));
  for (int r = 0; r < head.embed_dim(); ++r) {
    for (int c = 0; c < head.feature_dim(); ++c) {
      out.f32(static_cast<float>(head.W(r, c)));
    }
  }
  for (int r = 0; r < head.embed_dim(); ++r) out.f32(static_cast<float>(head.b(r)));
  out.finish();
}

EmbeddingHead load_head(const std::filesystem::path& path) {
  BinReader in(path);
  in.expect_magic("BHDH");
  const std::uint32_t version = in.u32();
  if (version != 1) {
    fail(ErrorCode::FormatError, "unsupported head checkpoint version " + std::to_string(version));
  }
  const std::uint32_t embed_dim = in.u32();
  const std::uint32_t feature_dim = in.u32();
  const std::uint64_t count = in.u64();
  if (embed_dim < 2 || feature_dim < 1) {
    fail(ErrorCode::FormatError, "head checkpoint declares invalid dims");
  }
  if (count != static_cast<std::uint64_t>(embed_dim) * feature_dim + embed_dim) {
    fail(ErrorCode::FormatError, "head checkpoint element count does not match dims");
  }

  EmbeddingHead head;
  head.W.resize(embed_dim, feature_dim);
  head.b.resize(embed_dim);
  for (std::uint32_t r = 0; r < embed_dim; ++r) {
    for (std::uint32_t c = 0; c < feature_dim; ++c) {
      head.W(r, c) = static_cast<double>(in.f32());
    }
  }
  for (std::uint32_t r = 0; r < embed_dim; ++r) head.b(r) = static_cast<double>(in.f32());
  return head;
}

}  // namespace bhdrag
