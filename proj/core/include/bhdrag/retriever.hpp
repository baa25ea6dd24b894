#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bhdrag/featurizer.hpp"
#include "bhdrag/rng.hpp"
#include "bhdrag/types.hpp"

namespace bhdrag {

inline constexpr int kDefaultEmbedDim = 64;

/// Linear-plus-normalize embedding head mapping precomputed slice features
/// into unit-norm cosine space.
struct EmbeddingHead {
  Eigen::MatrixXd W;  // embed_dim x feature_dim
  Eigen::VectorXd b;  // embed_dim

  int embed_dim() const { return static_cast<int>(W.rows()); }
  int feature_dim() const { return static_cast<int>(W.cols()); }

  /// Entries ~ N(0, 1/feature_dim) for W, zeros for b.
  static EmbeddingHead random_init(int embed_dim, int feature_dim, Rng& rng);
};

/// y = (W f + b) / ||W f + b||. Throws DegenerateEmbedding when the
/// pre-normalization vector vanishes.
Eigen::VectorXd embed(const EmbeddingHead& head, std::span<const double> features);

struct Triplet {
  std::string anchor;
  std::string positive;
  std::string negative;
  ViewPlane view = ViewPlane::Transverse;
};

/// Draws batch_size triplets from the train records: anchor and positive
/// share the binary class, the negative takes the other one, all three
/// share a view plane. Anchor classes alternate BHD / non-BHD across the
/// batch where both sides are feasible.
std::vector<Triplet> sample_triplets(const std::vector<SliceRecord>& train_records,
                                     int batch_size, Rng& rng);

struct CosFaceConfig {
  double scale = 64.0;        // s
  double margin = 0.35;       // m
  int batch_size = 32;
  int epochs = 500;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int embed_dim = kDefaultEmbedDim;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-triplet pairwise large-margin term
///   log(1 + exp(s*cos_neg - s*(cos_pos - m)))
/// in the stable softplus form; survives s = 64 without overflow.
double cosface_term(double cos_pos, double cos_neg, double scale, double margin);

/// Mean loss over a batch of already-embedded (anchor, positive, negative)
/// triples. All embeddings must be unit-norm.
double cosface_loss(const std::vector<std::array<Eigen::VectorXd, 3>>& batch, double scale,
                    double margin);

struct HeadGradients {
  Eigen::MatrixXd dW;
  Eigen::VectorXd db;
};

/// Feature columns for one batch: anchors, positives, negatives, each
/// feature_dim x N.
struct TripletBatch {
  Eigen::MatrixXd anchors;
  Eigen::MatrixXd positives;
  Eigen::MatrixXd negatives;

  int size() const { return static_cast<int>(anchors.cols()); }
};

TripletBatch gather_batch(const std::vector<Triplet>& triplets, const FeatureSet& features);

/// Mean batch loss plus its exact gradient w.r.t. W and b, including the
/// Jacobian of the L2 normalization.
double cosface_loss_and_grad(const EmbeddingHead& head, const TripletBatch& batch, double scale,
                             double margin, HeadGradients* gradients);

struct TrainResult {
  EmbeddingHead head;
  std::vector<double> epoch_loss;  // mean loss per epoch
};

/// Trains the head with decoupled-weight-decay Adam (beta1 0.9, beta2
/// 0.999, eps 1e-8) under a cosine learning-rate decay
/// lr(t) = lr0 * 0.5 * (1 + cos(pi * t / epochs)). Deterministic given
/// the config seed.
TrainResult train(const std::vector<SliceRecord>& train_records, const FeatureSet& features,
                  const CosFaceConfig& config);

/// Head checkpoint ("BHDH"): u32 version, u32 embed_dim, u32 feature_dim,
/// u64 element count, then W row-major then b as float32 little-endian.
void save_head(const std::filesystem::path& path, const EmbeddingHead& head);
EmbeddingHead load_head(const std::filesystem::path& path);

}  // namespace bhdrag
