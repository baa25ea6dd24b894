// Microbenchmarks for the hot paths: feature extraction, loss/gradient,
// and exact top-k search at several corpus sizes.

#include <benchmark/benchmark.h>

#include <vector>

#include "bhdrag/featurizer.hpp"
#include "bhdrag/index.hpp"
#include "bhdrag/retriever.hpp"
#include "bhdrag/rng.hpp"

using namespace bhdrag;

namespace {

NormalizedImage random_image(int size, Rng& rng) {
  NormalizedImage image;
  image.height = size;
  image.width = size;
  image.pixels.resize(static_cast<std::size_t>(size) * size);
  for (auto& p : image.pixels) p = rng.next_real();
  return image;
}

void BM_BaselineFeatures(benchmark::State& state) {
  Rng rng(1);
  const NormalizedImage image = random_image(kFeatureImageSize, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(baseline_features(image));
  }
}
BENCHMARK(BM_BaselineFeatures);

void BM_ResizeBilinear(benchmark::State& state) {
  Rng rng(2);
  const NormalizedImage image = random_image(static_cast<int>(state.range(0)), rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(resize_bilinear(image, kFeatureImageSize));
  }
}
BENCHMARK(BM_ResizeBilinear)->Arg(128)->Arg(512);

void BM_CosfaceLossAndGrad(benchmark::State& state) {
  Rng rng(3);
  const int feature_dim = kBaselineFeatureDim;
  const int embed_dim = kDefaultEmbedDim;
  const int batch = static_cast<int>(state.range(0));
  const EmbeddingHead head = EmbeddingHead::random_init(embed_dim, feature_dim, rng);
  TripletBatch triplets;
  triplets.anchors =
      Eigen::MatrixXd::NullaryExpr(feature_dim, batch, [&] { return rng.next_gaussian(); });
  triplets.positives =
      Eigen::MatrixXd::NullaryExpr(feature_dim, batch, [&] { return rng.next_gaussian(); });
  triplets.negatives =
      Eigen::MatrixXd::NullaryExpr(feature_dim, batch, [&] { return rng.next_gaussian(); });

  HeadGradients gradients;
  for (auto _ : state) {
    benchmark::DoNotOptimize(cosface_loss_and_grad(head, triplets, 64.0, 0.35, &gradients));
  }
}
BENCHMARK(BM_CosfaceLossAndGrad)->Arg(8)->Arg(32)->Arg(128);

void BM_Embed(benchmark::State& state) {
  Rng rng(4);
  const EmbeddingHead head = EmbeddingHead::random_init(kDefaultEmbedDim, kBaselineFeatureDim, rng);
  std::vector<double> features(kBaselineFeatureDim);
  for (auto& f : features) f = rng.next_gaussian();
  for (auto _ : state) {
    benchmark::DoNotOptimize(embed(head, features));
  }
}
BENCHMARK(BM_Embed);

void BM_SearchTopk(benchmark::State& state) {
  Rng rng(5);
  const int n = static_cast<int>(state.range(0));
  const int dim = kDefaultEmbedDim;
  CosineIndex index(dim, kBaselineFeatureDim);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXf v =
        Eigen::VectorXf::NullaryExpr(dim, [&] { return static_cast<float>(rng.next_gaussian()); });
    if (v.norm() == 0.0f) v(0) = 1.0f;
    index.add("row" + std::to_string(i), v / v.norm());
  }
  Eigen::VectorXd query =
      Eigen::VectorXd::NullaryExpr(dim, [&] { return rng.next_gaussian(); });
  query /= query.norm();

  for (auto _ : state) {
    benchmark::DoNotOptimize(search_topk(index, query, 12));
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_SearchTopk)->Arg(1000)->Arg(10000)->Arg(100000);

}  // namespace

BENCHMARK_MAIN();
