#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bhdrag/index.hpp"
#include "bhdrag/orchestrator.hpp"
#include "bhdrag/types.hpp"

namespace bhdrag {

/// BHD is the positive class throughout.
struct ConfusionCounts {
  long long tp = 0;
  long long fp = 0;
  long long fn = 0;
  long long tn = 0;

  long long total() const { return tp + fp + fn + tn; }

  bool operator==(const ConfusionCounts&) const = default;
};

/// Five headline metrics plus degeneracy flags. A metric whose denominator
/// is 0 is reported as 0 with its flag set rather than NaN.
struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double specificity = 0.0;
  bool precision_degenerate = false;
  bool recall_degenerate = false;
  bool f1_degenerate = false;
  bool specificity_degenerate = false;
  ConfusionCounts counts;
  long long unparseable = 0;
};

MetricsReport metrics(const ConfusionCounts& counts);

struct CaseResult {
  std::string slice_id;
  std::string patient_id;
  BinaryLabel truth = BinaryLabel::NonBHD;
  std::optional<BinaryLabel> predicted;  // nullopt when unparseable
  std::vector<ScoredId> evidence;
  std::string raw_output;
};

struct EvalOptions {
  /// Also aggregate per patient by majority vote over that patient's
  /// per-slice predictions (ties and vote-less patients resolve non-BHD).
  bool per_patient = false;
};

struct EvalResult {
  MetricsReport report;
  std::vector<CaseResult> cases;  // sorted ascending by slice_id
  std::optional<MetricsReport> per_patient_report;
};

/// Diagnoses every test record and tallies BHD-vs-non-BHD confusion counts.
/// Unparseable generator output counts as an incorrect prediction. Test
/// records must be disjoint from the corpus, both per slice and per
/// patient; violations raise LeakageError.
EvalResult evaluate(const std::vector<SliceRecord>& test_records, const PipelineConfig& config,
                    const CosineIndex& index, const EmbeddingHead& head,
                    const FeatureSet& features, const std::vector<CorpusEntry>& corpus,
                    const EvalOptions& options = {});

/// One report row; k_sweep and ablation_grid emit these so a single CSV
/// schema covers every run kind.
struct RunRow {
  bool use_retriever = true;
  bool use_typical_features = true;
  int k = 0;
  MetricsReport report;
};

/// evaluate() once per k, same seed and backend.
std::vector<RunRow> k_sweep(const std::vector<int>& ks, const PipelineConfig& config,
                            const std::vector<SliceRecord>& test_records,
                            const CosineIndex& index, const EmbeddingHead& head,
                            const FeatureSet& features, const std::vector<CorpusEntry>& corpus);

/// The 2x2 retriever x typical-features grid, rows in the fixed order
/// (off,off), (on,off), (off,on), (on,on), identical seeds.
std::vector<RunRow> ablation_grid(const PipelineConfig& config,
                                  const std::vector<SliceRecord>& test_records,
                                  const CosineIndex& index, const EmbeddingHead& head,
                                  const FeatureSet& features,
                                  const std::vector<CorpusEntry>& corpus);

/// CSV columns: use_retriever, use_typical_features, k, the five metrics to
/// four decimals, the four counts, unparseable, and a semicolon list of
/// degenerate metrics.
void write_report_csv(const std::filesystem::path& path, const std::vector<RunRow>& rows);

/// One JSON object per case: ids, truth, prediction, evidence, raw output.
void write_cases_jsonl(const std::filesystem::path& path, const std::vector<CaseResult>& cases);

}  // namespace bhdrag
