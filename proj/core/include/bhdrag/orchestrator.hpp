#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bhdrag/featurizer.hpp"
#include "bhdrag/generator.hpp"
#include "bhdrag/index.hpp"
#include "bhdrag/prompt.hpp"
#include "bhdrag/retriever.hpp"
#include "bhdrag/types.hpp"

namespace bhdrag {

/// Settings for one end-to-end diagnosis run. The two ablation flags map to
/// the report grid: use_retriever swaps top-k retrieval for a seeded random
/// sample, use_typical_features drops the expert section.
struct PipelineConfig {
  int k = 12;
  bool use_retriever = true;
  bool use_typical_features = true;
  bool same_view_only = false;
  /// Alternative reading of use_retriever = false: send no evidence at all
  /// instead of a seeded random sample. Ignored while use_retriever is on;
  /// the mock backend cannot serve an empty bundle.
  bool zero_evidence = false;
  GeneratorBackend backend;
  std::uint64_t seed = 0;
  std::string instruction;               // empty selects default_instruction()
  ExpertKnowledge expert;                // empty selects default_expert_knowledge()
  std::filesystem::path image_root;
  /// Whether prompt assembly verifies image files exist. Unset resolves to
  /// true for the http backend and false for the mock.
  std::optional<bool> require_images;
  int parallelism = 4;

  bool images_required() const {
    if (require_images.has_value()) return *require_images;
    return backend.kind == GeneratorBackend::Kind::Http;
  }

  void validate() const;
};

/// Bundles the sections in fixed order: instruction, expert items, evidence
/// pairs as handed in (already sorted), query image last. `retrieved` must
/// be sorted descending by similarity with ties ascending by slice_id.
PromptBundle assemble_prompt(const SliceRecord& query, const std::vector<EvidenceItem>& retrieved,
                             const ExpertKnowledge& expert, const std::string& instruction, int k,
                             const std::filesystem::path& image_root = {},
                             bool require_images = false);

/// Full pipeline for one query: embed, select evidence, assemble, generate.
/// The query must not be part of the index (checked; LeakageError). Errors
/// from inside carry the failing stage name.
DiagnosisResponse diagnose(const SliceRecord& query, const PipelineConfig& config,
                           const CosineIndex& index, const EmbeddingHead& head,
                           const FeatureSet& features, const std::vector<CorpusEntry>& corpus);

/// Evidence selection exactly as diagnose() performs it, exposed so tests
/// and audits can compare ids without a generator call.
std::vector<EvidenceItem> select_evidence(const SliceRecord& query, const PipelineConfig& config,
                                          const CosineIndex& index, const EmbeddingHead& head,
                                          const FeatureSet& features,
                                          const std::vector<CorpusEntry>& corpus);

}  // namespace bhdrag
