#include "bhdrag/orchestrator.hpp"

#include <algorithm>
#include <unordered_map>

#include "bhdrag/error.hpp"
#include "bhdrag/rng.hpp"

namespace bhdrag {

void PipelineConfig::validate() const {
  if (k < 1) fail(ErrorCode::ConfigError, "k must be >= 1");
  if (parallelism < 1) fail(ErrorCode::ConfigError, "parallelism must be >= 1");
  backend.validate();
}

namespace {

[[noreturn]] void rethrow_with_stage(Error& e, const char* stage) {
  if (e.stage().empty()) e.set_stage(stage);
  throw e;
}

const CorpusEntry& entry_for(const std::unordered_map<std::string, const CorpusEntry*>& by_id,
                             const std::string& slice_id) {
  const auto it = by_id.find(slice_id);
  if (it == by_id.end()) {
    fail(ErrorCode::UnknownSlice, "index id '" + slice_id + "' is not in the corpus manifest");
  }
  return *it->second;
}

std::unordered_map<std::string, const CorpusEntry*> corpus_by_id(
    const std::vector<CorpusEntry>& corpus) {
  std::unordered_map<std::string, const CorpusEntry*> by_id;
  by_id.reserve(corpus.size());
  for (const auto& entry : corpus) by_id.emplace(entry.slice.slice_id, &entry);
  return by_id;
}

}  // namespace

PromptBundle assemble_prompt(const SliceRecord& query, const std::vector<EvidenceItem>& retrieved,
                             const ExpertKnowledge& expert, const std::string& instruction, int k,
                             const std::filesystem::path& image_root, bool require_images) {
  for (std::size_t i = 1; i < retrieved.size(); ++i) {
    const auto& prev = retrieved[i - 1];
    const auto& cur = retrieved[i];
    const bool ordered = prev.similarity > cur.similarity ||
                         (prev.similarity == cur.similarity &&
                          prev.entry.slice.slice_id < cur.entry.slice.slice_id);
    if (!ordered) {
      fail(ErrorCode::ConfigError, "evidence is not sorted by descending similarity");
    }
  }

  PromptBundle bundle;
  bundle.query_slice_id = query.slice_id;
  bundle.query_image_ref = query.image_ref;
  bundle.instruction = instruction;
  bundle.expert = expert;
  bundle.evidence = retrieved;
  bundle.k = k;
  bundle.image_root = image_root;

  if (require_images) {
    const auto check = [&](const std::string& ref, const std::string& owner) {
      if (ref.empty() || !std::filesystem::exists(bundle.resolve(ref))) {
        fail(ErrorCode::MissingImage, "image file missing for '" + owner + "': " +
                                          (ref.empty() ? "<no image_ref>" : ref));
      }
    };
    check(query.image_ref, query.slice_id);
    for (const auto& item : bundle.evidence) {
      check(item.entry.slice.image_ref, item.entry.slice.slice_id);
    }
    for (const auto& item : bundle.expert.items) {
      if (!item.image_ref.empty()) check(item.image_ref, "expert item");
    }
  }
  return bundle;
}

std::vector<EvidenceItem> select_evidence(const SliceRecord& query, const PipelineConfig& config,
                                          const CosineIndex& index, const EmbeddingHead& head,
                                          const FeatureSet& features,
                                          const std::vector<CorpusEntry>& corpus) {
  const auto by_id = corpus_by_id(corpus);

  if (!config.use_retriever && config.zero_evidence) return {};

  const auto view_of = [&](const std::string& slice_id) {
    return entry_for(by_id, slice_id).slice.view;
  };
  const auto admit = [&](const std::string& slice_id) {
    return !config.same_view_only || view_of(slice_id) == query.view;
  };

  std::vector<ScoredId> scored;
  if (config.use_retriever) {
    const FeatureVector& f = features.require(query.slice_id);
    const Eigen::VectorXd y = embed(head, f.values);
    if (config.same_view_only) {
      scored = search_topk(index, y, config.k, admit);
    } else {
      scored = search_topk(index, y, config.k);
    }
  } else {
    // Seeded uniform sample of corpus ids, independent of query content.
    // Reported ascending by slice_id with similarity 0 so the "no
    // retriever" rows are recognizable in logs.
    if (index.count() == 0) fail(ErrorCode::EmptyIndex, "random selection over an empty index");
    std::vector<std::string> pool;
    for (const auto& id : index.ids()) {
      if (admit(id)) pool.push_back(id);
    }
    Rng rng(config.seed);
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(config.k), pool.size());
    std::vector<std::size_t> picks = rng.sample_without_replacement(pool.size(), take);
    std::vector<std::string> ids;
    ids.reserve(picks.size());
    for (std::size_t p : picks) ids.push_back(pool[p]);
    std::sort(ids.begin(), ids.end());
    for (auto& id : ids) scored.push_back({std::move(id), 0.0});
  }

  std::vector<EvidenceItem> evidence;
  evidence.reserve(scored.size());
  for (const auto& s : scored) {
    evidence.push_back({entry_for(by_id, s.slice_id), s.similarity});
  }
  return evidence;
}

DiagnosisResponse diagnose(const SliceRecord& query, const PipelineConfig& config,
                           const CosineIndex& index, const EmbeddingHead& head,
                           const FeatureSet& features, const std::vector<CorpusEntry>& corpus) {
  config.validate();
  if (index.contains(query.slice_id)) {
    throw Error(ErrorCode::LeakageError,
                "query '" + query.slice_id + "' is part of the corpus index")
        .set_stage("diagnose");
  }

  std::vector<EvidenceItem> evidence;
  try {
    evidence = select_evidence(query, config, index, head, features, corpus);
  } catch (Error& e) {
    rethrow_with_stage(e, "retrieve");
  }

  PromptBundle bundle;
  try {
    const ExpertKnowledge expert =
        config.use_typical_features
            ? (config.expert.items.empty() ? default_expert_knowledge() : config.expert)
            : ExpertKnowledge{};
    const std::string& instruction =
        config.instruction.empty() ? default_instruction() : config.instruction;
    bundle = assemble_prompt(query, evidence, expert, instruction, config.k, config.image_root,
                             config.images_required());
  } catch (Error& e) {
    rethrow_with_stage(e, "assemble");
  }

  try {
    DiagnosisResponse response = generate(bundle, config.backend);
    if (response.evidence_ids.empty()) {
      for (const auto& item : bundle.evidence) {
        response.evidence_ids.push_back(item.entry.slice.slice_id);
      }
    }
    return response;
  } catch (Error& e) {
    rethrow_with_stage(e, "generate");
  }
}

}  // namespace bhdrag
