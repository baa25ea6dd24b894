#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "bhdrag/types.hpp"

namespace bhdrag {

struct EvidenceItem {
  CorpusEntry entry;
  double similarity = 0.0;

  bool operator==(const EvidenceItem&) const = default;
};

/// Everything the generator is conditioned on for one query: the
/// instruction, the expert knowledge section, the retrieved evidence pairs
/// in descending-similarity order, and the query image itself.
struct PromptBundle {
  std::string query_slice_id;
  std::string query_image_ref;
  std::string instruction;
  ExpertKnowledge expert;
  std::vector<EvidenceItem> evidence;
  int k = 12;
  std::filesystem::path image_root;  // base directory for resolving image refs

  std::filesystem::path resolve(const std::string& ref) const {
    std::filesystem::path p(ref);
    return p.is_absolute() ? p : image_root / p;
  }
};

/// Deterministic JSON rendering of a bundle, used for audit logs and as
/// the canonical byte representation the determinism contract refers to.
std::string serialize_bundle(const PromptBundle& bundle);

}  // namespace bhdrag
