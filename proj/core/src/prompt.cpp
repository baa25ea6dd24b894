#include "bhdrag/prompt.hpp"

#include <nlohmann/json.hpp>

namespace bhdrag {

std::string serialize_bundle(const PromptBundle& bundle) {
  nlohmann::ordered_json doc;
  doc["instruction"] = bundle.instruction;

  auto expert = nlohmann::ordered_json::array();
  for (const auto& item : bundle.expert.items) {
    nlohmann::ordered_json j;
    j["image_ref"] = item.image_ref;
    j["text"] = item.text;
    expert.push_back(std::move(j));
  }
  doc["expert"] = std::move(expert);

  auto evidence = nlohmann::ordered_json::array();
  for (const auto& item : bundle.evidence) {
    nlohmann::ordered_json j;
    j["slice_id"] = item.entry.slice.slice_id;
    j["class_label"] = to_string(item.entry.slice.class_label);
    j["description"] = item.entry.description;
    j["similarity"] = item.similarity;
    evidence.push_back(std::move(j));
  }
  doc["evidence"] = std::move(evidence);

  doc["query"] = {{"slice_id", bundle.query_slice_id}, {"image_ref", bundle.query_image_ref}};
  doc["k"] = bundle.k;
  return doc.dump(2);
}

}  // namespace bhdrag
