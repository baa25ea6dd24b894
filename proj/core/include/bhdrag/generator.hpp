#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bhdrag/prompt.hpp"
#include "bhdrag/types.hpp"

namespace bhdrag {

struct HttpBackendConfig {
  std::string endpoint;  // e.g. https://api.openai.com/v1
  std::string model;
  std::string api_key_env = "BHD_RAG_API_KEY";
  double timeout_seconds = 120.0;
  int max_retries = 2;
  int backoff_initial_ms = 500;
  double backoff_factor = 2.0;
};

/// The text generator behind the pipeline: a deterministic mock for
/// offline runs and tests, or a remote chat-completion service.
struct GeneratorBackend {
  enum class Kind { Mock, Http };

  Kind kind = Kind::Mock;
  HttpBackendConfig http;

  static GeneratorBackend mock() { return GeneratorBackend{}; }
  static GeneratorBackend remote(HttpBackendConfig config) {
    GeneratorBackend b;
    b.kind = Kind::Http;
    b.http = std::move(config);
    return b;
  }

  /// Throws ConfigError if an http backend is missing endpoint or model.
  void validate() const;
};

struct DiagnosisResponse {
  std::optional<BinaryLabel> label;  // nullopt when the output was unparseable
  std::string description;
  std::string raw_output;
  std::vector<std::string> evidence_ids;
};

/// Finds the last case-insensitive "DIAGNOSIS:" line and reads the label
/// after it ("BHD", "NON-BHD" or "NOT BHD"). nullopt when absent.
std::optional<BinaryLabel> parse_diagnosis(const std::string& text);

/// Majority vote over the evidence labels at BHD-vs-non-BHD granularity,
/// ties to non-BHD. Emits the canonical DIAGNOSIS line so its own output
/// always parses.
DiagnosisResponse generate_mock(const PromptBundle& bundle);

/// One chat-completion round trip with retry/backoff on transport errors
/// and 5xx statuses. Other non-2xx statuses reject immediately.
DiagnosisResponse generate_http(const PromptBundle& bundle, const HttpBackendConfig& config);

DiagnosisResponse generate(const PromptBundle& bundle, const GeneratorBackend& backend);

/// The JSON body generate_http posts, exposed so its structure can be
/// checked without a server. Deterministic for identical bundles.
std::string build_chat_request_json(const PromptBundle& bundle, const std::string& model);

/// One-image description call used while drafting corpus entries. The
/// mock backend echoes the prompt text verbatim.
std::string generate_description(const std::filesystem::path& image_path,
                                 const std::string& prompt,
                                 const GeneratorBackend& backend);

std::string base64_encode(const unsigned char* data, std::size_t size);

/// Default instruction handed to the generator for diagnosis.
const std::string& default_instruction();

/// Default image-description prompt used when drafting corpus entries.
const std::string& default_description_prompt();

/// Built-in typical distinguishing features of the four cystic lung
/// diseases, used when no expert knowledge file is supplied.
ExpertKnowledge default_expert_knowledge();

}  // namespace bhdrag
