#include "bhdrag/generator.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "bhdrag/error.hpp"
#include "bhdrag/image.hpp"

namespace bhdrag {

void GeneratorBackend::validate() const {
  if (kind == Kind::Http) {
    if (http.endpoint.empty()) fail(ErrorCode::ConfigError, "http backend requires an endpoint");
    if (http.model.empty()) fail(ErrorCode::ConfigError, "http backend requires a model name");
    if (http.max_retries < 0) fail(ErrorCode::ConfigError, "max_retries must be >= 0");
  }
}

namespace {

std::string lowercase(const std::string& text) {
  std::string out = text;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool contains_word(const std::string& haystack_lower, const std::string& needle_lower) {
  return haystack_lower.find(needle_lower) != std::string::npos;
}

}  // namespace

std::optional<BinaryLabel> parse_diagnosis(const std::string& text) {
  const std::string lower = lowercase(text);
  static const std::string kTag = "diagnosis:";

  // Walk DIAGNOSIS: markers back to front; the first line that carries a
  // readable label wins. Negative forms are checked first because
  // "non-bhd" contains "bhd".
  std::vector<std::size_t> marks;
  for (std::size_t pos = lower.find(kTag); pos != std::string::npos;
       pos = lower.find(kTag, pos + 1)) {
    marks.push_back(pos);
  }
  for (auto it = marks.rbegin(); it != marks.rend(); ++it) {
    const std::size_t start = *it + kTag.size();
    const std::size_t eol = lower.find('\n', start);
    const std::string rest = lower.substr(start, eol == std::string::npos ? std::string::npos
                                                                          : eol - start);
    if (contains_word(rest, "non-bhd") || contains_word(rest, "non bhd") ||
        contains_word(rest, "not bhd")) {
      return BinaryLabel::NonBHD;
    }
    if (contains_word(rest, "bhd")) return BinaryLabel::BHD;
  }
  return std::nullopt;
}

DiagnosisResponse generate_mock(const PromptBundle& bundle) {
  if (bundle.evidence.empty()) {
    fail(ErrorCode::NoEvidence, "mock generator needs at least one evidence item");
  }
  std::size_t bhd_votes = 0;
  std::size_t non_bhd_votes = 0;
  for (const auto& item : bundle.evidence) {
    if (is_bhd(item.entry.slice.class_label)) {
      ++bhd_votes;
    } else {
      ++non_bhd_votes;
    }
  }
  const BinaryLabel label = bhd_votes > non_bhd_votes ? BinaryLabel::BHD : BinaryLabel::NonBHD;

  std::ostringstream text;
  text << "Mock diagnosis by majority vote over retrieved evidence.\n";
  text << "Evidence:";
  for (const auto& item : bundle.evidence) {
    text << ' ' << item.entry.slice.slice_id << " (" << to_string(item.entry.slice.class_label)
         << ")";
  }
  text << "\nVotes: BHD " << bhd_votes << ", non-BHD " << non_bhd_votes << ".\n";
  text << "DIAGNOSIS: " << (label == BinaryLabel::BHD ? "BHD" : "NON-BHD") << "\n";

  DiagnosisResponse response;
  response.raw_output = text.str();
  response.description = response.raw_output;
  response.label = label;
  for (const auto& item : bundle.evidence) {
    response.evidence_ids.push_back(item.entry.slice.slice_id);
  }
  return response;
}

std::string base64_encode(const unsigned char* data, std::size_t size) {
  static const char kAlphabet[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve(((size + 2) / 3) * 4);
  std::size_t i = 0;
  for (; i + 3 <= size; i += 3) {
    const unsigned int chunk = (static_cast<unsigned int>(data[i]) << 16) |
                               (static_cast<unsigned int>(data[i + 1]) << 8) |
                               static_cast<unsigned int>(data[i + 2]);
    out.push_back(kAlphabet[(chunk >> 18) & 0x3F]);
    out.push_back(kAlphabet[(chunk >> 12) & 0x3F]);
    out.push_back(kAlphabet[(chunk >> 6) & 0x3F]);
    out.push_back(kAlphabet[chunk & 0x3F]);
  }
  const std::size_t rest = size - i;
  if (rest == 1) {
    const unsigned int chunk = static_cast<unsigned int>(data[i]) << 16;
    out.push_back(kAlphabet[(chunk >> 18) & 0x3F]);
    out.push_back(kAlphabet[(chunk >> 12) & 0x3F]);
    out.push_back('=');
    out.push_back('=');
  } else if (rest == 2) {
    const unsigned int chunk = (static_cast<unsigned int>(data[i]) << 16) |
                               (static_cast<unsigned int>(data[i + 1]) << 8);
    out.push_back(kAlphabet[(chunk >> 18) & 0x3F]);
    out.push_back(kAlphabet[(chunk >> 12) & 0x3F]);
    out.push_back(kAlphabet[(chunk >> 6) & 0x3F]);
    out.push_back('=');
  }
  return out;
}

namespace {

using OrderedJson = nlohmann::ordered_json;

std::string image_data_url(const std::filesystem::path& path, const std::string& owner_id) {
  if (!std::filesystem::exists(path)) {
    fail(ErrorCode::MissingImage, "image file missing for '" + owner_id + "': " + path.string());
  }
  const std::vector<unsigned char> bytes = read_file_bytes(path);
  return "data:image/png;base64," + base64_encode(bytes.data(), bytes.size());
}

OrderedJson text_part(const std::string& text) {
  return OrderedJson{{"type", "text"}, {"text", text}};
}

OrderedJson image_part(const std::string& data_url) {
  return OrderedJson{{"type", "image_url"}, {"image_url", OrderedJson{{"url", data_url}}}};
}

}  // namespace

std::string build_chat_request_json(const PromptBundle& bundle, const std::string& model) {
  auto parts = OrderedJson::array();

  if (!bundle.expert.items.empty()) {
    parts.push_back(text_part("Typical distinguishing features of the candidate diseases:"));
    for (const auto& item : bundle.expert.items) {
      if (!item.image_ref.empty()) {
        parts.push_back(image_part(image_data_url(bundle.resolve(item.image_ref), "expert item")));
      }
      parts.push_back(text_part(item.text));
    }
  }

  parts.push_back(text_part("Retrieved reference cases, most similar first:"));
  int rank = 1;
  for (const auto& item : bundle.evidence) {
    const auto& slice = item.entry.slice;
    parts.push_back(image_part(image_data_url(bundle.resolve(slice.image_ref), slice.slice_id)));
    std::ostringstream caption;
    caption << "Reference " << rank++ << ": class label " << to_string(slice.class_label)
            << ". " << item.entry.description;
    parts.push_back(text_part(caption.str()));
  }

  parts.push_back(text_part("Query image to diagnose:"));
  parts.push_back(
      image_part(image_data_url(bundle.resolve(bundle.query_image_ref), bundle.query_slice_id)));

  OrderedJson body;
  body["model"] = model;
  body["temperature"] = 0;
  body["messages"] = OrderedJson::array({
      OrderedJson{{"role", "system"}, {"content", bundle.instruction}},
      OrderedJson{{"role", "user"}, {"content", std::move(parts)}},
  });
  return body.dump();
}

namespace {

struct EndpointParts {
  std::string base;         // scheme://host[:port]
  std::string path_prefix;  // "" or "/v1"
};

EndpointParts split_endpoint(const std::string& endpoint) {
  const std::size_t scheme = endpoint.find("://");
  if (scheme == std::string::npos) {
    fail(ErrorCode::ConfigError, "endpoint must start with http:// or https://: " + endpoint);
  }
  const std::size_t path = endpoint.find('/', scheme + 3);
  EndpointParts parts;
  if (path == std::string::npos) {
    parts.base = endpoint;
  } else {
    parts.base = endpoint.substr(0, path);
    parts.path_prefix = endpoint.substr(path);
  }
  while (!parts.path_prefix.empty() && parts.path_prefix.back() == '/') {
    parts.path_prefix.pop_back();
  }
  return parts;
}

std::string require_api_key(const HttpBackendConfig& config) {
  const char* key = std::getenv(config.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    fail(ErrorCode::ConfigError,
         "environment variable " + config.api_key_env + " is not set (backend auth token)");
  }
  return key;
}

/// POSTs one chat-completion body and returns choices[0].message.content.
/// Transport failures and 5xx responses are retried max_retries times with
/// exponential backoff; any other non-2xx rejects immediately.
std::string post_chat(const HttpBackendConfig& config, const std::string& body) {
  const std::string api_key = require_api_key(config);
  const EndpointParts endpoint = split_endpoint(config.endpoint);

  httplib::Client client(endpoint.base);
  if (!client.is_valid()) {
    fail(ErrorCode::ConfigError, "cannot create http client for " + endpoint.base +
                                     " (https endpoints need TLS support built in)");
  }
  const auto timeout =
      std::chrono::milliseconds(static_cast<long long>(config.timeout_seconds * 1000.0));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  client.set_bearer_token_auth(api_key);

  const std::string path = endpoint.path_prefix + "/chat/completions";
  const int attempts = config.max_retries + 1;
  std::string last_failure = "no attempt made";
  double backoff_ms = static_cast<double>(config.backoff_initial_ms);

  for (int attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(
          std::chrono::milliseconds(static_cast<long long>(backoff_ms)));
      backoff_ms *= config.backoff_factor;
    }
    httplib::Result result = client.Post(path, body, "application/json");
    if (!result) {
      last_failure = "transport error: " + httplib::to_string(result.error());
      continue;
    }
    if (result->status >= 200 && result->status < 300) {
      const auto doc = nlohmann::json::parse(result->body, nullptr, false);
      if (doc.is_discarded()) {
        fail(ErrorCode::GenerationFailed, "backend returned malformed JSON");
      }
      if (!doc.contains("choices") || !doc["choices"].is_array() || doc["choices"].empty()) {
        fail(ErrorCode::GenerationFailed, "backend response has no choices");
      }
      const auto& message = doc["choices"][0]["message"];
      if (!message.contains("content") || !message["content"].is_string()) {
        fail(ErrorCode::GenerationFailed, "backend response has no message content");
      }
      return message["content"].get<std::string>();
    }
    if (result->status >= 500 && result->status < 600) {
      last_failure = "server error " + std::to_string(result->status);
      continue;
    }
    throw Error(ErrorCode::BackendRejected,
                "backend rejected request with status " + std::to_string(result->status))
        .set_status(result->status);
  }
  fail(ErrorCode::BackendUnavailable, "backend unreachable after " + std::to_string(attempts) +
                                          " attempt(s); last failure: " + last_failure);
}

}  // namespace

DiagnosisResponse generate_http(const PromptBundle& bundle, const HttpBackendConfig& config) {
  const std::string body = build_chat_request_json(bundle, config.model);
  const std::string content = post_chat(config, body);

  DiagnosisResponse response;
  response.raw_output = content;
  response.description = content;
  response.label = parse_diagnosis(content);
  for (const auto& item : bundle.evidence) {
    response.evidence_ids.push_back(item.entry.slice.slice_id);
  }
  return response;
}

DiagnosisResponse generate(const PromptBundle& bundle, const GeneratorBackend& backend) {
  backend.validate();
  if (backend.kind == GeneratorBackend::Kind::Mock) return generate_mock(bundle);
  return generate_http(bundle, backend.http);
}

std::string generate_description(const std::filesystem::path& image_path,
                                 const std::string& prompt, const GeneratorBackend& backend) {
  backend.validate();
  if (backend.kind == GeneratorBackend::Kind::Mock) return prompt;

  auto parts = OrderedJson::array();
  parts.push_back(text_part(prompt));
  parts.push_back(image_part(image_data_url(image_path, image_path.filename().string())));

  OrderedJson body;
  body["model"] = backend.http.model;
  body["temperature"] = 0;
  body["messages"] = OrderedJson::array({
      OrderedJson{{"role", "user"}, {"content", std::move(parts)}},
  });
  return post_chat(backend.http, body.dump());
}

const std::string& default_instruction() {
  static const std::string kInstruction =
      "You are an experienced thoracic radiologist. You will be shown typical "
      "distinguishing features of four diffuse cystic lung diseases (BHD, LAM, PLCH, LIP), "
      "a set of reference CT slices retrieved from a diagnostic corpus together with their "
      "descriptions and class labels, and finally one query CT slice. Compare the cysts in "
      "the query image with the reference cases and the typical features, describe what you "
      "observe (cyst size, shape, wall, number, and distribution), and decide whether the "
      "query is most consistent with Birt-Hogg-Dube syndrome (BHD) or with a non-BHD cystic "
      "lung disease. End your answer with exactly one line of the form \"DIAGNOSIS: BHD\" or "
      "\"DIAGNOSIS: NON-BHD\".";
  return kInstruction;
}

const std::string& default_description_prompt() {
  static const std::string kPrompt =
      "Describe this lung-windowed chest CT slice for a diagnostic reference corpus. Report "
      "the pulmonary cysts you see: their approximate number, size range, shape, wall "
      "thickness, and distribution across the lung zones, plus any accompanying nodules or "
      "ground-glass changes. Two to four sentences, factual tone, no diagnosis.";
  return kPrompt;
}

ExpertKnowledge default_expert_knowledge() {
  ExpertKnowledge expert;
  expert.items.push_back(
      {"",
       "BHD (Birt-Hogg-Dube syndrome): cysts of varying size and shape, often lentiform or "
       "oblong, predominantly in the lower and paramediastinal lung zones, frequently "
       "abutting the pleura or pulmonary vessels; the intervening lung looks normal."});
  expert.items.push_back(
      {"",
       "LAM (lymphangioleiomyomatosis): numerous round thin-walled cysts of fairly uniform "
       "size scattered evenly through both lungs with no zonal preference; seen almost "
       "exclusively in women."});
  expert.items.push_back(
      {"",
       "PLCH (pulmonary Langerhans cell histiocytosis): irregular, bizarre-shaped cysts with "
       "walls of variable thickness, mixed with small nodules, favoring the upper and middle "
       "zones and sparing the costophrenic angles; strongly linked to smoking."});
  expert.items.push_back(
      {"",
       "LIP (lymphocytic interstitial pneumonia): a small number of scattered thin-walled "
       "cysts in a perivascular distribution, often with ground-glass opacity and septal "
       "thickening; associated with Sjogren syndrome and other lymphoproliferative "
       "conditions."});
  return expert;
}

}  // namespace bhdrag
