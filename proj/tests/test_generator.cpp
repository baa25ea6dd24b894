#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "bhdrag/error.hpp"
#include "bhdrag/generator.hpp"
#include "bhdrag/image.hpp"
#include "bhdrag/rng.hpp"
#include "stub_server.hpp"

using namespace bhdrag;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("bhdrag_gen_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

HuImage tiny_image(int seed) {
  HuImage image;
  image.height = 4;
  image.width = 4;
  Rng rng(static_cast<std::uint64_t>(seed));
  for (int i = 0; i < 16; ++i) {
    image.hu.push_back(static_cast<std::int16_t>(static_cast<int>(rng.next_below(1200)) - 1000));
  }
  return image;
}

EvidenceItem evidence(const std::string& id, ClassLabel label, double similarity,
                      const std::string& image_ref = "") {
  EvidenceItem item;
  item.entry.slice.slice_id = id;
  item.entry.slice.patient_id = "p_" + id;
  item.entry.slice.class_label = label;
  item.entry.slice.image_ref = image_ref;
  item.entry.description = "cystic pattern seen in " + id;
  item.similarity = similarity;
  return item;
}

/// Bundle with k evidence images plus a query image, all materialized as
/// real PNG files under dir.
PromptBundle image_bundle(const fs::path& dir, int n_evidence, int n_expert_images) {
  PromptBundle bundle;
  bundle.query_slice_id = "query1";
  bundle.query_image_ref = "query.png";
  bundle.instruction = "instruction text";
  bundle.k = n_evidence;
  bundle.image_root = dir;
  write_hu_png(dir / "query.png", tiny_image(0));

  for (int i = 0; i < n_evidence; ++i) {
    const std::string ref = "ev" + std::to_string(i) + ".png";
    write_hu_png(dir / ref, tiny_image(i + 1));
    bundle.evidence.push_back(evidence("e" + std::to_string(i),
                                       i % 2 == 0 ? ClassLabel::BHD : ClassLabel::LAM,
                                       0.9 - 0.1 * i, ref));
  }
  for (int i = 0; i < n_expert_images; ++i) {
    const std::string ref = "ex" + std::to_string(i) + ".png";
    write_hu_png(dir / ref, tiny_image(100 + i));
    bundle.expert.items.push_back({ref, "expert note " + std::to_string(i)});
  }
  bundle.expert.items.push_back({"", "text-only expert note"});
  return bundle;
}

int count_parts(const json& content, const std::string& type) {
  int n = 0;
  for (const auto& part : content) {
    if (part.at("type").get<std::string>() == type) ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("diagnosis parsing reads the last readable DIAGNOSIS line") {
  CHECK(parse_diagnosis("DIAGNOSIS: BHD") == BinaryLabel::BHD);
  CHECK(parse_diagnosis("blah\ndiagnosis: non-bhd\n") == BinaryLabel::NonBHD);
  CHECK(parse_diagnosis("Diagnosis: not BHD, most likely LAM") == BinaryLabel::NonBHD);
  CHECK(parse_diagnosis("Diagnosis: non BHD") == BinaryLabel::NonBHD);

  // The last readable line wins over earlier ones.
  CHECK(parse_diagnosis("DIAGNOSIS: BHD\n...\nDIAGNOSIS: NON-BHD") == BinaryLabel::NonBHD);
  CHECK(parse_diagnosis("DIAGNOSIS: NON-BHD\nreconsidering...\nDIAGNOSIS: BHD") ==
        BinaryLabel::BHD);

  // An unreadable final line falls back to the previous readable one.
  CHECK(parse_diagnosis("DIAGNOSIS: BHD\nDIAGNOSIS: pending review") == BinaryLabel::BHD);
}

TEST_CASE("diagnosis parsing refuses text without a readable label") {
  CHECK(parse_diagnosis("").has_value() == false);
  CHECK(parse_diagnosis("The image shows cysts.").has_value() == false);
  CHECK(parse_diagnosis("DIAGNOSIS: uncertain").has_value() == false);
  // The label must sit on the same line as the marker.
  CHECK(parse_diagnosis("DIAGNOSIS:\nBHD").has_value() == false);
}

TEST_CASE("mock generation takes the evidence majority, ties to non-BHD") {
  PromptBundle bundle;
  bundle.query_slice_id = "q";
  for (int i = 0; i < 7; ++i) bundle.evidence.push_back(evidence("b" + std::to_string(i), ClassLabel::BHD, 0.9));
  for (int i = 0; i < 5; ++i) bundle.evidence.push_back(evidence("l" + std::to_string(i), ClassLabel::LAM, 0.8));
  const DiagnosisResponse majority = generate_mock(bundle);
  CHECK(majority.label == BinaryLabel::BHD);

  PromptBundle tie;
  tie.query_slice_id = "q";
  for (int i = 0; i < 6; ++i) tie.evidence.push_back(evidence("b" + std::to_string(i), ClassLabel::BHD, 0.9));
  for (int i = 0; i < 6; ++i) tie.evidence.push_back(evidence("p" + std::to_string(i), ClassLabel::LIP, 0.8));
  const DiagnosisResponse tied = generate_mock(tie);
  CHECK(tied.label == BinaryLabel::NonBHD);
}

TEST_CASE("mock generation output parses and lists its evidence") {
  PromptBundle bundle;
  bundle.query_slice_id = "q";
  bundle.evidence.push_back(evidence("e1", ClassLabel::BHD, 0.9));
  bundle.evidence.push_back(evidence("e2", ClassLabel::PLCH, 0.8));
  bundle.evidence.push_back(evidence("e3", ClassLabel::BHD, 0.7));

  const DiagnosisResponse r = generate_mock(bundle);
  CHECK(parse_diagnosis(r.raw_output) == r.label);
  CHECK(r.evidence_ids == std::vector<std::string>{"e1", "e2", "e3"});
  CHECK(r.raw_output.find("e2") != std::string::npos);

  const DiagnosisResponse again = generate_mock(bundle);
  CHECK(again.raw_output == r.raw_output);
  CHECK(again.label == r.label);
}

TEST_CASE("mock generation is invariant to evidence permutation") {
  std::vector<EvidenceItem> items;
  for (int i = 0; i < 5; ++i) items.push_back(evidence("b" + std::to_string(i), ClassLabel::BHD, 0.9));
  for (int i = 0; i < 3; ++i) items.push_back(evidence("l" + std::to_string(i), ClassLabel::LAM, 0.8));

  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    rng.shuffle(items);
    PromptBundle bundle;
    bundle.query_slice_id = "q";
    bundle.evidence = items;
    CHECK(generate_mock(bundle).label == BinaryLabel::BHD);
  }
}

TEST_CASE("mock generation refuses an empty evidence list") {
  PromptBundle bundle;
  bundle.query_slice_id = "q";
  try {
    generate_mock(bundle);
    FAIL("expected NoEvidence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoEvidence);
  }
}

TEST_CASE("base64 matches the reference vectors") {
  const auto encode = [](const std::string& s) {
    return base64_encode(reinterpret_cast<const unsigned char*>(s.data()), s.size());
  };
  CHECK(encode("") == "");
  CHECK(encode("f") == "Zg==");
  CHECK(encode("fo") == "Zm8=");
  CHECK(encode("foo") == "Zm9v");
  CHECK(encode("foob") == "Zm9vYg==");
  CHECK(encode("fooba") == "Zm9vYmE=");
  CHECK(encode("foobar") == "Zm9vYmFy");
}

TEST_CASE("the chat request carries the documented structure") {
  const fs::path dir = temp_dir("request");
  const PromptBundle bundle = image_bundle(dir, 3, 2);

  const std::string body = build_chat_request_json(bundle, "test-model");
  const json j = json::parse(body);

  CHECK(j.at("model") == "test-model");
  CHECK(j.at("temperature").get<double>() == 0.0);
  REQUIRE(j.at("messages").size() == 2);
  CHECK(j.at("messages")[0].at("role") == "system");
  CHECK(j.at("messages")[0].at("content") == "instruction text");
  CHECK(j.at("messages")[1].at("role") == "user");

  const json& content = j.at("messages")[1].at("content");
  // k evidence images + 1 query image + 2 expert images.
  CHECK(count_parts(content, "image_url") == 3 + 1 + 2);
  for (const auto& part : content) {
    if (part.at("type") == "image_url") {
      const std::string url = part.at("image_url").at("url").get<std::string>();
      CHECK(url.rfind("data:image/png;base64,", 0) == 0);
      CHECK(url.size() > 30);
    } else {
      CHECK(part.at("type") == "text");
      CHECK(part.at("text").get<std::string>().empty() == false);
    }
  }

  // The final image part is the query; evidence precedes it in order.
  std::vector<std::string> texts;
  for (const auto& part : content) {
    if (part.at("type") == "text") texts.push_back(part.at("text").get<std::string>());
  }
  const auto find_text = [&](const std::string& needle) {
    return std::find_if(texts.begin(), texts.end(), [&](const std::string& t) {
             return t.find(needle) != std::string::npos;
           }) != texts.end();
  };
  CHECK(find_text("Reference 1"));
  CHECK(find_text("Reference 3"));
  CHECK(find_text("cystic pattern seen in e0"));
  CHECK(find_text("text-only expert note"));

  CHECK(build_chat_request_json(bundle, "test-model") == body);
}

TEST_CASE("the expert section disappears with the knowledge") {
  const fs::path dir = temp_dir("noexpert");
  PromptBundle bundle = image_bundle(dir, 2, 0);
  bundle.expert.items.clear();

  const json j = json::parse(build_chat_request_json(bundle, "m"));
  const json& content = j.at("messages")[1].at("content");
  CHECK(count_parts(content, "image_url") == 2 + 1);
  for (const auto& part : content) {
    if (part.at("type") == "text") {
      CHECK(part.at("text").get<std::string>().find("Typical distinguishing") ==
            std::string::npos);
    }
  }
}

TEST_CASE("a missing image file fails the request build") {
  const fs::path dir = temp_dir("missing");
  PromptBundle bundle = image_bundle(dir, 2, 0);
  fs::remove(dir / "ev1.png");
  try {
    build_chat_request_json(bundle, "m");
    FAIL("expected MissingImage");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingImage);
  }
}

TEST_CASE("backend validation catches incomplete http configs") {
  GeneratorBackend backend;
  CHECK_NOTHROW(backend.validate());

  HttpBackendConfig http;
  http.model = "m";
  CHECK_THROWS_AS(GeneratorBackend::remote(http).validate(), Error);
  http.endpoint = "http://localhost:1";
  CHECK_NOTHROW(GeneratorBackend::remote(http).validate());
  http.model.clear();
  CHECK_THROWS_AS(GeneratorBackend::remote(http).validate(), Error);
  http.model = "m";
  http.max_retries = -1;
  CHECK_THROWS_AS(GeneratorBackend::remote(http).validate(), Error);
}

TEST_CASE("http generation round-trips against a stub server") {
  testsupport::StubServer server;
  server.set_content("The query shows solitary large cysts.\nDIAGNOSIS: BHD\n");

  const fs::path dir = temp_dir("http_ok");
  const PromptBundle bundle = image_bundle(dir, 2, 1);

  HttpBackendConfig config;
  config.endpoint = server.endpoint();
  config.model = "stub-model";
  config.backoff_initial_ms = 10;

  const DiagnosisResponse r = generate_http(bundle, config);
  CHECK(r.label == BinaryLabel::BHD);
  CHECK(r.raw_output.find("solitary large cysts") != std::string::npos);
  CHECK(r.evidence_ids == std::vector<std::string>{"e0", "e1"});
  REQUIRE(server.hits() == 1);

  const auto requests = server.requests();
  const auto& request = requests.front();
  CHECK(request.authorization == "Bearer test-key-123");
  const json j = json::parse(request.body);
  CHECK(j.at("model") == "stub-model");
  CHECK(j.at("temperature").get<double>() == 0.0);
  CHECK(count_parts(j.at("messages")[1].at("content"), "image_url") == 2 + 1 + 1);
}

TEST_CASE("an unreadable remote verdict is reported, not invented") {
  testsupport::StubServer server;
  server.set_content("I cannot tell which disease this is.");

  const fs::path dir = temp_dir("http_vague");
  const PromptBundle bundle = image_bundle(dir, 2, 0);
  HttpBackendConfig config;
  config.endpoint = server.endpoint();
  config.model = "stub-model";

  const DiagnosisResponse r = generate_http(bundle, config);
  CHECK(r.label.has_value() == false);
  CHECK(r.raw_output == "I cannot tell which disease this is.");
}

TEST_CASE("4xx statuses reject immediately without retries") {
  testsupport::StubServer server;
  server.always_status(404);

  const fs::path dir = temp_dir("http_404");
  const PromptBundle bundle = image_bundle(dir, 1, 0);
  HttpBackendConfig config;
  config.endpoint = server.endpoint();
  config.model = "stub-model";
  config.max_retries = 3;
  config.backoff_initial_ms = 10;

  try {
    generate_http(bundle, config);
    FAIL("expected BackendRejected");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BackendRejected);
    CHECK(e.status() == 404);
  }
  CHECK(server.hits() == 1);
}

TEST_CASE("5xx statuses burn through the retry budget with backoff") {
  testsupport::StubServer server;
  server.always_status(503);

  const fs::path dir = temp_dir("http_503");
  const PromptBundle bundle = image_bundle(dir, 1, 0);
  HttpBackendConfig config;
  config.endpoint = server.endpoint();
  config.model = "stub-model";
  config.max_retries = 2;
  config.backoff_initial_ms = 40;
  config.backoff_factor = 2.0;

  const auto started = std::chrono::steady_clock::now();
  try {
    generate_http(bundle, config);
    FAIL("expected BackendUnavailable");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BackendUnavailable);
  }
  const auto elapsed =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);

  // max_retries = 2 means 3 attempts total.
  CHECK(server.hits() == 3);
  // Two sleeps: 40 ms + 80 ms, allowing generous scheduling slack.
  CHECK(elapsed.count() >= 100);

  const auto& requests = server.requests();
  REQUIRE(requests.size() == 3);
  const auto gap1 =
      std::chrono::duration_cast<std::chrono::milliseconds>(requests[1].when - requests[0].when);
  const auto gap2 =
      std::chrono::duration_cast<std::chrono::milliseconds>(requests[2].when - requests[1].when);
  CHECK(gap1.count() >= 35);
  CHECK(gap2.count() >= 70);
}

TEST_CASE("transient failures recover within the retry budget") {
  testsupport::StubServer server;
  server.set_content("DIAGNOSIS: NON-BHD");
  server.fail_first(2);

  const fs::path dir = temp_dir("http_recover");
  const PromptBundle bundle = image_bundle(dir, 1, 0);
  HttpBackendConfig config;
  config.endpoint = server.endpoint();
  config.model = "stub-model";
  config.max_retries = 2;
  config.backoff_initial_ms = 10;

  const DiagnosisResponse r = generate_http(bundle, config);
  CHECK(r.label == BinaryLabel::NonBHD);
  CHECK(server.hits() == 3);
}

TEST_CASE("a malformed success body is a generation failure") {
  testsupport::StubServer server;
  server.set_raw_body("{\"unexpected\": true}");

  const fs::path dir = temp_dir("http_malformed");
  const PromptBundle bundle = image_bundle(dir, 1, 0);
  HttpBackendConfig config;
  config.endpoint = server.endpoint();
  config.model = "stub-model";

  try {
    generate_http(bundle, config);
    FAIL("expected GenerationFailed");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::GenerationFailed);
  }
}

TEST_CASE("an endpoint with a path prefix is honored") {
  testsupport::StubServer server;
  server.set_content("DIAGNOSIS: BHD");

  const fs::path dir = temp_dir("http_prefix");
  const PromptBundle bundle = image_bundle(dir, 1, 0);
  HttpBackendConfig config;
  config.endpoint = server.endpoint() + "/v1";
  config.model = "stub-model";

  const DiagnosisResponse r = generate_http(bundle, config);
  CHECK(r.label == BinaryLabel::BHD);
  REQUIRE(server.hits() == 1);
  CHECK(server.requests().front().path == "/v1/chat/completions");
}

TEST_CASE("a missing API key is a config error naming the variable") {
  testsupport::StubServer server;  // sets the env var; clear it below
  ::unsetenv("BHD_RAG_API_KEY");

  const fs::path dir = temp_dir("http_nokey");
  const PromptBundle bundle = image_bundle(dir, 1, 0);
  HttpBackendConfig config;
  config.endpoint = server.endpoint();
  config.model = "stub-model";

  try {
    generate_http(bundle, config);
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigError);
    CHECK(e.message().find("BHD_RAG_API_KEY") != std::string::npos);
  }
  ::setenv("BHD_RAG_API_KEY", "test-key-123", 1);
}

TEST_CASE("description drafting posts one image and returns the text") {
  testsupport::StubServer server;
  server.set_content("Multiple thin-walled cysts in both lower lobes.");

  const fs::path dir = temp_dir("describe");
  write_hu_png(dir / "one.png", tiny_image(9));

  HttpBackendConfig config;
  config.endpoint = server.endpoint();
  config.model = "stub-model";

  const std::string text =
      generate_description(dir / "one.png", "describe this slice", GeneratorBackend::remote(config));
  CHECK(text == "Multiple thin-walled cysts in both lower lobes.");
  REQUIRE(server.hits() == 1);
  const json j = json::parse(server.requests().front().body);
  CHECK(count_parts(j.at("messages")[0].at("content"), "image_url") == 1);

  // The mock backend echoes the prompt without touching the network.
  CHECK(generate_description(dir / "one.png", "echo me", GeneratorBackend::mock()) == "echo me");
}

TEST_CASE("default knowledge and instruction are usable as-is") {
  const ExpertKnowledge knowledge = default_expert_knowledge();
  CHECK(knowledge.items.size() >= 4);
  for (const auto& item : knowledge.items) CHECK(item.text.empty() == false);

  CHECK(default_instruction().find("DIAGNOSIS:") != std::string::npos);
  CHECK(default_description_prompt().empty() == false);
}
