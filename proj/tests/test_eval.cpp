#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bhdrag/error.hpp"
#include "bhdrag/eval.hpp"
#include "bhdrag/image.hpp"
#include "bhdrag/rng.hpp"
#include "stub_server.hpp"
#include "synthetic.hpp"

using namespace bhdrag;
namespace fs = std::filesystem;

namespace {

struct Pipeline {
  testsupport::SyntheticData data;
  EmbeddingHead head;
  CosineIndex index;

  explicit Pipeline(int corpus_size = 80, int queries = 20, std::uint64_t seed = 77) {
    data = testsupport::make_gaussian_corpus(corpus_size, queries, 16, 4.0, seed);
    std::vector<SliceRecord> records;
    for (const auto& entry : data.corpus) records.push_back(entry.slice);

    CosFaceConfig config;
    config.embed_dim = 16;
    config.epochs = 40;
    config.batch_size = 16;
    config.learning_rate = 1e-3;
    config.seed = 5;
    head = train(records, data.features, config).head;
    index = build_index(data.corpus, data.features, head);
  }
};

bool reports_equal(const MetricsReport& a, const MetricsReport& b) {
  return a.accuracy == b.accuracy && a.precision == b.precision && a.recall == b.recall &&
         a.f1 == b.f1 && a.specificity == b.specificity && a.counts == b.counts &&
         a.unparseable == b.unparseable;
}

}  // namespace

TEST_CASE("metrics reproduce the three pinned confusion tables") {
  const MetricsReport a = metrics({8, 2, 2, 7});
  CHECK(a.accuracy == doctest::Approx(0.7895).epsilon(5e-5));
  CHECK(a.precision == doctest::Approx(0.8000).epsilon(5e-5));
  CHECK(a.recall == doctest::Approx(0.8000).epsilon(5e-5));
  CHECK(a.f1 == doctest::Approx(0.8000).epsilon(5e-5));
  CHECK(a.specificity == doctest::Approx(0.7778).epsilon(5e-5));

  const MetricsReport b = metrics({9, 8, 1, 1});
  CHECK(b.accuracy == doctest::Approx(0.5263).epsilon(5e-5));
  CHECK(b.precision == doctest::Approx(0.5294).epsilon(5e-5));
  CHECK(b.recall == doctest::Approx(0.9000).epsilon(5e-5));
  CHECK(b.f1 == doctest::Approx(0.6667).epsilon(5e-5));
  CHECK(b.specificity == doctest::Approx(0.1111).epsilon(5e-5));

  const MetricsReport c = metrics({7, 3, 3, 6});
  CHECK(c.accuracy == doctest::Approx(0.6842).epsilon(5e-5));
  CHECK(c.precision == doctest::Approx(0.7000).epsilon(5e-5));
  CHECK(c.recall == doctest::Approx(0.7000).epsilon(5e-5));
  CHECK(c.f1 == doctest::Approx(0.7000).epsilon(5e-5));
  CHECK(c.specificity == doctest::Approx(0.6667).epsilon(5e-5));
}

TEST_CASE("degenerate denominators report zero with a flag") {
  const MetricsReport r = metrics({0, 0, 0, 5});
  CHECK(r.accuracy == 1.0);
  CHECK(r.precision == 0.0);
  CHECK(r.precision_degenerate);
  CHECK(r.recall == 0.0);
  CHECK(r.recall_degenerate);
  CHECK(r.f1 == 0.0);
  CHECK(r.f1_degenerate);
  CHECK(r.specificity == 1.0);
  CHECK(r.specificity_degenerate == false);

  try {
    metrics({0, 0, 0, 0});
    FAIL("expected EmptyEvaluation");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyEvaluation);
  }
  CHECK_THROWS_AS(metrics({-1, 0, 0, 5}), Error);
}

TEST_CASE("metric identities hold over random confusion tables") {
  Rng rng(13);
  for (int trial = 0; trial < 300; ++trial) {
    ConfusionCounts counts;
    counts.tp = static_cast<long long>(rng.next_below(20));
    counts.fp = static_cast<long long>(rng.next_below(20));
    counts.fn = static_cast<long long>(rng.next_below(20));
    counts.tn = static_cast<long long>(rng.next_below(20));
    if (counts.total() == 0) counts.tn = 1;

    const MetricsReport r = metrics(counts);
    for (double m : {r.accuracy, r.precision, r.recall, r.f1, r.specificity}) {
      CHECK(m >= 0.0);
      CHECK(m <= 1.0);
    }
    CHECK(r.accuracy == doctest::Approx(static_cast<double>(counts.tp + counts.tn) /
                                        static_cast<double>(counts.total()))
                            .epsilon(1e-12));
    if (!r.precision_degenerate && !r.recall_degenerate && !r.f1_degenerate &&
        r.precision + r.recall > 0.0) {
      const double harmonic =
          2.0 * r.precision * r.recall / (r.precision + r.recall);
      CHECK(r.f1 == doctest::Approx(harmonic).epsilon(1e-12));
    }
    CHECK(r.counts == counts);
  }
}

TEST_CASE("evaluation on separable data is accurate and deterministic") {
  const Pipeline p;
  PipelineConfig config;
  config.k = 12;
  config.parallelism = 4;

  const EvalResult a = evaluate(p.data.test_records, config, p.index, p.head, p.data.features,
                                p.data.corpus);
  CHECK(a.report.counts.total() == 20);
  CHECK(a.report.accuracy >= 0.95);
  CHECK(a.report.unparseable == 0);
  REQUIRE(a.cases.size() == 20);
  CHECK(std::is_sorted(a.cases.begin(), a.cases.end(),
                       [](const CaseResult& x, const CaseResult& y) {
                         return x.slice_id < y.slice_id;
                       }));
  for (const auto& c : a.cases) {
    CHECK(c.evidence.size() == 12);
    CHECK(c.raw_output.empty() == false);
  }

  const EvalResult b = evaluate(p.data.test_records, config, p.index, p.head, p.data.features,
                                p.data.corpus);
  CHECK(reports_equal(a.report, b.report));
  REQUIRE(b.cases.size() == a.cases.size());
  for (std::size_t i = 0; i < a.cases.size(); ++i) {
    CHECK(a.cases[i].slice_id == b.cases[i].slice_id);
    CHECK(a.cases[i].raw_output == b.cases[i].raw_output);
  }

  // Single-threaded evaluation produces the identical result.
  PipelineConfig serial = config;
  serial.parallelism = 1;
  const EvalResult c = evaluate(p.data.test_records, serial, p.index, p.head, p.data.features,
                                p.data.corpus);
  CHECK(reports_equal(a.report, c.report));
}

TEST_CASE("slice or patient overlap with the corpus is refused") {
  const Pipeline p;
  PipelineConfig config;

  std::vector<SliceRecord> leaked_slice = p.data.test_records;
  leaked_slice.push_back(p.data.corpus.front().slice);
  try {
    evaluate(leaked_slice, config, p.index, p.head, p.data.features, p.data.corpus);
    FAIL("expected LeakageError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::LeakageError);
  }

  std::vector<SliceRecord> leaked_patient = p.data.test_records;
  leaked_patient.front().patient_id = p.data.corpus.front().slice.patient_id;
  try {
    evaluate(leaked_patient, config, p.index, p.head, p.data.features, p.data.corpus);
    FAIL("expected LeakageError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::LeakageError);
  }

  CHECK_THROWS_AS(evaluate({}, config, p.index, p.head, p.data.features, p.data.corpus), Error);
}

TEST_CASE("unparseable generator output counts against accuracy") {
  testsupport::StubServer server;
  server.set_content("No definitive diagnosis can be offered.");

  const Pipeline p(40, 8);
  // The remote backend embeds every referenced image, so materialize them.
  const fs::path dir = fs::temp_directory_path() / "bhdrag_eval_http";
  fs::remove_all(dir);
  fs::create_directories(dir / "images");
  HuImage tiny;
  tiny.height = 2;
  tiny.width = 2;
  tiny.hu = {-900, -800, -700, -600};
  for (const auto& entry : p.data.corpus) write_hu_png(dir / entry.slice.image_ref, tiny);
  for (const auto& query : p.data.test_records) write_hu_png(dir / query.image_ref, tiny);

  PipelineConfig config;
  config.k = 4;
  config.parallelism = 2;
  config.image_root = dir;
  HttpBackendConfig http;
  http.endpoint = server.endpoint();
  http.model = "stub-model";
  config.backend = GeneratorBackend::remote(http);

  const EvalResult r = evaluate(p.data.test_records, config, p.index, p.head, p.data.features,
                                p.data.corpus);
  CHECK(r.report.unparseable == 8);
  CHECK(r.report.accuracy == 0.0);
  CHECK(r.report.counts.total() == 8);
  // Unparseable BHD-truth cases tally as misses, non-BHD ones as false alarms.
  CHECK(r.report.counts.fn == 4);
  CHECK(r.report.counts.fp == 4);
  for (const auto& c : r.cases) CHECK(c.predicted.has_value() == false);
}

TEST_CASE("the k sweep returns one row per k and matches standalone runs") {
  const Pipeline p;
  PipelineConfig config;
  config.parallelism = 2;

  const std::vector<RunRow> rows = k_sweep({1, 4, 12}, config, p.data.test_records, p.index,
                                           p.head, p.data.features, p.data.corpus);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].k == 1);
  CHECK(rows[1].k == 4);
  CHECK(rows[2].k == 12);
  for (const auto& row : rows) {
    CHECK(row.use_retriever);
    CHECK(row.use_typical_features);
    CHECK(row.report.counts.total() == 20);
  }

  PipelineConfig single = config;
  single.k = 4;
  const EvalResult standalone = evaluate(p.data.test_records, single, p.index, p.head,
                                         p.data.features, p.data.corpus);
  CHECK(reports_equal(rows[1].report, standalone.report));

  // More context should not hurt much on separable data.
  CHECK(rows[2].report.accuracy >= rows[0].report.accuracy - 0.05);

  CHECK_THROWS_AS(k_sweep({}, config, p.data.test_records, p.index, p.head, p.data.features,
                          p.data.corpus),
                  Error);
  CHECK_THROWS_AS(k_sweep({0}, config, p.data.test_records, p.index, p.head, p.data.features,
                          p.data.corpus),
                  Error);
}

TEST_CASE("the ablation grid emits the four flag rows in order") {
  const Pipeline p;
  PipelineConfig config;
  config.k = 12;
  config.parallelism = 2;
  config.seed = 21;

  const std::vector<RunRow> rows =
      ablation_grid(config, p.data.test_records, p.index, p.head, p.data.features, p.data.corpus);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].use_retriever == false);
  CHECK(rows[0].use_typical_features == false);
  CHECK(rows[1].use_retriever == true);
  CHECK(rows[1].use_typical_features == false);
  CHECK(rows[2].use_retriever == false);
  CHECK(rows[2].use_typical_features == true);
  CHECK(rows[3].use_retriever == true);
  CHECK(rows[3].use_typical_features == true);

  PipelineConfig full = config;
  full.use_retriever = true;
  full.use_typical_features = true;
  const EvalResult standalone = evaluate(p.data.test_records, full, p.index, p.head,
                                         p.data.features, p.data.corpus);
  CHECK(reports_equal(rows[3].report, standalone.report));

  // Retrieval beats the seeded random sample on separable data.
  CHECK(rows[3].report.accuracy >= rows[2].report.accuracy);
  CHECK(rows[1].report.accuracy >= rows[0].report.accuracy);
}

TEST_CASE("the report CSV has the fixed schema") {
  const Pipeline p(40, 8);
  PipelineConfig config;
  config.k = 3;
  config.parallelism = 2;
  const std::vector<RunRow> rows = k_sweep({1, 3}, config, p.data.test_records, p.index, p.head,
                                           p.data.features, p.data.corpus);

  const fs::path dir = fs::temp_directory_path() / "bhdrag_eval_csv";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_report_csv(dir / "report.csv", rows);

  std::ifstream in(dir / "report.csv");
  std::string header;
  REQUIRE(std::getline(in, header));
  CHECK(header ==
        "use_retriever,use_typical_features,k,accuracy,precision,recall,f1,specificity,tp,fp,"
        "fn,tn,unparseable,degenerate");
  int data_lines = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++data_lines;
    CHECK(std::count(line.begin(), line.end(), ',') == 13);
    CHECK(line.substr(0, 4) == "1,1,");
  }
  CHECK(data_lines == 2);
}

TEST_CASE("the cases JSONL carries one well-formed object per case") {
  const Pipeline p(40, 8);
  PipelineConfig config;
  config.k = 3;
  const EvalResult r =
      evaluate(p.data.test_records, config, p.index, p.head, p.data.features, p.data.corpus);

  const fs::path dir = fs::temp_directory_path() / "bhdrag_eval_jsonl";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_cases_jsonl(dir / "cases.jsonl", r.cases);

  std::ifstream in(dir / "cases.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.at("slice_id").is_string());
    CHECK(j.at("patient_id").is_string());
    CHECK(j.at("truth").is_string());
    CHECK(j.contains("predicted"));
    CHECK(j.at("evidence").is_array());
    CHECK(j.at("evidence").size() == 3);
    for (const auto& e : j.at("evidence")) {
      CHECK(e.at("slice_id").is_string());
      CHECK(e.at("similarity").is_number());
    }
    CHECK(j.at("raw_output").is_string());
    ++n;
  }
  CHECK(n == 8);
}

TEST_CASE("per-patient aggregation majority-votes each patient") {
  // The synthetic corpus gives every query its own patient; pool them into
  // two four-slice patients (query classes alternate with the index, so
  // the even queries are all BHD and the odd ones all non-BHD).
  const Pipeline p(80, 12);
  std::vector<SliceRecord> pooled;
  for (int i = 0; i < 8; ++i) {
    SliceRecord r = p.data.test_records[static_cast<std::size_t>(i)];
    r.patient_id = (i % 2 == 0) ? "agg_bhd" : "agg_non";
    pooled.push_back(r);
  }

  PipelineConfig config;
  config.k = 12;
  EvalOptions options;
  options.per_patient = true;
  const EvalResult r =
      evaluate(pooled, config, p.index, p.head, p.data.features, p.data.corpus, options);
  REQUIRE(r.per_patient_report.has_value());
  CHECK(r.per_patient_report->counts.total() == 2);
  // Separable data: the BHD pool aggregates to tp, the other to tn.
  CHECK(r.per_patient_report->counts.tp == 1);
  CHECK(r.per_patient_report->counts.tn == 1);

  const EvalResult without =
      evaluate(pooled, config, p.index, p.head, p.data.features, p.data.corpus);
  CHECK(without.per_patient_report.has_value() == false);
}
