#include "bhdrag/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "bhdrag/error.hpp"

namespace bhdrag {

MetricsReport metrics(const ConfusionCounts& counts) {
  if (counts.tp < 0 || counts.fp < 0 || counts.fn < 0 || counts.tn < 0) {
    fail(ErrorCode::ConfigError, "confusion counts must be non-negative");
  }
  const long long total = counts.total();
  if (total == 0) fail(ErrorCode::EmptyEvaluation, "confusion counts sum to zero");

  MetricsReport r;
  r.counts = counts;
  r.accuracy = static_cast<double>(counts.tp + counts.tn) / static_cast<double>(total);

  const auto ratio = [](long long num, long long den, bool& degenerate) {
    if (den == 0) {
      degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  r.precision = ratio(counts.tp, counts.tp + counts.fp, r.precision_degenerate);
  r.recall = ratio(counts.tp, counts.tp + counts.fn, r.recall_degenerate);
  r.specificity = ratio(counts.tn, counts.tn + counts.fp, r.specificity_degenerate);
  if (r.precision + r.recall == 0.0) {
    r.f1_degenerate = true;
    r.f1 = 0.0;
  } else {
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  }
  return r;
}

namespace {

void check_no_leakage(const std::vector<SliceRecord>& test_records, const CosineIndex& index,
                      const std::vector<CorpusEntry>& corpus) {
  std::unordered_set<std::string> corpus_patients;
  for (const auto& entry : corpus) corpus_patients.insert(entry.slice.patient_id);
  for (const auto& record : test_records) {
    if (index.contains(record.slice_id)) {
      fail(ErrorCode::LeakageError,
           "test slice '" + record.slice_id + "' is present in the corpus index");
    }
    if (corpus_patients.count(record.patient_id) > 0) {
      fail(ErrorCode::LeakageError, "test patient '" + record.patient_id +
                                        "' has slices in the corpus (patient-level leak)");
    }
  }
}

void tally(ConfusionCounts& counts, long long& unparseable, BinaryLabel truth,
           const std::optional<BinaryLabel>& predicted) {
  if (!predicted.has_value()) {
    // Unparseable output counts as the wrong prediction so denominators
    // stay fixed at the case count.
    ++unparseable;
    if (truth == BinaryLabel::BHD) {
      ++counts.fn;
    } else {
      ++counts.fp;
    }
    return;
  }
  if (truth == BinaryLabel::BHD) {
    if (*predicted == BinaryLabel::BHD) {
      ++counts.tp;
    } else {
      ++counts.fn;
    }
  } else {
    if (*predicted == BinaryLabel::BHD) {
      ++counts.fp;
    } else {
      ++counts.tn;
    }
  }
}

MetricsReport per_patient_metrics(const std::vector<CaseResult>& cases, long long unparseable) {
  struct PatientVotes {
    BinaryLabel truth = BinaryLabel::NonBHD;
    long long bhd = 0;
    long long non_bhd = 0;
  };
  std::map<std::string, PatientVotes> by_patient;
  for (const auto& c : cases) {
    auto& votes = by_patient[c.patient_id];
    votes.truth = c.truth;
    if (!c.predicted.has_value()) continue;
    if (*c.predicted == BinaryLabel::BHD) {
      ++votes.bhd;
    } else {
      ++votes.non_bhd;
    }
  }
  ConfusionCounts counts;
  long long dummy = 0;
  for (const auto& [patient, votes] : by_patient) {
    const BinaryLabel predicted =
        votes.bhd > votes.non_bhd ? BinaryLabel::BHD : BinaryLabel::NonBHD;
    tally(counts, dummy, votes.truth, predicted);
  }
  MetricsReport report = metrics(counts);
  report.unparseable = unparseable;  // slice-level count, carried for reference
  return report;
}

}  // namespace

EvalResult evaluate(const std::vector<SliceRecord>& test_records, const PipelineConfig& config,
                    const CosineIndex& index, const EmbeddingHead& head,
                    const FeatureSet& features, const std::vector<CorpusEntry>& corpus,
                    const EvalOptions& options) {
  config.validate();
  if (test_records.empty()) fail(ErrorCode::EmptyEvaluation, "no test records to evaluate");
  check_no_leakage(test_records, index, corpus);

  std::vector<CaseResult> cases(test_records.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;

  const auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= test_records.size()) return;
      {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (first_error) return;
      }
      try {
        const SliceRecord& record = test_records[i];
        const DiagnosisResponse response =
            diagnose(record, config, index, head, features, corpus);
        CaseResult result;
        result.slice_id = record.slice_id;
        result.patient_id = record.patient_id;
        result.truth = to_binary(record.class_label);
        result.predicted = response.label;
        result.raw_output = response.raw_output;
        // Recover similarities for the log; random-mode evidence carries 0.
        const std::vector<EvidenceItem> evidence =
            select_evidence(record, config, index, head, features, corpus);
        for (const auto& item : evidence) {
          result.evidence.push_back({item.entry.slice.slice_id, item.similarity});
        }
        cases[i] = std::move(result);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  const std::size_t threads =
      std::min<std::size_t>(static_cast<std::size_t>(config.parallelism), test_records.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  std::sort(cases.begin(), cases.end(),
            [](const CaseResult& a, const CaseResult& b) { return a.slice_id < b.slice_id; });

  ConfusionCounts counts;
  long long unparseable = 0;
  for (const auto& c : cases) tally(counts, unparseable, c.truth, c.predicted);

  EvalResult result;
  result.report = metrics(counts);
  result.report.unparseable = unparseable;
  result.cases = std::move(cases);
  if (options.per_patient) {
    result.per_patient_report = per_patient_metrics(result.cases, unparseable);
  }
  return result;
}

std::vector<RunRow> k_sweep(const std::vector<int>& ks, const PipelineConfig& config,
                            const std::vector<SliceRecord>& test_records,
                            const CosineIndex& index, const EmbeddingHead& head,
                            const FeatureSet& features, const std::vector<CorpusEntry>& corpus) {
  if (ks.empty()) fail(ErrorCode::ConfigError, "k_sweep needs at least one k");
  for (int k : ks) {
    if (k < 1) fail(ErrorCode::ConfigError, "k values must be >= 1");
  }
  std::vector<RunRow> rows;
  rows.reserve(ks.size());
  for (int k : ks) {
    PipelineConfig run = config;
    run.k = k;
    const EvalResult result = evaluate(test_records, run, index, head, features, corpus);
    rows.push_back({run.use_retriever, run.use_typical_features, k, result.report});
  }
  return rows;
}

std::vector<RunRow> ablation_grid(const PipelineConfig& config,
                                  const std::vector<SliceRecord>& test_records,
                                  const CosineIndex& index, const EmbeddingHead& head,
                                  const FeatureSet& features,
                                  const std::vector<CorpusEntry>& corpus) {
  static constexpr std::pair<bool, bool> kRows[] = {
      {false, false}, {true, false}, {false, true}, {true, true}};
  std::vector<RunRow> rows;
  rows.reserve(4);
  for (const auto& [retriever, typical] : kRows) {
    PipelineConfig run = config;
    run.use_retriever = retriever;
    run.use_typical_features = typical;
    const EvalResult result = evaluate(test_records, run, index, head, features, corpus);
    rows.push_back({retriever, typical, run.k, result.report});
  }
  return rows;
}

namespace {

std::string degenerate_list(const MetricsReport& r) {
  std::string out;
  const auto append = [&](bool flag, const char* name) {
    if (!flag) return;
    if (!out.empty()) out += ';';
    out += name;
  };
  append(r.precision_degenerate, "precision");
  append(r.recall_degenerate, "recall");
  append(r.f1_degenerate, "f1");
  append(r.specificity_degenerate, "specificity");
  return out;
}

std::string fixed4(double value) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.4f", value);
  return buffer;
}

}  // namespace

void write_report_csv(const std::filesystem::path& path, const std::vector<RunRow>& rows) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out << "use_retriever,use_typical_features,k,accuracy,precision,recall,f1,specificity,"
         "tp,fp,fn,tn,unparseable,degenerate\n";
  for (const auto& row : rows) {
    const MetricsReport& r = row.report;
    out << (row.use_retriever ? 1 : 0) << ',' << (row.use_typical_features ? 1 : 0) << ','
        << row.k << ',' << fixed4(r.accuracy) << ',' << fixed4(r.precision) << ','
        << fixed4(r.recall) << ',' << fixed4(r.f1) << ',' << fixed4(r.specificity) << ','
        << r.counts.tp << ',' << r.counts.fp << ',' << r.counts.fn << ',' << r.counts.tn << ','
        << r.unparseable << ',' << degenerate_list(r) << '\n';
  }
  if (!out) fail(ErrorCode::IoError, "failed writing " + path.string());
}

void write_cases_jsonl(const std::filesystem::path& path, const std::vector<CaseResult>& cases) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  for (const auto& c : cases) {
    nlohmann::ordered_json j;
    j["slice_id"] = c.slice_id;
    j["patient_id"] = c.patient_id;
    j["truth"] = to_string(c.truth);
    if (c.predicted.has_value()) {
      j["predicted"] = to_string(*c.predicted);
    } else {
      j["predicted"] = nullptr;
    }
    j["unparseable"] = !c.predicted.has_value();
    auto evidence = nlohmann::ordered_json::array();
    for (const auto& e : c.evidence) {
      evidence.push_back({{"slice_id", e.slice_id}, {"similarity", e.similarity}});
    }
    j["evidence"] = std::move(evidence);
    j["raw_output"] = c.raw_output;
    out << j.dump() << '\n';
  }
  if (!out) fail(ErrorCode::IoError, "failed writing " + path.string());
}

}  // namespace bhdrag
