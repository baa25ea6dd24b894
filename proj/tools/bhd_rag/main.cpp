// bhd-rag: command line front end for the BHD retrieval-augmented
// diagnosis pipeline. Exit codes: 0 success, 1 domain error (structured
// JSON on stderr), 2 usage error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bhdrag/corpus.hpp"
#include "bhdrag/error.hpp"
#include "bhdrag/eval.hpp"
#include "bhdrag/featurizer.hpp"
#include "bhdrag/generator.hpp"
#include "bhdrag/image.hpp"
#include "bhdrag/index.hpp"
#include "bhdrag/orchestrator.hpp"
#include "bhdrag/retriever.hpp"
#include "bhdrag/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) bhdrag::fail(bhdrag::ErrorCode::IoError, "cannot open " + path.string());
  out << text;
  if (!out) bhdrag::fail(bhdrag::ErrorCode::IoError, "failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) bhdrag::fail(bhdrag::ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

struct BackendOptions {
  std::string backend = "mock";
  std::string endpoint;
  std::string model;
  double timeout_seconds = 120.0;
  int max_retries = 2;
  int backoff_ms = 500;
  double backoff_factor = 2.0;
};

void add_backend_options(CLI::App* cmd, BackendOptions& o) {
  cmd->add_option("--backend", o.backend, "Generator backend: mock or http")
      ->check(CLI::IsMember({"mock", "http"}))
      ->capture_default_str();
  cmd->add_option("--endpoint", o.endpoint, "Chat-completion endpoint, e.g. http://host:8080/v1");
  cmd->add_option("--model", o.model, "Model name for the http backend");
  cmd->add_option("--timeout", o.timeout_seconds, "HTTP timeout in seconds")
      ->capture_default_str();
  cmd->add_option("--max-retries", o.max_retries, "Retries after the first attempt")
      ->capture_default_str();
  cmd->add_option("--backoff-ms", o.backoff_ms, "Initial retry backoff in milliseconds")
      ->capture_default_str();
  cmd->add_option("--backoff-factor", o.backoff_factor, "Backoff multiplier per retry")
      ->capture_default_str();
}

bhdrag::GeneratorBackend make_backend(const BackendOptions& o) {
  if (o.backend == "mock") return bhdrag::GeneratorBackend::mock();
  bhdrag::HttpBackendConfig config;
  config.endpoint = o.endpoint;
  config.model = o.model;
  config.timeout_seconds = o.timeout_seconds;
  config.max_retries = o.max_retries;
  config.backoff_initial_ms = o.backoff_ms;
  config.backoff_factor = o.backoff_factor;
  bhdrag::GeneratorBackend backend = bhdrag::GeneratorBackend::remote(config);
  backend.validate();
  return backend;
}

struct PipelineOptions {
  int k = 12;
  bool no_retriever = false;
  bool no_typical_features = false;
  bool same_view_only = false;
  bool zero_evidence = false;
  std::uint64_t seed = 0;
  std::string instruction_file;
  std::string require_images = "auto";
  int parallelism = 4;
};

void add_pipeline_options(CLI::App* cmd, PipelineOptions& o) {
  cmd->add_option("--k", o.k, "Number of retrieved evidence pairs")->capture_default_str();
  cmd->add_flag("--no-retriever", o.no_retriever,
                "Replace top-k retrieval with a seeded random sample");
  cmd->add_flag("--no-typical-features", o.no_typical_features,
                "Drop the expert knowledge section from prompts");
  cmd->add_flag("--same-view-only", o.same_view_only,
                "Restrict retrieval to the query's view plane");
  cmd->add_flag("--zero-evidence", o.zero_evidence,
                "With --no-retriever: send no evidence instead of a random sample");
  cmd->add_option("--seed", o.seed, "Seed for all randomized steps")->capture_default_str();
  cmd->add_option("--instruction-file", o.instruction_file,
                  "File with the generator instruction (default built in)");
  cmd->add_option("--require-images", o.require_images,
                  "Verify image files exist: auto, yes, or no")
      ->check(CLI::IsMember({"auto", "yes", "no"}))
      ->capture_default_str();
  cmd->add_option("--parallelism", o.parallelism, "Concurrent diagnoses during evaluation")
      ->capture_default_str();
}

bhdrag::PipelineConfig make_pipeline_config(const PipelineOptions& o, const BackendOptions& b,
                                            const fs::path& image_root) {
  bhdrag::PipelineConfig config;
  config.k = o.k;
  config.use_retriever = !o.no_retriever;
  config.use_typical_features = !o.no_typical_features;
  config.same_view_only = o.same_view_only;
  config.zero_evidence = o.zero_evidence;
  config.backend = make_backend(b);
  config.seed = o.seed;
  if (!o.instruction_file.empty()) config.instruction = read_text(o.instruction_file);
  config.image_root = image_root;
  if (o.require_images == "yes") config.require_images = true;
  if (o.require_images == "no") config.require_images = false;
  config.parallelism = o.parallelism;
  config.validate();
  return config;
}

/// Echoes the parsed configuration and a run manifest into the output
/// directory so every run is reproducible from its artifacts.
void write_run_files(const fs::path& out_dir, const CLI::App& app, ordered_json run_manifest) {
  fs::create_directories(out_dir);
  write_text(out_dir / "effective_config.toml", app.config_to_str(true, false));
  write_text(out_dir / "run_manifest.json", run_manifest.dump(2) + "\n");
}

std::vector<bhdrag::SliceRecord> test_records_of(const std::vector<bhdrag::CorpusEntry>& manifest) {
  std::vector<bhdrag::SliceRecord> records;
  for (const auto& entry : manifest) {
    if (entry.slice.split == bhdrag::Split::Test) records.push_back(entry.slice);
  }
  return records;
}

void print_report(const bhdrag::MetricsReport& r) {
  std::printf("accuracy %.4f  precision %.4f  recall %.4f  f1 %.4f  specificity %.4f\n",
              r.accuracy, r.precision, r.recall, r.f1, r.specificity);
  std::printf("counts tp %lld fp %lld fn %lld tn %lld  unparseable %lld\n", r.counts.tp,
              r.counts.fp, r.counts.fn, r.counts.tn, r.unparseable);
}

// ---------------------------------------------------------------- corpus-build

struct CorpusBuildArgs {
  std::string volumes_dir;
  std::string out_dir = "runs/corpus";
  int min_gap = 2;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
  bool no_stratify = false;
  bool no_describe = false;
  std::string prompt_file;
  BackendOptions backend;
};

int run_corpus_build(const CLI::App& app, const CorpusBuildArgs& args) {
  const fs::path out(args.out_dir);
  fs::create_directories(out / "images");

  std::vector<fs::path> headers;
  for (const auto& entry : fs::directory_iterator(args.volumes_dir)) {
    if (entry.path().extension() == ".json") headers.push_back(entry.path());
  }
  std::sort(headers.begin(), headers.end());
  if (headers.empty()) {
    bhdrag::fail(bhdrag::ErrorCode::ConfigError,
                 "no volume headers (*.json) under " + args.volumes_dir);
  }

  std::vector<bhdrag::SliceRecord> records;
  bhdrag::FeatureSet features;
  std::vector<std::pair<std::string, bhdrag::ClassLabel>> patients;

  for (const auto& header : headers) {
    const bhdrag::Volume3D volume = bhdrag::load_volume(header);
    patients.emplace_back(volume.patient_id, volume.class_label);
    const bhdrag::ViewPlane views[] = {bhdrag::ViewPlane::Transverse, bhdrag::ViewPlane::Coronal,
                                       bhdrag::ViewPlane::Sagittal};
    const int extents[] = {volume.depth, volume.height, volume.width};
    for (int v = 0; v < 3; ++v) {
      std::vector<int> frames(static_cast<std::size_t>(extents[v]));
      for (int i = 0; i < extents[v]; ++i) frames[static_cast<std::size_t>(i)] = i;
      for (int frame : bhdrag::select_key_slices(frames, args.min_gap)) {
        const bhdrag::HuImage slice = bhdrag::extract_slice(volume, views[v], frame);
        const std::string slice_id = bhdrag::make_slice_id(volume.patient_id, views[v], frame);
        const std::string ref = "images/" + slice_id + ".png";
        bhdrag::write_hu_png(out / ref, slice);

        bhdrag::SliceRecord record;
        record.slice_id = slice_id;
        record.patient_id = volume.patient_id;
        record.class_label = volume.class_label;
        record.view = views[v];
        record.frame_index = static_cast<std::uint32_t>(frame);
        record.image_ref = ref;
        record.split = bhdrag::Split::Train;
        records.push_back(record);

        const bhdrag::NormalizedImage windowed = bhdrag::lung_window(slice);
        features.add(slice_id, bhdrag::baseline_features(bhdrag::resize_bilinear(windowed)));
      }
    }
  }

  std::vector<std::string> patient_ids;
  for (const auto& [id, label] : patients) patient_ids.push_back(id);
  const bhdrag::SplitResult split =
      args.no_stratify
          ? bhdrag::split_patients(patient_ids, args.test_fraction, args.seed)
          : bhdrag::split_patients_stratified(patients, args.test_fraction, args.seed);
  bhdrag::assign_splits(records, split);

  const std::string prompt = args.prompt_file.empty() ? bhdrag::default_description_prompt()
                                                      : read_text(args.prompt_file);
  const bhdrag::GeneratorBackend backend = make_backend(args.backend);

  std::vector<bhdrag::CorpusEntry> entries;
  entries.reserve(records.size());
  for (const auto& record : records) {
    if (args.no_describe) {
      entries.push_back({record, "", bhdrag::Provenance::Generated});
    } else {
      entries.push_back(bhdrag::draft_description(record, backend, prompt, out));
    }
  }
  bhdrag::check_patient_leakage(entries);
  bhdrag::save_manifest(out / "manifest.jsonl", entries);
  bhdrag::save_features(out / "features.bhdf", features);

  write_run_files(out, app,
                  ordered_json{{"subcommand", "corpus-build"},
                               {"volumes", args.volumes_dir},
                               {"patients", patients.size()},
                               {"slices", records.size()},
                               {"train_patients", split.train.size()},
                               {"test_patients", split.test.size()},
                               {"outputs", {"manifest.jsonl", "features.bhdf", "images/"}}});
  std::printf("corpus: %zu patients, %zu slices (%zu train / %zu test patients)\n",
              patients.size(), records.size(), split.train.size(), split.test.size());
  std::printf("wrote %s\n", (out / "manifest.jsonl").string().c_str());
  return 0;
}

// -------------------------------------------------------------------- describe

struct DescribeArgs {
  std::string manifest;
  std::string out_dir = "runs/describe";
  std::string edits_file;
  std::string prompt_file;
  std::string image_root;
  bool only_missing = false;
  BackendOptions backend;
};

int run_describe(const CLI::App& app, const DescribeArgs& args) {
  std::vector<bhdrag::CorpusEntry> manifest = bhdrag::load_manifest(args.manifest);
  const fs::path image_root =
      args.image_root.empty() ? fs::path(args.manifest).parent_path() : fs::path(args.image_root);

  std::string mode;
  if (!args.edits_file.empty()) {
    mode = "refine";
    const auto doc = nlohmann::json::parse(read_text(args.edits_file), nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
      bhdrag::fail(bhdrag::ErrorCode::FormatError,
                   "edits file must be a JSON object of slice_id -> text");
    }
    std::map<std::string, std::string> edits;
    for (const auto& [key, value] : doc.items()) {
      if (!value.is_string()) {
        bhdrag::fail(bhdrag::ErrorCode::FormatError, "edit for '" + key + "' is not a string");
      }
      edits[key] = value.get<std::string>();
    }
    manifest = bhdrag::apply_refinements(manifest, edits);
  } else {
    mode = "draft";
    const std::string prompt = args.prompt_file.empty() ? bhdrag::default_description_prompt()
                                                        : read_text(args.prompt_file);
    const bhdrag::GeneratorBackend backend = make_backend(args.backend);
    for (auto& entry : manifest) {
      if (args.only_missing && !entry.description.empty()) continue;
      entry = bhdrag::draft_description(entry.slice, backend, prompt, image_root);
    }
  }

  const fs::path out(args.out_dir);
  fs::create_directories(out);
  bhdrag::save_manifest(out / "manifest.jsonl", manifest);
  write_run_files(out, app,
                  ordered_json{{"subcommand", "describe"},
                               {"manifest", args.manifest},
                               {"mode", mode},
                               {"entries", manifest.size()},
                               {"outputs", {"manifest.jsonl"}}});
  std::printf("wrote %s (%zu entries, mode %s)\n", (out / "manifest.jsonl").string().c_str(),
              manifest.size(), mode.c_str());
  return 0;
}

// ----------------------------------------------------------------------- train

struct TrainArgs {
  std::string manifest;
  std::string features;
  std::string out_dir = "runs/train";
  bhdrag::CosFaceConfig config;
};

int run_train(const CLI::App& app, const TrainArgs& args) {
  const std::vector<bhdrag::CorpusEntry> manifest = bhdrag::load_manifest(args.manifest);
  std::vector<bhdrag::SliceRecord> train_records;
  for (const auto& entry : manifest) {
    if (entry.slice.split == bhdrag::Split::Train) train_records.push_back(entry.slice);
  }
  const bhdrag::FeatureSet features = bhdrag::load_features(args.features);

  const bhdrag::TrainResult result = bhdrag::train(train_records, features, args.config);

  const fs::path out(args.out_dir);
  fs::create_directories(out);
  bhdrag::save_head(out / "head.bhdh", result.head);
  std::ostringstream loss_csv;
  loss_csv << "epoch,mean_loss\n";
  for (std::size_t i = 0; i < result.epoch_loss.size(); ++i) {
    char line[64];
    std::snprintf(line, sizeof(line), "%zu,%.17g\n", i, result.epoch_loss[i]);
    loss_csv << line;
  }
  write_text(out / "loss.csv", loss_csv.str());

  write_run_files(out, app,
                  ordered_json{{"subcommand", "train"},
                               {"manifest", args.manifest},
                               {"features", args.features},
                               {"train_records", train_records.size()},
                               {"epochs", args.config.epochs},
                               {"outputs", {"head.bhdh", "loss.csv"}}});
  if (!result.epoch_loss.empty()) {
    std::printf("trained %d epochs: first loss %.6f, final loss %.6f\n", args.config.epochs,
                result.epoch_loss.front(), result.epoch_loss.back());
  }
  std::printf("wrote %s\n", (out / "head.bhdh").string().c_str());
  return 0;
}

// ----------------------------------------------------------------------- index

struct IndexArgs {
  std::string manifest;
  std::string features;
  std::string head;
  std::string out_dir = "runs/index";
};

int run_index(const CLI::App& app, const IndexArgs& args) {
  const std::vector<bhdrag::CorpusEntry> manifest = bhdrag::load_manifest(args.manifest);
  const std::vector<bhdrag::CorpusEntry> corpus = bhdrag::select_corpus_entries(manifest);
  const bhdrag::FeatureSet features = bhdrag::load_features(args.features);
  const bhdrag::EmbeddingHead head = bhdrag::load_head(args.head);

  const bhdrag::CosineIndex index = bhdrag::build_index(corpus, features, head);
  const fs::path out(args.out_dir);
  fs::create_directories(out);
  bhdrag::save_index(out / "index.bhdx", index);

  write_run_files(out, app,
                  ordered_json{{"subcommand", "index"},
                               {"manifest", args.manifest},
                               {"features", args.features},
                               {"head", args.head},
                               {"entries", index.count()},
                               {"embed_dim", index.embed_dim()},
                               {"outputs", {"index.bhdx"}}});
  std::printf("indexed %zu corpus entries (embed dim %d)\n", index.count(), index.embed_dim());
  std::printf("wrote %s\n", (out / "index.bhdx").string().c_str());
  return 0;
}

// ----------------------------------------------------------------------- query

struct QueryArgs {
  std::string image;
  std::string manifest;
  std::string index;
  std::string head;
  std::string out_dir = "runs/query";
  std::string view = "transverse";
  std::string image_root;
  PipelineOptions pipeline;
  BackendOptions backend;
};

int run_query(const CLI::App& app, const QueryArgs& args) {
  const std::vector<bhdrag::CorpusEntry> manifest = bhdrag::load_manifest(args.manifest);
  const std::vector<bhdrag::CorpusEntry> corpus = bhdrag::select_corpus_entries(manifest);
  const bhdrag::CosineIndex index = bhdrag::load_index(args.index);
  const bhdrag::EmbeddingHead head = bhdrag::load_head(args.head);
  const fs::path image_root =
      args.image_root.empty() ? fs::path(args.manifest).parent_path() : fs::path(args.image_root);

  const bhdrag::HuImage hu = bhdrag::read_hu_png(args.image);
  const bhdrag::NormalizedImage windowed = bhdrag::lung_window(hu);
  bhdrag::FeatureVector fv = bhdrag::baseline_features(bhdrag::resize_bilinear(windowed));

  bhdrag::SliceRecord query;
  query.slice_id = "query:" + fs::path(args.image).stem().string();
  query.patient_id = "query";
  query.class_label = bhdrag::ClassLabel::BHD;  // placeholder, never read
  query.view = bhdrag::parse_view_plane(args.view);
  query.frame_index = 0;
  query.image_ref = fs::absolute(args.image).string();
  query.split = bhdrag::Split::Test;

  bhdrag::FeatureSet features;
  features.add(query.slice_id, std::move(fv));

  const bhdrag::PipelineConfig config =
      make_pipeline_config(args.pipeline, args.backend, image_root);
  const bhdrag::DiagnosisResponse response =
      bhdrag::diagnose(query, config, index, head, features, corpus);

  const std::vector<bhdrag::EvidenceItem> evidence =
      bhdrag::select_evidence(query, config, index, head, features, corpus);
  const bhdrag::ExpertKnowledge expert =
      config.use_typical_features ? bhdrag::default_expert_knowledge() : bhdrag::ExpertKnowledge{};
  const std::string& instruction =
      config.instruction.empty() ? bhdrag::default_instruction() : config.instruction;
  const bhdrag::PromptBundle bundle = bhdrag::assemble_prompt(
      query, evidence, expert, instruction, config.k, config.image_root, false);

  const fs::path out(args.out_dir);
  fs::create_directories(out);
  write_text(out / "bundle.json", bhdrag::serialize_bundle(bundle) + "\n");
  ordered_json response_json{
      {"label", response.label ? to_string(*response.label) : "unparseable"},
      {"evidence_ids", response.evidence_ids},
      {"raw_output", response.raw_output}};
  write_text(out / "response.json", response_json.dump(2) + "\n");
  write_run_files(out, app,
                  ordered_json{{"subcommand", "query"},
                               {"image", args.image},
                               {"index", args.index},
                               {"head", args.head},
                               {"outputs", {"bundle.json", "response.json"}}});

  std::printf("label: %s\n", response.label ? to_string(*response.label) : "UNPARSEABLE");
  std::printf("%-5s %-24s %-6s %s\n", "rank", "slice_id", "class", "similarity");
  int rank = 1;
  for (const auto& item : evidence) {
    std::printf("%-5d %-24s %-6s %+.6f\n", rank++, item.entry.slice.slice_id.c_str(),
                to_string(item.entry.slice.class_label), item.similarity);
  }
  return 0;
}

// ---------------------------------------------------------- eval / sweep / ablate

struct EvalArgs {
  std::string manifest;
  std::string features;
  std::string index;
  std::string head;
  std::string out_dir = "runs/eval";
  std::string image_root;
  bool per_patient = false;
  std::vector<int> ks;  // sweep only
  PipelineOptions pipeline;
  BackendOptions backend;
};

struct EvalData {
  std::vector<bhdrag::CorpusEntry> manifest;
  std::vector<bhdrag::CorpusEntry> corpus;
  std::vector<bhdrag::SliceRecord> test_records;
  bhdrag::FeatureSet features;
  bhdrag::CosineIndex index;
  bhdrag::EmbeddingHead head;
  bhdrag::PipelineConfig config;
};

EvalData load_eval_data(const EvalArgs& args) {
  EvalData data;
  data.manifest = bhdrag::load_manifest(args.manifest);
  data.corpus = bhdrag::select_corpus_entries(data.manifest);
  data.test_records = test_records_of(data.manifest);
  data.features = bhdrag::load_features(args.features);
  data.index = bhdrag::load_index(args.index);
  data.head = bhdrag::load_head(args.head);
  const fs::path image_root =
      args.image_root.empty() ? fs::path(args.manifest).parent_path() : fs::path(args.image_root);
  data.config = make_pipeline_config(args.pipeline, args.backend, image_root);
  return data;
}

ordered_json eval_run_manifest(const char* subcommand, const EvalArgs& args,
                               const EvalData& data) {
  return ordered_json{
      {"subcommand", subcommand},
      {"manifest", args.manifest},
      {"features", args.features},
      {"index", args.index},
      {"head", args.head},
      {"test_cases", data.test_records.size()},
      {"no_retriever_mode", args.pipeline.zero_evidence ? "zero_evidence" : "random_k"},
      {"outputs", {"report.csv", "cases.jsonl"}}};
}

int run_eval(const CLI::App& app, const EvalArgs& args) {
  EvalData data = load_eval_data(args);
  bhdrag::EvalOptions options;
  options.per_patient = args.per_patient;
  const bhdrag::EvalResult result = bhdrag::evaluate(data.test_records, data.config, data.index,
                                                     data.head, data.features, data.corpus,
                                                     options);

  const fs::path out(args.out_dir);
  fs::create_directories(out);
  const std::vector<bhdrag::RunRow> rows = {{data.config.use_retriever,
                                             data.config.use_typical_features, data.config.k,
                                             result.report}};
  bhdrag::write_report_csv(out / "report.csv", rows);
  bhdrag::write_cases_jsonl(out / "cases.jsonl", result.cases);
  if (result.per_patient_report) {
    bhdrag::write_report_csv(
        out / "report_per_patient.csv",
        {{data.config.use_retriever, data.config.use_typical_features, data.config.k,
          *result.per_patient_report}});
  }
  write_run_files(out, app, eval_run_manifest("eval", args, data));

  std::printf("evaluated %zu cases\n", result.cases.size());
  print_report(result.report);
  if (result.per_patient_report) {
    std::printf("per-patient aggregation:\n");
    print_report(*result.per_patient_report);
  }
  return 0;
}

int run_sweep(const CLI::App& app, const EvalArgs& args) {
  EvalData data = load_eval_data(args);
  const std::vector<int> ks = args.ks.empty() ? std::vector<int>{1, 2, 4, 8, 12, 16} : args.ks;
  const std::vector<bhdrag::RunRow> rows =
      bhdrag::k_sweep(ks, data.config, data.test_records, data.index, data.head, data.features,
                      data.corpus);

  const fs::path out(args.out_dir);
  fs::create_directories(out);
  bhdrag::write_report_csv(out / "report.csv", rows);
  ordered_json manifest = eval_run_manifest("sweep", args, data);
  manifest["ks"] = ks;
  manifest["outputs"] = {"report.csv"};
  write_run_files(out, app, manifest);

  for (const auto& row : rows) {
    std::printf("k=%-3d ", row.k);
    print_report(row.report);
  }
  return 0;
}

int run_ablate(const CLI::App& app, const EvalArgs& args) {
  EvalData data = load_eval_data(args);
  const std::vector<bhdrag::RunRow> rows = bhdrag::ablation_grid(
      data.config, data.test_records, data.index, data.head, data.features, data.corpus);

  const fs::path out(args.out_dir);
  fs::create_directories(out);
  bhdrag::write_report_csv(out / "report.csv", rows);
  ordered_json manifest = eval_run_manifest("ablate", args, data);
  manifest["outputs"] = {"report.csv"};
  write_run_files(out, app, manifest);

  for (const auto& row : rows) {
    std::printf("retriever=%d typical=%d ", row.use_retriever ? 1 : 0,
                row.use_typical_features ? 1 : 0);
    print_report(row.report);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BHD retrieval-augmented diagnosis pipeline"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read options from a TOML config file");

  CorpusBuildArgs corpus_args;
  auto* corpus_cmd = app.add_subcommand(
      "corpus-build", "Slice CT volumes into a manifest, images, and features");
  corpus_cmd->add_option("--volumes", corpus_args.volumes_dir, "Directory of volume headers")
      ->required();
  corpus_cmd->add_option("--out", corpus_args.out_dir, "Output directory")
      ->capture_default_str();
  corpus_cmd->add_option("--min-gap", corpus_args.min_gap, "Minimum frame gap between key slices")
      ->capture_default_str();
  corpus_cmd
      ->add_option("--test-fraction", corpus_args.test_fraction, "Patient fraction held out")
      ->capture_default_str();
  corpus_cmd->add_option("--seed", corpus_args.seed, "Split seed")->capture_default_str();
  corpus_cmd->add_flag("--no-stratify", corpus_args.no_stratify,
                       "Split patients without class stratification");
  corpus_cmd->add_flag("--no-describe", corpus_args.no_describe,
                       "Skip drafting slice descriptions");
  corpus_cmd->add_option("--prompt-file", corpus_args.prompt_file,
                         "Description prompt template file");
  add_backend_options(corpus_cmd, corpus_args.backend);

  DescribeArgs describe_args;
  auto* describe_cmd =
      app.add_subcommand("describe", "Draft or refine slice descriptions in a manifest");
  describe_cmd->add_option("--manifest", describe_args.manifest, "Manifest to revise")
      ->required();
  describe_cmd->add_option("--out", describe_args.out_dir, "Output directory")
      ->capture_default_str();
  describe_cmd->add_option("--edits", describe_args.edits_file,
                           "JSON object of slice_id -> replacement text");
  describe_cmd->add_option("--prompt-file", describe_args.prompt_file,
                           "Description prompt template file");
  describe_cmd->add_option("--image-root", describe_args.image_root,
                           "Base directory for image refs (default: manifest directory)");
  describe_cmd->add_flag("--only-missing", describe_args.only_missing,
                         "Draft only entries with empty descriptions");
  add_backend_options(describe_cmd, describe_args.backend);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train the embedding head with CosFace");
  train_cmd->add_option("--manifest", train_args.manifest, "Corpus manifest")->required();
  train_cmd->add_option("--features", train_args.features, "Feature file (BHDF)")->required();
  train_cmd->add_option("--out", train_args.out_dir, "Output directory")->capture_default_str();
  train_cmd->add_option("--epochs", train_args.config.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", train_args.config.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", train_args.config.learning_rate)->capture_default_str();
  train_cmd->add_option("--weight-decay", train_args.config.weight_decay)->capture_default_str();
  train_cmd->add_option("--scale", train_args.config.scale)->capture_default_str();
  train_cmd->add_option("--margin", train_args.config.margin)->capture_default_str();
  train_cmd->add_option("--embed-dim", train_args.config.embed_dim)->capture_default_str();
  train_cmd->add_option("--seed", train_args.config.seed)->capture_default_str();

  IndexArgs index_args;
  auto* index_cmd = app.add_subcommand("index", "Embed the corpus into a search index");
  index_cmd->add_option("--manifest", index_args.manifest, "Corpus manifest")->required();
  index_cmd->add_option("--features", index_args.features, "Feature file (BHDF)")->required();
  index_cmd->add_option("--head", index_args.head, "Head checkpoint (BHDH)")->required();
  index_cmd->add_option("--out", index_args.out_dir, "Output directory")->capture_default_str();

  QueryArgs query_args;
  auto* query_cmd = app.add_subcommand("query", "Diagnose one CT slice image");
  query_cmd->add_option("--image", query_args.image, "Query image (16-bit grayscale PNG)")
      ->required();
  query_cmd->add_option("--manifest", query_args.manifest, "Corpus manifest")->required();
  query_cmd->add_option("--index", query_args.index, "Index file (BHDX)")->required();
  query_cmd->add_option("--head", query_args.head, "Head checkpoint (BHDH)")->required();
  query_cmd->add_option("--out", query_args.out_dir, "Output directory")->capture_default_str();
  query_cmd->add_option("--view", query_args.view, "Query view plane")
      ->check(CLI::IsMember({"transverse", "sagittal", "coronal"}))
      ->capture_default_str();
  query_cmd->add_option("--image-root", query_args.image_root,
                        "Base directory for evidence image refs");
  add_pipeline_options(query_cmd, query_args.pipeline);
  add_backend_options(query_cmd, query_args.backend);

  EvalArgs eval_args;
  EvalArgs sweep_args;
  sweep_args.out_dir = "runs/sweep";
  EvalArgs ablate_args;
  ablate_args.out_dir = "runs/ablate";
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate the pipeline on the test split");
  auto* sweep_cmd = app.add_subcommand("sweep", "Evaluate across a list of k values");
  auto* ablate_cmd =
      app.add_subcommand("ablate", "Run the 2x2 retriever x typical-features grid");
  const auto add_eval_options = [](CLI::App* cmd, EvalArgs& args) {
    cmd->add_option("--manifest", args.manifest, "Corpus manifest")->required();
    cmd->add_option("--features", args.features, "Feature file (BHDF)")->required();
    cmd->add_option("--index", args.index, "Index file (BHDX)")->required();
    cmd->add_option("--head", args.head, "Head checkpoint (BHDH)")->required();
    cmd->add_option("--out", args.out_dir, "Output directory")->capture_default_str();
    cmd->add_option("--image-root", args.image_root,
                    "Base directory for image refs (default: manifest directory)");
    add_pipeline_options(cmd, args.pipeline);
    add_backend_options(cmd, args.backend);
  };
  add_eval_options(eval_cmd, eval_args);
  add_eval_options(sweep_cmd, sweep_args);
  add_eval_options(ablate_cmd, ablate_args);
  eval_cmd->add_flag("--per-patient", eval_args.per_patient,
                     "Also report per-patient majority aggregation");
  sweep_cmd->add_option("--ks", sweep_args.ks, "Comma-separated k values")
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (corpus_cmd->parsed()) return run_corpus_build(app, corpus_args);
    if (describe_cmd->parsed()) return run_describe(app, describe_args);
    if (train_cmd->parsed()) return run_train(app, train_args);
    if (index_cmd->parsed()) return run_index(app, index_args);
    if (query_cmd->parsed()) return run_query(app, query_args);
    if (eval_cmd->parsed()) return run_eval(app, eval_args);
    if (sweep_cmd->parsed()) return run_sweep(app, sweep_args);
    if (ablate_cmd->parsed()) return run_ablate(app, ablate_args);
  } catch (const bhdrag::Error& e) {
    ordered_json err{{"error", to_string(e.code())}, {"message", e.message()}};
    if (!e.stage().empty()) err["stage"] = e.stage();
    if (e.status() != 0) err["status"] = e.status();
    if (e.line() >= 0) err["line"] = e.line();
    std::cerr << err.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << ordered_json{{"error", "Unhandled"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 2;
}
