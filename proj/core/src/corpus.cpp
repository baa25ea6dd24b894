#include "bhdrag/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "bhdrag/error.hpp"
#include "bhdrag/rng.hpp"

namespace bhdrag {

std::vector<int> select_key_slices(const std::vector<int>& frame_indices, int min_gap) {
  if (min_gap < 1) fail(ErrorCode::ConfigError, "min_gap must be >= 1");
  for (std::size_t i = 1; i < frame_indices.size(); ++i) {
    if (frame_indices[i] <= frame_indices[i - 1]) {
      fail(ErrorCode::ConfigError, "frame indices must be strictly ascending");
    }
  }

  std::vector<int> kept;
  for (int frame : frame_indices) {
    if (kept.empty() || frame - kept.back() >= min_gap) kept.push_back(frame);
  }
  return kept;
}

namespace {

SplitResult split_groups(const std::vector<std::vector<std::string>>& groups,
                         const std::vector<std::size_t>& test_quota, std::uint64_t seed) {
  SplitResult result;
  Rng rng(seed);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    std::vector<std::string> ids = groups[g];
    rng.shuffle(ids);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      (i < test_quota[g] ? result.test : result.train).push_back(std::move(ids[i]));
    }
  }
  std::sort(result.train.begin(), result.train.end());
  std::sort(result.test.begin(), result.test.end());
  return result;
}

void check_split_inputs(std::size_t count, double test_fraction) {
  if (count < 2) fail(ErrorCode::SplitInfeasible, "need at least 2 patients to split");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    fail(ErrorCode::ConfigError, "test_fraction must be in (0, 1)");
  }
}

}  // namespace

SplitResult split_patients(const std::vector<std::string>& patient_ids,
                           double test_fraction, std::uint64_t seed) {
  check_split_inputs(patient_ids.size(), test_fraction);
  std::set<std::string> unique(patient_ids.begin(), patient_ids.end());
  if (unique.size() != patient_ids.size()) {
    fail(ErrorCode::ConfigError, "patient ids must be unique");
  }

  const auto test_count = static_cast<std::size_t>(
      std::llround(test_fraction * static_cast<double>(patient_ids.size())));
  return split_groups({patient_ids}, {test_count}, seed);
}

SplitResult split_patients_stratified(
    const std::vector<std::pair<std::string, ClassLabel>>& patients,
    double test_fraction, std::uint64_t seed) {
  check_split_inputs(patients.size(), test_fraction);

  // Group by class, iterating classes in name order for determinism.
  std::map<std::string, std::vector<std::string>> by_class;
  std::set<std::string> unique;
  for (const auto& [id, label] : patients) {
    if (!unique.insert(id).second) fail(ErrorCode::ConfigError, "patient ids must be unique");
    by_class[to_string(label)].push_back(id);
  }

  const auto total_test = static_cast<std::size_t>(
      std::llround(test_fraction * static_cast<double>(patients.size())));

  // Largest-remainder apportionment of the overall test count.
  std::vector<std::vector<std::string>> groups;
  std::vector<std::size_t> quota;
  std::vector<std::pair<double, std::size_t>> remainders;  // (remainder, group idx)
  std::size_t assigned = 0;
  for (auto& [name, ids] : by_class) {
    const double exact = test_fraction * static_cast<double>(ids.size());
    const auto floor_quota = static_cast<std::size_t>(std::floor(exact));
    remainders.emplace_back(exact - std::floor(exact), groups.size());
    groups.push_back(std::move(ids));
    quota.push_back(floor_quota);
    assigned += floor_quota;
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total_test && i < remainders.size(); ++i) {
    const std::size_t g = remainders[i].second;
    if (quota[g] < groups[g].size()) {
      ++quota[g];
      ++assigned;
    }
  }
  return split_groups(groups, quota, seed);
}

void assign_splits(std::vector<SliceRecord>& records, const SplitResult& split) {
  std::unordered_map<std::string, Split> by_patient;
  for (const auto& id : split.train) by_patient[id] = Split::Train;
  for (const auto& id : split.test) {
    if (by_patient.count(id)) fail(ErrorCode::LeakageError, "patient '" + id + "' in both splits");
    by_patient[id] = Split::Test;
  }
  for (auto& record : records) {
    const auto it = by_patient.find(record.patient_id);
    if (it == by_patient.end()) {
      fail(ErrorCode::ConfigError, "patient '" + record.patient_id + "' missing from split");
    }
    record.split = it->second;
  }
}

void check_patient_leakage(const std::vector<CorpusEntry>& manifest) {
  std::unordered_map<std::string, Split> seen;
  for (const auto& entry : manifest) {
    const auto [it, inserted] = seen.emplace(entry.slice.patient_id, entry.slice.split);
    if (!inserted && it->second != entry.slice.split) {
      fail(ErrorCode::LeakageError,
           "patient '" + entry.slice.patient_id + "' appears in both train and test splits");
    }
  }
}

CorpusEntry draft_description(const SliceRecord& slice, const GeneratorBackend& backend,
                              const std::string& prompt_template,
                              const std::filesystem::path& image_root) {
  std::filesystem::path image_path(slice.image_ref);
  if (!image_path.is_absolute()) image_path = image_root / image_path;

  const std::string text = generate_description(image_path, prompt_template, backend);
  if (text.empty()) {
    fail(ErrorCode::EmptyDescription,
         "backend returned empty description for slice '" + slice.slice_id + "'");
  }

  CorpusEntry entry;
  entry.slice = slice;
  entry.description = text;
  entry.provenance = Provenance::Generated;
  return entry;
}

std::vector<CorpusEntry> apply_refinements(const std::vector<CorpusEntry>& manifest,
                                           const std::map<std::string, std::string>& edits) {
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < manifest.size(); ++i) by_id[manifest[i].slice.slice_id] = i;
  for (const auto& kv : edits) {
    if (!by_id.count(kv.first)) {
      fail(ErrorCode::UnknownSlice, "edit references unknown slice '" + kv.first + "'");
    }
  }

  std::vector<CorpusEntry> out = manifest;
  for (const auto& [slice_id, text] : edits) {
    auto& entry = out[by_id[slice_id]];
    entry.description = text;
    entry.provenance = Provenance::ExpertRefined;
  }
  return out;
}

namespace {

nlohmann::ordered_json entry_to_json(const CorpusEntry& entry) {
  nlohmann::ordered_json j;
  j["slice_id"] = entry.slice.slice_id;
  j["patient_id"] = entry.slice.patient_id;
  j["class_label"] = to_string(entry.slice.class_label);
  j["view"] = to_string(entry.slice.view);
  j["frame_index"] = entry.slice.frame_index;
  j["image_ref"] = entry.slice.image_ref;
  j["split"] = to_string(entry.slice.split);
  j["description"] = entry.description;
  j["provenance"] = to_string(entry.provenance);
  return j;
}

CorpusEntry entry_from_json(const nlohmann::json& j) {
  CorpusEntry entry;
  entry.slice.slice_id = j.at("slice_id").get<std::string>();
  entry.slice.patient_id = j.at("patient_id").get<std::string>();
  entry.slice.class_label = parse_class_label(j.at("class_label").get<std::string>());
  entry.slice.view = parse_view_plane(j.at("view").get<std::string>());
  entry.slice.frame_index = j.at("frame_index").get<std::uint32_t>();
  entry.slice.image_ref = j.at("image_ref").get<std::string>();
  entry.slice.split = parse_split(j.at("split").get<std::string>());
  entry.description = j.at("description").get<std::string>();
  entry.provenance = parse_provenance(j.at("provenance").get<std::string>());
  return entry;
}

}  // namespace

void save_manifest(const std::filesystem::path& path, const std::vector<CorpusEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open '" + path.string() + "' for writing");

  std::unordered_set<std::string> ids;
  for (const auto& entry : entries) {
    if (!ids.insert(entry.slice.slice_id).second) {
      fail(ErrorCode::ConfigError, "duplicate slice_id '" + entry.slice.slice_id + "' in manifest");
    }
    out << entry_to_json(entry).dump() << "\n";
  }
  if (!out) fail(ErrorCode::IoError, "write failed on '" + path.string() + "'");
}

std::vector<CorpusEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open '" + path.string() + "'");

  std::vector<CorpusEntry> entries;
  std::unordered_set<std::string> ids;
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    try {
      entries.push_back(entry_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ManifestParseError,
                  "line " + std::to_string(line_number) + " of '" + path.string() +
                      "': " + e.what())
          .set_line(line_number);
    } catch (const Error& e) {
      throw Error(ErrorCode::ManifestParseError,
                  "line " + std::to_string(line_number) + " of '" + path.string() +
                      "': " + e.message())
          .set_line(line_number);
    }
    if (!ids.insert(entries.back().slice.slice_id).second) {
      throw Error(ErrorCode::ManifestParseError,
                  "line " + std::to_string(line_number) + ": duplicate slice_id '" +
                      entries.back().slice.slice_id + "'")
          .set_line(line_number);
    }
  }
  return entries;
}

std::vector<CorpusEntry> select_corpus_entries(const std::vector<CorpusEntry>& manifest,
                                               bool require_description) {
  std::vector<CorpusEntry> corpus;
  for (const auto& entry : manifest) {
    if (entry.slice.split != Split::Train) continue;
    if (entry.description.empty()) {
      if (require_description) {
        fail(ErrorCode::EmptyDescription,
             "corpus entry '" + entry.slice.slice_id + "' has no description; run describe first");
      }
      continue;
    }
    corpus.push_back(entry);
  }
  return corpus;
}

}  // namespace bhdrag
