#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bhdrag/generator.hpp"
#include "bhdrag/types.hpp"

namespace bhdrag {

/// Greedy left-to-right thinning of sorted frame indices: the first index
/// is kept, then any index at least min_gap after the last kept one.
/// Input must be strictly ascending.
std::vector<int> select_key_slices(const std::vector<int>& frame_indices, int min_gap = 2);

struct SplitResult {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Seeded patient-level split; test size = round(test_fraction * count).
/// Throws SplitInfeasible for fewer than 2 patients.
SplitResult split_patients(const std::vector<std::string>& patient_ids,
                           double test_fraction, std::uint64_t seed);

/// Class-stratified variant: per-class quotas by largest remainder, so the
/// overall test size still equals round(test_fraction * count).
SplitResult split_patients_stratified(
    const std::vector<std::pair<std::string, ClassLabel>>& patients,
    double test_fraction, std::uint64_t seed);

/// Stamps each record's split from the patient partition. Every record's
/// patient must appear in exactly one side.
void assign_splits(std::vector<SliceRecord>& records, const SplitResult& split);

/// Throws LeakageError if any patient has entries in both splits.
void check_patient_leakage(const std::vector<CorpusEntry>& manifest);

/// Drafts one description through the backend. The entry comes back with
/// provenance = generated; empty backend output is an error.
CorpusEntry draft_description(const SliceRecord& slice, const GeneratorBackend& backend,
                              const std::string& prompt_template,
                              const std::filesystem::path& image_root = {});

/// Applies expert edits by slice_id. All-or-nothing: an unknown id rejects
/// the whole batch and leaves the input untouched.
std::vector<CorpusEntry> apply_refinements(const std::vector<CorpusEntry>& manifest,
                                           const std::map<std::string, std::string>& edits);

/// Manifest file: JSONL, one entry per line.
void save_manifest(const std::filesystem::path& path, const std::vector<CorpusEntry>& entries);
std::vector<CorpusEntry> load_manifest(const std::filesystem::path& path);

/// Train-split entries, i.e. the retrieval corpus. When require_description
/// is set, an entry with an empty description is an error rather than
/// silently dropped.
std::vector<CorpusEntry> select_corpus_entries(const std::vector<CorpusEntry>& manifest,
                                               bool require_description = true);

}  // namespace bhdrag
