#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bhdrag/error.hpp"

namespace bhdrag {

enum class ClassLabel { BHD, LAM, PLCH, LIP };
enum class ViewPlane { Transverse, Sagittal, Coronal };
enum class Split { Train, Test };
enum class Provenance { Generated, ExpertRefined };

/// The diagnosis task is binary: BHD against the pooled non-BHD classes.
enum class BinaryLabel { BHD, NonBHD };

inline bool is_bhd(ClassLabel label) { return label == ClassLabel::BHD; }

inline BinaryLabel to_binary(ClassLabel label) {
  return is_bhd(label) ? BinaryLabel::BHD : BinaryLabel::NonBHD;
}

const char* to_string(ClassLabel label);
const char* to_string(ViewPlane view);
const char* to_string(Split split);
const char* to_string(Provenance provenance);
const char* to_string(BinaryLabel label);

ClassLabel parse_class_label(const std::string& text);
ViewPlane parse_view_plane(const std::string& text);
Split parse_split(const std::string& text);
Provenance parse_provenance(const std::string& text);

/// One 2-D slice cut from a patient volume.
struct SliceRecord {
  std::string slice_id;
  std::string patient_id;
  ClassLabel class_label = ClassLabel::BHD;
  ViewPlane view = ViewPlane::Transverse;
  std::uint32_t frame_index = 0;
  std::string image_ref;
  Split split = Split::Train;

  bool operator==(const SliceRecord&) const = default;
};

/// Image-description pair; the unit the retrieval corpus is made of.
struct CorpusEntry {
  SliceRecord slice;
  std::string description;
  Provenance provenance = Provenance::Generated;

  bool operator==(const CorpusEntry&) const = default;
};

struct ExpertItem {
  std::string image_ref;  // empty when the item is text-only
  std::string text;

  bool operator==(const ExpertItem&) const = default;
};

/// Curated distinguishing-feature knowledge injected into every prompt
/// when the typical-features section is enabled.
struct ExpertKnowledge {
  std::vector<ExpertItem> items;

  bool operator==(const ExpertKnowledge&) const = default;
};

inline const char* to_string(ClassLabel label) {
  switch (label) {
    case ClassLabel::BHD: return "BHD";
    case ClassLabel::LAM: return "LAM";
    case ClassLabel::PLCH: return "PLCH";
    case ClassLabel::LIP: return "LIP";
  }
  return "?";
}

inline const char* to_string(ViewPlane view) {
  switch (view) {
    case ViewPlane::Transverse: return "transverse";
    case ViewPlane::Sagittal: return "sagittal";
    case ViewPlane::Coronal: return "coronal";
  }
  return "?";
}

inline const char* to_string(Split split) {
  return split == Split::Train ? "train" : "test";
}

inline const char* to_string(Provenance provenance) {
  return provenance == Provenance::Generated ? "generated" : "expert_refined";
}

inline const char* to_string(BinaryLabel label) {
  return label == BinaryLabel::BHD ? "BHD" : "nonBHD";
}

inline ClassLabel parse_class_label(const std::string& text) {
  if (text == "BHD") return ClassLabel::BHD;
  if (text == "LAM") return ClassLabel::LAM;
  if (text == "PLCH") return ClassLabel::PLCH;
  if (text == "LIP") return ClassLabel::LIP;
  fail(ErrorCode::FormatError, "unknown class label '" + text + "'");
}

inline ViewPlane parse_view_plane(const std::string& text) {
  if (text == "transverse") return ViewPlane::Transverse;
  if (text == "sagittal") return ViewPlane::Sagittal;
  if (text == "coronal") return ViewPlane::Coronal;
  fail(ErrorCode::FormatError, "unknown view plane '" + text + "'");
}

inline Split parse_split(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "test") return Split::Test;
  fail(ErrorCode::FormatError, "unknown split '" + text + "'");
}

inline Provenance parse_provenance(const std::string& text) {
  if (text == "generated") return Provenance::Generated;
  if (text == "expert_refined") return Provenance::ExpertRefined;
  fail(ErrorCode::FormatError, "unknown provenance '" + text + "'");
}

}  // namespace bhdrag
