#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace rcsr {

enum class Modality { image, text };

inline const char* to_string(Modality m) { return m == Modality::image ? "image" : "text"; }

inline Modality other(Modality m) { return m == Modality::image ? Modality::text : Modality::image; }

/// Which modalities a client holds locally.
enum class ModalityType { paired, image_only, text_only };

inline const char* to_string(ModalityType t) {
  switch (t) {
    case ModalityType::paired: return "paired";
    case ModalityType::image_only: return "image_only";
    case ModalityType::text_only: return "text_only";
  }
  return "?";
}

inline ModalityType modality_type_from_string(const std::string& s) {
  if (s == "paired") return ModalityType::paired;
  if (s == "image_only") return ModalityType::image_only;
  if (s == "text_only") return ModalityType::text_only;
  throw std::invalid_argument("unknown modality type '" + s + "'");
}

inline bool has_modality(ModalityType t, Modality m) {
  if (t == ModalityType::paired) return true;
  return (t == ModalityType::image_only) == (m == Modality::image);
}

/// Mask bits (image, text).
inline std::array<bool, 2> modality_mask(ModalityType t) {
  return {has_modality(t, Modality::image), has_modality(t, Modality::text)};
}

inline std::size_t group_index(ModalityType t) { return static_cast<std::size_t>(t); }

/// Server-side EMA prototypes. Both directions are kept at unit norm.
struct GlobalPrototypes {
  std::vector<double> image;
  std::vector<double> text;
  double momentum = 0.9;

  const std::vector<double>& of(Modality m) const { return m == Modality::image ? image : text; }
  std::vector<double>& of(Modality m) { return m == Modality::image ? image : text; }
};

}  // namespace rcsr
