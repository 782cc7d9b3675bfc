#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "factlab/util.hpp"

namespace factlab {

enum class Label { FactuallyCorrect, FactuallyIncorrect };

inline constexpr std::array<Label, 2> kLabels{Label::FactuallyCorrect, Label::FactuallyIncorrect};

inline constexpr std::string_view to_string(Label label) {
    return label == Label::FactuallyCorrect ? "Factually Correct" : "Factually Incorrect";
}

inline constexpr Label opposite(Label label) {
    return label == Label::FactuallyCorrect ? Label::FactuallyIncorrect : Label::FactuallyCorrect;
}

inline constexpr std::size_t index_of(Label label) {
    return label == Label::FactuallyCorrect ? 0 : 1;
}

/// Case-insensitive and whitespace-tolerant, otherwise exact.
inline std::optional<Label> try_parse_label(std::string_view text) {
    auto norm = normalize_words(text);
    if (norm == "factually correct") return Label::FactuallyCorrect;
    if (norm == "factually incorrect") return Label::FactuallyIncorrect;
    return std::nullopt;
}

inline Label parse_label(std::string_view text) {
    if (auto label = try_parse_label(text)) return *label;
    throw Error("label", "unparseable label: \"" + std::string(text) + "\"");
}

}  // namespace factlab
