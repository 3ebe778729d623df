#pragma once

#include <algorithm>
#include <iterator>
#include <cctype>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace realcustom {

/// Closed word list of the toy text encoder. Index 0 is the unknown-word
/// token and index 1 the unconditional (empty prompt) token.
inline constexpr std::string_view kVocabulary[] = {
    "<unk>",  "<empty>",
    // function words
    "a", "an", "the", "in", "on", "with", "and", "of", "at", "photo", "next", "to",
    "under", "near", "playing", "wearing", "holding", "sitting", "standing",
    // subjects
    "toy", "dog", "cat", "boy", "girl", "horse", "man", "woman", "bear", "teddy",
    "backpack", "robot", "house", "building", "car", "cup",
    // synthetic shapes
    "circle", "square", "triangle", "diamond", "cross", "ring",
    // synthetic colours
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
    // synthetic backgrounds
    "grass", "sand", "snow", "water", "bricks",
    // scenes
    "jungle", "beach", "city", "forest", "street", "room", "garden", "desert",
    "mountain", "river", "sky", "chess", "guitar", "hat", "table", "flowers"};

inline constexpr std::size_t kVocabularySize = std::size(kVocabulary);
inline constexpr std::size_t kUnknownToken = 0;
inline constexpr std::size_t kEmptyToken = 1;

inline std::size_t vocabulary_id(std::string_view word) {
  const auto it = std::find(std::begin(kVocabulary) + 2, std::end(kVocabulary), word);
  return it == std::end(kVocabulary)
             ? kUnknownToken
             : static_cast<std::size_t>(it - std::begin(kVocabulary));
}

inline bool in_vocabulary(std::string_view word) { return vocabulary_id(word) != kUnknownToken; }

/// Lowercased whitespace split; one token per word.
inline std::vector<std::string> tokenize(std::string_view prompt) {
  std::vector<std::string> words;
  std::istringstream is{std::string(prompt)};
  std::string w;
  while (is >> w) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    words.push_back(w);
  }
  return words;
}

}  // namespace realcustom
