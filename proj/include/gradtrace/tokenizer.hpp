#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gradtrace {

// Byte-level vocabulary: ids 0..255 are raw bytes, then four specials.
inline constexpr int kTokBos = 256;
inline constexpr int kTokSep = 257;
inline constexpr int kTokEos = 258;
inline constexpr int kTokPad = 259;
inline constexpr size_t kVocabSize = 260;

enum class TextRole { query, response };

// Identity byte mapping. Empty text is rejected: both halves of a training
// example must be non-empty.
std::vector<int> encode(std::string_view text, TextRole role);

// Inverse of encode for byte ids; special ids are rejected.
std::string decode(std::span<const int> ids);

} // namespace gradtrace
