#pragma once

#include <string>
#include <string_view>
#include <vector>

// Small byte-level string helpers shared by the normalizer, the tokenizer
// and the intent parser. ASCII-only case folding; bytes >= 0x80 are treated
// as word characters so UTF-8 text survives untouched.
namespace medres::text {

std::string to_lower(std::string_view s);
std::string_view trim(std::string_view s) noexcept;
bool is_word_byte(unsigned char c) noexcept;

// Replaces every non-word byte with a space, lowercases and collapses runs
// of whitespace into single spaces. The result has no leading or trailing
// space.
std::string fold_words(std::string_view s);

std::vector<std::string> split_words(std::string_view s);
std::vector<std::string_view> split_lines(std::string_view s);

bool starts_with_icase(std::string_view s, std::string_view prefix) noexcept;
bool contains_icase(std::string_view haystack, std::string_view needle) noexcept;

std::string join(const std::vector<std::string>& parts, std::string_view sep);
// CR/LF become spaces, then trimmed.
std::string single_line(std::string_view s);

}  // namespace medres::text
