#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace kic {

// ASCII lowercase plus whitespace collapse/trim. Non-ASCII bytes pass
// through untouched, so the function is safe on arbitrary UTF-8.
std::string normalize_text(std::string_view text);

std::string to_lower_ascii(std::string_view text);

std::string trim(std::string_view text);

bool is_blank(std::string_view text);

// Lowercased alphanumeric runs ("Washington D.C." -> {"washington","d","c"}).
std::vector<std::string> word_tokens(std::string_view text);

std::vector<std::string> split_whitespace(std::string_view text);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

}  // namespace kic
