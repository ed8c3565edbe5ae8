#pragma once

#include <string>
#include <vector>

namespace arccap::data {

// Lowercase, strip ASCII punctuation, split on whitespace, drop empties.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : text) {
    if (c >= 'A' && c <= 'Z') {
      current.push_back(static_cast<char>(c - 'A' + 'a'));
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      if (!current.empty()) {
        tokens.push_back(current);
        current.clear();
      }
    } else if (c >= 0x21 && c <= 0x7e &&
               !((c >= '0' && c <= '9') || (c >= 'a' && c <= 'z'))) {
      // printable ASCII that is neither alphanumeric nor lowercase letter
      continue;
    } else {
      current.push_back(static_cast<char>(c));
    }
  }
  if (!current.empty()) tokens.push_back(current);
  return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

}  // namespace arccap::data
