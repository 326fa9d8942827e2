#pragma once

// Hard match decisions shared by the classical matchers and the attention
// matcher, plus their pinned text serialization.

#include "matchkit/common.hpp"

#include <sstream>
#include <string>
#include <vector>

namespace matchkit {

struct Match {
  int i = 0;
  int j = 0;
  double confidence = 0.0;
};

inline bool operator==(const Match& a, const Match& b) {
  return a.i == b.i && a.j == b.j && a.confidence == b.confidence;
}

struct MatchSet {
  std::vector<Match> pairs;
  size_t size() const { return pairs.size(); }
};

inline std::string write_matches(const MatchSet& ms) {
  std::string out = "# matchkit-matches v1\n";
  for (const Match& m : ms.pairs)
    out += std::to_string(m.i) + " " + std::to_string(m.j) + " " + format_fixed(m.confidence) + "\n";
  return out;
}

inline MatchSet read_matches(const std::string& text) {
  std::istringstream in(text);
  std::string header;
  if (!std::getline(in, header) || header != "# matchkit-matches v1")
    throw Error("bad match file header");
  MatchSet ms;
  Match m;
  while (in >> m.i >> m.j >> m.confidence) ms.pairs.push_back(m);
  return ms;
}

}  // namespace matchkit
