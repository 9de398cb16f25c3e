#pragma once

// ROUGE-1/2/L with clipped n-gram counts and LCS, F1 at beta = 1.

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <vector>

#include "dpt/errors.hpp"

namespace dpt {

struct RougeComponent {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct RougeScore {
  RougeComponent rouge1, rouge2, rougeL;
};

inline RougeComponent make_component(double overlap, double cand_total, double ref_total) {
  RougeComponent c;
  c.precision = cand_total > 0 ? overlap / cand_total : 0.0;
  c.recall = ref_total > 0 ? overlap / ref_total : 0.0;
  const double s = c.precision + c.recall;
  c.f1 = s > 0 ? 2.0 * c.precision * c.recall / s : 0.0;
  return c;
}

// Lowercase, then split on whitespace and punctuation; punctuation is dropped.
inline std::vector<std::string> rouge_tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch) || ch >= 0x80) {
      cur += static_cast<char>(std::tolower(ch));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

template <class Token>
RougeComponent rouge_n(const std::vector<Token>& cand, const std::vector<Token>& ref, std::size_t n) {
  if (n == 0) throw ConfigError("rouge_n: n must be >= 1");
  auto grams = [n](const std::vector<Token>& s) {
    std::map<std::vector<Token>, long> counts;
    for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[std::vector<Token>(s.begin() + long(i), s.begin() + long(i + n))];
    return counts;
  };
  const auto c = grams(cand), r = grams(ref);
  long overlap = 0, ct = 0, rt = 0;
  for (const auto& [g, k] : c) {
    ct += k;
    auto it = r.find(g);
    if (it != r.end()) overlap += std::min(k, it->second);
  }
  for (const auto& kv : r) rt += kv.second;
  return make_component(double(overlap), double(ct), double(rt));
}

template <class Token>
std::size_t lcs_length(const std::vector<Token>& a, const std::vector<Token>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

template <class Token>
RougeComponent rouge_l(const std::vector<Token>& cand, const std::vector<Token>& ref) {
  return make_component(double(lcs_length(cand, ref)), double(cand.size()), double(ref.size()));
}

template <class Token>
RougeScore rouge_all(const std::vector<Token>& cand, const std::vector<Token>& ref) {
  return {rouge_n(cand, ref, 1), rouge_n(cand, ref, 2), rouge_l(cand, ref)};
}

// An empty reference yields zeros; callers may inspect the tokenized
// reference to warn.
inline RougeScore rouge(const std::string& candidate, const std::string& reference) {
  return rouge_all(rouge_tokenize(candidate), rouge_tokenize(reference));
}

struct RougeSummary {
  std::vector<RougeScore> per_example;
  double mean_r1 = 0.0, mean_r2 = 0.0, mean_rl = 0.0;
};

inline RougeSummary summarize(std::vector<RougeScore> scores) {
  RougeSummary s;
  s.per_example = std::move(scores);
  for (const auto& r : s.per_example) {
    s.mean_r1 += r.rouge1.f1;
    s.mean_r2 += r.rouge2.f1;
    s.mean_rl += r.rougeL.f1;
  }
  if (!s.per_example.empty()) {
    const double n = double(s.per_example.size());
    s.mean_r1 /= n;
    s.mean_r2 /= n;
    s.mean_rl /= n;
  }
  return s;
}

}  // namespace dpt
