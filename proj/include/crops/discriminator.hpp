#pragma once

// Relevance scorers used to validate mined positives and to detect
// reformulated queries. The default is an IDF-weighted cosine over word
// tokens; anything implementing RelevanceScorer can be swapped in.

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "crops/corpus.hpp"
#include "crops/error.hpp"
#include "crops/text.hpp"

namespace crops {

class RelevanceScorer {
 public:
  virtual ~RelevanceScorer() = default;
  // Relevance of b to a, in [0, 1].
  virtual double score(std::string_view a, std::string_view b) const = 0;
};

// Strict threshold test: relevant iff score > alpha.
inline bool is_relevant(const RelevanceScorer& scorer, std::string_view q, std::string_view d, double alpha) {
  return scorer.score(q, d) > alpha;
}

class LexicalScorer final : public RelevanceScorer {
 public:
  // idf(t) = ln((1 + N) / (1 + df(t))) + 1 over the doc_text of each document.
  static LexicalScorer fit(std::span<const VideoDoc> corpus, double smoothing = 1.0) {
    if (corpus.empty()) throw ValidationError("cannot fit scorer on an empty corpus");
    std::unordered_map<std::string, std::size_t> df;
    for (const auto& doc : corpus) {
      auto words = split_words(doc_text(doc));
      std::unordered_set<std::string> uniq(words.begin(), words.end());
      for (auto& w : uniq) ++df[w];
    }
    LexicalScorer s;
    s.n_docs_ = corpus.size();
    s.smoothing_ = smoothing;
    for (auto& [tok, count] : df) s.idf_.emplace(tok, s.idf_from_df(count));
    return s;
  }

  double idf(std::string_view token) const {
    auto it = idf_.find(std::string(token));
    return it != idf_.end() ? it->second : idf_from_df(0);
  }

  std::size_t n_docs() const noexcept { return n_docs_; }
  double smoothing() const noexcept { return smoothing_; }
  const std::unordered_map<std::string, double>& idf_table() const noexcept { return idf_; }

  // Sparse idf-weighted term-frequency vector.
  std::unordered_map<std::string, double> weigh(std::string_view text) const {
    std::unordered_map<std::string, double> v;
    for (auto& w : split_words(text)) v[w] += 1.0;
    for (auto& [tok, tf] : v) tf *= idf(tok);
    return v;
  }

  double score(std::string_view a, std::string_view b) const override {
    auto va = weigh(a);
    auto vb = weigh(b);
    if (va.empty() || vb.empty()) return 0.0;
    const auto& small = va.size() <= vb.size() ? va : vb;
    const auto& large = va.size() <= vb.size() ? vb : va;
    double dot = 0.0;
    for (auto& [tok, w] : small) {
      auto it = large.find(tok);
      if (it != large.end()) dot += w * it->second;
    }
    double na = 0.0, nb = 0.0;
    for (auto& [_, w] : va) na += w * w;
    for (auto& [_, w] : vb) nb += w * w;
    double s = dot / std::sqrt(na * nb);
    // Rounding can push identical texts a hair above 1.
    return s < 0.0 ? 0.0 : (s > 1.0 ? 1.0 : s);
  }

 private:
  double idf_from_df(std::size_t df) const {
    return std::log((smoothing_ + static_cast<double>(n_docs_)) / (smoothing_ + static_cast<double>(df))) + 1.0;
  }

  std::size_t n_docs_ = 0;
  double smoothing_ = 1.0;
  std::unordered_map<std::string, double> idf_;
};

}  // namespace crops
