#pragma once

// Shared fixtures for the unit and acceptance tests.

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

#include "crops/corpus.hpp"
#include "crops/discriminator.hpp"
#include "crops/loss.hpp"
#include "crops/random.hpp"

namespace crops::testing {

// Random batch: 1..max_groups groups of 1..max_docs docs, labels 0..5.
inline Batch random_batch(Rng& rng, std::size_t max_groups = 4, std::size_t max_docs = 6) {
  Batch b;
  const std::size_t groups = 1 + rng.below(max_groups);
  for (std::size_t g = 0; g < groups; ++g) {
    b.query_ids.push_back(static_cast<QueryId>(g + 1));
    b.query_tokens.push_back({static_cast<TokenId>(g)});
    const std::size_t docs = 1 + rng.below(max_docs);
    for (std::size_t d = 0; d < docs; ++d) {
      b.doc_ids.push_back(static_cast<DocId>(b.doc_ids.size() + 100));
      b.doc_tokens.push_back({static_cast<TokenId>(b.doc_ids.size())});
      b.group_of.push_back(g);
      b.label_of.push_back(static_cast<int>(rng.below(6)));
    }
  }
  return b;
}

inline Matrix random_sims(Rng& rng, std::size_t q, std::size_t n) {
  Matrix s(q, n);
  for (double& x : s.data) x = rng.uniform(-1.0, 1.0);
  return s;
}

inline double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

// Independent H-InfoNCE reference in extended precision: for every anchor i
// of group g, comparators are i itself, every doc of another group, and
// same-group docs with a strictly lower label. Each term is written as
// log(1 + sum over other comparators of exp((s_j - s_i) / tau)).
inline long double oracle_h_infonce(const Matrix& s, const Batch& b, double tau) {
  long double total = 0.0L;
  for (std::size_t i = 0; i < b.num_docs(); ++i) {
    const std::size_t g = b.group_of[i];
    long double rest = 0.0L;
    for (std::size_t j = 0; j < b.num_docs(); ++j) {
      const bool other_group = b.group_of[j] != g;
      const bool lower = b.label_of[j] < b.label_of[i];
      if (j != i && (other_group || lower))
        rest += std::exp((static_cast<long double>(s(g, j)) - static_cast<long double>(s(g, i))) / tau);
    }
    total += std::log1p(rest);
  }
  return total;
}

// Expected mask entry restated from the rule: the anchor itself is the
// positive; other queries' docs are negatives; a same-query doc is a negative
// only when its label is strictly lower than the anchor's.
inline MaskEntry expected_mask_entry(const Batch& b, std::size_t i, std::size_t k) {
  if (i == k) return MaskEntry::Positive;
  if (b.group_of[i] != b.group_of[k]) return MaskEntry::Negative;
  return b.label_of[k] < b.label_of[i] ? MaskEntry::Negative : MaskEntry::Masked;
}

// Scorer with hand-set scores per (a, b); everything else scores 0.
struct TableScorer final : RelevanceScorer {
  std::map<std::pair<std::string, std::string>, double> table;
  double score(std::string_view a, std::string_view b) const override {
    auto it = table.find({std::string(a), std::string(b)});
    return it == table.end() ? 0.0 : it->second;
  }
};

inline SessionEvent issue(UserId u, Timestamp t, std::string q) { return {u, t, EventKind::QueryIssued, std::move(q), std::nullopt}; }
inline SessionEvent act(UserId u, Timestamp t, EventKind k, std::string q, DocId d) { return {u, t, k, std::move(q), d}; }
inline SessionEvent rec(UserId u, Timestamp t, DocId d) { return {u, t, EventKind::RecConsumed, std::nullopt, d}; }

// Fresh scratch directory under the system temp dir, private to this process
// so parallel test runs do not collide.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("crops_test_" + std::to_string(::getpid()) + "_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace crops::testing
