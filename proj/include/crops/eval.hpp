#pragma once

// Exact-retrieval evaluation: CT / QR ground-truth splits from held-out logs,
// brute-force top-K retrieval, Recall@K and NDCG@K.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "crops/corpus.hpp"
#include "crops/discriminator.hpp"
#include "crops/encoder.hpp"
#include "crops/engine.hpp"
#include "crops/error.hpp"
#include "crops/io.hpp"
#include "crops/linalg.hpp"

namespace crops {

enum class SplitKind { CT, QR, Annotated };

inline std::string_view to_string(SplitKind k) {
  switch (k) {
    case SplitKind::CT: return "CT";
    case SplitKind::QR: return "QR";
    case SplitKind::Annotated: return "Annotated";
  }
  return "";
}

struct RecallEntry {
  std::string query;
  std::set<DocId> relevant;

  friend bool operator==(const RecallEntry&, const RecallEntry&) = default;
};

struct AnnotatedEntry {
  std::string query;
  std::vector<std::pair<DocId, int>> labels;

  friend bool operator==(const AnnotatedEntry&, const AnnotatedEntry&) = default;
};

struct EvalSplit {
  SplitKind kind = SplitKind::CT;
  std::vector<RecallEntry> entries;         // CT and QR
  std::vector<AnnotatedEntry> annotated;    // Annotated

  friend bool operator==(const EvalSplit&, const EvalSplit&) = default;
};

// CT: clicked docs per query. QR: docs clicked or watched after a
// reformulation, attributed to the earliest query of the reformulation chain
// and kept when theta(that query, doc) > alpha. Queries with empty ground
// truth are left out; docs outside the corpus are ignored.
inline std::pair<EvalSplit, EvalSplit> build_splits(std::span<const SessionEvent> events,
                                                    std::span<const VideoDoc> docs, const RelevanceScorer& scorer,
                                                    const MiningConfig& cfg) {
  CorpusIndex corpus(docs);
  std::map<std::string, std::set<DocId>> ct, qr;
  for (const auto& e : events) {
    if (e.kind != EventKind::Clicked || !e.query_text) continue;
    if (corpus.find(*e.doc_id)) ct[*e.query_text].insert(*e.doc_id);
  }

  auto pairs = detect_reformulations(events, scorer, cfg);
  // (user, reformulated query, issue time) -> earliest chain root (query, time)
  std::map<std::tuple<UserId, std::string, Timestamp>, std::pair<std::string, Timestamp>> root_of;
  auto root = [&](UserId u, const std::string& q, Timestamp t) {
    auto it = root_of.find({u, q, t});
    return it == root_of.end() ? std::make_pair(q, t) : it->second;
  };
  // Ordered by reformulation time so a chain's earlier links resolve first.
  std::stable_sort(pairs.begin(), pairs.end(), [](const ReformulationPair& a, const ReformulationPair& b) {
    if (a.user_id != b.user_id) return a.user_id < b.user_id;
    return a.t_reform < b.t_reform;
  });
  for (const auto& p : pairs) {
    auto r = root(p.user_id, p.q_orig, p.t_orig);
    auto key = std::make_tuple(p.user_id, p.q_reform, p.t_reform);
    auto it = root_of.find(key);
    if (it == root_of.end() || r.second < it->second.second) root_of[key] = r;
  }

  LogIndex log(events);
  std::map<std::pair<std::string, DocId>, bool> memo;
  for (const auto& [key, r] : root_of) {
    const auto& [user, q_reform, t_reform] = key;
    for (const auto& e : log.user(user)) {
      if (e.timestamp < t_reform) continue;
      if (e.kind != EventKind::Clicked && e.kind != EventKind::Watched) continue;
      if (!e.query_text || *e.query_text != q_reform) continue;
      const VideoDoc* doc = corpus.find(*e.doc_id);
      if (!doc) continue;
      auto mk = std::make_pair(r.first, *e.doc_id);
      auto mit = memo.find(mk);
      if (mit == memo.end()) mit = memo.emplace(mk, is_relevant(scorer, r.first, doc_text(*doc), cfg.alpha)).first;
      if (mit->second) qr[r.first].insert(*e.doc_id);
    }
  }

  EvalSplit ct_split{SplitKind::CT, {}, {}}, qr_split{SplitKind::QR, {}, {}};
  for (auto& [q, s] : ct)
    if (!s.empty()) ct_split.entries.push_back({q, std::move(s)});
  for (auto& [q, s] : qr)
    if (!s.empty()) qr_split.entries.push_back({q, std::move(s)});
  return {std::move(ct_split), std::move(qr_split)};
}

// Annotated split from labeled groups, restricted to corpus docs.
inline EvalSplit annotated_split(std::span<const TrainingGroup> groups, std::span<const VideoDoc> docs) {
  CorpusIndex corpus(docs);
  EvalSplit out{SplitKind::Annotated, {}, {}};
  for (const auto& g : groups) {
    AnnotatedEntry e{g.query_text, {}};
    for (const auto& s : g.samples)
      if (corpus.find(s.doc_id)) e.labels.emplace_back(s.doc_id, s.label);
    if (!e.labels.empty()) out.annotated.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval

// Precomputed doc-tower embeddings of a corpus.
struct DocIndex {
  std::vector<DocId> ids;
  Matrix vecs;  // ids.size() x out_dim
};

inline DocIndex build_index(const EncoderParams& p, const Tokenizer& tok, std::span<const VideoDoc> docs) {
  DocIndex idx;
  idx.vecs = Matrix(docs.size(), p.out_dim());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    idx.ids.push_back(docs[i].doc_id);
    auto v = encode(p, Side::Doc, tok.tokenize(doc_text(docs[i])));
    std::copy(v.begin(), v.end(), idx.vecs.row(i).begin());
  }
  return idx;
}

// Exact ranking by similarity descending, ties by ascending doc_id; returns
// the first min(k, corpus size) ids.
inline std::vector<DocId> retrieve_topk(const DocIndex& idx, std::span<const double> query_vec, std::size_t k) {
  if (k == 0) throw ValidationError("K must be at least 1");
  std::vector<std::pair<double, DocId>> scored(idx.ids.size());
  for (std::size_t i = 0; i < idx.ids.size(); ++i) scored[i] = {similarity(query_vec, idx.vecs.row(i)), idx.ids[i]};
  auto better = [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; };
  const std::size_t m = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(m), scored.end(), better);
  std::vector<DocId> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = scored[i].second;
  return out;
}

inline std::vector<DocId> retrieve_topk(const EncoderParams& p, const Tokenizer& tok, std::span<const VideoDoc> docs,
                                        std::string_view q, std::size_t k) {
  if (docs.empty()) throw ValidationError("cannot retrieve from an empty corpus");
  auto idx = build_index(p, tok, docs);
  return retrieve_topk(idx, encode(p, Side::Query, tok.tokenize(q)), k);
}

using Rankings = std::unordered_map<std::string, std::vector<DocId>>;

// ---------------------------------------------------------------------------
// Metrics

// Mean over split queries of |R_q intersect top-K| / |R_q|.
inline double recall_at_k(const EvalSplit& split, const Rankings& retrieved, std::size_t k) {
  if (split.entries.empty()) throw ValidationError("recall over an empty split");
  double total = 0.0;
  for (const auto& e : split.entries) {
    auto it = retrieved.find(e.query);
    if (it == retrieved.end()) throw ValidationError("no retrieval result for query '" + e.query + "'");
    if (e.relevant.empty()) throw ValidationError("empty ground truth for query '" + e.query + "'");
    const auto& ranked = it->second;
    std::size_t hits = 0;
    const std::size_t m = std::min(k, ranked.size());
    for (std::size_t i = 0; i < m; ++i) hits += e.relevant.count(ranked[i]);
    total += static_cast<double>(hits) / static_cast<double>(e.relevant.size());
  }
  return total / static_cast<double>(split.entries.size());
}

inline double gain(int label) { return std::pow(2.0, label) - 1.0; }

// DCG@K of label sequence (position i discounted by log2(i + 1), 1-based).
inline double dcg_at_k(std::span<const int> labels, std::size_t k) {
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(k, labels.size()); ++i) s += gain(labels[i]) / std::log2(static_cast<double>(i) + 2.0);
  return s;
}

struct NdcgResult {
  double value = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;  // queries with IDCG = 0
};

// Mean NDCG@K over annotated queries. Unannotated retrieved docs count as
// label 0; queries whose ideal DCG is 0 are skipped and counted.
inline NdcgResult ndcg_at_k(std::span<const AnnotatedEntry> entries, const Rankings& retrieved, std::size_t k = 4) {
  if (k < 1) throw ValidationError("K must be at least 1");
  NdcgResult r;
  double total = 0.0;
  for (const auto& e : entries) {
    std::vector<int> ideal;
    std::unordered_map<DocId, int> label;
    for (auto& [id, l] : e.labels) {
      ideal.push_back(l);
      label[id] = l;
    }
    std::sort(ideal.rbegin(), ideal.rend());
    const double idcg = dcg_at_k(ideal, k);
    if (idcg == 0.0) {
      ++r.skipped;
      continue;
    }
    auto it = retrieved.find(e.query);
    if (it == retrieved.end()) throw ValidationError("no retrieval result for query '" + e.query + "'");
    std::vector<int> got;
    for (std::size_t i = 0; i < std::min(k, it->second.size()); ++i) {
      auto l = label.find(it->second[i]);
      got.push_back(l == label.end() ? 0 : l->second);
    }
    total += dcg_at_k(got, k) / idcg;
    ++r.evaluated;
  }
  if (r.evaluated) r.value = total / static_cast<double>(r.evaluated);
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  std::string checkpoint_id;
  std::string label;  // free-form run name shown by `report`
  std::size_t corpus_size = 0;
  std::vector<std::size_t> ks;
  std::map<std::string, std::map<std::size_t, double>> recall;  // split -> K -> value
  std::map<std::string, std::size_t> split_queries;
  std::size_t ndcg_k = 4;
  double ndcg = 0.0;
  std::size_t ndcg_evaluated = 0;
  std::size_t ndcg_skipped = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvalInputs {
  const EvalSplit* ct = nullptr;
  const EvalSplit* qr = nullptr;
  const EvalSplit* annotated = nullptr;
};

inline EvalReport evaluate(const EncoderParams& p, const Tokenizer& tok, std::span<const VideoDoc> docs,
                           const EvalInputs& splits, std::vector<std::size_t> ks, std::size_t ndcg_k = 4,
                           std::string checkpoint_id = {}) {
  if (docs.empty()) throw ValidationError("cannot evaluate on an empty corpus");
  if (ks.empty()) throw ValidationError("no K values requested");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  if (ks.front() == 0) throw ValidationError("K must be at least 1");

  EvalReport rep;
  rep.checkpoint_id = std::move(checkpoint_id);
  rep.corpus_size = docs.size();
  rep.ks = ks;
  rep.ndcg_k = ndcg_k;

  const DocIndex idx = build_index(p, tok, docs);
  const std::size_t depth = std::max(ks.back(), ndcg_k);
  Rankings rankings;
  auto rank = [&](const std::string& q) {
    if (!rankings.count(q)) rankings[q] = retrieve_topk(idx, encode(p, Side::Query, tok.tokenize(q)), depth);
  };
  for (const EvalSplit* s : {splits.ct, splits.qr}) {
    if (!s) continue;
    for (const auto& e : s->entries) rank(e.query);
    auto& row = rep.recall[std::string(to_string(s->kind))];
    rep.split_queries[std::string(to_string(s->kind))] = s->entries.size();
    if (s->entries.empty()) continue;
    for (std::size_t k : ks) row[k] = recall_at_k(*s, rankings, k);
  }
  if (splits.annotated) {
    for (const auto& e : splits.annotated->annotated) rank(e.query);
    auto n = ndcg_at_k(splits.annotated->annotated, rankings, ndcg_k);
    rep.ndcg = n.value;
    rep.ndcg_evaluated = n.evaluated;
    rep.ndcg_skipped = n.skipped;
  }
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json recall = nlohmann::json::object();
  for (auto& [split, byk] : r.recall) {
    nlohmann::json row = nlohmann::json::object();
    for (auto& [k, v] : byk) row[std::to_string(k)] = v;
    recall[split] = row;
  }
  return {{"checkpoint_id", r.checkpoint_id}, {"label", r.label},
          {"corpus_size", r.corpus_size},     {"ks", r.ks},
          {"recall", recall},                 {"split_queries", r.split_queries},
          {"ndcg_k", r.ndcg_k},               {"ndcg", r.ndcg},
          {"ndcg_evaluated", r.ndcg_evaluated}, {"ndcg_skipped", r.ndcg_skipped}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    r.label = j.value("label", std::string());
    r.corpus_size = j.at("corpus_size").get<std::size_t>();
    r.ks = j.at("ks").get<std::vector<std::size_t>>();
    for (auto& [split, row] : j.at("recall").items())
      for (auto& [k, v] : row.items()) r.recall[split][std::stoul(k)] = v.get<double>();
    r.split_queries = j.at("split_queries").get<std::map<std::string, std::size_t>>();
    r.ndcg_k = j.at("ndcg_k").get<std::size_t>();
    r.ndcg = j.at("ndcg").get<double>();
    r.ndcg_evaluated = j.at("ndcg_evaluated").get<std::size_t>();
    r.ndcg_skipped = j.at("ndcg_skipped").get<std::size_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
}

inline void write_report(const std::filesystem::path& path, const EvalReport& r) {
  write_text_atomic(path, to_json(r).dump() + "\n");
}

inline EvalReport read_report(const std::filesystem::path& path) {
  auto j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw ValidationError("malformed report: " + path.string());
  return report_from_json(j);
}

inline void write_split(const std::filesystem::path& path, const EvalSplit& s) {
  write_file_atomic(path, [&](std::ostream& out) {
    for (const auto& e : s.entries)
      out << dump_line({{"kind", to_string(s.kind)}, {"query", e.query}, {"relevant", e.relevant}});
    for (const auto& e : s.annotated) {
      nlohmann::json labels = nlohmann::json::array();
      for (auto& [id, l] : e.labels) labels.push_back({{"doc_id", id}, {"label", l}});
      out << dump_line({{"kind", to_string(s.kind)}, {"query", e.query}, {"labels", labels}});
    }
  });
}

// Plain-text comparison table, one row per report, recall columns per split
// and K followed by NDCG.
inline std::string render_table(std::span<const EvalReport> reports) {
  std::set<std::pair<std::string, std::size_t>> cols;
  for (const auto& r : reports)
    for (auto& [split, byk] : r.recall)
      for (auto& [k, _] : byk) cols.emplace(split, k);
  std::vector<std::string> header{"run"};
  for (auto& [split, k] : cols) header.push_back(split + " R@" + std::to_string(k));
  header.push_back("NDCG@" + std::to_string(reports.empty() ? 4 : reports.front().ndcg_k));

  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    std::vector<std::string> row{r.label.empty() ? r.checkpoint_id : r.label};
    for (auto& [split, k] : cols) {
      auto s = r.recall.find(split);
      std::ostringstream os;
      if (s != r.recall.end() && s->second.count(k))
        os << std::fixed << std::setprecision(1) << 100.0 * s->second.at(k);
      else
        os << "-";
      row.push_back(os.str());
    }
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << 100.0 * r.ndcg;
    row.push_back(os.str());
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) out << "  ";
      if (c == 0)
        out << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
      else
        out << std::right << std::setw(static_cast<int>(width[c])) << cells[c];
    }
    out << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (auto& row : rows) line(row);
  return out.str();
}

}  // namespace crops
