#pragma once

// Positive-sample mining from session logs: search-system positives and hard
// negatives, query-level augmentation from reformulations, system-level
// expansion from the recommendation feed, LLM world-knowledge ingestion, and
// hierarchical label assignment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "crops/corpus.hpp"
#include "crops/discriminator.hpp"
#include "crops/error.hpp"
#include "crops/io.hpp"
#include "crops/random.hpp"

namespace crops {

struct MiningConfig {
  double alpha = 0.6;                // threshold on theta(query, doc)
  double query_sim_threshold = 0.6;  // threshold on theta(query, reformulation)
  Timestamp reform_window_seconds = 90;
  Timestamp rec_window_seconds = 3600;  // centered on the query time
  std::size_t rec_cap_per_user = 100;
  std::size_t neg_per_group = 8;
  std::pair<double, double> neg_source_ratio{0.5, 0.5};  // unexposed, pre-rank filtered

  bool use_query_level = true;
  bool use_system_level = true;
  bool use_world_knowledge = true;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("mining.alpha must be in [0,1]");
    if (!(query_sim_threshold >= 0.0 && query_sim_threshold <= 1.0))
      throw ValidationError("mining.query_sim_threshold must be in [0,1]");
    if (reform_window_seconds <= 0) throw ValidationError("mining.reform_window_seconds must be positive");
    if (rec_window_seconds <= 0) throw ValidationError("mining.rec_window_seconds must be positive");
    if (rec_cap_per_user == 0) throw ValidationError("mining.rec_cap_per_user must be positive");
    if (neg_per_group == 0) throw ValidationError("mining.neg_per_group must be positive");
    auto [u, p] = neg_source_ratio;
    if (!(u >= 0.0 && p >= 0.0 && u + p > 0.0)) throw ValidationError("mining.neg_source_ratio must be non-negative");
  }
};

struct ReformulationPair {
  UserId user_id = 0;
  std::string q_orig;
  std::string q_reform;
  Timestamp t_orig = 0;
  Timestamp t_reform = 0;

  friend bool operator==(const ReformulationPair&, const ReformulationPair&) = default;
};

// Per-user event streams plus a per-query index of search-side events.
// `events` must outlive the index.
class LogIndex {
 public:
  explicit LogIndex(std::span<const SessionEvent> events) : events_(events) {
    for (std::size_t i = 0; i < events.size();) {
      std::size_t j = i;
      while (j < events.size() && events[j].user_id == events[i].user_id) ++j;
      users_.emplace_back(events[i].user_id, events.subspan(i, j - i));
      i = j;
    }
    for (std::size_t i = 0; i < events.size(); ++i) {
      const auto& e = events[i];
      if (e.query_text && e.kind != EventKind::RecConsumed) by_query_[*e.query_text].push_back(i);
    }
  }

  std::span<const SessionEvent> events() const { return events_; }

  // (user, that user's time-ordered events)
  const std::vector<std::pair<UserId, std::span<const SessionEvent>>>& users() const { return users_; }

  std::span<const SessionEvent> user(UserId u) const {
    auto it = std::lower_bound(users_.begin(), users_.end(), u,
                               [](const auto& entry, UserId id) { return entry.first < id; });
    if (it == users_.end() || it->first != u) return {};
    return it->second;
  }

  // Indices of QueryIssued and search-side events carrying this query text.
  std::span<const std::size_t> query_events(const std::string& q) const {
    auto it = by_query_.find(q);
    if (it == by_query_.end()) return {};
    return it->second;
  }

  // Distinct issued queries in lexicographic order.
  std::vector<std::string> issued_queries() const {
    std::set<std::string> qs;
    for (const auto& e : events_)
      if (e.kind == EventKind::QueryIssued) qs.insert(*e.query_text);
    return {qs.begin(), qs.end()};
  }

 private:
  std::span<const SessionEvent> events_;
  std::vector<std::pair<UserId, std::span<const SessionEvent>>> users_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_query_;
};

// Every ordered pair of distinct queries issued by one user with
// 0 < dt <= window and theta(q1, q2) above the query threshold.
// `events` must be sorted by (user_id, timestamp).
inline std::vector<ReformulationPair> detect_reformulations(std::span<const SessionEvent> events,
                                                            const RelevanceScorer& scorer,
                                                            const MiningConfig& cfg) {
  std::vector<ReformulationPair> pairs;
  std::vector<const SessionEvent*> issued;
  for (std::size_t i = 0; i < events.size();) {
    std::size_t j = i;
    issued.clear();
    for (; j < events.size() && events[j].user_id == events[i].user_id; ++j)
      if (events[j].kind == EventKind::QueryIssued) issued.push_back(&events[j]);
    for (std::size_t a = 0; a < issued.size(); ++a) {
      for (std::size_t b = a + 1; b < issued.size(); ++b) {
        const Timestamp dt = issued[b]->timestamp - issued[a]->timestamp;
        if (dt > cfg.reform_window_seconds) break;
        if (dt <= 0) continue;
        const std::string& q1 = *issued[a]->query_text;
        const std::string& q2 = *issued[b]->query_text;
        if (q1 == q2) continue;
        if (!is_relevant(scorer, q1, q2, cfg.query_sim_threshold)) continue;
        pairs.push_back({issued[a]->user_id, q1, q2, issued[a]->timestamp, issued[b]->timestamp});
      }
    }
    i = j;
  }
  return pairs;
}

using DocSet = std::set<DocId>;

namespace detail {

inline bool passes(const RelevanceScorer& scorer, const CorpusIndex& corpus, const std::string& q, DocId id,
                   double alpha, std::unordered_map<DocId, bool>& memo) {
  auto it = memo.find(id);
  if (it != memo.end()) return it->second;
  const VideoDoc* doc = corpus.find(id);
  bool ok = doc && is_relevant(scorer, q, doc_text(*doc), alpha);
  memo.emplace(id, ok);
  return ok;
}

}  // namespace detail

// P1: docs the reformulating user clicked or watched under a reformulation
// of q (at or after the reformulation time), kept when theta(q, doc) > alpha.
inline DocSet mine_query_level(const std::string& q, std::span<const ReformulationPair> pairs, const LogIndex& log,
                               const CorpusIndex& corpus, const RelevanceScorer& scorer, const MiningConfig& cfg) {
  DocSet out;
  std::unordered_map<DocId, bool> memo;
  for (const auto& p : pairs) {
    if (p.q_orig != q) continue;
    for (const auto& e : log.user(p.user_id)) {
      if (e.timestamp < p.t_reform) continue;
      if (e.kind != EventKind::Clicked && e.kind != EventKind::Watched) continue;
      if (!e.query_text || *e.query_text != p.q_reform) continue;
      if (detail::passes(scorer, corpus, q, *e.doc_id, cfg.alpha, memo)) out.insert(*e.doc_id);
    }
  }
  return out;
}

// P2: for every user who issued q, up to rec_cap_per_user recommendation-feed
// docs within +/- rec_window_seconds/2 of an issue time (nearest first),
// kept when theta(q, doc) > alpha. Union over users.
inline DocSet mine_system_level(const std::string& q, const LogIndex& log, const CorpusIndex& corpus,
                                const RelevanceScorer& scorer, const MiningConfig& cfg) {
  DocSet out;
  std::unordered_map<DocId, bool> memo;
  const Timestamp half = cfg.rec_window_seconds / 2;
  std::vector<Timestamp> issue_times;
  for (const auto& [user, stream] : log.users()) {
    issue_times.clear();
    for (const auto& e : stream)
      if (e.kind == EventKind::QueryIssued && *e.query_text == q) issue_times.push_back(e.timestamp);
    if (issue_times.empty()) continue;

    // doc -> (distance to nearest issue, timestamp)
    std::map<DocId, std::pair<Timestamp, Timestamp>> nearest;
    for (const auto& e : stream) {
      if (e.kind != EventKind::RecConsumed) continue;
      Timestamp best = -1;
      for (Timestamp t : issue_times) {
        Timestamp d = e.timestamp > t ? e.timestamp - t : t - e.timestamp;
        if (d <= half && (best < 0 || d < best)) best = d;
      }
      if (best < 0) continue;
      auto [it, fresh] = nearest.emplace(*e.doc_id, std::make_pair(best, e.timestamp));
      if (!fresh && std::make_pair(best, e.timestamp) < it->second) it->second = {best, e.timestamp};
    }
    std::vector<std::tuple<Timestamp, Timestamp, DocId>> ranked;
    ranked.reserve(nearest.size());
    for (auto& [id, dt] : nearest) ranked.emplace_back(dt.first, dt.second, id);
    std::sort(ranked.begin(), ranked.end());
    if (ranked.size() > cfg.rec_cap_per_user) ranked.resize(cfg.rec_cap_per_user);
    for (auto& [d, t, id] : ranked)
      if (detail::passes(scorer, corpus, q, id, cfg.alpha, memo)) out.insert(id);
  }
  return out;
}

// Search-pipeline samples for q, each doc tagged with its most engaged stage:
// Clicked (watch and like fold in) > Exposed > RankUnexposed > PreRankFiltered.
inline std::map<DocId, SampleSource> mine_search_system(const std::string& q, const LogIndex& log) {
  std::map<DocId, SampleSource> out;
  auto events = log.events();
  for (std::size_t idx : log.query_events(q)) {
    const auto& e = events[idx];
    SampleSource src;
    switch (e.kind) {
      case EventKind::Clicked:
      case EventKind::Watched: src = SampleSource::ClickedInRank; break;
      case EventKind::Exposed: src = SampleSource::ExposedInRank; break;
      case EventKind::RankUnexposed: src = SampleSource::UnexposedInRank; break;
      case EventKind::PreRankFiltered: src = SampleSource::PreRankFiltered; break;
      default: continue;
    }
    auto [it, fresh] = out.emplace(*e.doc_id, src);
    if (!fresh && src < it->second) it->second = src;
  }
  return out;
}

// ---------------------------------------------------------------------------
// World knowledge

// Synthetic documents live above this id so they never collide with platform
// inventory.
inline constexpr DocId kWorldKnowledgeIdBase = DocId{1} << 48;

// Term delimiters accepted in click_query / keywords: U+2225 and U+2016.
inline constexpr std::string_view kTermDelimiter = "\xE2\x88\xA5";
inline constexpr std::string_view kTermDelimiterAlt = "\xE2\x80\x96";

inline std::vector<std::string> split_terms(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    auto b = cur.find_first_not_of(" \t");
    auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
    cur.clear();
  };
  for (std::size_t i = 0; i < s.size();) {
    if (s.substr(i, 3) == kTermDelimiter || s.substr(i, 3) == kTermDelimiterAlt) {
      flush();
      i += 3;
    } else {
      cur.push_back(s[i++]);
    }
  }
  flush();
  return out;
}

struct WorldKnowledgeDocs {
  std::vector<VideoDoc> docs;
  std::size_t skipped = 0;
  std::vector<std::string> skip_reasons;
};

// Parses LLM responses for query q: one JSON object per line with string
// fields ocr_cover, photo_caption, click_query, keywords. Records failing the
// schema are skipped and counted. Accepted records get consecutive ids
// starting at first_id.
inline WorldKnowledgeDocs ingest_world_knowledge(const std::filesystem::path& path, std::string_view q,
                                                 DocId first_id) {
  WorldKnowledgeDocs out;
  for_each_line(path, [&](std::size_t n, std::string_view line) {
    if (line.find_first_not_of(" \t") == std::string_view::npos) return;
    auto skip = [&](const std::string& why) {
      ++out.skipped;
      out.skip_reasons.push_back(std::string(q) + " line " + std::to_string(n) + ": " + why);
    };
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return skip("not a JSON object");
    for (const char* key : {"ocr_cover", "photo_caption", "click_query", "keywords"}) {
      auto it = j.find(key);
      if (it == j.end()) return skip(std::string("missing ") + key);
      if (!it->is_string()) return skip(std::string(key) + " is not a string");
    }
    VideoDoc d;
    d.doc_id = first_id + static_cast<DocId>(out.docs.size());
    d.ocr_cover = j["ocr_cover"].get<std::string>();
    d.photo_caption = j["photo_caption"].get<std::string>();
    d.click_query = join(split_terms(j["click_query"].get<std::string>()), " ");
    d.keyword = join(split_terms(j["keywords"].get<std::string>()), " ");
    out.docs.push_back(std::move(d));
  });
  return out;
}

// One-shot generation prompt: the query, one exemplar rendered in the output
// schema, and the formatting rules.
inline std::string emit_prompt(std::string_view q, const VideoDoc& exemplar, int n) {
  if (n < 1) throw ValidationError("prompt must request at least one record");
  nlohmann::json ex = {{"ocr_cover", exemplar.ocr_cover},
                       {"photo_caption", exemplar.photo_caption},
                       {"click_query", exemplar.click_query},
                       {"keywords", exemplar.keyword}};
  const std::string delim(kTermDelimiter);
  std::ostringstream p;
  p << "You are a video search assistant acting as a retriever over all videos that could exist.\n"
    << "Given a user search query and one relevant example video, write descriptions of " << n
    << (n == 1 ? " other video" : " other videos") << " that a user searching for the query would want to watch.\n"
    << "\n"
    << "Query: " << q << "\n"
    << "\n"
    << "Example video:\n"
    << ex.dump(2) << "\n"
    << "\n"
    << "Requirements:\n"
    << "1. Produce exactly " << n << (n == 1 ? " record" : " records") << ", each with the four fields ocr_cover, photo_caption, click_query, keywords.\n"
    << "2. ocr_cover is the video title; photo_caption is the descriptive text.\n"
    << "3. click_query lists search terms a user might type to find the video, separated by " << delim << ".\n"
    << "4. keywords lists the core thematic tags, separated by " << delim << ".\n"
    << "5. Each record must be relevant to the query and different from the example.\n"
    << "6. Output JSON only: one JSON object per record, one record per line, no other text.\n";
  return p.str();
}

// ---------------------------------------------------------------------------
// Label assignment

struct MinedSets {
  DocSet query_level;
  DocSet system_level;
  std::vector<VideoDoc> world_knowledge;
  std::map<DocId, SampleSource> search;
};

// Keeps the highest-label source per doc; equal labels keep the earlier
// source in SampleSource order.
inline void merge_source(std::map<DocId, SampleSource>& best, DocId id, SampleSource src) {
  auto [it, fresh] = best.emplace(id, src);
  if (fresh) return;
  const int a = label_for(src), b = label_for(it->second);
  if (a > b || (a == b && src < it->second)) it->second = src;
}

// Builds the labeled sample list for q. Positives (labels 3..5) come from all
// mined sets, deduplicated by max label; neg_per_group hard negatives are drawn
// without replacement from the unexposed and pre-rank-filtered pools at
// neg_source_ratio. Docs missing from the corpus are dropped.
inline TrainingGroup assemble_group(const std::string& q, const MinedSets& mined, const CorpusIndex& corpus,
                                    const MiningConfig& cfg, std::uint64_t rng_seed) {
  std::map<DocId, SampleSource> best;
  std::map<DocId, const VideoDoc*> synthetic;
  for (DocId id : mined.query_level) merge_source(best, id, SampleSource::QueryLevelAug);
  for (DocId id : mined.system_level) merge_source(best, id, SampleSource::SystemLevelAug);
  for (const auto& d : mined.world_knowledge) {
    merge_source(best, d.doc_id, SampleSource::WorldKnowledgeAug);
    synthetic.emplace(d.doc_id, &d);
  }
  std::vector<DocId> unexposed, filtered;
  for (auto& [id, src] : mined.search) {
    if (label_for(src) >= label_for(SampleSource::ExposedInRank)) {
      merge_source(best, id, src);
    }
  }
  for (auto& [id, src] : mined.search) {
    if (best.count(id)) continue;
    if (src == SampleSource::UnexposedInRank) unexposed.push_back(id);
    if (src == SampleSource::PreRankFiltered) filtered.push_back(id);
  }

  const double total = cfg.neg_source_ratio.first + cfg.neg_source_ratio.second;
  const auto n_unexposed =
      static_cast<std::size_t>(std::llround(static_cast<double>(cfg.neg_per_group) * cfg.neg_source_ratio.first / total));
  const std::size_t n_filtered = cfg.neg_per_group - std::min(n_unexposed, cfg.neg_per_group);
  Rng rng(rng_seed);
  for (DocId id : rng.sample(unexposed, n_unexposed)) best.emplace(id, SampleSource::UnexposedInRank);
  for (DocId id : rng.sample(filtered, n_filtered)) best.emplace(id, SampleSource::PreRankFiltered);

  TrainingGroup g;
  g.query_text = q;
  g.query_id = query_id_for(q);
  for (auto& [id, src] : best) {
    const VideoDoc* doc = nullptr;
    if (auto it = synthetic.find(id); it != synthetic.end() && src == SampleSource::WorldKnowledgeAug)
      doc = it->second;
    else
      doc = corpus.find(id);
    if (!doc) continue;
    g.samples.push_back({id, label_for(src), src, *doc});
  }
  std::stable_sort(g.samples.begin(), g.samples.end(),
                   [](const LabeledSample& a, const LabeledSample& b) { return a.label > b.label; });
  return g;
}

// Per-source sample counts over a set of groups.
struct MiningStats {
  std::size_t groups = 0;
  std::size_t trainable_groups = 0;
  std::size_t reformulation_pairs = 0;
  std::size_t wk_skipped = 0;
  std::map<SampleSource, std::size_t> per_source;
};

inline MiningStats summarize(std::span<const TrainingGroup> groups) {
  MiningStats st;
  st.groups = groups.size();
  for (auto src : {SampleSource::QueryLevelAug, SampleSource::SystemLevelAug, SampleSource::WorldKnowledgeAug,
                   SampleSource::ClickedInRank, SampleSource::ExposedInRank, SampleSource::UnexposedInRank,
                   SampleSource::PreRankFiltered})
    st.per_source[src] = 0;
  for (const auto& g : groups) {
    if (g.trainable()) ++st.trainable_groups;
    for (const auto& s : g.samples) ++st.per_source[s.source];
  }
  return st;
}

// Returns the path of the world-knowledge response file for a query inside a
// responses directory.
inline std::filesystem::path wk_response_path(const std::filesystem::path& dir, std::string_view q) {
  return dir / ("wk_" + std::to_string(query_id_for(q)) + ".jsonl");
}

inline std::filesystem::path prompt_path(const std::filesystem::path& dir, std::string_view q) {
  return dir / ("prompt_" + std::to_string(query_id_for(q)) + ".txt");
}

// Mines one group per distinct issued query (lexicographic order). The group's
// user_id is the smallest id among users who issued the query.
// World-knowledge responses are read from wk_dir when given and enabled;
// queries without a response file get none.
inline std::vector<TrainingGroup> mine_groups(std::span<const SessionEvent> events, std::span<const VideoDoc> docs,
                                              const RelevanceScorer& scorer, const MiningConfig& cfg,
                                              std::uint64_t seed, const std::filesystem::path& wk_dir = {},
                                              MiningStats* stats = nullptr) {
  cfg.validate();
  LogIndex log(events);
  CorpusIndex corpus(docs);
  std::vector<ReformulationPair> pairs;
  if (cfg.use_query_level) pairs = detect_reformulations(events, scorer, cfg);

  std::unordered_map<std::string, UserId> first_user;
  for (const auto& e : events)
    if (e.kind == EventKind::QueryIssued) {
      auto [it, fresh] = first_user.emplace(*e.query_text, e.user_id);
      if (!fresh) it->second = std::min(it->second, e.user_id);
    }

  std::vector<TrainingGroup> groups;
  std::size_t wk_skipped = 0;
  DocId next_wk = kWorldKnowledgeIdBase;
  for (const auto& q : log.issued_queries()) {
    MinedSets m;
    m.search = mine_search_system(q, log);
    if (cfg.use_query_level) m.query_level = mine_query_level(q, pairs, log, corpus, scorer, cfg);
    if (cfg.use_system_level) m.system_level = mine_system_level(q, log, corpus, scorer, cfg);
    if (cfg.use_world_knowledge && !wk_dir.empty()) {
      auto path = wk_response_path(wk_dir, q);
      if (std::filesystem::exists(path)) {
        auto wk = ingest_world_knowledge(path, q, next_wk);
        next_wk += static_cast<DocId>(wk.docs.size());
        wk_skipped += wk.skipped;
        m.world_knowledge = std::move(wk.docs);
      }
    }
    TrainingGroup g = assemble_group(q, m, corpus, cfg, mix_seed(seed, static_cast<std::uint64_t>(query_id_for(q))));
    g.user_id = first_user[q];
    groups.push_back(std::move(g));
  }
  if (stats) {
    *stats = summarize(groups);
    stats->reformulation_pairs = pairs.size();
    stats->wk_skipped = wk_skipped;
  }
  return groups;
}

}  // namespace crops
