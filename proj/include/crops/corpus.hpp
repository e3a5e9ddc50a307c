#pragma once

// Data model and line-delimited JSON serialization for documents, session
// logs and labeled training groups.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "crops/error.hpp"
#include "crops/io.hpp"
#include "crops/text.hpp"

namespace crops {

using DocId = std::int64_t;
using UserId = std::int64_t;
using QueryId = std::int64_t;
using Timestamp = std::int64_t;

struct VideoDoc {
  DocId doc_id = 0;
  std::string ocr_cover;
  std::string photo_caption;
  std::string keyword;
  std::string click_query;
  std::int64_t play_cnt = 0;
  std::int64_t like_cnt = 0;
  std::int64_t long_view_cnt = 0;
  std::int64_t download_cnt = 0;

  friend bool operator==(const VideoDoc&, const VideoDoc&) = default;
};

// Text used to represent a document to the scorer and the encoder: the four
// text fields in fixed order, empty fields skipped, joined by single spaces.
inline std::string doc_text(const VideoDoc& doc) {
  std::string out;
  for (const std::string* f : {&doc.ocr_cover, &doc.photo_caption, &doc.keyword, &doc.click_query}) {
    if (f->empty()) continue;
    if (!out.empty()) out.push_back(' ');
    out.append(*f);
  }
  return out;
}

enum class EventKind { QueryIssued, Clicked, Watched, Exposed, RankUnexposed, PreRankFiltered, RecConsumed };

inline constexpr std::array<std::string_view, 7> kEventKindNames = {
    "QueryIssued", "Clicked", "Watched", "Exposed", "RankUnexposed", "PreRankFiltered", "RecConsumed"};

inline std::string_view to_string(EventKind k) { return kEventKindNames[static_cast<std::size_t>(k)]; }

inline std::optional<EventKind> parse_event_kind(std::string_view s) {
  for (std::size_t i = 0; i < kEventKindNames.size(); ++i)
    if (kEventKindNames[i] == s) return static_cast<EventKind>(i);
  return std::nullopt;
}

struct SessionEvent {
  UserId user_id = 0;
  Timestamp timestamp = 0;
  EventKind kind = EventKind::QueryIssued;
  // Issued query for QueryIssued; active query context for search-side events.
  std::optional<std::string> query_text;
  std::optional<DocId> doc_id;

  friend bool operator==(const SessionEvent&, const SessionEvent&) = default;
};

// Provenance of a training sample. Declaration order is also the tie-break
// priority when two sources give the same label.
enum class SampleSource {
  QueryLevelAug,
  SystemLevelAug,
  WorldKnowledgeAug,
  ClickedInRank,
  ExposedInRank,
  UnexposedInRank,
  PreRankFiltered,
  InBatch
};

inline constexpr std::array<std::string_view, 8> kSampleSourceNames = {
    "QueryLevelAug",   "SystemLevelAug",  "WorldKnowledgeAug", "ClickedInRank",
    "ExposedInRank",   "UnexposedInRank", "PreRankFiltered",   "InBatch"};

inline std::string_view to_string(SampleSource s) { return kSampleSourceNames[static_cast<std::size_t>(s)]; }

inline std::optional<SampleSource> parse_sample_source(std::string_view s) {
  for (std::size_t i = 0; i < kSampleSourceNames.size(); ++i)
    if (kSampleSourceNames[i] == s) return static_cast<SampleSource>(i);
  return std::nullopt;
}

inline constexpr int kMaxLabel = 5;
inline constexpr int kPositiveLabel = 4;

// Hierarchical label of each sample source.
constexpr int label_for(SampleSource s) noexcept {
  switch (s) {
    case SampleSource::QueryLevelAug: return 5;
    case SampleSource::SystemLevelAug:
    case SampleSource::WorldKnowledgeAug:
    case SampleSource::ClickedInRank: return 4;
    case SampleSource::ExposedInRank: return 3;
    case SampleSource::UnexposedInRank: return 2;
    case SampleSource::PreRankFiltered: return 1;
    case SampleSource::InBatch: return 0;
  }
  return 0;
}

// Canonical source for a bare label, used when a group file carries labels
// without provenance.
constexpr SampleSource canonical_source(int label) noexcept {
  switch (label) {
    case 5: return SampleSource::QueryLevelAug;
    case 4: return SampleSource::ClickedInRank;
    case 3: return SampleSource::ExposedInRank;
    case 2: return SampleSource::UnexposedInRank;
    case 1: return SampleSource::PreRankFiltered;
    default: return SampleSource::InBatch;
  }
}

struct LabeledSample {
  DocId doc_id = 0;
  int label = 0;
  SampleSource source = SampleSource::InBatch;
  VideoDoc content;

  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

struct TrainingGroup {
  QueryId query_id = 0;
  UserId user_id = 0;
  std::string query_text;
  std::vector<LabeledSample> samples;

  // Groups without a label >= 4 sample are stored but never batched.
  bool trainable() const {
    return std::any_of(samples.begin(), samples.end(),
                       [](const LabeledSample& s) { return s.label >= kPositiveLabel; });
  }

  friend bool operator==(const TrainingGroup&, const TrainingGroup&) = default;
};

// Stable id for a query string.
inline QueryId query_id_for(std::string_view query) {
  return static_cast<QueryId>(fnv1a64(query) & 0x0000'7fff'ffff'ffffULL);
}

// Read-only lookup from doc_id into a document collection.
class CorpusIndex {
 public:
  CorpusIndex() = default;
  explicit CorpusIndex(std::span<const VideoDoc> docs) {
    for (const auto& d : docs) by_id_.emplace(d.doc_id, &d);
  }

  const VideoDoc* find(DocId id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : it->second;
  }

  std::size_t size() const noexcept { return by_id_.size(); }

 private:
  std::unordered_map<DocId, const VideoDoc*> by_id_;
};

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

using nlohmann::json;

inline const json& require(const json& obj, const char* key, std::string_view what) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(std::string(what) + ": missing field '" + key + "'");
  return *it;
}

inline std::string require_string(const json& obj, const char* key, std::string_view what) {
  const json& v = require(obj, key, what);
  if (!v.is_string()) throw ValidationError(std::string(what) + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

inline std::int64_t require_int(const json& obj, const char* key, std::string_view what) {
  const json& v = require(obj, key, what);
  if (!v.is_number_integer()) throw ValidationError(std::string(what) + ": field '" + key + "' must be an integer");
  return v.get<std::int64_t>();
}

inline std::int64_t require_count(const json& obj, const char* key, std::string_view what) {
  std::int64_t v = require_int(obj, key, what);
  if (v < 0) throw ValidationError(std::string(what) + ": field '" + key + "' must be non-negative");
  return v;
}

inline json parse_line(std::size_t line_no, std::string_view line) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ParseError(line_no, "malformed record");
  return j;
}

}  // namespace detail

inline nlohmann::json content_to_json(const VideoDoc& d) {
  return {{"ocr_cover", d.ocr_cover},         {"photo_caption", d.photo_caption},
          {"keyword", d.keyword},             {"click_query", d.click_query},
          {"play_cnt", d.play_cnt},           {"like_cnt", d.like_cnt},
          {"long_view_cnt", d.long_view_cnt}, {"download_cnt", d.download_cnt}};
}

inline VideoDoc content_from_json(const nlohmann::json& j, DocId id, std::string_view what) {
  using namespace detail;
  if (!j.is_object()) throw ValidationError(std::string(what) + ": photo_content must be an object");
  VideoDoc d;
  d.doc_id = id;
  d.ocr_cover = require_string(j, "ocr_cover", what);
  d.photo_caption = require_string(j, "photo_caption", what);
  d.keyword = require_string(j, "keyword", what);
  d.click_query = require_string(j, "click_query", what);
  d.play_cnt = require_count(j, "play_cnt", what);
  d.like_cnt = require_count(j, "like_cnt", what);
  d.long_view_cnt = require_count(j, "long_view_cnt", what);
  d.download_cnt = require_count(j, "download_cnt", what);
  return d;
}

inline nlohmann::json to_json(const VideoDoc& d) {
  auto j = content_to_json(d);
  j["doc_id"] = d.doc_id;
  return j;
}

inline nlohmann::json to_json(const SessionEvent& e) {
  nlohmann::json j = {{"user_id", e.user_id}, {"timestamp", e.timestamp}, {"kind", to_string(e.kind)}};
  if (e.query_text) j["query_text"] = *e.query_text;
  if (e.doc_id) j["doc_id"] = *e.doc_id;
  return j;
}

inline nlohmann::json to_json(const TrainingGroup& g) {
  nlohmann::json photos = nlohmann::json::array();
  for (const auto& s : g.samples) {
    photos.push_back({{"photo_id", s.doc_id},
                      {"photo_content", content_to_json(s.content)},
                      {"hierarchical_label", s.label},
                      {"source", to_string(s.source)}});
  }
  return {{"user_id", g.user_id}, {"query_id", g.query_id}, {"query", g.query_text}, {"photo_list", std::move(photos)}};
}

inline std::string dump_line(const nlohmann::json& j) { return j.dump() + "\n"; }

// ---------------------------------------------------------------------------
// Session logs

inline SessionEvent parse_session_event(std::size_t line_no, std::string_view line) {
  using namespace detail;
  json j = parse_line(line_no, line);
  SessionEvent e;
  try {
    e.user_id = require_int(j, "user_id", "event");
    e.timestamp = require_int(j, "timestamp", "event");
    std::string kind = require_string(j, "kind", "event");
    auto k = parse_event_kind(kind);
    if (!k) throw ValidationError("unknown event kind '" + kind + "'");
    e.kind = *k;
    if (j.contains("query_text")) e.query_text = require_string(j, "query_text", "event");
    if (j.contains("doc_id")) e.doc_id = require_int(j, "doc_id", "event");
  } catch (const ParseError&) {
    throw;
  } catch (const ValidationError& err) {
    throw ParseError(line_no, err.what());
  }
  if (e.kind == EventKind::QueryIssued) {
    if (!e.query_text) throw ParseError(line_no, "QueryIssued without query_text");
    if (e.doc_id) throw ParseError(line_no, "QueryIssued must not carry doc_id");
  } else if (!e.doc_id) {
    throw ParseError(line_no, std::string(to_string(e.kind)) + " without doc_id");
  }
  return e;
}

// Orders events by (user_id, timestamp); ties keep their current order.
inline void sort_by_user(std::vector<SessionEvent>& events) {
  std::stable_sort(events.begin(), events.end(), [](const SessionEvent& a, const SessionEvent& b) {
    if (a.user_id != b.user_id) return a.user_id < b.user_id;
    return a.timestamp < b.timestamp;
  });
}

inline std::vector<SessionEvent> read_session_log(const std::filesystem::path& path) {
  std::vector<SessionEvent> events;
  for_each_line(path, [&](std::size_t n, std::string_view line) {
    if (line.find_first_not_of(" \t") == std::string_view::npos) return;
    events.push_back(parse_session_event(n, line));
  });
  sort_by_user(events);
  return events;
}

inline void write_session_log(const std::filesystem::path& path, const std::vector<SessionEvent>& events) {
  write_file_atomic(path, [&](std::ostream& out) {
    for (const auto& e : events) out << dump_line(to_json(e));
  });
}

// ---------------------------------------------------------------------------
// Corpus store

inline std::vector<VideoDoc> read_corpus(const std::filesystem::path& path) {
  std::vector<VideoDoc> docs;
  std::unordered_set<DocId> seen;
  for_each_line(path, [&](std::size_t n, std::string_view line) {
    if (line.find_first_not_of(" \t") == std::string_view::npos) return;
    auto j = detail::parse_line(n, line);
    try {
      VideoDoc d = content_from_json(j, detail::require_int(j, "doc_id", "doc"), "doc");
      if (!seen.insert(d.doc_id).second) throw ValidationError("duplicate doc_id " + std::to_string(d.doc_id));
      docs.push_back(std::move(d));
    } catch (const ParseError&) {
      throw;
    } catch (const ValidationError& err) {
      throw ParseError(n, err.what());
    }
  });
  return docs;
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<VideoDoc>& docs) {
  write_file_atomic(path, [&](std::ostream& out) {
    for (const auto& d : docs) out << dump_line(to_json(d));
  });
}

// ---------------------------------------------------------------------------
// Training groups (one record per query, photo_list of labeled samples)

inline TrainingGroup parse_training_group(std::size_t line_no, std::string_view line) {
  using namespace detail;
  json j = parse_line(line_no, line);
  TrainingGroup g;
  try {
    g.query_text = require_string(j, "query", "group");
    g.user_id = j.contains("user_id") ? require_int(j, "user_id", "group") : 0;
    g.query_id = j.contains("query_id") ? require_int(j, "query_id", "group") : query_id_for(g.query_text);
    const json& photos = require(j, "photo_list", "group");
    if (!photos.is_array()) throw ValidationError("group: photo_list must be an array");
    std::unordered_set<DocId> seen;
    for (const json& p : photos) {
      if (!p.is_object()) throw ValidationError("group: photo_list entries must be objects");
      LabeledSample s;
      s.doc_id = require_int(p, "photo_id", "photo");
      const std::string who = "photo " + std::to_string(s.doc_id);
      std::int64_t label = require_int(p, "hierarchical_label", who);
      if (label < 0 || label > kMaxLabel)
        throw ValidationError(who + ": hierarchical_label " + std::to_string(label) + " outside [0,5]");
      s.label = static_cast<int>(label);
      s.content = content_from_json(require(p, "photo_content", who), s.doc_id, who);
      if (p.contains("source")) {
        std::string src = require_string(p, "source", who);
        auto parsed = parse_sample_source(src);
        if (!parsed) throw ValidationError(who + ": unknown source '" + src + "'");
        if (label_for(*parsed) != s.label)
          throw ValidationError(who + ": label " + std::to_string(s.label) + " does not match source " + src);
        s.source = *parsed;
      } else {
        s.source = canonical_source(s.label);
      }
      if (!seen.insert(s.doc_id).second) throw ValidationError("group: duplicate photo_id " + std::to_string(s.doc_id));
      g.samples.push_back(std::move(s));
    }
  } catch (const ParseError&) {
    throw;
  } catch (const ValidationError& err) {
    throw ParseError(line_no, err.what());
  }
  return g;
}

inline std::vector<TrainingGroup> read_training_groups(const std::filesystem::path& path) {
  std::vector<TrainingGroup> groups;
  for_each_line(path, [&](std::size_t n, std::string_view line) {
    if (line.find_first_not_of(" \t") == std::string_view::npos) return;
    groups.push_back(parse_training_group(n, line));
  });
  return groups;
}

inline void write_training_groups(const std::filesystem::path& path, const std::vector<TrainingGroup>& groups) {
  write_file_atomic(path, [&](std::ostream& out) {
    for (const auto& g : groups) out << dump_line(to_json(g));
  });
}

}  // namespace crops
