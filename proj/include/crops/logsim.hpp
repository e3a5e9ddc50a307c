#pragma once

// Synthetic world and session-log generator. Each topic has several intents;
// intent 0 is dominant and is the only one an exposure-biased ranker shows
// for the bare topic query. Users who want another intent have to reformulate
// or stumble on it in the recommendation feed, which is exactly the signal
// cross-domain mining recovers.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crops/corpus.hpp"
#include "crops/engine.hpp"
#include "crops/error.hpp"
#include "crops/io.hpp"
#include "crops/random.hpp"
#include "crops/text.hpp"

namespace crops {

struct WorldSpec {
  std::uint64_t seed = 0;
  int n_topics = 20;
  int intents_per_topic = 3;
  int docs_per_intent = 40;
  int n_users = 500;
  int sessions_per_user = 10;
  double reformulation_prob = 0.3;
  int rec_consume_rate = 5;
  bool exposure_bias = true;

  // Popular head of each intent: the docs a ranker actually surfaces.
  int exposure_head = 10;
  int exposed_per_query = 6;
  int unexposed_per_query = 8;
  int prefiltered_per_query = 8;
  // Share of users whose interest in a topic is the dominant intent.
  double dominant_share = 0.5;
  // Share of feed items drawn from the user's interest head (rest uniform).
  double rec_interest_share = 0.6;

  void validate() const {
    for (int v : {n_topics, intents_per_topic, docs_per_intent, n_users, sessions_per_user, exposure_head,
                  exposed_per_query})
      if (v < 1) throw ValidationError("world counts must be positive");
    if (rec_consume_rate < 0 || unexposed_per_query < 0 || prefiltered_per_query < 0)
      throw ValidationError("world counts must be non-negative");
    for (double p : {reformulation_prob, dominant_share, rec_interest_share})
      if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("world probabilities must lie in [0,1]");
  }
};

struct DocIntent {
  DocId doc_id = 0;
  int topic = 0;
  int intent = 0;
  bool head = false;

  bool dominant() const { return intent == 0; }
  friend bool operator==(const DocIntent&, const DocIntent&) = default;
};

struct World {
  std::vector<VideoDoc> docs;
  std::vector<DocIntent> intents;  // parallel to docs
  int n_topics = 0;
  int intents_per_topic = 0;

  // Doc ids of (topic, intent), in generation order; the head comes first.
  std::vector<DocId> docs_of(int topic, int intent) const {
    std::vector<DocId> out;
    for (const auto& d : intents)
      if (d.topic == topic && d.intent == intent) out.push_back(d.doc_id);
    return out;
  }
  std::vector<DocId> head_of(int topic, int intent) const {
    std::vector<DocId> out;
    for (const auto& d : intents)
      if (d.topic == topic && d.intent == intent && d.head) out.push_back(d.doc_id);
    return out;
  }
};

inline constexpr DocId kFirstDocId = 100000;
inline constexpr Timestamp kEpochStart = 1'700'000'000;
inline constexpr Timestamp kSessionSpacing = 14400;

inline std::string topic_token(int t, int k) { return "tp" + std::to_string(t) + "w" + std::to_string(k); }
inline std::string intent_token(int t, int i, int k) {
  return "tp" + std::to_string(t) + "i" + std::to_string(i) + "w" + std::to_string(k);
}

// Ambiguous head query of a topic.
inline std::string topic_query(int t) { return topic_token(t, 0) + " " + topic_token(t, 1); }

// Refined query: the topic query plus the intent's anchor token.
inline std::string reform_query(int t, int i) { return topic_query(t) + " " + intent_token(t, i, 0); }

inline World generate_world(const WorldSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, 1));
  World w;
  w.n_topics = spec.n_topics;
  w.intents_per_topic = spec.intents_per_topic;
  DocId next = kFirstDocId;
  for (int t = 0; t < spec.n_topics; ++t) {
    const std::string a = topic_token(t, 0), b = topic_token(t, 1);
    for (int i = 0; i < spec.intents_per_topic; ++i) {
      const std::string anchor = intent_token(t, i, 0);
      auto extra_intent = [&] { return intent_token(t, i, 1 + static_cast<int>(rng.below(3))); };
      for (int k = 0; k < spec.docs_per_intent; ++k) {
        VideoDoc d;
        d.doc_id = next++;
        const std::string u = "v" + std::to_string(d.doc_id);
        d.ocr_cover = join(std::vector<std::string>{a, b, extra_intent(), u + "a"}, " ");
        d.photo_caption = join(
            std::vector<std::string>{a, b, topic_token(t, 2 + static_cast<int>(rng.below(2))), extra_intent(),
                                     extra_intent(), u + "b"},
            " ");
        d.keyword = a + " " + b + " " + anchor;
        d.click_query = a + " " + b + " " + anchor;
        const bool head = k < spec.exposure_head;
        const auto scale = static_cast<std::int64_t>(head ? 10000 : 300);
        d.play_cnt = scale + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(scale)));
        d.like_cnt = d.play_cnt / 20;
        d.long_view_cnt = d.play_cnt / 4;
        d.download_cnt = d.play_cnt / 100;
        w.intents.push_back({d.doc_id, t, i, head});
        w.docs.push_back(std::move(d));
      }
    }
  }
  return w;
}

// Per-user interest intent for every topic; shared by all log streams of a
// world so held-out logs describe the same population.
inline std::vector<std::vector<int>> user_interests(const WorldSpec& spec) {
  Rng rng(mix_seed(spec.seed, 2));
  std::vector<std::vector<int>> out(static_cast<std::size_t>(spec.n_users));
  for (auto& row : out) {
    row.resize(static_cast<std::size_t>(spec.n_topics));
    for (auto& i : row) {
      if (spec.intents_per_topic == 1 || rng.bernoulli(spec.dominant_share))
        i = 0;
      else
        i = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.intents_per_topic - 1)));
    }
  }
  return out;
}

// Simulates one log stream. Different streams of the same world (e.g. 0 for
// training, 1 for held-out evaluation) are independent draws of the same
// population. Events come back sorted by (user, timestamp).
inline std::vector<SessionEvent> simulate_sessions(const World& world, const WorldSpec& spec,
                                                   std::uint64_t stream = 0) {
  spec.validate();
  const auto interests = user_interests(spec);
  Rng rng(mix_seed(spec.seed, 100 + stream));
  std::vector<SessionEvent> log;

  std::vector<std::vector<DocId>> heads, topic_docs(static_cast<std::size_t>(spec.n_topics));
  for (int t = 0; t < spec.n_topics; ++t)
    for (int i = 0; i < spec.intents_per_topic; ++i) {
      heads.push_back(world.head_of(t, i));
      for (auto id : world.docs_of(t, i)) topic_docs[static_cast<std::size_t>(t)].push_back(id);
    }
  auto head = [&](int t, int i) -> const std::vector<DocId>& {
    return heads[static_cast<std::size_t>(t * spec.intents_per_topic + i)];
  };
  std::vector<DocId> all_ids;
  for (const auto& d : world.docs) all_ids.push_back(d.doc_id);

  auto emit = [&](UserId u, Timestamp ts, EventKind k, std::optional<std::string> q, std::optional<DocId> d) {
    log.push_back({u, ts, k, std::move(q), d});
  };
  auto consume = [&](UserId u, Timestamp ts, const std::string& q, const std::vector<DocId>& shown, std::size_t n) {
    for (auto id : rng.sample(shown, n)) {
      ts += 5 + static_cast<Timestamp>(rng.below(10));
      emit(u, ts, EventKind::Clicked, q, id);
      emit(u, ts + 15, EventKind::Watched, q, id);
    }
  };

  for (int u = 0; u < spec.n_users; ++u) {
    const UserId uid = u + 1;
    for (int s = 0; s < spec.sessions_per_user; ++s) {
      const Timestamp t0 = kEpochStart + static_cast<Timestamp>(u * spec.sessions_per_user + s) * kSessionSpacing +
                           static_cast<Timestamp>(rng.below(600));
      const int topic = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_topics)));
      const int want = interests[static_cast<std::size_t>(u)][static_cast<std::size_t>(topic)];
      const std::string q = topic_query(topic);
      emit(uid, t0, EventKind::QueryIssued, q, std::nullopt);

      // Ranker: dominant head only when biased, heads of every intent otherwise.
      std::vector<DocId> candidates;
      for (int i = 0; i < (spec.exposure_bias ? 1 : spec.intents_per_topic); ++i)
        for (auto id : head(topic, i)) candidates.push_back(id);
      auto shown = rng.sample(candidates, static_cast<std::size_t>(spec.exposed_per_query));
      std::sort(shown.begin(), shown.end());
      for (auto id : shown) emit(uid, t0 + 1, EventKind::Exposed, q, id);

      std::vector<DocId> rest;
      for (auto id : topic_docs[static_cast<std::size_t>(topic)])
        if (!std::binary_search(shown.begin(), shown.end(), id)) rest.push_back(id);
      for (auto id : rng.sample(rest, static_cast<std::size_t>(spec.unexposed_per_query)))
        emit(uid, t0 + 1, EventKind::RankUnexposed, q, id);
      std::vector<DocId> far;
      for (const auto& di : world.intents)
        if (di.topic != topic) far.push_back(di.doc_id);
      for (auto id : rng.sample(far, static_cast<std::size_t>(spec.prefiltered_per_query)))
        emit(uid, t0 + 1, EventKind::PreRankFiltered, q, id);

      const bool satisfied = want == 0 || !spec.exposure_bias;
      if (satisfied)
        consume(uid, t0 + 1, q, shown, 1 + rng.below(2));
      else if (rng.bernoulli(0.3))
        consume(uid, t0 + 1, q, shown, 1);

      if (rng.bernoulli(spec.reformulation_prob)) {
        const Timestamp t1 = t0 + 20 + static_cast<Timestamp>(rng.below(61));
        const std::string rq = reform_query(topic, want);
        emit(uid, t1, EventKind::QueryIssued, rq, std::nullopt);
        auto rshown = rng.sample(head(topic, want), static_cast<std::size_t>(spec.exposed_per_query));
        std::sort(rshown.begin(), rshown.end());
        for (auto id : rshown) emit(uid, t1 + 1, EventKind::Exposed, rq, id);
        consume(uid, t1 + 1, rq, rshown, 1 + rng.below(3));
      }

      for (int r = 0; r < spec.rec_consume_rate; ++r) {
        const Timestamp tr = t0 - 1500 + static_cast<Timestamp>(rng.below(3001));
        DocId id;
        if (rng.bernoulli(spec.rec_interest_share)) {
          const auto& h = head(topic, want);
          id = h[rng.below(h.size())];
        } else {
          id = all_ids[rng.below(all_ids.size())];
        }
        emit(uid, tr, EventKind::RecConsumed, std::nullopt, id);
      }
    }
  }
  sort_by_user(log);
  return log;
}

inline void write_intent_map(const std::filesystem::path& path, const World& w) {
  std::string body;
  for (const auto& d : w.intents)
    body += dump_line({{"photo_id", d.doc_id}, {"topic", d.topic}, {"intent", d.intent},
                       {"dominant", d.dominant()}, {"head", d.head}});
  write_text_atomic(path, body);
}

inline std::vector<DocIntent> read_intent_map(const std::filesystem::path& path) {
  std::vector<DocIntent> out;
  for_each_line(path, [&](std::size_t n, std::string_view line) {
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) return;
    auto j = detail::parse_line(n, line);
    try {
      out.push_back({detail::require_int(j, "photo_id", "intent map"),
                     static_cast<int>(detail::require_int(j, "topic", "intent map")),
                     static_cast<int>(detail::require_int(j, "intent", "intent map")),
                     j.value("head", false)});
    } catch (const ParseError&) {
      throw;
    } catch (const ValidationError& e) {
      throw ParseError(n, e.what());
    }
  });
  return out;
}

// Deterministic stand-in for LLM output: for every topic query, `per_intent`
// schema-valid records per non-dominant intent, written where mine_groups
// looks for responses. Returns the number of files written.
inline std::size_t write_synthetic_world_knowledge(const std::filesystem::path& dir, const WorldSpec& spec,
                                                   int per_intent = 4) {
  spec.validate();
  std::filesystem::create_directories(dir);
  const std::string delim(kTermDelimiter);
  std::size_t files = 0;
  for (int t = 0; t < spec.n_topics; ++t) {
    const std::string q = topic_query(t);
    std::string body;
    for (int i = 1; i < spec.intents_per_topic; ++i)
      for (int k = 0; k < per_intent; ++k) {
        const std::string anchor = intent_token(t, i, 0), x = intent_token(t, i, 1 + k % 3);
        nlohmann::json rec = {
            {"ocr_cover", q + " " + x},
            {"photo_caption", q + " " + anchor + " " + intent_token(t, i, 1 + (k + 1) % 3)},
            {"click_query", q + delim + q + " " + anchor},
            {"keywords", anchor + delim + x},
        };
        body += dump_line(rec);
      }
    if (body.empty()) continue;
    write_text_atomic(wk_response_path(dir, q), body);
    ++files;
  }
  return files;
}

}  // namespace crops
