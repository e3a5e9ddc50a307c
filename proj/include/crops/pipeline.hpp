#pragma once

// Pipeline configuration (flat `section.key = value` text) and the stage
// functions behind each CLI subcommand. Stages talk to each other only through
// files named in the config.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "crops/corpus.hpp"
#include "crops/discriminator.hpp"
#include "crops/encoder.hpp"
#include "crops/engine.hpp"
#include "crops/error.hpp"
#include "crops/eval.hpp"
#include "crops/io.hpp"
#include "crops/logsim.hpp"
#include "crops/text.hpp"
#include "crops/trainer.hpp"

namespace crops {

// ---------------------------------------------------------------------------
// Key-value config text

using KeyValues = std::map<std::string, std::string>;

namespace detail {
inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}
}  // namespace detail

// One `key = value` per line; '#' starts a comment; blank lines ignored.
// Keys must be unique.
inline KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(line_no, "expected key = value");
    std::string key(detail::trim(line.substr(0, eq)));
    std::string value(detail::trim(line.substr(eq + 1)));
    if (key.empty()) throw ParseError(line_no, "empty key");
    if (!kv.emplace(key, value).second) throw ParseError(line_no, "duplicate key '" + key + "'");
  }
  return kv;
}

inline KeyValues read_key_values(const std::filesystem::path& path) {
  try {
    return parse_key_values(read_file(path));
  } catch (const ParseError& e) {
    throw ValidationError(path.string() + ":" + std::to_string(e.line()) + ": " + e.what());
  }
}

// "key=value" override as given on the command line.
inline std::pair<std::string, std::string> parse_override(std::string_view s) {
  const auto eq = s.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ValidationError("override must be key=value: " + std::string(s));
  return {std::string(detail::trim(s.substr(0, eq))), std::string(detail::trim(s.substr(eq + 1)))};
}

// ---------------------------------------------------------------------------
// Pipeline config

struct PathsConfig {
  std::filesystem::path corpus = "work/corpus.jsonl";
  std::filesystem::path log = "work/log.jsonl";
  std::filesystem::path heldout_log = "work/heldout_log.jsonl";
  std::filesystem::path intent_map = "work/intent_map.jsonl";
  std::filesystem::path groups = "work/groups.jsonl";
  std::filesystem::path prompts_dir = "work/prompts";
  std::filesystem::path wk_dir = "work/wk";
  std::filesystem::path checkpoint = "work/model.ckpt";
  std::filesystem::path curve = "work/curve.csv";
  std::filesystem::path report = "work/report.json";
  std::filesystem::path splits_dir;  // optional: dump eval splits here
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  PathsConfig paths;
  WorldSpec world;
  int wk_records = 4;  // records per prompt / per synthetic intent
  MiningConfig mining;
  TrainConfig train;
  std::vector<std::size_t> eval_ks{10, 50, 100};
  std::size_t ndcg_k = 4;
  std::string label;

  void validate() const {
    world.validate();
    mining.validate();
    train.validate();
    if (wk_records < 1) throw ValidationError("mining.wk_records must be positive");
    if (eval_ks.empty()) throw ValidationError("eval.ks must list at least one K");
    for (auto k : eval_ks)
      if (k == 0) throw ValidationError("eval.ks entries must be at least 1");
    if (ndcg_k == 0) throw ValidationError("eval.ndcg_k must be at least 1");
  }
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ValidationError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("bad value for " + key + ": '" + v + "'");
}

}  // namespace detail

// Builds a config from key-values. `seed` is mandatory; world.seed and
// train.seed default to it. Unknown keys are rejected.
inline PipelineConfig make_config(const KeyValues& kv) {
  using detail::parse_bool;
  using detail::parse_number;
  PipelineConfig c;
  auto seed_it = kv.find("seed");
  if (seed_it == kv.end()) throw ValidationError("config must set seed");
  c.seed = parse_number<std::uint64_t>("seed", seed_it->second);
  c.world.seed = c.seed;
  c.train.seed = c.seed;

  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto path = [](std::filesystem::path& p) -> Setter { return [&p](auto&, auto& v) { p = v; }; };
  auto i64 = [](auto& x) -> Setter {
    return [&x](auto& k, auto& v) { x = static_cast<std::remove_reference_t<decltype(x)>>(parse_number<std::int64_t>(k, v)); };
  };
  auto u64 = [](auto& x) -> Setter {
    return [&x](auto& k, auto& v) { x = static_cast<std::remove_reference_t<decltype(x)>>(parse_number<std::uint64_t>(k, v)); };
  };
  auto real = [](double& x) -> Setter { return [&x](auto& k, auto& v) { x = parse_number<double>(k, v); }; };
  auto flag = [](bool& x) -> Setter { return [&x](auto& k, auto& v) { x = parse_bool(k, v); }; };

  const std::map<std::string, Setter> setters = {
      {"seed", [](auto&, auto&) {}},
      {"label", [&](auto&, auto& v) { c.label = v; }},
      {"paths.corpus", path(c.paths.corpus)},
      {"paths.log", path(c.paths.log)},
      {"paths.heldout_log", path(c.paths.heldout_log)},
      {"paths.intent_map", path(c.paths.intent_map)},
      {"paths.groups", path(c.paths.groups)},
      {"paths.prompts_dir", path(c.paths.prompts_dir)},
      {"paths.wk_dir", path(c.paths.wk_dir)},
      {"paths.checkpoint", path(c.paths.checkpoint)},
      {"paths.curve", path(c.paths.curve)},
      {"paths.report", path(c.paths.report)},
      {"paths.splits_dir", path(c.paths.splits_dir)},
      {"world.seed", u64(c.world.seed)},
      {"world.n_topics", i64(c.world.n_topics)},
      {"world.intents_per_topic", i64(c.world.intents_per_topic)},
      {"world.docs_per_intent", i64(c.world.docs_per_intent)},
      {"world.n_users", i64(c.world.n_users)},
      {"world.sessions_per_user", i64(c.world.sessions_per_user)},
      {"world.reformulation_prob", real(c.world.reformulation_prob)},
      {"world.rec_consume_rate", i64(c.world.rec_consume_rate)},
      {"world.exposure_bias", flag(c.world.exposure_bias)},
      {"world.exposure_head", i64(c.world.exposure_head)},
      {"world.exposed_per_query", i64(c.world.exposed_per_query)},
      {"world.unexposed_per_query", i64(c.world.unexposed_per_query)},
      {"world.prefiltered_per_query", i64(c.world.prefiltered_per_query)},
      {"world.dominant_share", real(c.world.dominant_share)},
      {"world.rec_interest_share", real(c.world.rec_interest_share)},
      {"mining.alpha", real(c.mining.alpha)},
      {"mining.query_sim_threshold", real(c.mining.query_sim_threshold)},
      {"mining.reform_window_seconds", i64(c.mining.reform_window_seconds)},
      {"mining.rec_window_seconds", i64(c.mining.rec_window_seconds)},
      {"mining.rec_cap_per_user", u64(c.mining.rec_cap_per_user)},
      {"mining.neg_per_group", u64(c.mining.neg_per_group)},
      {"mining.neg_ratio_unexposed", real(c.mining.neg_source_ratio.first)},
      {"mining.neg_ratio_prerank", real(c.mining.neg_source_ratio.second)},
      {"mining.use_query_level", flag(c.mining.use_query_level)},
      {"mining.use_system_level", flag(c.mining.use_system_level)},
      {"mining.use_world_knowledge", flag(c.mining.use_world_knowledge)},
      {"mining.wk_records", i64(c.wk_records)},
      {"encoder.vocab_size", u64(c.train.dims.vocab_size)},
      {"encoder.embed_dim", u64(c.train.dims.embed_dim)},
      {"encoder.out_dim", u64(c.train.dims.out_dim)},
      {"encoder.max_len", u64(c.train.max_len)},
      {"train.seed", u64(c.train.seed)},
      {"train.epochs", u64(c.train.epochs)},
      {"train.batch_groups", u64(c.train.batch_groups)},
      {"train.max_group_docs", u64(c.train.max_group_docs)},
      {"train.loss",
       [&](auto& k, auto& v) {
         auto l = parse_loss_variant(v);
         if (!l) throw ValidationError("bad value for " + k + ": '" + v + "'");
         c.train.loss = *l;
       }},
      {"train.lr", real(c.train.adam.lr)},
      {"train.weight_decay", real(c.train.adam.weight_decay)},
      {"train.beta1", real(c.train.adam.beta1)},
      {"train.beta2", real(c.train.adam.beta2)},
      {"train.eps", real(c.train.adam.eps)},
      {"eval.ks",
       [&](auto& k, auto& v) {
         c.eval_ks.clear();
         std::string item;
         std::istringstream in(v);
         while (std::getline(in, item, ','))
           c.eval_ks.push_back(parse_number<std::size_t>(k, std::string(detail::trim(item))));
       }},
      {"eval.ndcg_k", u64(c.ndcg_k)},
  };
  for (auto& [k, v] : kv) {
    auto it = setters.find(k);
    if (it == setters.end()) throw ValidationError("unknown config key '" + k + "'");
    it->second(k, v);
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Stages

struct SimulateSummary {
  std::size_t docs = 0;
  std::size_t events = 0;
  std::size_t heldout_events = 0;
  std::size_t wk_files = 0;
};

// World, intent map, training log (stream 0), held-out log (stream 1) and the
// synthetic world-knowledge responses.
inline SimulateSummary run_simulate(const PipelineConfig& c) {
  const World w = generate_world(c.world);
  const auto log = simulate_sessions(w, c.world, 0);
  const auto heldout = simulate_sessions(w, c.world, 1);
  write_corpus(c.paths.corpus, w.docs);
  write_intent_map(c.paths.intent_map, w);
  write_session_log(c.paths.log, log);
  write_session_log(c.paths.heldout_log, heldout);
  SimulateSummary s{w.docs.size(), log.size(), heldout.size(), 0};
  if (!c.paths.wk_dir.empty()) s.wk_files = write_synthetic_world_knowledge(c.paths.wk_dir, c.world, c.wk_records);
  return s;
}

inline MiningStats run_mine(const PipelineConfig& c) {
  const auto docs = read_corpus(c.paths.corpus);
  const auto log = read_session_log(c.paths.log);
  const auto scorer = LexicalScorer::fit(docs);
  MiningStats stats;
  auto groups = mine_groups(log, docs, scorer, c.mining, c.seed, c.paths.wk_dir, &stats);
  write_training_groups(c.paths.groups, groups);
  return stats;
}

// Writes one prompt per group, using the group's highest-label sample as the
// exemplar; groups without samples are skipped. Returns the number written.
inline std::size_t run_prompts(const PipelineConfig& c) {
  const auto groups = read_training_groups(c.paths.groups);
  std::filesystem::create_directories(c.paths.prompts_dir);
  std::size_t n = 0;
  for (const auto& g : groups) {
    if (g.samples.empty()) continue;
    write_text_atomic(prompt_path(c.paths.prompts_dir, g.query_text),
                      emit_prompt(g.query_text, g.samples.front().content, c.wk_records));
    ++n;
  }
  return n;
}

struct IngestSummary {
  std::size_t added = 0;
  std::size_t skipped = 0;
  std::vector<std::string> skip_reasons;
};

// Replaces each group's world-knowledge samples with those parsed from its
// response file (if any). Ids are assigned in group order from the reserved
// range, as mine_groups does, so rerunning is idempotent.
inline IngestSummary run_ingest_wk(const PipelineConfig& c) {
  auto groups = read_training_groups(c.paths.groups);
  IngestSummary s;
  DocId next = kWorldKnowledgeIdBase;
  for (auto& g : groups) {
    std::erase_if(g.samples, [](const LabeledSample& x) { return x.source == SampleSource::WorldKnowledgeAug; });
    auto path = wk_response_path(c.paths.wk_dir, g.query_text);
    if (!std::filesystem::exists(path)) continue;
    auto wk = ingest_world_knowledge(path, g.query_text, next);
    next += static_cast<DocId>(wk.docs.size());
    s.skipped += wk.skipped;
    for (auto& r : wk.skip_reasons) s.skip_reasons.push_back(std::move(r));
    for (auto& d : wk.docs) {
      g.samples.push_back({d.doc_id, label_for(SampleSource::WorldKnowledgeAug), SampleSource::WorldKnowledgeAug, d});
      ++s.added;
    }
    std::stable_sort(g.samples.begin(), g.samples.end(),
                     [](const LabeledSample& a, const LabeledSample& b) { return a.label > b.label; });
  }
  write_training_groups(c.paths.groups, groups);
  return s;
}

inline TrainResult run_train(const PipelineConfig& c) {
  const auto groups = read_training_groups(c.paths.groups);
  auto result = train(groups, c.train);
  write_checkpoint(c.paths.checkpoint, result.state);
  write_curve_csv(c.paths.curve, result.curve);
  return result;
}

// Content hash of a file, as 16 hex digits.
inline std::string file_digest(const std::filesystem::path& path) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(read_file(path));
  return os.str();
}

struct EvalData {
  EvalSplit ct, qr, annotated;
};

// Splits from a held-out log: CT and QR from behaviour, the annotated split
// from groups mined out of the same log (no world knowledge).
inline EvalData build_eval_data(std::span<const SessionEvent> heldout, std::span<const VideoDoc> docs,
                                const RelevanceScorer& scorer, const MiningConfig& mining, std::uint64_t seed) {
  EvalData d;
  std::tie(d.ct, d.qr) = build_splits(heldout, docs, scorer, mining);
  MiningConfig m = mining;
  m.use_world_knowledge = false;
  auto groups = mine_groups(heldout, docs, scorer, m, seed);
  d.annotated = annotated_split(groups, docs);
  return d;
}

inline EvalReport run_eval(const PipelineConfig& c) {
  const auto docs = read_corpus(c.paths.corpus);
  const auto heldout = read_session_log(c.paths.heldout_log);
  const auto scorer = LexicalScorer::fit(docs);
  const auto st = read_checkpoint(c.paths.checkpoint);
  const auto data = build_eval_data(heldout, docs, scorer, c.mining, c.seed);
  if (!c.paths.splits_dir.empty()) {
    write_split(c.paths.splits_dir / "ct.jsonl", data.ct);
    write_split(c.paths.splits_dir / "qr.jsonl", data.qr);
    write_split(c.paths.splits_dir / "annotated.jsonl", data.annotated);
  }
  Tokenizer tok{st.params.vocab_size(), c.train.max_len};
  auto rep = evaluate(st.params, tok, docs, {&data.ct, &data.qr, &data.annotated}, c.eval_ks, c.ndcg_k,
                      file_digest(c.paths.checkpoint));
  rep.label = c.label.empty() ? std::string(to_string(c.train.loss)) : c.label;
  write_report(c.paths.report, rep);
  return rep;
}

inline std::string run_report(std::span<const std::filesystem::path> reports) {
  if (reports.empty()) throw ValidationError("no reports given");
  std::vector<EvalReport> loaded;
  for (const auto& p : reports) loaded.push_back(read_report(p));
  return render_table(loaded);
}

}  // namespace crops
