// Acceptance run: one PASS/FAIL line per criterion. Exit status is non-zero
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "crops/pipeline.hpp"
#include "support.hpp"

using namespace crops;
using namespace crops::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void check(const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("%s %s: %s [%.2fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds_since(t0));
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome oracle_equivalence() {
  Rng rng(101);
  const auto t0 = Clock::now();
  double worst_naive = 0.0, worst_oracle = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Batch b = random_batch(rng, 4, 6);
    Matrix s = random_sims(rng, b.num_queries(), b.num_docs());
    const double tau = rng.uniform(0.05, 1.0);
    const double masked = h_infonce_masked(s, build_mask(b), b, tau).loss;
    worst_naive = std::max(worst_naive, rel_err(masked, h_infonce_naive(s, b, tau)));
    worst_oracle = std::max(worst_oracle, rel_err(masked, static_cast<double>(oracle_h_infonce(s, b, tau))));
  }
  const double t = seconds_since(t0);
  return {worst_naive <= 1e-9 && worst_oracle <= 1e-9 && t < 10.0,
          fmt("1000 batches, worst relative error vs naive %.3g, vs extended-precision oracle %.3g, %.2fs",
              worst_naive, worst_oracle, t)};
}

// Relative error with a small floor so near-zero gradients compare absolutely.
double fd_rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

Outcome gradient_check() {
  const auto t0 = Clock::now();
  const EncoderDims dims{64, 8, 6};
  Rng rng(202);
  double worst = 0.0, worst_tau = 0.0;
  std::size_t probes = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Batch b = random_batch(rng, 3, 4);
    auto fill = [&](std::vector<TokenId>& ids) {
      ids.resize(1 + rng.below(4));
      for (auto& t : ids) t = static_cast<TokenId>(rng.below(dims.vocab_size));
    };
    for (auto& q : b.query_tokens) fill(q);
    for (auto& d : b.doc_tokens) fill(d);
    auto p = init_params(static_cast<std::uint64_t>(trial) + 1, dims);
    p.log_tau = std::log(rng.uniform(0.1, 0.5));
    auto loss_at = [&](const EncoderParams& q) {
      return h_infonce_masked(forward(q, b).s, build_mask(b), b, q.tau()).loss;
    };
    Forward f = forward(p, b);
    LossResult lr = h_infonce_masked(f.s, build_mask(b), b, p.tau());
    Gradients g = backward(p, b, f, lr.grad_s, lr.grad_tau);
    const double h = 1e-5;
    auto probe = [&](Matrix EncoderParams::*tensor, const Matrix& grad) {
      for (int k = 0; k < 20; ++k) {
        const std::size_t idx = rng.below((p.*tensor).data.size());
        auto plus = p, minus = p;
        (plus.*tensor).data[idx] += h;
        (minus.*tensor).data[idx] -= h;
        const double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
        worst = std::max(worst, fd_rel(grad.data[idx], fd));
        ++probes;
      }
    };
    probe(&EncoderParams::embed, g.embed);
    probe(&EncoderParams::proj_q, g.proj_q);
    probe(&EncoderParams::proj_d, g.proj_d);
    auto plus = p, minus = p;
    plus.log_tau += h;
    minus.log_tau -= h;
    worst_tau = std::max(worst_tau, std::abs(g.log_tau - (loss_at(plus) - loss_at(minus)) / (2 * h)));
  }
  const double t = seconds_since(t0);
  return {worst < 1e-4 && worst_tau < 1e-6 && t < 60.0,
          fmt("50 batches, %zu probes, worst relative error %.3g, log_tau abs error %.3g, %.2fs", probes, worst,
              worst_tau, t)};
}

Outcome hla_exhaustive() {
  const std::vector<SampleSource> sources = {SampleSource::QueryLevelAug,   SampleSource::SystemLevelAug,
                                             SampleSource::WorldKnowledgeAug, SampleSource::ClickedInRank,
                                             SampleSource::ExposedInRank,   SampleSource::UnexposedInRank,
                                             SampleSource::PreRankFiltered, SampleSource::InBatch};
  const int table[] = {5, 4, 4, 4, 3, 2, 1, 0};
  std::size_t bad = 0;
  for (std::size_t i = 0; i < sources.size(); ++i)
    if (label_for(sources[i]) != table[i]) ++bad;
  // The expected winner: highest label, then earliest in declaration order.
  auto expected = [](const std::vector<SampleSource>& set) {
    SampleSource best = set.front();
    for (auto s : set)
      if (label_for(s) > label_for(best) || (label_for(s) == label_for(best) && s < best)) best = s;
    return best;
  };
  std::size_t orders = 0;
  for (unsigned mask = 1; mask < (1u << sources.size()); ++mask) {
    std::vector<SampleSource> set;
    for (std::size_t i = 0; i < sources.size(); ++i)
      if (mask & (1u << i)) set.push_back(sources[i]);
    const SampleSource want = expected(set);
    std::sort(set.begin(), set.end());
    do {
      std::map<DocId, SampleSource> best;
      for (auto s : set) merge_source(best, 1, s);
      ++orders;
      if (best.at(1) != want) ++bad;
    } while (std::next_permutation(set.begin(), set.end()));
  }
  // Whole-group assembly for every combination of the three augmentation
  // sets and one search-side source.
  VideoDoc d;
  d.doc_id = 1;
  d.ocr_cover = "x";
  std::vector<VideoDoc> docs = {d};
  CorpusIndex corpus(docs);
  std::size_t groups = 0;
  const std::vector<std::optional<SampleSource>> search = {std::nullopt, SampleSource::ClickedInRank,
                                                           SampleSource::ExposedInRank, SampleSource::UnexposedInRank,
                                                           SampleSource::PreRankFiltered};
  for (unsigned aug = 0; aug < 8; ++aug)
    for (const auto& s : search) {
      MinedSets m;
      std::vector<SampleSource> set;
      if (aug & 1u) m.query_level.insert(1), set.push_back(SampleSource::QueryLevelAug);
      if (aug & 2u) m.system_level.insert(1), set.push_back(SampleSource::SystemLevelAug);
      if (aug & 4u) m.world_knowledge.push_back(d), set.push_back(SampleSource::WorldKnowledgeAug);
      if (s) m.search[1] = *s, set.push_back(*s);
      auto g = assemble_group("q", m, corpus, MiningConfig{}, 1);
      ++groups;
      if (set.empty()) {
        if (!g.samples.empty()) ++bad;
        continue;
      }
      const SampleSource want = expected(set);
      if (g.samples.size() != 1 || g.samples[0].source != want || g.samples[0].label != label_for(want)) ++bad;
    }
  return {bad == 0, fmt("label table 5/4/4/4/3/2/1/0, 255 source subsets in %zu orders, %zu assembled groups, %zu mismatches", orders, groups, bad)};
}

Outcome mask_check() {
  Rng rng(303);
  std::size_t entries = 0, bad = 0;
  for (int i = 0; i < 1000; ++i) {
    Batch b = random_batch(rng, 6, 8);
    auto m = build_mask(b);
    for (std::size_t a = 0; a < m.n; ++a)
      for (std::size_t k = 0; k < m.n; ++k, ++entries)
        if (m(a, k) != expected_mask_entry(b, a, k)) ++bad;
  }
  // Worked example: d1 (label 5) and d2 (label 4) under one query; anchor d2
  // masks d1, anchor d1 keeps d2 as a negative.
  Batch ex;
  ex.query_ids = {1};
  ex.query_tokens = {{1}};
  ex.doc_ids = {1, 2};
  ex.doc_tokens = {{1}, {2}};
  ex.group_of = {0, 0};
  ex.label_of = {5, 4};
  auto m = build_mask(ex);
  if (m(1, 0) != MaskEntry::Masked || m(0, 1) != MaskEntry::Negative || m(0, 0) != MaskEntry::Positive) ++bad;
  return {bad == 0, fmt("1000 batches, %zu entries plus the d1/d2 example, %zu mismatches", entries, bad)};
}

Outcome degenerate_cases() {
  // One group whose docs share a label: every anchor is alone, loss 0.
  Batch one;
  one.query_ids = {1};
  one.query_tokens = {{1}};
  one.doc_ids = {1, 2, 3};
  one.doc_tokens = {{1}, {2}, {3}};
  one.group_of = {0, 0, 0};
  one.label_of = {4, 4, 4};
  Matrix s1(1, 3);
  s1.data = {0.3, -0.2, 0.9};
  const double zero = h_infonce_masked(s1, build_mask(one), one, 0.05).loss;
  // Labels [5, 1] with equal similarities: the label-5 anchor sees one
  // negative with the same logit (ln 2); the label-1 anchor is alone (0).
  Batch two;
  two.query_ids = {1};
  two.query_tokens = {{1}};
  two.doc_ids = {1, 2};
  two.doc_tokens = {{1}, {2}};
  two.group_of = {0, 0};
  two.label_of = {5, 1};
  Matrix s2(1, 2);
  s2.data = {0.4, 0.4};
  const double ln2 = h_infonce_masked(s2, build_mask(two), two, 0.05).loss;
  const bool ok = zero == 0.0 && std::abs(ln2 - std::log(2.0)) <= 1e-12;
  return {ok, fmt("uniform labels %.3g, labels [5,1] tie %.15f vs ln2 %.15f", zero, ln2, std::log(2.0))};
}

Outcome metric_oracles() {
  std::vector<std::string> bad;
  Rankings r = {{"a", {1, 2, 3}}, {"b", {9, 8, 7, 6}}};
  auto split = [](RecallEntry e) { return EvalSplit{SplitKind::CT, {std::move(e)}, {}}; };
  if (recall_at_k(split({"a", {1, 2}}), r, 2) != 1.0) bad.push_back("recall 1.0");
  if (recall_at_k(split({"b", {6, 5, 4, 9}}), r, 2) != 0.25) bad.push_back("recall 0.25");
  if (recall_at_k(split({"a", {5}}), r, 3) != 0.0) bad.push_back("recall 0.0");
  std::vector<int> labels = {3, 2};
  if (std::abs(dcg_at_k(labels, 4) - 8.89279) > 1e-5) bad.push_back("DCG [3,2]");
  std::vector<AnnotatedEntry> pair = {{"q", {{1, 3}, {2, 2}}}};
  Rankings ordered = {{"q", {1, 2}}};
  if (ndcg_at_k(pair, ordered, 4).value != 1.0) bad.push_back("NDCG [3,2]");
  std::vector<AnnotatedEntry> ann = {{"q", {{1, 3}, {2, 5}, {3, 0}}}};
  Rankings ideal = {{"q", {2, 1, 3}}};
  if (std::abs(ndcg_at_k(ann, ideal, 4).value - 1.0) > 1e-15) bad.push_back("ideal NDCG");
  Rng rng(404);
  std::size_t violations = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<DocId> ranking(100);
    std::iota(ranking.begin(), ranking.end(), 0);
    rng.shuffle(ranking);
    std::set<DocId> rel;
    for (std::size_t i = 0, n = 1 + rng.below(20); i < n; ++i) rel.insert(rng.below(120));
    Rankings rr = {{"q", ranking}};
    double prev = 0.0;
    for (std::size_t k = 1; k <= 100; ++k) {
      const double v = recall_at_k(split({"q", rel}), rr, k);
      if (v < prev) ++violations;
      prev = v;
    }
  }
  if (violations) bad.push_back("recall monotonicity");
  std::string detail = "recall 1.0/0.25/0.0, DCG [3,2] 8.89279, NDCG [3,2] 1.0, ideal NDCG 1, 200 random rankings monotone";
  if (!bad.empty()) {
    detail = "mismatched:";
    for (auto& b : bad) detail += " " + b + ";";
  }
  return {bad.empty(), detail};
}

// ---------------------------------------------------------------------------
// Filter-bubble experiment and ablation, sharing one set of trained runs.

struct ArmResult {
  std::vector<double> ct, qr;
  double seconds = 0.0;
  EvalReport mean_report;  // recall and NDCG averaged over seeds
  double mean(const std::vector<double>& v) const { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }
};

struct Experiment {
  ArmResult baseline, full, demoted, binary;
};

constexpr int kSeeds = 5;
constexpr std::uint64_t kFirstSeed = 1000;

Experiment& experiment() {
  static Experiment ex = [] {
    Experiment e;
    const auto dir = fs::temp_directory_path() / "crops_acceptance_wk";
    for (int i = 0; i < kSeeds; ++i) {
      WorldSpec ws;
      ws.seed = kFirstSeed + static_cast<std::uint64_t>(i);
      auto t0 = Clock::now();
      const World w = generate_world(ws);
      const auto log = simulate_sessions(w, ws, 0);
      const auto heldout = simulate_sessions(w, ws, 1);
      const auto scorer = LexicalScorer::fit(w.docs);
      fs::remove_all(dir);
      write_synthetic_world_knowledge(dir, ws, 4);
      MiningConfig full;
      MiningConfig p0 = full;
      p0.use_query_level = p0.use_system_level = p0.use_world_knowledge = false;
      const auto crops_groups = mine_groups(log, w.docs, scorer, full, ws.seed, dir);
      const auto p0_groups = mine_groups(log, w.docs, scorer, p0, ws.seed);
      const auto data = build_eval_data(heldout, w.docs, scorer, full, ws.seed);
      const double shared = seconds_since(t0);

      struct Arm {
        ArmResult* out;
        const std::vector<TrainingGroup>* groups;
        LossVariant loss;
        const char* label;
      };
      const Arm arms[] = {{&e.baseline, &p0_groups, LossVariant::InfoNceBinary, "baseline (P0, binary InfoNCE)"},
                          {&e.full, &crops_groups, LossVariant::HInfoNce, "full (CroPS, H-InfoNCE)"},
                          {&e.demoted, &crops_groups, LossVariant::HlaDemoted, "demoted (CroPS, labels 5->4)"},
                          {&e.binary, &crops_groups, LossVariant::InfoNceBinary, "binary (CroPS, binary InfoNCE)"}};
      for (const auto& a : arms) {
        auto t1 = Clock::now();
        TrainConfig tc;
        tc.seed = ws.seed;
        tc.loss = a.loss;
        tc.adam.lr = 5e-3;
        tc.batch_groups = 4;
        tc.epochs = 3;
        auto r = train(*a.groups, tc);
        auto rep = evaluate(r.state.params, tc.tokenizer(), w.docs, {&data.ct, &data.qr, &data.annotated}, {50}, 4);
        rep.label = a.label;
        a.out->ct.push_back(rep.recall["CT"][50]);
        a.out->qr.push_back(rep.recall["QR"][50]);
        a.out->seconds += seconds_since(t1) + shared / 4.0;
        auto& m = a.out->mean_report;
        if (i == 0) {
          m = rep;
          m.checkpoint_id = "mean of " + std::to_string(kSeeds) + " seeds";
          for (auto& [split, row] : m.recall)
            for (auto& [k, v] : row) v /= kSeeds;
          m.ndcg /= kSeeds;
        } else {
          for (auto& [split, row] : rep.recall)
            for (auto& [k, v] : row) m.recall[split][k] += v / kSeeds;
          m.ndcg += rep.ndcg / kSeeds;
        }
      }
    }
    fs::remove_all(dir);
    return e;
  }();
  return ex;
}

Outcome filter_bubble() {
  auto& e = experiment();
  const double dqr = 100.0 * (e.full.mean(e.full.qr) - e.baseline.mean(e.baseline.qr));
  const double dct = 100.0 * (e.full.mean(e.full.ct) - e.baseline.mean(e.baseline.ct));
  const double t = e.full.seconds + e.baseline.seconds;
  return {dqr >= 5.0 && dct >= -2.0 && t < 600.0,
          fmt("%d seeds, R@50 QR %.1f -> %.1f (%+.1f points), CT %.1f -> %.1f (%+.1f points), %.1fs", kSeeds,
              100.0 * e.baseline.mean(e.baseline.qr), 100.0 * e.full.mean(e.full.qr), dqr,
              100.0 * e.baseline.mean(e.baseline.ct), 100.0 * e.full.mean(e.full.ct), dct, t)};
}

Outcome ablation_ordering() {
  auto& e = experiment();
  const double f = 100.0 * e.full.mean(e.full.qr), d = 100.0 * e.demoted.mean(e.demoted.qr),
               b = 100.0 * e.binary.mean(e.binary.qr);
  // Persist the seed-averaged reports and render them the way `crops report` does.
  const auto dir = scratch_dir("acceptance_reports");
  std::vector<fs::path> paths;
  for (const auto* arm : {&e.full, &e.demoted, &e.binary, &e.baseline}) {
    paths.push_back(dir / (std::to_string(paths.size()) + ".json"));
    write_report(paths.back(), arm->mean_report);
  }
  std::printf("%s", run_report(paths).c_str());
  return {f >= d - 1.0 && d >= b - 1.0,
          fmt("mean QR R@50 over %d seeds: full %.1f, demoted %.1f, binary %.1f", kSeeds, f, d, b)};
}

Outcome efficiency() {
  const std::size_t groups = 64, per = 8, dim = 64;
  Rng rng(505);
  Batch b;
  for (std::size_t g = 0; g < groups; ++g) {
    b.query_ids.push_back(g + 1);
    b.query_tokens.push_back({});
    for (std::size_t k = 0; k < per; ++k) {
      b.doc_ids.push_back(b.doc_ids.size() + 1);
      b.doc_tokens.push_back({});
      b.group_of.push_back(g);
      b.label_of.push_back(static_cast<int>(rng.below(6)));
    }
  }
  auto unit_rows = [&](std::size_t n) {
    Matrix m(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = m.row(i);
      for (double& x : row) x = rng.uniform(-1, 1);
      const double norm = std::sqrt(dot(row, row));
      for (double& x : row) x /= norm;
    }
    return m;
  };
  const Matrix qv = unit_rows(groups), dv = unit_rows(groups * per);
  const double tau = 0.05;
  double sink = 0.0;
  auto median_ms = [&](const std::function<void()>& fn) {
    std::vector<double> t;
    for (int i = 0; i < 20; ++i) {
      auto t0 = Clock::now();
      fn();
      t.push_back(1e3 * seconds_since(t0));
    }
    std::sort(t.begin(), t.end());
    return 0.5 * (t[9] + t[10]);
  };
  const double masked = median_ms([&] {
    Matrix s = similarity_from_vectors(qv, dv);
    auto r = h_infonce_masked(s, build_mask(b), b, tau);
    auto g = similarity_backward(r.grad_s, qv, dv);
    sink += r.loss + g.query.data[0];
  });
  const double loop = median_ms([&] {
    auto r = h_infonce_per_anchor(qv, dv, b, tau);
    sink += r.loss + r.grads.query.data[0];
  });
  const double speedup = loop / masked;
  return {speedup >= 1.5 && std::isfinite(sink),
          fmt("64 groups x 8 docs, median of 20: masked %.3f ms, per-anchor %.3f ms, %.2fx", masked, loop, speedup)};
}

Outcome determinism() {
  std::vector<std::string> first;
  const char* names[] = {"corpus.jsonl", "log.jsonl", "heldout_log.jsonl", "groups.jsonl", "model.ckpt",
                         "curve.csv", "report.json"};
  std::size_t bytes = 0;
  for (int pass = 0; pass < 2; ++pass) {
    const auto dir = scratch_dir("acceptance_det");
    KeyValues kv = {{"seed", "4242"},
                    {"world.n_topics", "6"},
                    {"world.n_users", "80"},
                    {"world.sessions_per_user", "5"},
                    {"train.lr", "5e-3"},
                    {"train.batch_groups", "4"},
                    {"train.epochs", "2"}};
    for (const char* k : {"corpus", "log", "heldout_log", "intent_map", "groups"})
      kv[std::string("paths.") + k] = (dir / (std::string(k) + ".jsonl")).string();
    kv["paths.wk_dir"] = (dir / "wk").string();
    kv["paths.checkpoint"] = (dir / "model.ckpt").string();
    kv["paths.curve"] = (dir / "curve.csv").string();
    kv["paths.report"] = (dir / "report.json").string();
    kv["paths.prompts_dir"] = (dir / "prompts").string();
    const auto c = make_config(kv);
    run_simulate(c);
    run_mine(c);
    run_train(c);
    run_eval(c);
    for (std::size_t i = 0; i < std::size(names); ++i) {
      auto body = read_file(dir / names[i]);
      if (pass == 0) {
        bytes += body.size();
        first.push_back(std::move(body));
      } else if (body != first[i]) {
        return {false, std::string("differs: ") + names[i]};
      }
    }
  }
  return {true, fmt("simulate -> mine -> train -> eval twice, %zu files (%zu bytes) identical", std::size(names), bytes)};
}

}  // namespace

int main() {
  check("loss equals independent oracle", oracle_equivalence);
  check("analytic gradient matches finite differences", gradient_check);
  check("label assignment over all source subsets", hla_exhaustive);
  check("mask matches rule", mask_check);
  check("degenerate batches", degenerate_cases);
  check("metric oracles", metric_oracles);
  check("filter-bubble: CroPS beats baseline on QR", filter_bubble);
  check("ablation ordering full >= demoted >= binary", ablation_ordering);
  check("masked loss faster than per-anchor loop", efficiency);
  check("end-to-end determinism", determinism);
  std::printf("%d criteria failed\n", failures);
  return failures ? 1 : 0;
}
