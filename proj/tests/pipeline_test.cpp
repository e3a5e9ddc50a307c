#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "crops/pipeline.hpp"
#include "support.hpp"

using namespace crops;
using crops::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status = 0;
  std::string out;
};

// Runs the CLI with stdout captured to a file; stderr goes to a second file.
Run cli(const fs::path& dir, const std::string& args) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + CROPS_CLI_PATH + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                          err.string() + "\"";
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = read_file(out) + read_file(err);
  return r;
}

// Small world config with every path inside `dir`.
fs::path write_config(const fs::path& dir, const std::string& extra = "") {
  std::ostringstream c;
  c << "seed = 77\n";
  for (const char* key : {"corpus", "log", "heldout_log", "intent_map", "groups"})
    c << "paths." << key << " = " << (dir / (std::string(key) + ".jsonl")).string() << '\n';
  c << "paths.prompts_dir = " << (dir / "prompts").string() << '\n'
    << "paths.wk_dir = " << (dir / "wk").string() << '\n'
    << "paths.checkpoint = " << (dir / "model.ckpt").string() << '\n'
    << "paths.curve = " << (dir / "curve.csv").string() << '\n'
    << "paths.report = " << (dir / "report.json").string() << '\n'
    << "world.n_topics = 4\nworld.n_users = 30\nworld.sessions_per_user = 4\n"
    << "encoder.vocab_size = 2048\nencoder.embed_dim = 16\nencoder.out_dim = 16\n"
    << "train.epochs = 1\ntrain.batch_groups = 4\ntrain.lr = 5e-3\n"
    << "eval.ks = 10,50\n"
    << extra;
  auto path = dir / "run.conf";
  std::ofstream(path) << c.str();
  return path;
}

std::string conf_arg(const fs::path& conf) { return "-c \"" + conf.string() + "\""; }

}  // namespace

// ---------------------------------------------------------------------------
// Config parsing

TEST(Config, ParsesKeyValues) {
  auto kv = parse_key_values("# comment\nseed = 5\n\n  train.lr=0.01   # trailing\nlabel = a b\n");
  EXPECT_EQ(kv.size(), 3u);
  EXPECT_EQ(kv["seed"], "5");
  EXPECT_EQ(kv["train.lr"], "0.01");
  EXPECT_EQ(kv["label"], "a b");
}

TEST(Config, SyntaxErrors) {
  EXPECT_THROW(parse_key_values("seed 5\n"), ParseError);
  EXPECT_THROW(parse_key_values("= 5\n"), ParseError);
  try {
    parse_key_values("seed = 1\nx = 2\nseed = 3\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Config, SeedIsMandatoryAndPropagates) {
  EXPECT_THROW(make_config({{"train.lr", "0.1"}}), ValidationError);
  auto c = make_config({{"seed", "42"}});
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.world.seed, 42u);
  EXPECT_EQ(c.train.seed, 42u);
  auto d = make_config({{"seed", "42"}, {"train.seed", "7"}});
  EXPECT_EQ(d.train.seed, 7u);
  EXPECT_EQ(d.world.seed, 42u);
}

TEST(Config, TypedValues) {
  auto c = make_config({{"seed", "1"},
                        {"train.loss", "hla_demoted"},
                        {"eval.ks", "5, 20"},
                        {"world.exposure_bias", "false"},
                        {"mining.neg_ratio_unexposed", "0.25"},
                        {"paths.groups", "/tmp/g.jsonl"}});
  EXPECT_EQ(c.train.loss, LossVariant::HlaDemoted);
  EXPECT_EQ(c.eval_ks, (std::vector<std::size_t>{5, 20}));
  EXPECT_FALSE(c.world.exposure_bias);
  EXPECT_EQ(c.mining.neg_source_ratio.first, 0.25);
  EXPECT_EQ(c.paths.groups, fs::path("/tmp/g.jsonl"));
}

TEST(Config, BadValuesRejected) {
  EXPECT_THROW(make_config({{"seed", "x"}}), ValidationError);
  EXPECT_THROW(make_config({{"seed", "1"}, {"no.such.key", "1"}}), ValidationError);
  EXPECT_THROW(make_config({{"seed", "1"}, {"train.loss", "softmax"}}), ValidationError);
  EXPECT_THROW(make_config({{"seed", "1"}, {"mining.alpha", "1.5"}}), ValidationError);
  EXPECT_THROW(make_config({{"seed", "1"}, {"world.reformulation_prob", "-0.1"}}), ValidationError);
  EXPECT_THROW(make_config({{"seed", "1"}, {"eval.ks", "10,0"}}), ValidationError);
  EXPECT_THROW(make_config({{"seed", "1"}, {"world.exposure_bias", "maybe"}}), ValidationError);
}

TEST(Config, Overrides) {
  EXPECT_EQ(parse_override("train.lr = 0.5"), (std::pair<std::string, std::string>{"train.lr", "0.5"}));
  EXPECT_EQ(parse_override("label=a=b").second, "a=b");
  EXPECT_THROW(parse_override("novalue"), ValidationError);
  EXPECT_THROW(parse_override("=1"), ValidationError);
}

TEST(Config, ShippedConfigsLoad) {
  for (const char* name : {"synthetic.conf", "p0_baseline.conf"}) {
    auto c = make_config(read_key_values(fs::path(CROPS_SOURCE_DIR) / "configs" / name));
    EXPECT_EQ(c.seed, 1000u) << name;
  }
  auto p0 = make_config(read_key_values(fs::path(CROPS_SOURCE_DIR) / "configs" / "p0_baseline.conf"));
  EXPECT_FALSE(p0.mining.use_query_level);
  EXPECT_EQ(p0.train.loss, LossVariant::InfoNceBinary);
}

// ---------------------------------------------------------------------------
// Stages in-process

TEST(Stages, IngestIsIdempotent) {
  auto dir = scratch_dir("stages_ingest");
  auto c = make_config(read_key_values(write_config(dir)));
  run_simulate(c);
  auto stats = run_mine(c);
  EXPECT_GT(stats.per_source[SampleSource::WorldKnowledgeAug], 0u);
  const std::string mined = read_file(c.paths.groups);
  auto s1 = run_ingest_wk(c);
  EXPECT_EQ(s1.skipped, 0u);
  EXPECT_EQ(read_file(c.paths.groups), mined);
  run_ingest_wk(c);
  EXPECT_EQ(read_file(c.paths.groups), mined);
}

TEST(Stages, PromptsOnePerGroup) {
  auto dir = scratch_dir("stages_prompts");
  auto c = make_config(read_key_values(write_config(dir)));
  run_simulate(c);
  auto stats = run_mine(c);
  EXPECT_EQ(run_prompts(c), stats.groups);
  auto groups = read_training_groups(c.paths.groups);
  auto text = read_file(prompt_path(c.paths.prompts_dir, groups.front().query_text));
  EXPECT_NE(text.find(groups.front().query_text), std::string::npos);
}

TEST(Stages, EvalReportMatchesCheckpoint) {
  auto dir = scratch_dir("stages_eval");
  auto c = make_config(read_key_values(write_config(dir, "label = mine\n")));
  run_simulate(c);
  run_mine(c);
  run_train(c);
  auto rep = run_eval(c);
  EXPECT_EQ(rep.checkpoint_id, file_digest(c.paths.checkpoint));
  EXPECT_EQ(rep.label, "mine");
  EXPECT_EQ(read_report(c.paths.report), rep);
  EXPECT_GT(rep.split_queries["CT"], 0u);
  EXPECT_GT(rep.split_queries["QR"], 0u);
  EXPECT_GT(rep.ndcg_evaluated, 0u);
}

// ---------------------------------------------------------------------------
// Command line

TEST(Cli, MineWithoutReformulationsHasNoQueryLevelSamples) {
  auto dir = scratch_dir("cli_noreform");
  auto conf = write_config(dir);
  ASSERT_EQ(cli(dir, "simulate " + conf_arg(conf) + " --reformulation-prob 0").status, 0);
  auto r = cli(dir, "mine " + conf_arg(conf));
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_NE(r.out.find("QueryLevelAug 0\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("reformulation_pairs 0\n"), std::string::npos) << r.out;
}

TEST(Cli, MineWithReformulationsHasQueryLevelSamples) {
  auto dir = scratch_dir("cli_reform");
  auto conf = write_config(dir);
  ASSERT_EQ(cli(dir, "simulate " + conf_arg(conf)).status, 0);
  auto r = cli(dir, "mine " + conf_arg(conf));
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_EQ(r.out.find("QueryLevelAug 0\n"), std::string::npos) << r.out;
}

TEST(Cli, ExitCodes) {
  auto dir = scratch_dir("cli_exit");
  auto conf = write_config(dir);
  // Missing input file: I/O error.
  auto r = cli(dir, "mine " + conf_arg(conf));
  EXPECT_EQ(r.status, 2) << r.out;
  EXPECT_NE(r.out.find("crops: "), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "groups.jsonl"));
  // Bad configuration value: validation error.
  EXPECT_EQ(cli(dir, "simulate " + conf_arg(conf) + " --set train.loss=softmax").status, 1);
  EXPECT_EQ(cli(dir, "simulate " + conf_arg(conf) + " --set nonsense=1").status, 1);
  EXPECT_EQ(cli(dir, "simulate -c \"" + (dir / "absent.conf").string() + "\"").status, 2);
  // Malformed corpus: validation error, outputs removed.
  ASSERT_EQ(cli(dir, "simulate " + conf_arg(conf)).status, 0);
  std::ofstream(dir / "corpus.jsonl", std::ios::app) << "{not json\n";
  r = cli(dir, "mine " + conf_arg(conf));
  EXPECT_EQ(r.status, 1) << r.out;
  EXPECT_FALSE(fs::exists(dir / "groups.jsonl"));
  EXPECT_FALSE(fs::exists(dir / "groups.jsonl.tmp"));
}

TEST(Cli, TrainEvalAndReport) {
  auto dir = scratch_dir("cli_report");
  auto conf = write_config(dir);
  for (const char* stage : {"simulate", "mine", "train", "eval"}) ASSERT_EQ(cli(dir, std::string(stage) + " " + conf_arg(conf)).status, 0) << stage;
  auto b_ckpt = (dir / "b.ckpt").string(), b_rep = (dir / "b.json").string();
  ASSERT_EQ(cli(dir, "train " + conf_arg(conf) + " --loss infonce_binary --checkpoint \"" + b_ckpt + "\"").status, 0);
  ASSERT_EQ(cli(dir, "eval " + conf_arg(conf) + " --loss infonce_binary --label binary --checkpoint \"" + b_ckpt +
                         "\" --report \"" + b_rep + "\"")
                .status,
            0);
  auto r = cli(dir, "report \"" + (dir / "report.json").string() + "\" \"" + b_rep + "\"");
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_NE(r.out.find("h_infonce"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("binary"), std::string::npos);
  EXPECT_NE(r.out.find("QR R@50"), std::string::npos);
  EXPECT_NE(file_digest(dir / "model.ckpt"), file_digest(b_ckpt));
  EXPECT_EQ(cli(dir, "report \"" + (dir / "missing.json").string() + "\"").status, 2);
}

TEST(Cli, FullRunIsByteIdentical) {
  const char* files[] = {"corpus.jsonl", "log.jsonl",  "heldout_log.jsonl", "intent_map.jsonl",
                         "groups.jsonl", "model.ckpt", "curve.csv",         "report.json"};
  std::vector<std::string> first;
  for (int pass = 0; pass < 2; ++pass) {
    auto dir = scratch_dir("cli_det");
    auto conf = write_config(dir);
    for (const char* stage : {"simulate", "mine", "ingest-wk", "train", "eval"})
      ASSERT_EQ(cli(dir, std::string(stage) + " " + conf_arg(conf)).status, 0) << stage;
    for (std::size_t i = 0; i < std::size(files); ++i) {
      auto body = read_file(dir / files[i]);
      if (pass == 0)
        first.push_back(body);
      else
        EXPECT_TRUE(body == first[i]) << files[i];
    }
  }
}
