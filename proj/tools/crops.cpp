// crops: command-line driver for the mining / training / evaluation pipeline.
//
//   crops simulate  -c run.conf
//   crops mine      -c run.conf
//   crops prompts   -c run.conf
//   crops ingest-wk -c run.conf
//   crops train     -c run.conf [--loss h_infonce|infonce_binary|hla_demoted]
//   crops eval      -c run.conf
//   crops report    a.json b.json ...
//
// Exit status: 0 ok, 1 validation error, 2 I/O error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crops/pipeline.hpp"

namespace fs = std::filesystem;
using namespace crops;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string seed, loss, label, lr, checkpoint, report, groups, reformulation_prob;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "pipeline config file")->required();
  sub->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
  sub->add_option("--seed", c.seed, "overrides seed");
  sub->add_option("--loss", c.loss, "overrides train.loss");
  sub->add_option("--label", c.label, "overrides label");
  sub->add_option("--lr", c.lr, "overrides train.lr");
  sub->add_option("--checkpoint", c.checkpoint, "overrides paths.checkpoint");
  sub->add_option("--report", c.report, "overrides paths.report");
  sub->add_option("--groups", c.groups, "overrides paths.groups");
  sub->add_option("--reformulation-prob", c.reformulation_prob, "overrides world.reformulation_prob");
}

PipelineConfig load(const Common& c) {
  KeyValues kv = read_key_values(c.config);
  for (const auto& o : c.overrides) {
    auto [k, v] = parse_override(o);
    kv[k] = v;
  }
  auto flag = [&](const std::string& v, const char* key) {
    if (!v.empty()) kv[key] = v;
  };
  flag(c.seed, "seed");
  flag(c.loss, "train.loss");
  flag(c.label, "label");
  flag(c.lr, "train.lr");
  flag(c.checkpoint, "paths.checkpoint");
  flag(c.report, "paths.report");
  flag(c.groups, "paths.groups");
  flag(c.reformulation_prob, "world.reformulation_prob");
  return make_config(kv);
}

void remove_outputs(const std::vector<fs::path>& outputs) {
  std::error_code ec;
  for (const auto& p : outputs) {
    if (p.empty()) continue;
    fs::remove(p, ec);
    auto tmp = p;
    tmp += ".tmp";
    fs::remove(tmp, ec);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CroPS retrieval training pipeline"};
  app.require_subcommand(1);

  Common common;
  std::vector<std::string> report_files;
  std::vector<CLI::App*> staged;
  for (const char* name : {"simulate", "mine", "prompts", "ingest-wk", "train", "eval"}) {
    auto* sub = app.add_subcommand(name);
    add_common(sub, common);
    staged.push_back(sub);
  }
  staged[0]->description("generate a synthetic world, session logs and world-knowledge responses");
  staged[1]->description("mine labeled training groups from the session log");
  staged[2]->description("write one-shot world-knowledge prompts per group");
  staged[3]->description("merge world-knowledge responses into the training groups");
  staged[4]->description("train the dual encoder; writes checkpoint and loss/tau curve");
  staged[5]->description("evaluate a checkpoint on held-out splits; writes a report");
  auto* report = app.add_subcommand("report", "render persisted reports as a comparison table");
  report->add_option("reports", report_files, "report files")->required();

  CLI11_PARSE(app, argc, argv);

  std::vector<fs::path> outputs;
  try {
    if (report->parsed()) {
      std::vector<fs::path> paths(report_files.begin(), report_files.end());
      std::cout << run_report(paths);
      return 0;
    }
    const PipelineConfig cfg = load(common);
    const auto& p = cfg.paths;
    if (app.got_subcommand("simulate")) {
      outputs = {p.corpus, p.intent_map, p.log, p.heldout_log};
      auto s = run_simulate(cfg);
      std::cout << "docs " << s.docs << "\nevents " << s.events << "\nheldout_events " << s.heldout_events
                << "\nwk_files " << s.wk_files << '\n';
    } else if (app.got_subcommand("mine")) {
      outputs = {p.groups};
      auto st = run_mine(cfg);
      std::cout << "groups " << st.groups << "\ntrainable_groups " << st.trainable_groups << "\nreformulation_pairs "
                << st.reformulation_pairs << "\nwk_skipped " << st.wk_skipped << '\n';
      for (auto& [src, n] : st.per_source) std::cout << to_string(src) << ' ' << n << '\n';
    } else if (app.got_subcommand("prompts")) {
      std::cout << "prompts " << run_prompts(cfg) << '\n';
    } else if (app.got_subcommand("ingest-wk")) {
      auto s = run_ingest_wk(cfg);
      std::cout << "added " << s.added << "\nskipped " << s.skipped << '\n';
      for (auto& r : s.skip_reasons) std::cerr << "skipped: " << r << '\n';
    } else if (app.got_subcommand("train")) {
      outputs = {p.checkpoint, p.curve};
      auto r = run_train(cfg);
      std::cout << "steps " << r.curve.size() << "\nfinal_loss " << format_double(r.curve.back().loss)
                << "\nfinal_tau " << format_double(r.curve.back().tau) << '\n';
    } else if (app.got_subcommand("eval")) {
      outputs = {p.report};
      auto rep = run_eval(cfg);
      std::vector<EvalReport> one{rep};
      std::cout << render_table(one);
    }
  } catch (const IoError& e) {
    remove_outputs(outputs);
    std::fprintf(stderr, "crops: %s\n", e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    remove_outputs(outputs);
    std::fprintf(stderr, "crops: %s\n", e.what());
    return 2;
  } catch (const ValidationError& e) {
    remove_outputs(outputs);
    std::fprintf(stderr, "crops: %s\n", e.what());
    return 1;
  }
  return 0;
}
