#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "medres/dataset.hpp"
#include "medres/error.hpp"
#include "medres/harness.hpp"
#include "medres/metrics.hpp"
#include "medres/orchestrator.hpp"
#include "medres/prompting.hpp"
#include "medres/synthetic.hpp"

namespace fs = std::filesystem;
using namespace medres;

namespace {

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

struct Globals {
  std::string config;
  std::string templates;
  std::uint64_t seed = 0;
  int parallel = 1;
  int max_rounds = 10;
  std::size_t context_examples = 2;
};

struct RunFlags {
  std::string manifest;
  std::string scripts;
  std::string learner;
  std::string experts;
  std::string expert_fixture;
  std::string routing;
  std::string variant;
  std::string out_dir;
  double general_noise = 0.0;
  bool no_detector = false;
  bool plain_cider = false;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--manifest", f.manifest, "Manifest file (line-delimited JSON)");
  cmd->add_option("--scripts", f.scripts, "Learner script file for the scripted learner");
  cmd->add_option("--learner", f.learner, "scripted | heuristic | remote");
  cmd->add_option("--experts", f.experts, "oracle | fixture | remote");
  cmd->add_option("--expert-fixture", f.expert_fixture, "Expert fixture file for --experts fixture");
  cmd->add_option("--routing", f.routing, "per_type | monolithic");
  cmd->add_option("--template-variant", f.variant, "gpt | llama (ignored with --templates)");
  cmd->add_option("--out", f.out_dir, "Output directory");
  cmd->add_option("--general-noise", f.general_noise, "Fraction of general-slot answers to corrupt");
  cmd->add_flag("--no-detector", f.no_detector, "Route abnormality questions to the general expert");
  cmd->add_flag("--plain-cider", f.plain_cider, "Report plain CIDEr instead of CIDEr-D");
}

// Config file first, then every flag the user actually passed.
RunConfig build_config(const CLI::App& app, const CLI::App& cmd, const Globals& g, const RunFlags& f) {
  RunConfig config;
  if (!g.config.empty()) config = load_run_config(g.config);
  if (app.count("--templates")) config.templates_dir = g.templates;
  if (app.count("--seed")) config.seed = g.seed;
  if (app.count("--parallel")) config.parallel = g.parallel;
  if (app.count("--max-rounds")) config.max_rounds = g.max_rounds;
  if (app.count("--context-examples")) config.context_examples = g.context_examples;
  if (cmd.count("--manifest")) config.manifest = f.manifest;
  if (cmd.count("--scripts")) config.scripts = f.scripts;
  if (cmd.count("--learner")) {
    const auto kind = parse_learner_kind(f.learner);
    if (!kind) throw InvalidArgument("unknown learner '" + f.learner + "'");
    config.learner = *kind;
  }
  if (cmd.count("--experts")) {
    const auto kind = parse_expert_kind(f.experts);
    if (!kind) throw InvalidArgument("unknown expert kind '" + f.experts + "'");
    config.experts = *kind;
  }
  if (cmd.count("--expert-fixture")) config.expert_fixture = f.expert_fixture;
  if (cmd.count("--routing")) {
    if (f.routing == "per_type") {
      config.routing = RoutingMode::PerType;
    } else if (f.routing == "monolithic") {
      config.routing = RoutingMode::Monolithic;
    } else {
      throw InvalidArgument("unknown routing mode '" + f.routing + "'");
    }
  }
  if (cmd.count("--template-variant")) config.template_variant = parse_template_variant(f.variant);
  if (cmd.count("--out")) config.out_dir = f.out_dir;
  if (cmd.count("--general-noise")) config.general_noise = f.general_noise;
  if (f.no_detector) config.abnormality_detector = false;
  if (f.plain_cider) config.cider = metrics::CiderVariant::Plain;
  return config;
}

void print_stats(const DatasetManifest& manifest) {
  const TypeStats stats = compute_stats(manifest);
  std::cout << std::left << std::setw(24) << "type" << std::setw(10) << "qa_pairs" << "distinct_answers\n";
  for (const auto& [type, count] : stats.per_type) {
    std::cout << std::setw(24) << to_string(type) << std::setw(10) << count.qa_pairs << count.distinct_answers << "\n";
  }
  std::cout << std::setw(24) << "all" << std::setw(10) << stats.all.qa_pairs << stats.all.distinct_answers << "\n";
  std::cout << std::setw(24) << "all (w/o difference)" << std::setw(10) << stats.all_excluding_difference.qa_pairs
            << stats.all_excluding_difference.distinct_answers << "\n";
  for (const auto& [split, n] : manifest.split_sizes()) {
    std::cout << "studies in " << to_string(split) << ": " << n << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Difference VQA by learner/expert conversation: run, score and report"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--templates", g.templates, "Directory with task.txt, question.txt, appended.txt");
  app.add_option("--seed", g.seed, "Seed for sampling and noisy experts");
  app.add_option("--parallel", g.parallel, "Conversations run at once")->check(CLI::PositiveNumber);
  app.add_option("--max-rounds", g.max_rounds, "Learner rounds before a forced answer")->check(CLI::PositiveNumber);
  app.add_option("--context-examples", g.context_examples, "Context examples per question type");

  RunFlags run_flags;
  CLI::App* run = app.add_subcommand("run", "Evaluate the test-split difference questions");
  add_run_flags(run, run_flags);

  RunFlags ablate_flags;
  CLI::App* ablate = app.add_subcommand("ablate", "Evaluate full, monolithic and detector-off routing");
  add_run_flags(ablate, ablate_flags);

  CLI::App* metrics_cmd = app.add_subcommand("metrics", "Metric utilities");
  metrics_cmd->require_subcommand(1);
  metrics_cmd->fallthrough();
  CLI::App* score = metrics_cmd->add_subcommand("score", "Score line-aligned predictions against golds");
  std::string pred_path, gold_path;
  bool score_plain = false;
  score->add_option("--pred", pred_path, "Predictions, one per line")->required();
  score->add_option("--gold", gold_path, "Gold answers, one per line")->required();
  score->add_flag("--plain-cider", score_plain, "Report plain CIDEr instead of CIDEr-D");

  CLI::App* stats = app.add_subcommand("stats", "Per-type QA statistics of a manifest");
  std::string stats_manifest;
  stats->add_option("--manifest", stats_manifest, "Manifest file")->required();

  CLI::App* bias = app.add_subcommand("bias-report", "Scores per gender and age stratum");
  std::string bias_transcripts, bias_manifest, bias_out;
  bias->add_option("--transcripts", bias_transcripts, "Transcripts file")->required();
  bias->add_option("--manifest", bias_manifest, "Manifest file")->required();
  bias->add_option("--out", bias_out, "Also write the report as JSON here");

  CLI::App* export_cmd = app.add_subcommand("export-augmented", "Write chatlog-augmented training records");
  std::string export_transcripts, export_manifest, export_out;
  double fraction = 1.0;
  export_cmd->add_option("--transcripts", export_transcripts, "Transcripts file")->required();
  export_cmd->add_option("--manifest", export_manifest, "Manifest file")->required();
  export_cmd->add_option("--out", export_out, "Output file")->required();
  export_cmd->add_option("--fraction", fraction, "Fraction of studies to keep")->check(CLI::Range(0.0, 1.0));

  CLI::App* synth_cmd = app.add_subcommand("synth", "Write a synthetic manifest and identity learner scripts");
  synth::FixtureOptions synth_opts;
  std::string synth_out;
  bool bias_ages = false;
  synth_cmd->add_option("--studies", synth_opts.studies, "Number of studies");
  synth_cmd->add_option("--train", synth_opts.train, "Studies in the train split");
  synth_cmd->add_option("--val", synth_opts.val, "Studies in the val split");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_flag("--bias-ages", bias_ages, "Ages in 29/34/37 proportions across the age buckets");

  CLI::App* dump = app.add_subcommand("dump-templates", "Write the built-in prompt templates");
  std::string dump_variant = "gpt", dump_out;
  dump->add_option("--variant", dump_variant, "gpt | llama");
  dump->add_option("--out", dump_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      const RunConfig config = build_config(app, *run, g, run_flags);
      const RunOutput out = run_eval(config);
      std::cout << format_report_table(out.result);
      std::cout << "transcripts: " << out.transcripts_path.string() << "\nreport: " << out.report_path.string() << "\n";
      for (const std::string& w : out.result.warnings) std::cerr << "warning: " << w << "\n";
      return out.result.failed == 0 ? 0 : 3;
    }
    if (ablate->parsed()) {
      const RunConfig config = build_config(app, *ablate, g, ablate_flags);
      const RunSetup setup = prepare_run(config);
      const auto rows = ablation_matrix(setup.manifest, setup.experts, setup.learners, setup.options);
      std::cout << format_ablation_table(rows);
      fs::create_directories(config.out_dir);
      std::ofstream(config.out_dir / "ablation.json") << ablation_to_json(rows) << "\n";
      return 0;
    }
    if (score->parsed()) {
      const auto preds = read_lines(pred_path);
      const auto golds = read_lines(gold_path);
      const auto report =
          metrics::score_corpus(preds, golds, score_plain ? metrics::CiderVariant::Plain : metrics::CiderVariant::CiderD);
      std::cout << metrics::to_json(report, 2) << "\n";
      return 0;
    }
    if (stats->parsed()) {
      print_stats(load_manifest(stats_manifest));
      return 0;
    }
    if (bias->parsed()) {
      const auto transcripts = load_transcripts(bias_transcripts);
      const BiasReport report = bias_report(transcripts, load_manifest(bias_manifest));
      std::cout << format_bias_table(report);
      if (!bias_out.empty()) std::ofstream(bias_out) << bias_report_to_json(report) << "\n";
      return 0;
    }
    if (export_cmd->parsed()) {
      const auto transcripts = load_transcripts(export_transcripts);
      const auto records = export_augmented(transcripts, load_manifest(export_manifest), fraction, g.seed);
      std::cout << save_augmented(records, export_out) << " records written to " << export_out << "\n";
      return 0;
    }
    if (synth_cmd->parsed()) {
      synth_opts.seed = app.count("--seed") ? g.seed : synth_opts.seed;
      if (bias_ages) synth_opts.ages = synth::bias_fixture_ages(synth_opts.studies);
      const DatasetManifest manifest = synth::make_fixture(synth_opts);
      fs::create_directories(synth_out);
      save_manifest(manifest, fs::path(synth_out) / "manifest.jsonl");
      std::ofstream scripts(fs::path(synth_out) / "scripts.jsonl");
      identity_scripts(manifest).write(scripts);
      std::cout << manifest.studies.size() << " studies, " << manifest.records.size() << " records written to "
                << synth_out << "\n";
      return 0;
    }
    if (dump->parsed()) {
      write_templates(default_templates(parse_template_variant(dump_variant)), dump_out);
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
