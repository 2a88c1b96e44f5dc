// vqg: synthesize corpora, train the question decoder, generate questions
// and evaluate them.
//
// Exit codes: 0 success, 1 runtime or data error, 2 usage error.

#include <fmt/format.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "manifest.hpp"
#include "vqg/corpus.hpp"
#include "vqg/decoding.hpp"
#include "vqg/error.hpp"
#include "vqg/kernels.hpp"
#include "vqg/metrics.hpp"
#include "vqg/parallel.hpp"
#include "vqg/seq_model.hpp"
#include "vqg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct SynthOptions {
  std::string out_dir;
  int images = 40;
  int concepts = 5;
  int questions_per_image = 3;
  int feature_dim = 16;
  std::uint64_t seed = 42;
  bool binary = false;
};

int run_synth(const SynthOptions& o) {
  const auto start = Clock::now();
  vqg::SyntheticCorpusSpec spec{o.images, o.concepts, o.questions_per_image, o.feature_dim, o.seed};
  const auto records = vqg::generate_synthetic_corpus(spec);
  std::error_code ec;
  fs::create_directories(o.out_dir, ec);
  if (ec) throw vqg::Error(fmt::format("cannot create {}: {}", o.out_dir, ec.message()));
  const fs::path dir(o.out_dir);
  const fs::path annotations = dir / "annotations.jsonl";
  const fs::path features = dir / (o.binary ? "features.bin" : "features.jsonl");
  vqg::save_annotations(annotations, records);
  vqg::save_features(features, vqg::features_of(records), o.binary);
  std::size_t questions = 0;
  for (const auto& r : records) questions += r.questions.size();
  std::cerr << fmt::format("wrote {} images, {} questions to {}\n", records.size(), questions, dir.string());
  vqg::tools::write_manifest(dir / "manifest.json",
                             {"synth",
                              {{"out", o.out_dir},
                               {"images", o.images},
                               {"concepts", o.concepts},
                               {"questions_per_image", o.questions_per_image},
                               {"feature_dim", o.feature_dim},
                               {"seed", o.seed},
                               {"binary", o.binary}},
                              {},
                              seconds_since(start)});
  return 0;
}

struct TrainOptions {
  std::string annotations;
  std::string features;
  std::string config;
  std::string out;
  std::string vocab;
  bool quiet = false;
};

vqg::Vocabulary load_vocab_file(const fs::path& path) {
  try {
    const json j = json::parse(vqg::read_file(path));
    return {j.at("tokens").get<std::vector<std::string>>(), j.value("min_count", 1)};
  } catch (const json::exception& e) {
    throw vqg::Error(fmt::format("{}: malformed vocabulary: {}", path.string(), e.what()));
  }
}

int run_train(const TrainOptions& o) {
  const auto start = Clock::now();
  const vqg::TrainConfig config = o.config.empty() ? vqg::TrainConfig{} : vqg::load_train_config(o.config);
  auto records = vqg::load_annotations(o.annotations);
  const auto features = vqg::load_features(o.features);

  const bool any_assigned = std::any_of(records.begin(), records.end(),
                                        [](const auto& r) { return r.split != vqg::Split::unassigned; });
  bool split_here = false;
  if (!any_assigned) {
    records = vqg::split_corpus(std::move(records), {config.split_ratios, config.seed});
    split_here = true;
  }
  std::vector<vqg::ImageRecord> train_records;
  for (const auto& r : records) {
    if (r.split == vqg::Split::train) train_records.push_back(r);
  }
  const vqg::Vocabulary vocab = o.vocab.empty() ? vqg::build_vocab(train_records, config.min_count)
                                                : load_vocab_file(o.vocab);

  vqg::EpochCallback log;
  if (!o.quiet) {
    log = [](const vqg::EpochLog& e) {
      std::cerr << fmt::format("epoch {:4d}  train_loss {:.6f}  val_ppl {}\n", e.epoch, e.train_loss,
                               e.val_perplexity ? fmt::format("{:.4f}", *e.val_perplexity) : "n/a");
    };
  }
  const vqg::Checkpoint ckpt = vqg::train(records, features, vocab, config, log);
  vqg::save_checkpoint(o.out, ckpt);
  if (split_here) {
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
    fs::path split_path = o.out;
    split_path += ".splits.jsonl";
    vqg::save_annotations(split_path, records);
    std::cerr << fmt::format("split assignment written to {}\n", split_path.string());
  }
  std::cerr << fmt::format("initial loss {:.6f}, final loss {:.6f}, kernels {}\n", ckpt.initial_loss,
                           ckpt.final_loss, vqg::kernels::active().name);
  std::vector<fs::path> inputs{o.annotations, o.features};
  if (!o.config.empty()) inputs.emplace_back(o.config);
  if (!o.vocab.empty()) inputs.emplace_back(o.vocab);
  vqg::tools::write_manifest(vqg::tools::manifest_path_for(o.out),
                             {"train",
                              {{"annotations", o.annotations},
                               {"features", o.features},
                               {"config", o.config},
                               {"vocab", o.vocab},
                               {"out", o.out},
                               {"resolved_config", vqg::to_json(ckpt.config)}},
                              inputs,
                              seconds_since(start)});
  return 0;
}

struct GenerateOptions {
  std::string ckpt;
  std::string features;
  std::string annotations;
  std::string split = "test";
  std::string strategy = "greedy";
  std::size_t beam_size = 5;
  std::size_t min_steps = 3;
  double sim_threshold = 0.5;
  std::size_t max_results = 10;
  std::size_t max_len = 20;
  std::uint64_t seed = 0;
  std::string out;
};

int run_generate(const GenerateOptions& o) {
  const auto start = Clock::now();
  vqg::DecodingConfig config;
  config.strategy = vqg::parse_strategy(o.strategy);
  config.beam_size = o.beam_size;
  config.min_steps = o.min_steps;
  config.similarity_threshold = o.sim_threshold;
  config.max_results = o.max_results;
  config.max_len = o.max_len;
  config.seed = o.seed;
  config.validate();
  const vqg::Split split = [&] {
    try {
      return vqg::parse_split(o.split);
    } catch (const vqg::Error& e) {
      throw vqg::UsageError(e.what());
    }
  }();

  const vqg::Checkpoint ckpt = vqg::load_checkpoint(o.ckpt);
  auto records = vqg::load_annotations(o.annotations);
  const bool all_unassigned = std::all_of(records.begin(), records.end(),
                                          [](const auto& r) { return r.split == vqg::Split::unassigned; });
  if (all_unassigned) records = vqg::split_corpus(std::move(records), {ckpt.config.split_ratios, ckpt.config.seed});
  std::erase_if(records, [&](const auto& r) { return r.split != split; });
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  vqg::attach_features(records, vqg::load_features(o.features), /*require_all=*/true);

  std::vector<std::string> lines(records.size());
  vqg::parallel_for(records.size(), [&](std::size_t i) {
    const auto& r = records[i];
    const vqg::DecodeRequest request{r.image_id, r.feature, ckpt.vocab.encode(r.keywords)};
    const auto set = vqg::generate(ckpt.model, request, config);
    lines[i] = vqg::generation_to_json(set, ckpt.vocab, config).dump();
  });
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  vqg::write_file_atomically(o.out, out);
  std::cerr << fmt::format("generated questions for {} {} images with {}\n", records.size(), o.split, o.strategy);
  vqg::tools::write_manifest(vqg::tools::manifest_path_for(o.out),
                             {"generate",
                              {{"ckpt", o.ckpt},
                               {"features", o.features},
                               {"annotations", o.annotations},
                               {"split", o.split},
                               {"strategy", o.strategy},
                               {"beam_size", o.beam_size},
                               {"min_steps", o.min_steps},
                               {"sim_threshold", o.sim_threshold},
                               {"max_results", o.max_results},
                               {"max_len", o.max_len},
                               {"seed", o.seed},
                               {"out", o.out}},
                              {o.ckpt, o.features, o.annotations},
                              seconds_since(start)});
  return 0;
}

struct EvaluateOptions {
  std::string generated;
  std::string annotations;
  std::string train_annotations;
  std::string out;
  int bleu_order = 4;
};

int run_evaluate(const EvaluateOptions& o) {
  const auto start = Clock::now();
  const auto generated = vqg::load_generations(o.generated);
  const auto annotations = vqg::load_annotations(o.annotations);
  const auto train = vqg::load_annotations(o.train_annotations);
  const vqg::MetricReport report = vqg::evaluate_run(generated, annotations, train, o.bleu_order);
  vqg::write_file_atomically(o.out, vqg::report_to_json(report).dump(2) + "\n");
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  const std::string label = report.strategy.empty() ? fs::path(o.generated).stem().string() : report.strategy;
  const std::pair<std::string, vqg::MetricReport> row{label, report};
  std::cout << vqg::format_report_table({&row, 1});
  vqg::tools::write_manifest(vqg::tools::manifest_path_for(o.out),
                             {"evaluate",
                              {{"generated", o.generated},
                               {"annotations", o.annotations},
                               {"train_annotations", o.train_annotations},
                               {"bleu_order", o.bleu_order},
                               {"out", o.out}},
                              {o.generated, o.annotations, o.train_annotations},
                              seconds_since(start)});
  return 0;
}

struct GradCheckOptions {
  std::uint64_t seed = 1;
  double epsilon = 1e-5;
  vqg::ModelDims dims{11, 8, 12, 16};
};

int run_grad_check(const GradCheckOptions& o) {
  if (o.dims.vocab <= vqg::kNumReserved || o.dims.embed < 1 || o.dims.hidden < 1 || o.dims.image < 1) {
    throw vqg::UsageError("grad-check dims must be >= 1 and vocab must exceed the reserved tokens");
  }
  if (!(o.epsilon >= 1e-7 && o.epsilon <= 1e-3)) throw vqg::UsageError("--epsilon must be in [1e-7, 1e-3]");
  const double err = vqg::grad_check(o.dims, o.seed, o.epsilon);
  const bool ok = err < 1e-4;
  std::cout << fmt::format("max relative error {:.3e} ({} parameters, seed {}, epsilon {:g}, kernels {}): {}\n", err,
                           vqg::parameter_count(vqg::Model::zeros(o.dims)), o.seed, o.epsilon,
                           vqg::kernels::active().name, ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

struct CompareOptions {
  std::vector<std::string> reports;
  std::string out;
};

int run_compare(const CompareOptions& o) {
  if (o.reports.empty()) throw vqg::UsageError("compare needs at least one --reports file");
  std::vector<std::pair<std::string, vqg::MetricReport>> rows;
  for (const auto& path : o.reports) {
    auto report = vqg::load_report(path);
    std::string label = fs::path(path).stem().string();
    if (!report.strategy.empty() && report.strategy != label) label = fmt::format("{} ({})", label, report.strategy);
    rows.emplace_back(std::move(label), std::move(report));
  }
  const std::string table = vqg::format_report_table(rows);
  std::cout << table;
  if (!o.out.empty()) vqg::write_file_atomically(o.out, table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual question generation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", vqg::tools::kToolVersion);

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic annotations + features corpus");
  synth_cmd->add_option("--out", synth.out_dir, "Output directory")->required();
  synth_cmd->add_option("--images", synth.images, "Number of images");
  synth_cmd->add_option("--concepts", synth.concepts, "Number of concepts (1..images)");
  synth_cmd->add_option("--questions-per-image", synth.questions_per_image, "Questions per image");
  synth_cmd->add_option("--feature-dim", synth.feature_dim, "Feature vector dimension");
  synth_cmd->add_option("--seed", synth.seed, "Random seed");
  synth_cmd->add_flag("--binary", synth.binary, "Write features in the binary VQGF form");

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Train a checkpoint");
  train_cmd->add_option("--annotations", train.annotations, "Annotations file")->required();
  train_cmd->add_option("--features", train.features, "Features file (text or binary)")->required();
  train_cmd->add_option("--config", train.config, "Training config JSON (defaults when omitted)");
  train_cmd->add_option("--out", train.out, "Checkpoint path")->required();
  train_cmd->add_option("--vocab", train.vocab, "Vocabulary JSON {\"tokens\": [...]}");
  train_cmd->add_flag("--quiet", train.quiet, "Suppress per-epoch logging");

  GenerateOptions gen;
  auto* gen_cmd = app.add_subcommand("generate", "Generate questions for one split");
  gen_cmd->add_option("--ckpt", gen.ckpt, "Checkpoint")->required();
  gen_cmd->add_option("--features", gen.features, "Features file")->required();
  gen_cmd->add_option("--annotations", gen.annotations, "Annotations (keywords and split tags)")->required();
  gen_cmd->add_option("--split", gen.split, "train, val or test");
  gen_cmd->add_option("--strategy", gen.strategy, "greedy, beam or dbs");
  gen_cmd->add_option("--beam-size", gen.beam_size, "Beam size k");
  gen_cmd->add_option("--min-steps", gen.min_steps, "Plain beam steps T before clustering");
  gen_cmd->add_option("--sim-threshold", gen.sim_threshold, "Jaccard threshold for clustering");
  gen_cmd->add_option("--max-results", gen.max_results, "Questions kept per image by dbs");
  gen_cmd->add_option("--max-len", gen.max_len, "Maximum question length");
  gen_cmd->add_option("--seed", gen.seed, "Cluster-head seed");
  gen_cmd->add_option("--out", gen.out, "Generation output file")->required();

  EvaluateOptions eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score generations against references");
  eval_cmd->add_option("--generated", eval.generated, "Generation output file")->required();
  eval_cmd->add_option("--annotations", eval.annotations, "Reference annotations")->required();
  eval_cmd->add_option("--train-annotations", eval.train_annotations, "Training annotations")->required();
  eval_cmd->add_option("--out", eval.out, "Metric report path")->required();
  eval_cmd->add_option("--bleu-order", eval.bleu_order, "Highest BLEU n-gram order")->check(CLI::Range(1, 4));

  GradCheckOptions gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "Compare analytic gradients with finite differences");
  gc_cmd->add_option("--seed", gc.seed, "Random seed");
  gc_cmd->add_option("--epsilon", gc.epsilon, "Central-difference step");
  gc_cmd->add_option("--vocab", gc.dims.vocab, "Vocabulary size");
  gc_cmd->add_option("--embed", gc.dims.embed, "Embedding size");
  gc_cmd->add_option("--hidden", gc.dims.hidden, "Hidden size");
  gc_cmd->add_option("--image-dim", gc.dims.image, "Image feature size");

  CompareOptions cmp;
  auto* cmp_cmd = app.add_subcommand("compare", "Tabulate metric reports");
  cmp_cmd->add_option("--reports", cmp.reports, "Metric report files");
  cmp_cmd->add_option("--out", cmp.out, "Table output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*train_cmd) return run_train(train);
    if (*gen_cmd) return run_generate(gen);
    if (*eval_cmd) return run_evaluate(eval);
    if (*gc_cmd) return run_grad_check(gc);
    if (*cmp_cmd) return run_compare(cmp);
  } catch (const vqg::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
