#pragma once

// Corpus evaluation of generated questions. N-gram metrics are reported on a
// 0-100 scale; diversity is measured by generative strength (distinct
// questions per image) and inventiveness (percentage of distinct questions
// absent from the training questions).

#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vqg/corpus.hpp"
#include "vqg/decoding.hpp"

namespace vqg {

// Sentence BLEU: clipped n-gram precisions for n = 1..max_n, geometric
// mean, brevity penalty against the closest reference length (ties go to
// the shorter one). The order is capped at the hypothesis length. No unigram
// match scores 0; any other zero precision is replaced by 1 / (2 * hyp_len).
double bleu(std::span<const std::string> hyp, std::span<const Tokens> refs, int max_n = 4);

// METEOR restricted to exact unigram matches:
//   F = P R / (0.9 P + 0.1 R),  penalty = 0.5 (chunks / matches)^3
// using the one-to-one alignment with the fewest chunks; best reference wins.
double meteor_lite(std::span<const std::string> hyp, std::span<const Tokens> refs);

// Longest-common-subsequence F-measure with beta = 1.2; best reference wins.
double rouge_l(std::span<const std::string> hyp, std::span<const Tokens> refs);

struct CiderResult {
  double score = 0.0;              // corpus mean, 0-100
  std::vector<double> per_image;   // 0-100
  std::vector<std::string> warnings;
};

// TF-IDF n-gram cosine (n = 1..4, idf = ln(N / df) over images), averaged
// over references and n. The classic 0-10 scale is multiplied by 10.
CiderResult cider(std::span<const Tokens> hyps, std::span<const std::vector<Tokens>> refs);

// Mean number of distinct questions per image.
double generative_strength(std::span<const std::vector<Tokens>> generated);

// 100 * |distinct generated not in train| / |distinct generated|, with
// distinctness taken over all images. Zero generated questions give 0 and a
// warning.
double inventiveness(std::span<const std::vector<Tokens>> generated, const std::set<Tokens>& train_questions,
                     std::vector<std::string>* warnings = nullptr);

struct ImageScore {
  std::string image_id;
  Tokens top_question;
  double bleu = 0.0;
  double meteor = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  std::size_t distinct_questions = 0;

  bool operator==(const ImageScore&) const = default;
};

struct MetricReport {
  double bleu = 0.0;
  double meteor = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  double generative_strength = 0.0;
  double inventiveness_pct = 0.0;
  std::size_t n_images = 0;
  int bleu_order = 4;
  std::string strategy;
  std::vector<ImageScore> per_image;
  std::vector<std::string> warnings;

  bool operator==(const MetricReport&) const = default;
};

// Questions from the records tagged train, or from every record when none
// carries a split tag.
std::set<Tokens> training_questions(std::span<const ImageRecord> train_annotations);

// N-gram metrics use each image's highest-logprob question against all of
// its references, averaged in ascending image_id order; diversity metrics
// use every generated question. Throws Error naming an image_id that has
// no references or appears twice.
MetricReport evaluate_run(std::span<const GenerationRecord> generated, std::span<const ImageRecord> annotations,
                          std::span<const ImageRecord> train_annotations, int bleu_order = 4);

nlohmann::json report_to_json(const MetricReport& report);
MetricReport report_from_json(const nlohmann::json& j);
MetricReport load_report(const std::filesystem::path& path);

// Aligned text table with one row per (label, report) and the columns
// BLEU METEOR ROUGE-L CIDEr Gen.Str. Inv.%.
std::string format_report_table(std::span<const std::pair<std::string, MetricReport>> rows);

}  // namespace vqg
