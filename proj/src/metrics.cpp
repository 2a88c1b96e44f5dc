#include "vqg/metrics.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <unordered_map>

#include "vqg/error.hpp"
#include "vqg/parallel.hpp"

namespace vqg {
namespace {

using json = nlohmann::json;
using NGramCounts = std::map<std::string, int>;

constexpr int kCiderOrder = 4;
constexpr double kRougeBeta = 1.2;
constexpr std::size_t kMeteorSearchBudget = 200000;

NGramCounts ngrams(std::span<const std::string> tokens, int n) {
  NGramCounts out;
  const auto un = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + un <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (std::size_t j = 1; j < un; ++j) {
      key.push_back('\x1f');
      key += tokens[i + j];
    }
    ++out[key];
  }
  return out;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Depth-first search over one-to-one exact alignments that reach the maximum
// match count, minimizing the number of chunks.
class ChunkSearch {
 public:
  ChunkSearch(std::span<const std::string> hyp, std::span<const std::string> ref)
      : hyp_(hyp), ref_(ref), used_(ref.size(), false), match_of_(hyp.size(), -1) {
    std::map<std::string, int> hyp_count, ref_count;
    for (const auto& t : hyp) ++hyp_count[t];
    for (const auto& t : ref) ++ref_count[t];
    for (const auto& [t, c] : hyp_count) {
      auto it = ref_count.find(t);
      if (it != ref_count.end()) target_ += static_cast<std::size_t>(std::min(c, it->second));
    }
    // Suffix counts of hyp positions whose word occurs in the reference.
    matchable_suffix_.assign(hyp.size() + 1, 0);
    for (std::size_t i = hyp.size(); i-- > 0;) {
      matchable_suffix_[i] = matchable_suffix_[i + 1] + (ref_count.count(hyp[i]) ? 1 : 0);
    }
  }

  std::size_t matches() const { return target_; }

  std::size_t min_chunks() {
    if (target_ == 0) return 0;
    best_ = std::numeric_limits<std::size_t>::max();
    visit(0, 0, 0);
    return best_;
  }

 private:
  void visit(std::size_t i, std::size_t matched, std::size_t chunks) {
    if (++nodes_ > kMeteorSearchBudget && best_ != std::numeric_limits<std::size_t>::max()) return;
    if (chunks >= best_) return;
    if (matched == target_) {
      best_ = chunks;
      return;
    }
    if (i == hyp_.size() || matched + matchable_suffix_[i] < target_) return;
    const long prev = i > 0 ? match_of_[i - 1] : -2;
    // Extending the previous chunk first finds good bounds early.
    if (prev >= 0 && static_cast<std::size_t>(prev + 1) < ref_.size() && !used_[static_cast<std::size_t>(prev + 1)] &&
        ref_[static_cast<std::size_t>(prev + 1)] == hyp_[i]) {
      take(i, static_cast<std::size_t>(prev + 1), matched, chunks);
    }
    for (std::size_t j = 0; j < ref_.size(); ++j) {
      if (used_[j] || ref_[j] != hyp_[i]) continue;
      if (prev >= 0 && j == static_cast<std::size_t>(prev + 1)) continue;
      take(i, j, matched, chunks);
    }
    visit(i + 1, matched, chunks);
  }

  void take(std::size_t i, std::size_t j, std::size_t matched, std::size_t chunks) {
    const bool extends = i > 0 && j > 0 && match_of_[i - 1] == static_cast<long>(j - 1);
    used_[j] = true;
    match_of_[i] = static_cast<long>(j);
    visit(i + 1, matched + 1, chunks + (extends ? 0 : 1));
    match_of_[i] = -1;
    used_[j] = false;
  }

  std::span<const std::string> hyp_;
  std::span<const std::string> ref_;
  std::vector<bool> used_;
  std::vector<long> match_of_;
  std::vector<std::size_t> matchable_suffix_;
  std::size_t target_ = 0;
  std::size_t best_ = 0;
  std::size_t nodes_ = 0;
};

Tokens normalized(std::span<const std::string> tokens) { return tokenize(join_tokens(tokens)); }

double cosine(const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [k, v] : a) {
    na += v * v;
    auto it = b.find(k);
    if (it != b.end()) dot += v * it->second;
  }
  for (const auto& [k, v] : b) nb += v * v;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

double bleu(std::span<const std::string> hyp, std::span<const Tokens> refs, int max_n) {
  if (refs.empty()) throw Error("bleu needs at least one reference");
  if (max_n < 1) throw Error("bleu order must be >= 1");
  if (hyp.empty()) return 0.0;
  const double hyp_len = static_cast<double>(hyp.size());
  const int order = std::min<int>(max_n, static_cast<int>(hyp.size()));
  double log_sum = 0.0;
  for (int n = 1; n <= order; ++n) {
    const NGramCounts h = ngrams(hyp, n);
    std::map<std::string, int> max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    int clipped = 0, total = 0;
    for (const auto& [g, c] : h) {
      total += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) clipped += std::min(c, it->second);
    }
    if (clipped == 0 && n == 1) return 0.0;
    const double precision =
        clipped > 0 ? static_cast<double>(clipped) / static_cast<double>(total) : 1.0 / (2.0 * hyp_len);
    log_sum += std::log(precision);
  }
  std::size_t closest = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t len) { return len > hyp.size() ? len - hyp.size() : hyp.size() - len; };
    if (d(r.size()) < d(closest) || (d(r.size()) == d(closest) && r.size() < closest)) closest = r.size();
  }
  const double bp = hyp.size() > closest ? 1.0 : std::exp(1.0 - static_cast<double>(closest) / hyp_len);
  return 100.0 * bp * std::exp(log_sum / order);
}

double meteor_lite(std::span<const std::string> hyp, std::span<const Tokens> refs) {
  if (refs.empty()) throw Error("meteor needs at least one reference");
  if (hyp.empty()) return 0.0;
  double best = 0.0;
  for (const auto& ref : refs) {
    if (ref.empty()) continue;
    ChunkSearch search(hyp, ref);
    const std::size_t m = search.matches();
    if (m == 0) continue;
    const double chunks = static_cast<double>(search.min_chunks());
    const double p = static_cast<double>(m) / static_cast<double>(hyp.size());
    const double r = static_cast<double>(m) / static_cast<double>(ref.size());
    const double f = p * r / (0.9 * p + 0.1 * r);
    const double frag = chunks / static_cast<double>(m);
    best = std::max(best, f * (1.0 - 0.5 * frag * frag * frag));
  }
  return 100.0 * best;
}

double rouge_l(std::span<const std::string> hyp, std::span<const Tokens> refs) {
  if (refs.empty()) throw Error("rouge-l needs at least one reference");
  if (hyp.empty()) return 0.0;
  double best = 0.0;
  const double b2 = kRougeBeta * kRougeBeta;
  for (const auto& ref : refs) {
    if (ref.empty()) continue;
    const double lcs = static_cast<double>(lcs_length(hyp, ref));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(hyp.size());
    const double r = lcs / static_cast<double>(ref.size());
    best = std::max(best, (1.0 + b2) * p * r / (r + b2 * p));
  }
  return 100.0 * best;
}

CiderResult cider(std::span<const Tokens> hyps, std::span<const std::vector<Tokens>> refs) {
  if (hyps.size() != refs.size()) throw Error("cider needs one reference set per hypothesis");
  CiderResult result;
  const std::size_t n_images = hyps.size();
  result.per_image.assign(n_images, 0.0);
  if (n_images == 0) return result;
  if (n_images == 1) {
    result.warnings.push_back("cider: single-image corpus, every idf is 0 and the score is degenerately 0");
  }
  std::array<std::unordered_map<std::string, int>, kCiderOrder> df;
  for (const auto& image_refs : refs) {
    for (int n = 1; n <= kCiderOrder; ++n) {
      std::set<std::string> present;
      for (const auto& r : image_refs) {
        for (const auto& [g, c] : ngrams(r, n)) present.insert(g);
      }
      for (const auto& g : present) ++df[static_cast<std::size_t>(n - 1)][g];
    }
  }
  const double log_n = std::log(static_cast<double>(n_images));
  auto tfidf = [&](std::span<const std::string> tokens, int n) {
    std::map<std::string, double> vec;
    const auto& dfn = df[static_cast<std::size_t>(n - 1)];
    for (const auto& [g, c] : ngrams(tokens, n)) {
      auto it = dfn.find(g);
      const double d = it == dfn.end() ? 1.0 : static_cast<double>(it->second);
      vec[g] = static_cast<double>(c) * (log_n - std::log(d));
    }
    return vec;
  };
  parallel_for(n_images, [&](std::size_t i) {
    if (refs[i].empty()) return;
    double sum = 0.0;
    for (int n = 1; n <= kCiderOrder; ++n) {
      const auto h = tfidf(hyps[i], n);
      double per_n = 0.0;
      for (const auto& r : refs[i]) per_n += cosine(h, tfidf(r, n));
      sum += per_n / static_cast<double>(refs[i].size());
    }
    result.per_image[i] = 10.0 * 10.0 * sum / kCiderOrder;
  });
  double total = 0.0;
  for (double s : result.per_image) total += s;
  result.score = total / static_cast<double>(n_images);
  return result;
}

double generative_strength(std::span<const std::vector<Tokens>> generated) {
  if (generated.empty()) return 0.0;
  double total = 0.0;
  for (const auto& set : generated) {
    std::set<Tokens> distinct;
    for (const auto& q : set) distinct.insert(normalized(q));
    total += static_cast<double>(distinct.size());
  }
  return total / static_cast<double>(generated.size());
}

double inventiveness(std::span<const std::vector<Tokens>> generated, const std::set<Tokens>& train_questions,
                     std::vector<std::string>* warnings) {
  std::set<Tokens> distinct;
  for (const auto& set : generated) {
    for (const auto& q : set) distinct.insert(normalized(q));
  }
  if (distinct.empty()) {
    if (warnings != nullptr) warnings->push_back("inventiveness: no generated questions, reporting 0");
    return 0.0;
  }
  std::size_t novel = 0;
  for (const auto& q : distinct) novel += train_questions.count(q) == 0 ? 1 : 0;
  return 100.0 * static_cast<double>(novel) / static_cast<double>(distinct.size());
}

std::set<Tokens> training_questions(std::span<const ImageRecord> train_annotations) {
  const bool tagged = std::any_of(train_annotations.begin(), train_annotations.end(),
                                  [](const ImageRecord& r) { return r.split != Split::unassigned; });
  std::set<Tokens> out;
  for (const auto& r : train_annotations) {
    if (tagged && r.split != Split::train) continue;
    for (const auto& q : r.questions) out.insert(normalized(q));
  }
  return out;
}

MetricReport evaluate_run(std::span<const GenerationRecord> generated, std::span<const ImageRecord> annotations,
                          std::span<const ImageRecord> train_annotations, int bleu_order) {
  std::map<std::string, const ImageRecord*> refs_by_id;
  for (const auto& r : annotations) refs_by_id[r.image_id] = &r;

  std::vector<const GenerationRecord*> ordered;
  for (const auto& g : generated) ordered.push_back(&g);
  std::sort(ordered.begin(), ordered.end(),
            [](const GenerationRecord* a, const GenerationRecord* b) { return a->image_id < b->image_id; });
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (ordered[i]->image_id == ordered[i - 1]->image_id) {
      throw Error(fmt::format("image_id '{}' appears more than once in the generations", ordered[i]->image_id));
    }
  }

  MetricReport report;
  report.n_images = ordered.size();
  report.bleu_order = bleu_order;
  std::set<std::string> strategies;
  std::vector<Tokens> top;
  std::vector<std::vector<Tokens>> refs;
  std::vector<std::vector<Tokens>> all_generated;
  for (const auto* g : ordered) {
    auto it = refs_by_id.find(g->image_id);
    if (it == refs_by_id.end() || it->second->questions.empty()) {
      throw Error(fmt::format("no reference questions for image_id '{}'", g->image_id));
    }
    if (!g->strategy.empty()) strategies.insert(g->strategy);
    refs.push_back(it->second->questions);
    all_generated.push_back(g->questions);
    // Highest logprob; ties go to the lexicographically smaller question.
    std::size_t best = 0;
    for (std::size_t q = 1; q < g->questions.size(); ++q) {
      if (g->logprobs[q] > g->logprobs[best] ||
          (g->logprobs[q] == g->logprobs[best] && g->questions[q] < g->questions[best])) {
        best = q;
      }
    }
    top.push_back(g->questions.empty() ? Tokens{} : normalized(g->questions[best]));
  }
  report.strategy = fmt::format("{}", fmt::join(strategies, "+"));

  const CiderResult cider_result = cider(top, refs);
  report.warnings = cider_result.warnings;
  report.per_image.resize(ordered.size());
  parallel_for(ordered.size(), [&](std::size_t i) {
    ImageScore& s = report.per_image[i];
    s.image_id = ordered[i]->image_id;
    s.top_question = top[i];
    s.bleu = bleu(top[i], refs[i], bleu_order);
    s.meteor = meteor_lite(top[i], refs[i]);
    s.rouge_l = rouge_l(top[i], refs[i]);
    s.cider = cider_result.per_image[i];
    std::set<Tokens> distinct;
    for (const auto& q : all_generated[i]) distinct.insert(normalized(q));
    s.distinct_questions = distinct.size();
  });
  for (const auto& s : report.per_image) {
    report.bleu += s.bleu;
    report.meteor += s.meteor;
    report.rouge_l += s.rouge_l;
  }
  if (!ordered.empty()) {
    const double n = static_cast<double>(ordered.size());
    report.bleu /= n;
    report.meteor /= n;
    report.rouge_l /= n;
  }
  report.cider = cider_result.score;
  report.generative_strength = generative_strength(all_generated);
  report.inventiveness_pct = inventiveness(all_generated, training_questions(train_annotations), &report.warnings);
  return report;
}

json report_to_json(const MetricReport& r) {
  json per_image = json::array();
  for (const auto& s : r.per_image) {
    per_image.push_back({{"image_id", s.image_id},
                         {"top_question", join_tokens(s.top_question)},
                         {"bleu", s.bleu},
                         {"meteor", s.meteor},
                         {"rouge_l", s.rouge_l},
                         {"cider", s.cider},
                         {"distinct_questions", s.distinct_questions}});
  }
  return {{"bleu", r.bleu},
          {"meteor", r.meteor},
          {"rouge_l", r.rouge_l},
          {"cider", r.cider},
          {"generative_strength", r.generative_strength},
          {"inventiveness_pct", r.inventiveness_pct},
          {"n_images", r.n_images},
          {"bleu_order", r.bleu_order},
          {"strategy", r.strategy},
          {"per_image", std::move(per_image)},
          {"warnings", r.warnings},
          {"meteor_variant", "exact-match"},
          {"bleu_smoothing", "order min(n, hyp_len); no unigram match -> 0; zero precision -> 1/(2*hyp_len)"},
          {"scale", "0-100"}};
}

MetricReport report_from_json(const json& j) {
  MetricReport r;
  try {
    r.bleu = j.at("bleu").get<double>();
    r.meteor = j.at("meteor").get<double>();
    r.rouge_l = j.at("rouge_l").get<double>();
    r.cider = j.at("cider").get<double>();
    r.generative_strength = j.at("generative_strength").get<double>();
    r.inventiveness_pct = j.at("inventiveness_pct").get<double>();
    r.n_images = j.at("n_images").get<std::size_t>();
    r.bleu_order = j.value("bleu_order", 4);
    r.strategy = j.value("strategy", std::string{});
    r.warnings = j.value("warnings", std::vector<std::string>{});
    for (const auto& s : j.value("per_image", json::array())) {
      ImageScore score;
      score.image_id = s.at("image_id").get<std::string>();
      score.top_question = tokenize(s.at("top_question").get<std::string>());
      score.bleu = s.at("bleu").get<double>();
      score.meteor = s.at("meteor").get<double>();
      score.rouge_l = s.at("rouge_l").get<double>();
      score.cider = s.at("cider").get<double>();
      score.distinct_questions = s.at("distinct_questions").get<std::size_t>();
      r.per_image.push_back(std::move(score));
    }
  } catch (const json::exception& e) {
    throw Error(fmt::format("malformed metric report: {}", e.what()));
  }
  return r;
}

MetricReport load_report(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(fmt::format("{}: malformed metric report: {}", path.string(), e.what()));
  }
  return report_from_json(j);
}

std::string format_report_table(std::span<const std::pair<std::string, MetricReport>> rows) {
  const std::vector<std::string> headers{"Run", "BLEU", "METEOR", "ROUGE-L", "CIDEr", "Gen.Str.", "Inv.%"};
  std::vector<std::vector<std::string>> cells{headers};
  for (const auto& [label, r] : rows) {
    cells.push_back({label, fmt::format("{:.1f}", r.bleu), fmt::format("{:.1f}", r.meteor),
                     fmt::format("{:.1f}", r.rouge_l), fmt::format("{:.1f}", r.cider),
                     fmt::format("{:.2f}", r.generative_strength), fmt::format("{:.1f}", r.inventiveness_pct)});
  }
  std::vector<std::size_t> width(headers.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  for (const auto& row : cells) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c == 0) {
        line += fmt::format("{:<{}}", row[c], width[c]);
      } else {
        line += fmt::format("  {:>{}}", row[c], width[c]);
      }
    }
    out += line + "\n";
  }
  return out;
}

}  // namespace vqg
