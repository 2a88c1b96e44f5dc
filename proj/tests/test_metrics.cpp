#include <cmath>

#include "doctest.h"
#include "vqg/error.hpp"
#include "vqg/metrics.hpp"

using namespace vqg;

namespace {

Tokens t(std::string_view s) { return tokenize(s); }
std::vector<Tokens> refs(std::initializer_list<std::string_view> items) {
  std::vector<Tokens> out;
  for (auto s : items) out.push_back(t(s));
  return out;
}

GenerationRecord gen(std::string id, std::vector<std::string_view> qs, std::vector<double> lps) {
  GenerationRecord g;
  g.image_id = std::move(id);
  for (auto q : qs) g.questions.push_back(t(q));
  g.logprobs = std::move(lps);
  g.strategy = "beam";
  return g;
}

ImageRecord ann(std::string id, std::initializer_list<std::string_view> qs, Split split = Split::unassigned) {
  ImageRecord r;
  r.image_id = std::move(id);
  r.questions = refs(qs);
  r.split = split;
  return r;
}

// Renames every token through a fixed bijection.
Tokens renamed(const Tokens& in) {
  Tokens out;
  for (const auto& w : in) out.push_back("z" + w + "q");
  return out;
}

}  // namespace

TEST_CASE("bleu") {
  const Tokens hyp = t("the cat sat on the mat");
  const auto r = refs({"the cat is on the mat"});
  CHECK(bleu(hyp, r, 2) == doctest::Approx(100.0 * std::sqrt(5.0 / 6.0 * 3.0 / 5.0)));
  CHECK(bleu(hyp, r, 1) == doctest::Approx(100.0 * 5.0 / 6.0));
  CHECK(bleu(hyp, refs({"the cat sat on the mat"})) == doctest::Approx(100.0));

  SUBCASE("hand-worked bigram example") {
    // p1 = 2/3, p2 = 1/2, closest ref length 3.
    CHECK(bleu(t("a b c"), refs({"a b d"}), 2) == doctest::Approx(100.0 * std::sqrt(2.0 / 3.0 * 0.5)));
    CHECK(bleu(t("a b c"), refs({"a b d"}), 2) == doctest::Approx(57.735).epsilon(1e-4));
  }
  SUBCASE("brevity penalty uses the closest reference, ties to the shorter") {
    const double p = bleu(t("a b"), refs({"a b c", "a b c d e f"}), 1);
    CHECK(p == doctest::Approx(100.0 * std::exp(1.0 - 3.0 / 2.0)));
    const double tie = bleu(t("a b c d"), refs({"a b c", "x y z w v"}), 1);
    CHECK(tie == doctest::Approx(100.0 * 3.0 / 4.0));
  }
  SUBCASE("clipping") { CHECK(bleu(t("the the the"), refs({"the cat"}), 1) == doctest::Approx(100.0 / 3.0)); }
  SUBCASE("smoothing of empty higher orders") {
    CHECK(bleu(t("a x"), refs({"a y"}), 2) == doctest::Approx(100.0 * std::sqrt(0.5 * (1.0 / 4.0))));
  }
  SUBCASE("short hypotheses use an order capped at their length") {
    CHECK(bleu(t("what is this"), refs({"what is this"})) == doctest::Approx(100.0));
    CHECK(bleu(t("hi"), refs({"hi"})) == doctest::Approx(100.0));
  }
  SUBCASE("no overlapping unigrams") {
    CHECK(bleu(t("x y z w"), refs({"a b c d"})) < 1.0);
    CHECK(bleu(t("x"), refs({"a"})) < 1.0);
  }
  CHECK(bleu({}, r) == 0.0);
}

TEST_CASE("meteor-lite") {
  const Tokens hyp = t("the cat sat on the mat");
  const auto r = refs({"the cat is on the mat"});
  const double f = 5.0 / 6.0;
  CHECK(meteor_lite(hyp, r) == doctest::Approx(100.0 * f * (1.0 - 0.5 * std::pow(2.0 / 5.0, 3))));
  CHECK(meteor_lite(t("a b c"), refs({"c b a"})) == doctest::Approx(50.0));
  SUBCASE("chunk count uses the best alignment") {
    // "the" can align to either occurrence; the good alignment yields one chunk.
    CHECK(meteor_lite(t("the mat"), refs({"the cat on the mat"})) ==
          doctest::Approx(100.0 * (2.0 / 2.0 * 2.0 / 5.0 / (0.9 * 1.0 + 0.1 * 0.4)) * (1.0 - 0.5 * std::pow(0.5, 3))));
  }
  SUBCASE("identity is near but below 100") {
    CHECK(meteor_lite(t("a b c d e f g h"), refs({"a b c d e f g h"})) ==
          doctest::Approx(100.0 * (1.0 - 0.5 * std::pow(1.0 / 8.0, 3))));
  }
  CHECK(meteor_lite(t("x y"), refs({"a b"})) == 0.0);
}

TEST_CASE("rouge-l") {
  CHECK(rouge_l(t("the cat sat on the mat"), refs({"the cat is on the mat"})) == doctest::Approx(100.0 * 5.0 / 6.0));
  CHECK(rouge_l(t("a b c"), refs({"c b a"})) == doctest::Approx(100.0 / 3.0));
  // P = 1, R = 2/3, beta 1.2.
  const double p = 1.0, rr = 2.0 / 3.0, b2 = 1.44;
  CHECK(rouge_l(t("a b"), refs({"a x b"})) == doctest::Approx(100.0 * (1 + b2) * p * rr / (rr + b2 * p)));
  CHECK(rouge_l(t("a b"), refs({"x y", "a b"})) == doctest::Approx(100.0));
}

TEST_CASE("cider") {
  const std::vector<Tokens> hyps{t("what color is the castle"), t("how tall is this tower")};
  const std::vector<std::vector<Tokens>> r{refs({"what color is the castle"}), refs({"how tall is this tower"})};
  SUBCASE("perfect hypotheses over distinct images") {
    const CiderResult c = cider(hyps, r);
    CHECK(c.score == doctest::Approx(100.0));
    CHECK(c.warnings.empty());
  }
  SUBCASE("unrelated hypotheses") {
    const std::vector<Tokens> bad{t("zebra zebra"), t("giraffe")};
    CHECK(cider(bad, r).score == 0.0);
  }
  SUBCASE("single image warns") {
    const CiderResult c = cider(std::span(hyps).first(1), std::span(r).first(1));
    CHECK(c.score == 0.0);
    CHECK_FALSE(c.warnings.empty());
  }
}

TEST_CASE("diversity metrics") {
  const std::vector<std::vector<Tokens>> gen{{t("a b"), t("A b?"), t("c")}, {t("d")}};
  CHECK(generative_strength(gen) == doctest::Approx(1.5));
  const std::set<Tokens> train{t("a b")};
  CHECK(inventiveness(gen, train) == doctest::Approx(200.0 / 3.0));
  CHECK(inventiveness(gen, {t("a b"), t("c"), t("d")}) == 0.0);
  CHECK(inventiveness(gen, {}) == 100.0);
  std::vector<std::string> warnings;
  CHECK(inventiveness(std::vector<std::vector<Tokens>>{}, train, &warnings) == 0.0);
  CHECK(warnings.size() == 1);
}

TEST_CASE("evaluate_run") {
  const std::vector<ImageRecord> annotations{ann("a", {"what is this castle", "who built this castle"}),
                                             ann("b", {"how old is the bridge", "where is the bridge"}),
                                             ann("c", {"what is the river called"})};
  const std::vector<ImageRecord> train{ann("x", {"what is this castle"}, Split::train),
                                       ann("y", {"how old is the bridge"}, Split::val)};
  const std::vector<GenerationRecord> g{gen("b", {"how old is the bridge", "is it old"}, {-1.0, -3.0}),
                                        gen("a", {"what is this", "what is this castle"}, {-2.0, -1.0}),
                                        gen("c", {"what river is it"}, {-4.0})};
  const MetricReport rep = evaluate_run(g, annotations, train);
  CHECK(rep.n_images == 3);
  CHECK(rep.per_image[0].image_id == "a");
  CHECK(rep.per_image[0].top_question == t("what is this castle"));
  CHECK(rep.generative_strength == doctest::Approx(5.0 / 3.0));
  // Only "what is this castle" is a train question.
  CHECK(rep.inventiveness_pct == doctest::Approx(80.0));
  CHECK(rep.strategy == "beam");

  SUBCASE("input order does not matter") {
    const std::vector<GenerationRecord> shuffled{g[2], g[0], g[1]};
    CHECK(evaluate_run(shuffled, annotations, train) == rep);
  }
  SUBCASE("json round trip") { CHECK(report_from_json(report_to_json(rep)) == rep); }
  SUBCASE("token renaming leaves every score unchanged") {
    std::vector<ImageRecord> ann2 = annotations, train2 = train;
    std::vector<GenerationRecord> g2 = g;
    for (auto& r : ann2) {
      for (auto& q : r.questions) q = renamed(q);
    }
    for (auto& r : train2) {
      for (auto& q : r.questions) q = renamed(q);
    }
    for (auto& r : g2) {
      for (auto& q : r.questions) q = renamed(q);
    }
    const MetricReport rep2 = evaluate_run(g2, ann2, train2);
    CHECK(rep2.bleu == doctest::Approx(rep.bleu).epsilon(1e-12));
    CHECK(rep2.meteor == doctest::Approx(rep.meteor).epsilon(1e-12));
    CHECK(rep2.rouge_l == doctest::Approx(rep.rouge_l).epsilon(1e-12));
    CHECK(rep2.cider == doctest::Approx(rep.cider).epsilon(1e-12));
    CHECK(rep2.inventiveness_pct == rep.inventiveness_pct);
  }
  SUBCASE("duplicate generated questions change nothing") {
    std::vector<GenerationRecord> g2 = g;
    g2[0].questions.push_back(g2[0].questions[1]);
    g2[0].logprobs.push_back(-5.0);
    const MetricReport rep2 = evaluate_run(g2, annotations, train);
    CHECK(rep2.generative_strength == rep.generative_strength);
    CHECK(rep2.inventiveness_pct == rep.inventiveness_pct);
    CHECK(rep2.bleu == rep.bleu);
  }
  SUBCASE("errors") {
    std::vector<GenerationRecord> extra = g;
    extra.push_back(gen("zz", {"what"}, {-1.0}));
    CHECK_THROWS_WITH_AS(evaluate_run(extra, annotations, train), doctest::Contains("zz"), Error);
    std::vector<GenerationRecord> dup = g;
    dup.push_back(g[0]);
    CHECK_THROWS_AS(evaluate_run(dup, annotations, train), Error);
  }
  SUBCASE("table") {
    const std::vector<std::pair<std::string, MetricReport>> rows{{"run1", rep}};
    const std::string table = format_report_table(rows);
    CHECK(table.find("Inv.%") != std::string::npos);
    CHECK(table.find("run1") != std::string::npos);
  }
}

TEST_CASE("golden values and degenerate cases") {
  const Tokens hyp = t("what is this");
  const auto that = refs({"what is that"});
  CHECK(std::abs(bleu(hyp, that, 2) - 57.74) <= 0.05);
  CHECK(std::abs(rouge_l(hyp, that) - 66.67) <= 0.05);
  CHECK(std::abs(meteor_lite(hyp, refs({"what is this"})) - 98.15) <= 0.05);
  CHECK(meteor_lite(t("what"), refs({"what"})) == doctest::Approx(50.0));
  CHECK(rouge_l(hyp, refs({"what is this"})) == doctest::Approx(100.0));
  CHECK(bleu(hyp, refs({"what is this"})) == doctest::Approx(100.0));
  const double none = bleu(t("red green blue"), refs({"what is this"}));
  CHECK(none >= 0.0);
  CHECK(none < 1.0);
  CHECK(meteor_lite(t("red green"), refs({"what is this"})) == 0.0);
  CHECK(rouge_l({}, that) == 0.0);

  const std::vector<Tokens> hyps{Tokens{}, t("how tall is this tower")};
  const std::vector<std::vector<Tokens>> r{refs({"what color is the castle"}), refs({"how tall is this tower"})};
  const CiderResult c = cider(hyps, r);
  CHECK(c.per_image[0] == 0.0);
  CHECK(c.per_image[1] == doctest::Approx(100.0));

  CHECK(generative_strength(std::vector<std::vector<Tokens>>{{}, {}}) == 0.0);
  CHECK(generative_strength(std::vector<std::vector<Tokens>>{{t("a")}, {t("b")}, {t("a")}}) == 1.0);
}

TEST_CASE("top-1 copies of a reference score 100") {
  const std::vector<ImageRecord> annotations{ann("a", {"what is this castle", "who built it"}),
                                             ann("b", {"how old is the bridge"})};
  const std::vector<GenerationRecord> g{gen("a", {"who built it", "what"}, {-0.5, -2.0}),
                                        gen("b", {"how old is the bridge"}, {-1.0})};
  const MetricReport rep = evaluate_run(g, annotations, annotations);
  CHECK(rep.bleu == doctest::Approx(100.0));
  CHECK(rep.rouge_l == doctest::Approx(100.0));
  for (double v : {rep.bleu, rep.meteor, rep.rouge_l, rep.cider}) {
    CHECK(std::isfinite(v));
    CHECK(v >= 0.0);
    CHECK(v <= 100.0 + 1e-9);
  }
}
