#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "vqg/error.hpp"
#include "vqg/trainer.hpp"

using namespace vqg;

namespace {

std::vector<double> flat(const Model& m) {
  std::vector<double> out;
  for_each_tensor(m, [&](const ConstTensorRef& t) { out.insert(out.end(), t.data.begin(), t.data.end()); });
  return out;
}

TrainConfig tiny_config(int epochs) {
  TrainConfig c;
  c.embed_dim = 6;
  c.hidden_dim = 8;
  c.epochs = epochs;
  c.batch_size = 4;
  c.lr = 1e-2;
  c.seed = 9;
  return c;
}

struct TinyCorpus {
  std::vector<ImageRecord> records;
  FeatureMap features;
  Vocabulary vocab;
};

TinyCorpus tiny_corpus() {
  TinyCorpus t;
  t.records = split_corpus(generate_synthetic_corpus({15, 3, 2, 4, 5}), {{0.6, 0.2, 0.2}, 5});
  t.features = features_of(t.records);
  std::vector<ImageRecord> train_only;
  for (const auto& r : t.records) {
    if (r.split == Split::train) train_only.push_back(r);
  }
  t.vocab = build_vocab(train_only, 1);
  return t;
}

}  // namespace

TEST_CASE("adam step") {
  TrainConfig c;
  SUBCASE("unit gradient from zero") {
    std::vector<double> p{0.0}, g{1.0}, m{0.0}, v{0.0};
    adam_step(p, g, m, v, 1, c);
    CHECK(std::abs(p[0] - (-1e-3 / (1.0 + 1e-8))) <= 1e-16);
    CHECK(std::abs(p[0] - (-0.000999999995)) <= 1e-11);
  }
  SUBCASE("first step moves by lr * g / (|g| + eps)") {
    std::vector<double> p{0.0}, g{2.0}, m{0.0}, v{0.0};
    adam_step(p, g, m, v, 1, c);
    CHECK(p[0] == doctest::Approx(-1e-3 * 2.0 / (2.0 + 1e-8)).epsilon(1e-14));
    CHECK(m[0] == doctest::Approx(0.2));
    CHECK(v[0] == doctest::Approx(0.004));
  }
  SUBCASE("zero gradient leaves fresh parameters unchanged") {
    std::vector<double> p{0.7, -1.3}, g{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
    adam_step(p, g, m, v, 1, c);
    CHECK(p == std::vector<double>{0.7, -1.3});
  }
  SUBCASE("equal gradients give equal updates") {
    std::vector<double> p{0.1, 0.1}, g{0.3, 0.3}, m{0.0, 0.0}, v{0.0, 0.0};
    adam_step(p, g, m, v, 1, c);
    CHECK(p[0] == p[1]);
  }
  SUBCASE("sign symmetry") {
    std::vector<double> p1{0.3}, g1{0.5}, m1{0.0}, v1{0.0};
    std::vector<double> p2{-0.3}, g2{-0.5}, m2{0.0}, v2{0.0};
    for (int t = 1; t <= 5; ++t) {
      adam_step(p1, g1, m1, v1, t, c);
      adam_step(p2, g2, m2, v2, t, c);
    }
    CHECK(p1[0] == -p2[0]);
  }
  SUBCASE("step counter starts at one") {
    std::vector<double> p{0.0}, g{1.0}, m{0.0}, v{0.0};
    CHECK_THROWS_AS(adam_step(p, g, m, v, 0, c), Error);
  }
}

TEST_CASE("global norm clipping") {
  Model g = testing::random_model({7, 3, 4, 2}, 3, 2.0);
  double before = 0.0;
  for (double x : flat(g)) before += x * x;
  before = std::sqrt(before);
  REQUIRE(before > 1.0);
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(before));
  double after = 0.0;
  for (double x : flat(g)) after += x * x;
  CHECK(std::sqrt(after) <= 1.0 + 1e-12);
  CHECK(std::sqrt(after) == doctest::Approx(1.0));

  Model small = testing::random_model({7, 3, 4, 2}, 3, 1e-4);
  const auto copy = flat(small);
  clip_global_norm(small, 1.0);
  CHECK(flat(small) == copy);
}

TEST_CASE("training") {
  const TinyCorpus c = tiny_corpus();

  SUBCASE("zero epochs returns the initialization") {
    const Checkpoint ck = train(c.records, c.features, c.vocab, tiny_config(0));
    const Model init = initialize_model(ck.model.dims, 9);
    CHECK(flat(ck.model) == flat(init));
    CHECK(ck.final_loss == ck.initial_loss);
    CHECK(ck.history.size() == 1);
  }
  SUBCASE("the loss drops and runs are byte-identical") {
    const Checkpoint a = train(c.records, c.features, c.vocab, tiny_config(30));
    const Checkpoint b = train(c.records, c.features, c.vocab, tiny_config(30));
    CHECK(serialize_checkpoint(a) == serialize_checkpoint(b));
    CHECK(a.final_loss < a.initial_loss);
    CHECK(a.history.size() == 31);
    CHECK(a.history.back().val_perplexity.has_value());
  }
  SUBCASE("frozen embeddings stay at their initial values") {
    TrainConfig cfg = tiny_config(5);
    cfg.embeddings_trainable = false;
    const Checkpoint ck = train(c.records, c.features, c.vocab, cfg);
    CHECK(ck.model.embeddings.rows == initialize_model(ck.model.dims, 9).embeddings.rows);
  }
  SUBCASE("sgd also trains") {
    TrainConfig cfg = tiny_config(20);
    cfg.optimizer = OptimizerKind::sgd;
    cfg.lr = 0.5;
    const Checkpoint ck = train(c.records, c.features, c.vocab, cfg);
    CHECK(ck.final_loss < ck.initial_loss);
  }
  SUBCASE("a train record without features is named") {
    FeatureMap partial = c.features;
    std::string victim;
    for (const auto& r : c.records) {
      if (r.split == Split::train) victim = r.image_id;
    }
    partial.erase(victim);
    CHECK_THROWS_WITH_AS(train(c.records, partial, c.vocab, tiny_config(1)), doctest::Contains(victim.c_str()), Error);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const TinyCorpus c = tiny_corpus();
  const Checkpoint a = train(c.records, c.features, c.vocab, tiny_config(3));
  const std::string text = serialize_checkpoint(a);
  const Checkpoint b = parse_checkpoint(text);
  CHECK(flat(a.model) == flat(b.model));
  CHECK(a.vocab == b.vocab);
  CHECK(a.config == b.config);
  CHECK(a.history == b.history);
  CHECK(serialize_checkpoint(b) == text);
  CHECK_THROWS_AS(parse_checkpoint("{\"version\": 99}"), Error);
  CHECK_THROWS_AS(parse_checkpoint("not json"), Error);
}

TEST_CASE("perplexity") {
  std::vector<ImageRecord> recs(1);
  recs[0].image_id = "a";
  recs[0].questions = {{"w"}};
  const FeatureMap features{{"a", {0.5}}};
  const Vocabulary vocab = build_vocab(recs, 1);
  REQUIRE(vocab.size() == 5);
  const TokenId w = vocab.id("w");

  const Model zero = Model::zeros({5, 5, 5, 1});
  CHECK(perplexity(zero, vocab, recs, features, 20) == doctest::Approx(5.0).epsilon(1e-14));

  const Model rigged = testing::chain_model(5, {{kStartId, w}, {w, kEndId}});
  CHECK(perplexity(rigged, vocab, recs, features, 20) == doctest::Approx(1.0).epsilon(1e-9));

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CHECK(perplexity(testing::random_model({5, 5, 5, 1}, seed), vocab, recs, features, 20) >= 1.0);
  }
}

TEST_CASE("train config json") {
  const TrainConfig d;
  CHECK(train_config_from_json(to_json(d)) == d);
  CHECK(train_config_from_json(nlohmann::json::object()) == d);
  CHECK(train_config_from_json({{"epochs", 3}}).epochs == 3);
  CHECK_THROWS_AS(train_config_from_json({{"epoch", 3}}), UsageError);
  CHECK_THROWS_AS(train_config_from_json({{"lr", "fast"}}), UsageError);
  CHECK_THROWS_AS(train_config_from_json({{"batch_size", 0}}), UsageError);
  CHECK_THROWS_AS(train_config_from_json({{"split_ratios", {0.5, 0.5, 0.5}}}), UsageError);
  TrainConfig bad;
  bad.lr = -1.0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
}
