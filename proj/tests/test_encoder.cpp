#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "vqg/encoder.hpp"
#include "vqg/error.hpp"

using namespace vqg;

TEST_CASE("all-zero encoder gives a zero state") {
  const Model m = Model::zeros({6, 2, 4, 3});
  const std::vector<double> feature{0.3, -1.0, 2.0};
  const std::vector<TokenId> kws{4, 5};
  const RecurrentState s = encode(feature, kws, m.encoder, m.embeddings.rows);
  CHECK(s.h == Vector(4, 0.0));
  CHECK(s.c == Vector(4, 0.0));
}

TEST_CASE("mean of one keyword is that keyword's embedding") {
  const Model m = testing::random_model({6, 3, 4, 2}, 4);
  const std::vector<TokenId> kws{5};
  const Vector kw = mean_keyword_embedding(kws, m.embeddings.rows);
  const auto row = m.embeddings.rows.row(5);
  CHECK(std::equal(kw.begin(), kw.end(), row.begin()));
  CHECK(mean_keyword_embedding({}, m.embeddings.rows) == Vector(3, 0.0));
}

TEST_CASE("encode matches the matrix-vector oracle") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Model m = testing::random_model({7, 2, 4, 3}, seed);
    const auto feature = testing::random_vector(3, seed + 100);
    const std::vector<TokenId> kws{4, 6};
    const RecurrentState s = encode(feature, kws, m.encoder, m.embeddings.rows);
    const auto want = oracle::encode(m, feature, kws);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(s.h[i] - want.h[i]) <= 1e-12);
  }
}

TEST_CASE("encoder properties") {
  const Model m = testing::random_model({9, 3, 5, 4}, 21, 2.0);
  const auto u = testing::random_vector(4, 1, 5.0);
  const auto v = testing::random_vector(4, 2, 5.0);
  const std::vector<TokenId> kws{4, 7, 8};

  SUBCASE("pre-activation superposition") {
    const double alpha = 0.7, beta = -1.9;
    Vector mix(4);
    for (std::size_t i = 0; i < 4; ++i) mix[i] = alpha * u[i] + beta * v[i];
    const Vector pu = encoder_preactivation(u, kws, m.encoder, m.embeddings.rows);
    const Vector pv = encoder_preactivation(v, kws, m.encoder, m.embeddings.rows);
    const Vector pmix = encoder_preactivation(mix, kws, m.encoder, m.embeddings.rows);
    const Vector zero = encoder_preactivation(Vector(4, 0.0), kws, m.encoder, m.embeddings.rows);
    for (std::size_t i = 0; i < pmix.size(); ++i) {
      CHECK(std::abs(pmix[i] - (alpha * pu[i] + beta * pv[i] - (alpha + beta - 1.0) * zero[i])) <= 1e-12);
    }
  }
  SUBCASE("h0 stays strictly inside (-1, 1)") {
    const RecurrentState s = encode(u, kws, m.encoder, m.embeddings.rows);
    for (double x : s.h) CHECK(std::abs(x) < 1.0);
  }
  SUBCASE("keyword order does not matter") {
    std::vector<TokenId> perm = kws;
    do {
      const auto a = encode(u, perm, m.encoder, m.embeddings.rows).h;
      const auto b = encode(u, kws, m.encoder, m.embeddings.rows).h;
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-15);
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(encode(Vector(3, 0.0), kws, m.encoder, m.embeddings.rows), Error);
  }
}

TEST_CASE("pretrained embeddings") {
  const Vocabulary vocab({"the", "castle", "zebra"}, 1);
  SUBCASE("file vectors replace rows") {
    std::istringstream in("the 0.418 0.24968\ncastle -1 2\nunrelated 5 5\n");
    const EmbeddingTable t = read_pretrained_embeddings(in, vocab, 3);
    CHECK(t.dim() == 2);
    CHECK(t.rows.rows == vocab.size());
    CHECK(t.rows(static_cast<std::size_t>(vocab.id("the")), 0) == 0.418);
    CHECK(t.rows(static_cast<std::size_t>(vocab.id("the")), 1) == 0.24968);
    CHECK(t.rows(static_cast<std::size_t>(vocab.id("castle")), 0) == -1.0);
  }
  SUBCASE("missing tokens are seeded and reproducible") {
    std::istringstream a("the 1 2\n"), b("the 1 2\n"), c("the 1 2\n");
    const auto ta = read_pretrained_embeddings(a, vocab, 3);
    const auto tb = read_pretrained_embeddings(b, vocab, 3);
    const auto tc = read_pretrained_embeddings(c, vocab, 4);
    const auto zebra = static_cast<std::size_t>(vocab.id("zebra"));
    CHECK(ta.rows.row(zebra)[0] == tb.rows.row(zebra)[0]);
    CHECK(ta.rows.row(zebra)[0] != tc.rows.row(zebra)[0]);
    for (double x : ta.rows.row(zebra)) CHECK(std::abs(x) <= 0.05);
  }
  SUBCASE("inconsistent dimension names the line") {
    std::istringstream in("the 1 2 3\ncastle 1 2\n");
    CHECK_THROWS_WITH_AS(read_pretrained_embeddings(in, vocab, 1, "glove.txt"), doctest::Contains("glove.txt:2"),
                         Error);
  }
}
