#include "vqg/encoder.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "vqg/error.hpp"
#include "vqg/kernels.hpp"
#include "vqg/random.hpp"

namespace vqg {

Vector mean_keyword_embedding(std::span<const TokenId> keywords, const Matrix& embeddings) {
  Vector kw(embeddings.cols, 0.0);
  if (keywords.empty()) return kw;
  for (TokenId id : keywords) {
    if (id < 0 || static_cast<std::size_t>(id) >= embeddings.rows) {
      throw Error(fmt::format("keyword id {} outside embedding table", id));
    }
    const auto row = embeddings.row(static_cast<std::size_t>(id));
    for (std::size_t d = 0; d < kw.size(); ++d) kw[d] += row[d];
  }
  const double inv = 1.0 / static_cast<double>(keywords.size());
  for (auto& x : kw) x *= inv;
  return kw;
}

Vector encoder_preactivation(std::span<const double> feature, std::span<const TokenId> keywords,
                             const EncoderParams& params, const Matrix& embeddings) {
  if (feature.size() != params.image_proj.cols) {
    throw Error(fmt::format("feature dimension {} does not match encoder input dimension {}",
                            feature.size(), params.image_proj.cols));
  }
  if (embeddings.cols != params.keyword_proj.cols) {
    throw Error("embedding dimension does not match keyword projection");
  }
  Vector pre = params.bias;
  kernels::gemv(params.image_proj, feature, pre);
  const Vector kw = mean_keyword_embedding(keywords, embeddings);
  kernels::gemv(params.keyword_proj, kw, pre);
  return pre;
}

RecurrentState encode(std::span<const double> feature, std::span<const TokenId> keywords,
                      const EncoderParams& params, const Matrix& embeddings) {
  RecurrentState state;
  state.h = encoder_preactivation(feature, keywords, params, embeddings);
  for (auto& x : state.h) x = std::tanh(x);
  state.c.assign(state.h.size(), 0.0);
  return state;
}

void encode_backward(std::span<const double> feature, std::span<const TokenId> keywords,
                     std::span<const double> h0, std::span<const double> dh0,
                     const EncoderParams& params, const Matrix& embeddings, EncoderParams& grad,
                     Matrix* embedding_grad) {
  Vector dpre(h0.size());
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] = dh0[i] * (1.0 - h0[i] * h0[i]);
  for (std::size_t i = 0; i < dpre.size(); ++i) grad.bias[i] += dpre[i];
  kernels::ger(1.0, dpre, feature, grad.image_proj);
  const Vector kw = mean_keyword_embedding(keywords, embeddings);
  kernels::ger(1.0, dpre, kw, grad.keyword_proj);
  if (embedding_grad != nullptr && !keywords.empty()) {
    Vector dkw(kw.size(), 0.0);
    kernels::gemv_t(params.keyword_proj, dpre, dkw);
    const double inv = 1.0 / static_cast<double>(keywords.size());
    for (TokenId id : keywords) {
      kernels::axpy(inv, dkw, embedding_grad->row(static_cast<std::size_t>(id)));
    }
  }
}

EmbeddingTable read_pretrained_embeddings(std::istream& in, const Vocabulary& vocab,
                                          std::uint64_t seed, std::string_view source) {
  std::vector<std::pair<std::string, Vector>> entries;
  std::size_t dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    Vector values;
    std::string field;
    while (fields >> field) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(field, &used));
        if (used != field.size()) throw std::invalid_argument(field);
      } catch (const std::exception&) {
        throw Error(fmt::format("{}:{}: bad embedding component '{}'", source, line_no, field));
      }
    }
    if (values.empty()) throw Error(fmt::format("{}:{}: token '{}' has no components", source, line_no, token));
    if (entries.empty()) {
      dim = values.size();
    } else if (values.size() != dim) {
      throw Error(fmt::format("{}:{}: embedding dimension {} differs from {} on the first line", source,
                              line_no, values.size(), dim));
    }
    entries.emplace_back(std::move(token), std::move(values));
  }
  if (entries.empty()) throw Error(fmt::format("{}: no embeddings found", source));

  EmbeddingTable table;
  table.rows = Matrix(vocab.size(), dim);
  Rng rng(seed);
  for (auto& x : table.rows.data) x = rng.uniform(-0.05, 0.05);
  for (const auto& [token, values] : entries) {
    if (!vocab.contains(token)) continue;
    auto row = table.rows.row(static_cast<std::size_t>(vocab.id(token)));
    std::copy(values.begin(), values.end(), row.begin());
  }
  return table;
}

EmbeddingTable load_pretrained_embeddings(const std::filesystem::path& path, const Vocabulary& vocab,
                                          std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open embeddings file {}", path.string()));
  return read_pretrained_embeddings(in, vocab, seed, path.string());
}

}  // namespace vqg
