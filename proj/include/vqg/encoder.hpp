#pragma once

// Fuses an image feature vector and the image's keywords into the
// decoder's initial recurrent state:
//   kw = mean of keyword embeddings (zero when there are none)
//   h0 = tanh(W_img * feature + W_kw * kw + b),  c0 = 0

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>

#include "vqg/corpus.hpp"
#include "vqg/tensor.hpp"

namespace vqg {

struct EmbeddingTable {
  Matrix rows;  // vocab_size x dim
  bool trainable = true;

  std::size_t dim() const { return rows.cols; }
};

struct EncoderParams {
  Matrix image_proj;    // hidden x image_dim
  Matrix keyword_proj;  // hidden x embed_dim
  Vector bias;          // hidden
};

struct RecurrentState {
  Vector h;
  Vector c;

  bool operator==(const RecurrentState&) const = default;
};

Vector mean_keyword_embedding(std::span<const TokenId> keywords, const Matrix& embeddings);

// W_img * feature + W_kw * kw + b, before the tanh.
Vector encoder_preactivation(std::span<const double> feature, std::span<const TokenId> keywords,
                             const EncoderParams& params, const Matrix& embeddings);

// Throws Error when the feature dimension does not match the projection.
RecurrentState encode(std::span<const double> feature, std::span<const TokenId> keywords,
                      const EncoderParams& params, const Matrix& embeddings);

// Accumulates d(loss)/d(params) given d(loss)/d(h0). Keyword embedding
// gradients go to embedding_grad when it is non-null.
void encode_backward(std::span<const double> feature, std::span<const TokenId> keywords,
                     std::span<const double> h0, std::span<const double> dh0,
                     const EncoderParams& params, const Matrix& embeddings, EncoderParams& grad,
                     Matrix* embedding_grad);

// GloVe-style text: a token then its components, whitespace separated, one
// entry per line. Tokens absent from the file get seeded uniform(-0.05, 0.05)
// rows; file tokens absent from the vocabulary are ignored.
EmbeddingTable read_pretrained_embeddings(std::istream& in, const Vocabulary& vocab,
                                          std::uint64_t seed, std::string_view source = "<stream>");
EmbeddingTable load_pretrained_embeddings(const std::filesystem::path& path, const Vocabulary& vocab,
                                          std::uint64_t seed);

}  // namespace vqg
