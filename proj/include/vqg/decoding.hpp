#pragma once

// Question generation from a trained model: greedy, beam and diverse beam
// search, plus exhaustive enumeration as a test oracle.
//
// Decoding never emits <start>. Every other token, <pad> and <unk>
// included, is a legal continuation; <end> finishes a hypothesis.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vqg/corpus.hpp"
#include "vqg/seq_model.hpp"

namespace vqg {

enum class Strategy { greedy, beam, dbs };

std::string_view to_string(Strategy strategy);
// Throws UsageError on unknown names.
Strategy parse_strategy(std::string_view name);

struct DecodingConfig {
  Strategy strategy = Strategy::greedy;
  std::size_t beam_size = 5;
  std::size_t min_steps = 3;
  double similarity_threshold = 0.5;
  std::size_t max_len = 20;
  std::size_t max_results = 10;
  std::uint64_t seed = 0;

  // Throws UsageError.
  void validate() const;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // after <start>; ends with <end> when finished
  double logprob = 0.0;
  bool finished = false;
  RecurrentState state;
};

struct GeneratedQuestion {
  std::vector<TokenId> tokens;  // <end> stripped
  double logprob = 0.0;         // includes the <end> step when finished
  bool finished = false;

  bool operator==(const GeneratedQuestion&) const = default;
};

struct GenerationSet {
  std::string image_id;
  std::vector<GeneratedQuestion> questions;

  bool operator==(const GenerationSet&) const = default;
};

struct DecodeRequest {
  std::string image_id;
  std::span<const double> feature;
  std::vector<TokenId> keywords;
};

// Candidate order used everywhere: higher logprob first, then fewer tokens,
// then lexicographically smaller token ids.
bool ranks_before(const GeneratedQuestion& a, const GeneratedQuestion& b);

GenerationSet greedy_decode(const Model& model, const DecodeRequest& request, const DecodingConfig& config);
GenerationSet beam_search(const Model& model, const DecodeRequest& request, const DecodingConfig& config);
GenerationSet diverse_beam_search(const Model& model, const DecodeRequest& request,
                                  const DecodingConfig& config);
// Dispatches on config.strategy.
GenerationSet generate(const Model& model, const DecodeRequest& request, const DecodingConfig& config);

// Scores every sequence that ends in <end> within max_len tokens, and every
// max_len-token sequence without <end>, by an independent teacher-forced
// pass; returns the best k in ranks_before order. Throws Error when
// vocab^max_len exceeds 10^6.
GenerationSet exhaustive_top_k(const Model& model, const DecodeRequest& request, std::size_t max_len,
                               std::size_t k);

// Re-scores a generated question with the teacher-forced forward pass.
double rescore(const Model& model, const DecodeRequest& request, const GeneratedQuestion& question);

// |A n B| / |A u B| over token sets; 1 when both are empty.
double jaccard_similarity(std::span<const TokenId> a, std::span<const TokenId> b);

// Generation output: one JSON object per line.
nlohmann::json generation_to_json(const GenerationSet& set, const Vocabulary& vocab, const DecodingConfig& config);

struct GenerationRecord {
  std::string image_id;
  std::vector<Tokens> questions;
  std::vector<double> logprobs;
  std::string strategy;
};

std::vector<GenerationRecord> read_generations(std::istream& in, std::string_view source = "<stream>");
std::vector<GenerationRecord> load_generations(const std::filesystem::path& path);

}  // namespace vqg
