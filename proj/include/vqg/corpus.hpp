#pragma once

// Corpus ingestion: tokenization, vocabularies, train/val/test splits,
// annotation and feature file IO, and the synthetic desk-scale corpus.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace vqg {

using Tokens = std::vector<std::string>;
using TokenId = std::int32_t;

enum class Split { train, val, test, unassigned };

std::string_view to_string(Split split);
// Throws Error on unknown names.
Split parse_split(std::string_view name);

struct ImageRecord {
  std::string image_id;
  // Empty until features are attached.
  std::vector<double> feature;
  Tokens keywords;
  std::optional<std::string> location;
  std::vector<Tokens> questions;
  Split split = Split::unassigned;

  bool operator==(const ImageRecord&) const = default;
};

// Lowercases ASCII letters, splits on whitespace and strips the characters
// .,!?;:"() from both ends of every token. Empty tokens are dropped.
Tokens tokenize(std::string_view text);
std::string join_tokens(std::span<const std::string> tokens);

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kStartId = 1;
inline constexpr TokenId kEndId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr std::size_t kNumReserved = 4;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kStartToken = "<start>";
inline constexpr std::string_view kEndToken = "<end>";
inline constexpr std::string_view kUnkToken = "<unk>";

// Bijective token <-> id map. Ids 0-3 are the reserved tokens; the rest are
// sorted lexicographically so ids never depend on hash iteration order.
class Vocabulary {
 public:
  Vocabulary();
  // Builds from the non-reserved tokens in any order; duplicates and
  // reserved names are ignored.
  Vocabulary(std::vector<std::string> tokens, int min_count);

  TokenId id(std::string_view token) const;  // kUnkId when absent
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  int min_count() const { return min_count_; }
  // All tokens, reserved first, indexed by id.
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<TokenId> encode(std::span<const std::string> tokens) const;
  Tokens decode(std::span<const TokenId> ids) const;

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && min_count_ == other.min_count_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  int min_count_ = 1;
};

// Counts question and keyword tokens. Throws Error when no token reaches
// min_count.
Vocabulary build_vocab(std::span<const ImageRecord> records, int min_count);

struct SplitSpec {
  std::array<double, 3> ratios{0.6, 0.2, 0.2};  // train, val, test
  std::uint64_t seed = 0;
};

// Shuffles a copy of the records by a seeded permutation and tags them:
// val and test get floor(n * ratio) images, train gets the remainder. The
// returned records are in permuted order. Throws Error if a record is
// already assigned, the ratios are invalid, or a split with a positive
// ratio would be empty.
std::vector<ImageRecord> split_corpus(std::vector<ImageRecord> records, const SplitSpec& spec);

struct SyntheticCorpusSpec {
  int n_images = 40;
  int n_concepts = 5;
  int questions_per_image = 3;
  int feature_dim = 16;
  std::uint64_t seed = 42;
};

// Image i shows concept i mod n_concepts. Its feature is the concept's
// seeded centre plus uniform noise of scale 0.01, rounded to single
// precision; its questions are the concept's templates.
std::vector<ImageRecord> generate_synthetic_corpus(const SyntheticCorpusSpec& spec);

// Annotation files: one JSON object per line.
std::vector<ImageRecord> read_annotations(std::istream& in, std::string_view source = "<stream>");
std::vector<ImageRecord> load_annotations(const std::filesystem::path& path);
void write_annotations(std::ostream& out, std::span<const ImageRecord> records);
void save_annotations(const std::filesystem::path& path, std::span<const ImageRecord> records);

// Ordered by image_id; vectors hold single-precision values widened to double.
using FeatureMap = std::map<std::string, std::vector<double>>;

// Detects the binary form by its magic bytes, otherwise reads text lines.
FeatureMap read_features(std::istream& in, std::string_view source = "<stream>");
FeatureMap load_features(const std::filesystem::path& path);
void write_features_text(std::ostream& out, const FeatureMap& features);
void write_features_binary(std::ostream& out, const FeatureMap& features);
void save_features(const std::filesystem::path& path, const FeatureMap& features, bool binary);

FeatureMap features_of(std::span<const ImageRecord> records);
// Copies each record's feature from the map. A record without a feature is
// an error naming its image_id when require_all is set.
void attach_features(std::span<ImageRecord> records, const FeatureMap& features, bool require_all);

// Writes to a sibling temporary file and renames it over the target.
void write_file_atomically(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace vqg
