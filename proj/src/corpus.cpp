#include "vqg/corpus.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "vqg/error.hpp"
#include "vqg/random.hpp"

namespace vqg {
namespace {

using json = nlohmann::json;

constexpr std::string_view kStripChars = ".,!?;:\"()";
constexpr char kFeatureMagic[4] = {'V', 'Q', 'G', 'F'};
constexpr std::uint8_t kFeatureVersion = 0x01;

bool is_space(char ch) {
  return ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' || ch == '\v';
}

char ascii_lower(char ch) { return (ch >= 'A' && ch <= 'Z') ? static_cast<char>(ch - 'A' + 'a') : ch; }

double widen_float(double value) { return static_cast<double>(static_cast<float>(value)); }

[[noreturn]] void fail_at(std::string_view source, std::size_t line, const std::string& what) {
  throw Error(fmt::format("{}:{}: {}", source, line, what));
}

Tokens keyword_tokens(const json& keywords) {
  Tokens out;
  for (const auto& kw : keywords) {
    for (auto& t : tokenize(kw.get<std::string>())) out.push_back(std::move(t));
  }
  return out;
}

// Synthetic corpus vocabulary.
constexpr std::array<std::string_view, 12> kNouns = {
    "castle", "bridge", "beach", "tower", "garden", "statue",
    "church", "market", "harbor", "museum", "temple", "fountain"};

constexpr std::array<std::string_view, 8> kTemplates = {
    "what kind of {} is this",   "what is the name of this {}", "where is this {}",
    "how old is this {}",        "is this {} open to visitors", "who built this {}",
    "when was this {} built",    "how big is the {}"};

std::string concept_noun(int concept_index) {
  const auto base = std::string(kNouns[static_cast<std::size_t>(concept_index) % kNouns.size()]);
  const int round = concept_index / static_cast<int>(kNouns.size());
  return round == 0 ? base : fmt::format("{}{}", base, round + 1);
}

void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  out.write(b, 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void add_feature(FeatureMap& map, std::size_t& dim, std::string id, std::vector<double> vec) {
  if (map.count(id) != 0) throw Error(fmt::format("duplicate image_id '{}' in features", id));
  if (map.empty()) {
    dim = vec.size();
  } else if (vec.size() != dim) {
    throw Error(fmt::format("feature dimension mismatch for image_id '{}': {} vs corpus {}", id,
                            vec.size(), dim));
  }
  map.emplace(std::move(id), std::move(vec));
}

FeatureMap read_features_binary(std::string_view bytes, std::string_view source) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw Error(fmt::format("{}: truncated binary features file", source));
  };
  need(9);
  if (p[4] != kFeatureVersion) {
    throw Error(fmt::format("{}: unsupported features version {}", source, int(p[4])));
  }
  const std::uint32_t count = get_u32(p + 5);
  pos = 9;
  FeatureMap out;
  std::size_t dim = 0;
  for (std::uint32_t r = 0; r < count; ++r) {
    need(2);
    const std::size_t id_len = static_cast<std::size_t>(p[pos]) | (static_cast<std::size_t>(p[pos + 1]) << 8);
    pos += 2;
    need(id_len);
    std::string id(bytes.substr(pos, id_len));
    pos += id_len;
    need(4);
    const std::uint32_t d = get_u32(p + pos);
    pos += 4;
    need(static_cast<std::size_t>(d) * 4);
    std::vector<double> vec(d);
    for (std::uint32_t i = 0; i < d; ++i) {
      vec[i] = static_cast<double>(std::bit_cast<float>(get_u32(p + pos)));
      pos += 4;
    }
    add_feature(out, dim, std::move(id), std::move(vec));
  }
  if (pos != bytes.size()) throw Error(fmt::format("{}: trailing bytes after {} records", source, count));
  return out;
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
  }
  return "unassigned";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  if (name == "unassigned") return Split::unassigned;
  throw Error(fmt::format("unknown split '{}'", name));
}

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    std::string_view word = text.substr(i, j - i);
    const auto first = word.find_first_not_of(kStripChars);
    if (first != std::string_view::npos) {
      word = word.substr(first, word.find_last_not_of(kStripChars) - first + 1);
      std::string token(word);
      std::transform(token.begin(), token.end(), token.begin(), ascii_lower);
      out.push_back(std::move(token));
    }
    i = j;
  }
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

Vocabulary::Vocabulary() : Vocabulary({}, 1) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens, int min_count) : min_count_(min_count) {
  tokens_ = {std::string(kPadToken), std::string(kStartToken), std::string(kEndToken),
             std::string(kUnkToken)};
  std::sort(tokens.begin(), tokens.end());
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
  for (auto& t : tokens) {
    if (t == kPadToken || t == kStartToken || t == kEndToken || t == kUnkToken) continue;
    tokens_.push_back(std::move(t));
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(fmt::format("token id {} out of range for vocabulary of {}", id, tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

std::vector<TokenId> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

Tokens Vocabulary::decode(std::span<const TokenId> ids) const {
  Tokens out;
  out.reserve(ids.size());
  for (TokenId i : ids) out.push_back(token(i));
  return out;
}

Vocabulary build_vocab(std::span<const ImageRecord> records, int min_count) {
  if (min_count < 1) throw Error("min_count must be >= 1");
  std::map<std::string, int> counts;
  for (const auto& r : records) {
    for (const auto& q : r.questions) {
      for (const auto& t : q) ++counts[t];
    }
    for (const auto& k : r.keywords) ++counts[k];
  }
  std::vector<std::string> kept;
  for (const auto& [token, n] : counts) {
    if (n >= min_count) kept.push_back(token);
  }
  Vocabulary vocab(std::move(kept), min_count);
  if (vocab.size() == kNumReserved) {
    throw Error(fmt::format("vocabulary is empty at min_count {}", min_count));
  }
  return vocab;
}

std::vector<ImageRecord> split_corpus(std::vector<ImageRecord> records, const SplitSpec& spec) {
  double total = 0.0;
  for (double r : spec.ratios) {
    if (!(r >= 0.0)) throw Error("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(fmt::format("split ratios sum to {}, not 1", total));
  for (const auto& r : records) {
    if (r.split != Split::unassigned) {
      throw Error(fmt::format("record '{}' already has split '{}'", r.image_id, to_string(r.split)));
    }
  }
  const std::size_t n = records.size();
  // The epsilon absorbs representation error, e.g. 0.6 * 10.
  auto floor_count = [n](double ratio) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratio + 1e-9));
  };
  const std::size_t n_val = floor_count(spec.ratios[1]);
  const std::size_t n_test = floor_count(spec.ratios[2]);
  if (n_val + n_test > n) throw Error("split counts exceed corpus size");
  const std::size_t n_train = n - n_val - n_test;
  const std::array<std::size_t, 3> counts{n_train, n_val, n_test};
  const std::array<std::string_view, 3> names{"train", "val", "test"};
  for (std::size_t s = 0; s < 3; ++s) {
    if (spec.ratios[s] > 0.0 && counts[s] == 0) {
      throw Error(fmt::format("{} split would be empty ({} images, ratio {})", names[s], n,
                              spec.ratios[s]));
    }
  }

  Rng rng(spec.seed);
  rng.shuffle(std::span<ImageRecord>(records));
  for (std::size_t i = 0; i < n; ++i) {
    records[i].split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
  }
  return records;
}

std::vector<ImageRecord> generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
  if (spec.n_images < 1 || spec.n_concepts < 1 || spec.n_concepts > spec.n_images ||
      spec.questions_per_image < 1 || spec.feature_dim < 1) {
    throw UsageError(fmt::format(
        "invalid synthetic corpus spec: images={} concepts={} questions_per_image={} feature_dim={}",
        spec.n_images, spec.n_concepts, spec.questions_per_image, spec.feature_dim));
  }
  const auto dim = static_cast<std::size_t>(spec.feature_dim);

  std::vector<std::vector<double>> centres;
  for (int c = 0; c < spec.n_concepts; ++c) {
    Rng rng(derive_seed(spec.seed, fmt::format("concept:{}", c)));
    std::vector<double> centre(dim);
    for (auto& x : centre) x = rng.uniform(-1.0, 1.0);
    centres.push_back(std::move(centre));
  }

  std::vector<ImageRecord> out;
  out.reserve(static_cast<std::size_t>(spec.n_images));
  for (int i = 0; i < spec.n_images; ++i) {
    const int c = i % spec.n_concepts;
    const std::string noun = concept_noun(c);
    ImageRecord rec;
    rec.image_id = fmt::format("img_{:04d}", i);
    Rng noise(derive_seed(spec.seed, rec.image_id));
    rec.feature.resize(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      rec.feature[d] = widen_float(centres[static_cast<std::size_t>(c)][d] + noise.uniform(-0.01, 0.01));
    }
    rec.keywords = {noun};
    for (int q = 0; q < spec.questions_per_image; ++q) {
      const auto& tmpl = kTemplates[static_cast<std::size_t>(c + q) % kTemplates.size()];
      rec.questions.push_back(tokenize(fmt::format(fmt::runtime(tmpl), noun)));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<ImageRecord> read_annotations(std::istream& in, std::string_view source) {
  std::vector<ImageRecord> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ImageRecord rec;
    try {
      const json obj = json::parse(line);
      if (!obj.is_object()) fail_at(source, line_no, "expected a JSON object");
      rec.image_id = obj.at("image_id").get<std::string>();
      if (obj.contains("keywords")) rec.keywords = keyword_tokens(obj.at("keywords"));
      if (obj.contains("location") && !obj.at("location").is_null()) {
        rec.location = obj.at("location").get<std::string>();
      }
      for (const auto& q : obj.at("questions")) rec.questions.push_back(tokenize(q.get<std::string>()));
      if (obj.contains("split") && !obj.at("split").is_null()) {
        rec.split = parse_split(obj.at("split").get<std::string>());
      }
    } catch (const json::exception& e) {
      fail_at(source, line_no, fmt::format("malformed annotation record: {}", e.what()));
    } catch (const Error& e) {
      fail_at(source, line_no, e.what());
    }
    if (rec.questions.empty()) fail_at(source, line_no, fmt::format("record '{}' has no questions", rec.image_id));
    if (!seen.insert(rec.image_id).second) {
      fail_at(source, line_no, fmt::format("duplicate image_id '{}'", rec.image_id));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<ImageRecord> load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open annotations file {}", path.string()));
  return read_annotations(in, path.string());
}

void write_annotations(std::ostream& out, std::span<const ImageRecord> records) {
  for (const auto& r : records) {
    json obj;
    obj["image_id"] = r.image_id;
    obj["keywords"] = r.keywords;
    if (r.location) obj["location"] = *r.location;
    json qs = json::array();
    for (const auto& q : r.questions) qs.push_back(join_tokens(q));
    obj["questions"] = std::move(qs);
    if (r.split != Split::unassigned) obj["split"] = std::string(to_string(r.split));
    out << obj.dump() << '\n';
  }
}

void save_annotations(const std::filesystem::path& path, std::span<const ImageRecord> records) {
  std::ostringstream buf;
  write_annotations(buf, records);
  write_file_atomically(path, buf.str());
}

FeatureMap read_features(std::istream& in, std::string_view source) {
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kFeatureMagic, 4) == 0) {
    return read_features_binary(bytes, source);
  }
  FeatureMap out;
  std::size_t dim = 0;
  std::istringstream lines(bytes);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string id;
    std::vector<double> vec;
    std::size_t declared = 0;
    try {
      const json obj = json::parse(line);
      id = obj.at("image_id").get<std::string>();
      declared = obj.at("dim").get<std::size_t>();
      for (const auto& x : obj.at("vector")) vec.push_back(widen_float(x.get<double>()));
    } catch (const json::exception& e) {
      fail_at(source, line_no, fmt::format("malformed feature record: {}", e.what()));
    }
    if (declared != vec.size()) {
      fail_at(source, line_no,
              fmt::format("image_id '{}' declares dim {} but has {} values", id, declared, vec.size()));
    }
    try {
      add_feature(out, dim, std::move(id), std::move(vec));
    } catch (const Error& e) {
      fail_at(source, line_no, e.what());
    }
  }
  return out;
}

FeatureMap load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open features file {}", path.string()));
  return read_features(in, path.string());
}

void write_features_text(std::ostream& out, const FeatureMap& features) {
  for (const auto& [id, vec] : features) {
    std::string line = fmt::format("{{\"image_id\":{},\"dim\":{},\"vector\":[", json(id).dump(), vec.size());
    for (std::size_t i = 0; i < vec.size(); ++i) {
      if (i > 0) line.push_back(',');
      // Shortest representation that round-trips the single-precision value.
      line += fmt::format("{}", static_cast<float>(vec[i]));
    }
    line += "]}\n";
    out << line;
  }
}

void write_features_binary(std::ostream& out, const FeatureMap& features) {
  out.write(kFeatureMagic, 4);
  out.put(static_cast<char>(kFeatureVersion));
  put_u32(out, static_cast<std::uint32_t>(features.size()));
  for (const auto& [id, vec] : features) {
    if (id.size() > 0xffff) throw Error(fmt::format("image_id too long for binary features: {}", id));
    put_u16(out, static_cast<std::uint16_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    put_u32(out, static_cast<std::uint32_t>(vec.size()));
    for (double x : vec) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  }
}

void save_features(const std::filesystem::path& path, const FeatureMap& features, bool binary) {
  std::ostringstream buf;
  if (binary) {
    write_features_binary(buf, features);
  } else {
    write_features_text(buf, features);
  }
  write_file_atomically(path, buf.str());
}

FeatureMap features_of(std::span<const ImageRecord> records) {
  FeatureMap out;
  std::size_t dim = 0;
  for (const auto& r : records) add_feature(out, dim, r.image_id, r.feature);
  return out;
}

void attach_features(std::span<ImageRecord> records, const FeatureMap& features, bool require_all) {
  for (auto& r : records) {
    auto it = features.find(r.image_id);
    if (it == features.end()) {
      if (require_all) throw Error(fmt::format("missing feature vector for image_id '{}'", r.image_id));
      continue;
    }
    r.feature = it->second;
  }
}

void write_file_atomically(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot write {}", tmp.string()));
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error(fmt::format("write failed for {}", tmp.string()));
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(fmt::format("cannot rename {} to {}: {}", tmp.string(), path.string(), ec.message()));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open {}", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace vqg
