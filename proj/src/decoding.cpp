#include "vqg/decoding.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "vqg/error.hpp"
#include "vqg/random.hpp"

namespace vqg {
namespace {

using json = nlohmann::json;

RecurrentState initial_state(const Model& model, const DecodeRequest& request) {
  return encode(request.feature, request.keywords, model.encoder, model.embeddings.rows);
}

GeneratedQuestion to_question(const Hypothesis& h) {
  GeneratedQuestion q;
  q.tokens = h.tokens;
  if (h.finished) q.tokens.pop_back();
  q.logprob = h.logprob;
  q.finished = h.finished;
  return q;
}

bool hypothesis_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

// The k best legal continuations (never <start>), best first.
std::vector<TokenId> top_continuations(const Vector& logp, std::size_t k) {
  std::vector<TokenId> ids;
  ids.reserve(logp.size());
  for (std::size_t v = 0; v < logp.size(); ++v) {
    if (static_cast<TokenId>(v) != kStartId) ids.push_back(static_cast<TokenId>(v));
  }
  const std::size_t n = std::min(k, ids.size());
  auto better = [&](TokenId a, TokenId b) {
    const double la = logp[static_cast<std::size_t>(a)], lb = logp[static_cast<std::size_t>(b)];
    return la != lb ? la > lb : a < b;
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end(), better);
  ids.resize(n);
  return ids;
}

// Feeds each active hypothesis its last token and returns its top-k
// children sorted by hypothesis_before.
std::vector<Hypothesis> expand(const Model& model, std::span<const Hypothesis> active, std::size_t k) {
  std::vector<Hypothesis> pool;
  pool.reserve(active.size() * k);
  for (const auto& hyp : active) {
    RecurrentState state = hyp.state;
    const TokenId last = hyp.tokens.empty() ? kStartId : hyp.tokens.back();
    const Vector logp = next_token_logprobs(model, state, last);
    for (TokenId tok : top_continuations(logp, k)) {
      Hypothesis child;
      child.tokens = hyp.tokens;
      child.tokens.push_back(tok);
      child.logprob = hyp.logprob + logp[static_cast<std::size_t>(tok)];
      child.finished = tok == kEndId;
      child.state = state;
      pool.push_back(std::move(child));
    }
  }
  std::sort(pool.begin(), pool.end(), hypothesis_before);
  return pool;
}

std::vector<GeneratedQuestion> sorted_questions(std::span<const Hypothesis> hyps) {
  std::vector<GeneratedQuestion> out;
  out.reserve(hyps.size());
  for (const auto& h : hyps) out.push_back(to_question(h));
  std::sort(out.begin(), out.end(), ranks_before);
  return out;
}

void enumerate(const Model& model, const RecurrentState& init, std::size_t vocab, std::size_t max_len,
               std::vector<TokenId>& prefix, std::vector<GeneratedQuestion>& out) {
  for (std::size_t v = 0; v < vocab; ++v) {
    const auto tok = static_cast<TokenId>(v);
    if (tok == kStartId) continue;
    prefix.push_back(tok);
    if (tok == kEndId || prefix.size() == max_len) {
      GeneratedQuestion q;
      q.logprob = score_tokens(init, prefix, model);
      q.finished = tok == kEndId;
      q.tokens.assign(prefix.begin(), prefix.end() - (q.finished ? 1 : 0));
      out.push_back(std::move(q));
    } else {
      enumerate(model, init, vocab, max_len, prefix, out);
    }
    prefix.pop_back();
  }
}

}  // namespace

std::string_view to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::greedy: return "greedy";
    case Strategy::beam: return "beam";
    case Strategy::dbs: return "dbs";
  }
  return "greedy";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "greedy") return Strategy::greedy;
  if (name == "beam") return Strategy::beam;
  if (name == "dbs") return Strategy::dbs;
  throw UsageError(fmt::format("unknown decoding strategy '{}' (expected greedy, beam or dbs)", name));
}

void DecodingConfig::validate() const {
  if (beam_size < 1) throw UsageError("beam size must be >= 1");
  if (min_steps < 1) throw UsageError("min steps must be >= 1");
  if (!(similarity_threshold >= 0.0 && similarity_threshold <= 1.0)) {
    throw UsageError("similarity threshold must be in [0, 1]");
  }
  if (max_len < 1) throw UsageError("max_len must be >= 1");
  if (max_results < 1) throw UsageError("max results must be >= 1");
}

bool ranks_before(const GeneratedQuestion& a, const GeneratedQuestion& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

GenerationSet greedy_decode(const Model& model, const DecodeRequest& request, const DecodingConfig& config) {
  RecurrentState state = initial_state(model, request);
  GeneratedQuestion q;
  TokenId last = kStartId;
  for (std::size_t step = 0; step < config.max_len; ++step) {
    const Vector logp = next_token_logprobs(model, state, last);
    TokenId best = -1;
    for (std::size_t v = 0; v < logp.size(); ++v) {
      const auto tok = static_cast<TokenId>(v);
      if (tok == kStartId) continue;
      if (best < 0 || logp[v] > logp[static_cast<std::size_t>(best)]) best = tok;
    }
    q.logprob += logp[static_cast<std::size_t>(best)];
    if (best == kEndId) {
      q.finished = true;
      break;
    }
    q.tokens.push_back(best);
    last = best;
  }
  return {request.image_id, {std::move(q)}};
}

GenerationSet beam_search(const Model& model, const DecodeRequest& request, const DecodingConfig& config) {
  config.validate();
  const std::size_t k = config.beam_size;
  std::vector<Hypothesis> active{{{}, 0.0, false, initial_state(model, request)}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < config.max_len && !active.empty(); ++step) {
    std::vector<Hypothesis> pool = expand(model, active, k);
    active.clear();
    for (std::size_t i = 0; i < pool.size() && i < k; ++i) {
      (pool[i].finished ? finished : active).push_back(std::move(pool[i]));
    }
    if (finished.size() >= k) break;
  }
  std::vector<GeneratedQuestion> result = sorted_questions(finished);
  if (result.size() > k) result.resize(k);
  if (result.size() < k) {
    for (auto& q : sorted_questions(active)) {
      if (result.size() == k) break;
      result.push_back(std::move(q));
    }
    std::sort(result.begin(), result.end(), ranks_before);
  }
  return {request.image_id, std::move(result)};
}

GenerationSet diverse_beam_search(const Model& model, const DecodeRequest& request,
                                  const DecodingConfig& config) {
  config.validate();
  const std::size_t k = config.beam_size;
  Rng rng(derive_seed(config.seed, request.image_id));
  std::vector<Hypothesis> active{{{}, 0.0, false, initial_state(model, request)}};
  std::vector<Hypothesis> results;
  for (std::size_t step = 1; step <= config.max_len && !active.empty(); ++step) {
    std::vector<Hypothesis> pool = expand(model, active, k);
    active.clear();
    if (step <= config.min_steps) {
      // Plain beam step.
      for (std::size_t i = 0; i < pool.size() && i < k; ++i) {
        (pool[i].finished ? results : active).push_back(std::move(pool[i]));
      }
      continue;
    }
    std::vector<Hypothesis> open;
    for (auto& h : pool) (h.finished ? results : open).push_back(std::move(h));
    // Greedy leader clustering in rank order; a cluster's representative is
    // its first member.
    std::vector<std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < open.size(); ++i) {
      bool placed = false;
      for (auto& cluster : clusters) {
        if (jaccard_similarity(open[cluster.front()].tokens, open[i].tokens) >= config.similarity_threshold) {
          cluster.push_back(i);
          placed = true;
          break;
        }
      }
      if (!placed) clusters.push_back({i});
    }
    for (const auto& cluster : clusters) active.push_back(std::move(open[cluster[rng.below(cluster.size())]]));
    std::sort(active.begin(), active.end(), hypothesis_before);
    if (active.size() > k) active.resize(k);
  }

  std::vector<GeneratedQuestion> out = sorted_questions(results);
  if (out.empty()) out = sorted_questions(active);
  std::set<std::vector<TokenId>> seen;
  std::vector<GeneratedQuestion> unique;
  for (auto& q : out) {
    if (seen.insert(q.tokens).second) unique.push_back(std::move(q));
  }
  if (unique.size() > config.max_results) unique.resize(config.max_results);
  return {request.image_id, std::move(unique)};
}

GenerationSet generate(const Model& model, const DecodeRequest& request, const DecodingConfig& config) {
  switch (config.strategy) {
    case Strategy::greedy: return greedy_decode(model, request, config);
    case Strategy::beam: return beam_search(model, request, config);
    case Strategy::dbs: return diverse_beam_search(model, request, config);
  }
  throw UsageError("unknown strategy");
}

GenerationSet exhaustive_top_k(const Model& model, const DecodeRequest& request, std::size_t max_len,
                               std::size_t k) {
  const std::size_t vocab = model.dims.vocab;
  if (max_len < 1) throw Error("exhaustive enumeration needs max_len >= 1");
  if (static_cast<double>(max_len) * std::log10(static_cast<double>(vocab)) > 6.0 + 1e-12) {
    throw Error(fmt::format("exhaustive enumeration of {}^{} sequences exceeds the 10^6 guard", vocab, max_len));
  }
  const RecurrentState init = initial_state(model, request);
  std::vector<GeneratedQuestion> all;
  std::vector<TokenId> prefix;
  enumerate(model, init, vocab, max_len, prefix, all);
  std::sort(all.begin(), all.end(), ranks_before);
  if (all.size() > k) all.resize(k);
  return {request.image_id, std::move(all)};
}

double rescore(const Model& model, const DecodeRequest& request, const GeneratedQuestion& question) {
  std::vector<TokenId> tokens = question.tokens;
  if (question.finished) tokens.push_back(kEndId);
  return score_tokens(initial_state(model, request), tokens, model);
}

double jaccard_similarity(std::span<const TokenId> a, std::span<const TokenId> b) {
  const std::set<TokenId> sa(a.begin(), a.end());
  const std::set<TokenId> sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t common = 0;
  for (TokenId t : sa) common += sb.count(t);
  return static_cast<double>(common) / static_cast<double>(sa.size() + sb.size() - common);
}

json generation_to_json(const GenerationSet& set, const Vocabulary& vocab, const DecodingConfig& config) {
  json questions = json::array();
  for (const auto& q : set.questions) {
    questions.push_back({{"tokens", vocab.decode(q.tokens)}, {"logprob", q.logprob}, {"finished", q.finished}});
  }
  return {{"image_id", set.image_id},
          {"questions", std::move(questions)},
          {"strategy", std::string(to_string(config.strategy))},
          {"config",
           {{"k", config.beam_size},
            {"T", config.min_steps},
            {"theta", config.similarity_threshold},
            {"seed", config.seed},
            {"max_len", config.max_len},
            {"max_results", config.max_results}}}};
}

std::vector<GenerationRecord> read_generations(std::istream& in, std::string_view source) {
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json obj = json::parse(line);
      GenerationRecord rec;
      rec.image_id = obj.at("image_id").get<std::string>();
      rec.strategy = obj.value("strategy", std::string{});
      for (const auto& q : obj.at("questions")) {
        rec.questions.push_back(q.at("tokens").get<Tokens>());
        rec.logprobs.push_back(q.at("logprob").get<double>());
      }
      out.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw Error(fmt::format("{}:{}: malformed generation record: {}", source, line_no, e.what()));
    }
  }
  return out;
}

std::vector<GenerationRecord> load_generations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open generations file {}", path.string()));
  return read_generations(in, path.string());
}

}  // namespace vqg
