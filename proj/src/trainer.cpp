#include "vqg/trainer.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numeric>
#include <set>

#include "vqg/error.hpp"
#include "vqg/kernels.hpp"
#include "vqg/random.hpp"

namespace vqg {
namespace {

using json = nlohmann::json;

const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "embed_dim", "hidden_dim", "image_dim", "optimizer", "lr", "beta1", "beta2", "adam_epsilon",
      "epochs", "batch_size", "grad_clip", "max_len", "seed", "embeddings_trainable",
      "pretrained_embedding_path", "min_count", "split_ratios"};
  return keys;
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw UsageError(fmt::format("config field '{}': {}", key, e.what()));
  }
}

void zero(Model& m) {
  for_each_tensor(m, [](const TensorRef& t) { std::fill(t.data.begin(), t.data.end(), 0.0); });
}

std::vector<ImageRecord> with_split(std::span<const ImageRecord> records, Split split) {
  std::vector<ImageRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

std::optional<double> val_perplexity(const Model& model, std::span<const Example> val) {
  if (val.empty()) return std::nullopt;
  double nll = 0.0;
  std::size_t labels = 0;
  for (const auto& ex : val) {
    const RecurrentState init = encode(ex.feature, ex.keywords, model.encoder, model.embeddings.rows);
    const ForwardTrace trace = forward_teacher_forced(init, ex.target, model);
    nll += trace.loss * static_cast<double>(trace.n_labels);
    labels += trace.n_labels;
  }
  return std::exp(nll / static_cast<double>(labels));
}

}  // namespace

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw UsageError("invalid config: " + what);
  };
  require(embed_dim >= 1, "embed_dim must be >= 1");
  require(hidden_dim >= 1, "hidden_dim must be >= 1");
  require(lr > 0.0 && std::isfinite(lr), "lr must be > 0");
  require(beta1 > 0.0 && beta1 < 1.0, "beta1 must be in (0, 1)");
  require(beta2 > 0.0 && beta2 < 1.0, "beta2 must be in (0, 1)");
  require(adam_epsilon > 0.0, "adam_epsilon must be > 0");
  require(epochs >= 0, "epochs must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(max_len >= 1, "max_len must be >= 1");
  require(min_count >= 1, "min_count must be >= 1");
  double sum = 0.0;
  for (double r : split_ratios) {
    require(r >= 0.0, "split_ratios must be non-negative");
    sum += r;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "split_ratios must sum to 1");
}

json to_json(const TrainConfig& c) {
  json j;
  j["embed_dim"] = c.embed_dim;
  j["hidden_dim"] = c.hidden_dim;
  j["image_dim"] = c.image_dim;
  j["optimizer"] = c.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  j["lr"] = c.lr;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_epsilon"] = c.adam_epsilon;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["grad_clip"] = c.grad_clip;
  j["max_len"] = c.max_len;
  j["seed"] = c.seed;
  j["embeddings_trainable"] = c.embeddings_trainable;
  j["pretrained_embedding_path"] = c.pretrained_embedding_path ? json(*c.pretrained_embedding_path) : json(nullptr);
  j["min_count"] = c.min_count;
  j["split_ratios"] = c.split_ratios;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (known_config_keys().count(key) == 0) throw UsageError(fmt::format("unknown config field '{}'", key));
  }
  TrainConfig c;
  read_field(j, "embed_dim", c.embed_dim);
  read_field(j, "hidden_dim", c.hidden_dim);
  read_field(j, "image_dim", c.image_dim);
  if (j.contains("optimizer")) {
    std::string name;
    read_field(j, "optimizer", name);
    if (name == "adam") {
      c.optimizer = OptimizerKind::adam;
    } else if (name == "sgd") {
      c.optimizer = OptimizerKind::sgd;
    } else {
      throw UsageError(fmt::format("unknown optimizer '{}'", name));
    }
  }
  read_field(j, "lr", c.lr);
  read_field(j, "beta1", c.beta1);
  read_field(j, "beta2", c.beta2);
  read_field(j, "adam_epsilon", c.adam_epsilon);
  read_field(j, "epochs", c.epochs);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "grad_clip", c.grad_clip);
  read_field(j, "max_len", c.max_len);
  read_field(j, "seed", c.seed);
  read_field(j, "embeddings_trainable", c.embeddings_trainable);
  if (j.contains("pretrained_embedding_path") && !j.at("pretrained_embedding_path").is_null()) {
    std::string path;
    read_field(j, "pretrained_embedding_path", path);
    c.pretrained_embedding_path = path;
  }
  read_field(j, "min_count", c.min_count);
  read_field(j, "split_ratios", c.split_ratios);
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(fmt::format("{}: malformed config: {}", path.string(), e.what()));
  }
  return train_config_from_json(j);
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json j;
  j["version"] = Checkpoint::kVersion;
  j["config"] = to_json(ckpt.config);
  j["vocab"] = {{"min_count", ckpt.vocab.min_count()}, {"tokens", ckpt.vocab.tokens()}};
  json tensors = json::array();
  for_each_tensor(ckpt.model, [&](const ConstTensorRef& t) {
    tensors.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"data", std::vector<double>(t.data.begin(), t.data.end())}});
  });
  j["tensors"] = std::move(tensors);
  j["embeddings_trainable"] = ckpt.model.embeddings.trainable;
  j["epoch"] = ckpt.epoch;
  j["initial_loss"] = ckpt.initial_loss;
  j["final_loss"] = ckpt.final_loss;
  json history = json::array();
  for (const auto& h : ckpt.history) {
    history.push_back({{"epoch", h.epoch},
                       {"train_loss", h.train_loss},
                       {"val_perplexity", h.val_perplexity ? json(*h.val_perplexity) : json(nullptr)}});
  }
  j["history"] = std::move(history);
  // Doubles are written in their shortest round-trip form, so reload is exact.
  return j.dump() + "\n";
}

Checkpoint parse_checkpoint(std::string_view text) {
  Checkpoint ckpt;
  try {
    const json j = json::parse(text);
    const int version = j.at("version").get<int>();
    if (version != Checkpoint::kVersion) throw Error(fmt::format("unsupported checkpoint version {}", version));
    ckpt.config = train_config_from_json(j.at("config"));
    auto tokens = j.at("vocab").at("tokens").get<std::vector<std::string>>();
    if (tokens.size() < kNumReserved || tokens[0] != kPadToken || tokens[1] != kStartToken ||
        tokens[2] != kEndToken || tokens[3] != kUnkToken) {
      throw Error("checkpoint vocabulary lacks the reserved tokens");
    }
    std::vector<std::string> rest(tokens.begin() + kNumReserved, tokens.end());
    ckpt.vocab = Vocabulary(rest, j.at("vocab").at("min_count").get<int>());
    if (ckpt.vocab.tokens() != tokens) throw Error("checkpoint vocabulary is not in canonical order");

    const auto& tensors = j.at("tensors");
    if (tensors.empty()) throw Error("checkpoint has no tensors");
    ModelDims dims;
    dims.vocab = ckpt.vocab.size();
    dims.hidden = ckpt.config.hidden_dim;
    dims.embed = ckpt.config.embed_dim;
    dims.image = ckpt.config.image_dim;
    ckpt.model = Model::zeros(dims);
    ckpt.model.embeddings.trainable = j.at("embeddings_trainable").get<bool>();
    std::size_t index = 0;
    for_each_tensor(ckpt.model, [&](const TensorRef& t) {
      if (index >= tensors.size()) throw Error(fmt::format("checkpoint is missing tensor '{}'", t.name));
      const auto& entry = tensors.at(index++);
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto& data = entry.at("data");
      if (name != t.name) throw Error(fmt::format("expected tensor '{}', found '{}'", t.name, name));
      const std::size_t declared = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
      if (declared != data.size()) {
        throw Error(fmt::format("tensor '{}' declares {} values but stores {}", name, declared, data.size()));
      }
      if (shape != t.shape) throw Error(fmt::format("tensor '{}' has an unexpected shape", name));
      for (std::size_t i = 0; i < data.size(); ++i) t.data[i] = data[i].get<double>();
    });
    if (index != tensors.size()) throw Error("checkpoint has unexpected extra tensors");
    ckpt.epoch = j.at("epoch").get<int>();
    ckpt.initial_loss = j.at("initial_loss").get<double>();
    ckpt.final_loss = j.at("final_loss").get<double>();
    for (const auto& h : j.at("history")) {
      EpochLog log;
      log.epoch = h.at("epoch").get<int>();
      log.train_loss = h.at("train_loss").get<double>();
      if (!h.at("val_perplexity").is_null()) log.val_perplexity = h.at("val_perplexity").get<double>();
      ckpt.history.push_back(log);
    }
  } catch (const json::exception& e) {
    throw Error(fmt::format("malformed checkpoint: {}", e.what()));
  } catch (const UsageError& e) {
    throw Error(fmt::format("malformed checkpoint config: {}", e.what()));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_file_atomically(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return parse_checkpoint(read_file(path));
  } catch (const Error& e) {
    throw Error(fmt::format("{}: {}", path.string(), e.what()));
  }
}

Model initialize_model(const ModelDims& dims, std::uint64_t seed, const EmbeddingTable* pretrained) {
  Model model = Model::zeros(dims);
  Rng rng(derive_seed(seed, "init"));
  for_each_tensor(model, [&](const TensorRef& t) {
    for (auto& x : t.data) x = rng.uniform(-0.08, 0.08);
  });
  if (pretrained != nullptr) {
    if (pretrained->rows.rows != dims.vocab || pretrained->rows.cols != dims.embed) {
      throw UsageError(fmt::format("pretrained embeddings are {}x{}, model expects {}x{}", pretrained->rows.rows,
                                   pretrained->rows.cols, dims.vocab, dims.embed));
    }
    model.embeddings.rows = pretrained->rows;
  }
  return model;
}

std::vector<Example> make_examples(std::span<const ImageRecord> records, const Vocabulary& vocab,
                                   std::size_t max_len) {
  std::vector<Example> out;
  for (const auto& r : records) {
    if (r.feature.empty()) throw Error(fmt::format("missing feature vector for image_id '{}'", r.image_id));
    const auto keywords = vocab.encode(r.keywords);
    for (const auto& q : r.questions) {
      Example ex;
      ex.feature = r.feature;
      ex.keywords = keywords;
      ex.target.push_back(kStartId);
      const auto ids = vocab.encode(q);
      ex.target.insert(ex.target.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), max_len)));
      ex.target.push_back(kEndId);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

double mean_loss(const Model& model, std::span<const Example> examples) {
  if (examples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : examples) total += example_loss(model, ex);
  return total / static_cast<double>(examples.size());
}

double clip_global_norm(Model& grads, double max_norm) {
  double sq = 0.0;
  for_each_tensor(grads, [&](const TensorRef& t) { sq += kernels::dot(t.data, t.data); });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for_each_tensor(grads, [&](const TensorRef& t) {
      for (auto& x : t.data) x *= scale;
    });
  }
  return norm;
}

void adam_step(std::span<double> param, std::span<const double> grad, std::span<double> first_moment,
               std::span<double> second_moment, int t, const TrainConfig& config) {
  if (t < 1) throw Error("adam step counter must start at 1");
  const kernels::AdamCoefficients c{config.lr, config.beta1, config.beta2, config.adam_epsilon,
                                    1.0 - std::pow(config.beta1, t), 1.0 - std::pow(config.beta2, t)};
  kernels::adam(param, grad, first_moment, second_moment, c);
}

Checkpoint train(std::span<const ImageRecord> records, const FeatureMap& features, const Vocabulary& vocab,
                 const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  std::vector<ImageRecord> train_records = with_split(records, Split::train);
  std::vector<ImageRecord> val_records = with_split(records, Split::val);
  if (train_records.empty()) throw Error("no records tagged train");
  attach_features(train_records, features, /*require_all=*/true);
  attach_features(val_records, features, /*require_all=*/true);

  Checkpoint ckpt;
  ckpt.config = config;
  if (ckpt.config.image_dim == 0) ckpt.config.image_dim = train_records.front().feature.size();
  for (const auto& r : train_records) {
    if (r.feature.size() != ckpt.config.image_dim) {
      throw Error(fmt::format("image_id '{}' has feature dimension {}, config expects {}", r.image_id,
                              r.feature.size(), ckpt.config.image_dim));
    }
  }
  ckpt.vocab = vocab;
  const ModelDims dims{vocab.size(), config.embed_dim, config.hidden_dim, ckpt.config.image_dim};

  std::optional<EmbeddingTable> pretrained;
  if (config.pretrained_embedding_path) {
    pretrained = load_pretrained_embeddings(*config.pretrained_embedding_path, vocab,
                                            derive_seed(config.seed, "embeddings"));
  }
  ckpt.model = initialize_model(dims, config.seed, pretrained ? &*pretrained : nullptr);
  ckpt.model.embeddings.trainable = config.embeddings_trainable;
  Model& model = ckpt.model;

  const std::vector<Example> examples = make_examples(train_records, vocab, config.max_len);
  const std::vector<Example> val_examples = make_examples(val_records, vocab, config.max_len);

  ckpt.initial_loss = mean_loss(model, examples);
  ckpt.history.push_back({0, ckpt.initial_loss, val_perplexity(model, val_examples)});
  if (on_epoch) on_epoch(ckpt.history.back());

  Model grads = Model::zeros(dims);
  AdamState adam;
  for_each_tensor(model, [&](const TensorRef& t) {
    adam.first_moment.emplace_back(t.data.size(), 0.0);
    adam.second_moment.emplace_back(t.data.size(), 0.0);
  });

  Rng order_rng(derive_seed(config.seed, "epoch-order"));
  std::vector<std::size_t> order(examples.size());
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    order_rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      zero(grads);
      for (std::size_t b = start; b < end; ++b) {
        epoch_loss += accumulate_gradient(model, examples[order[b]], grads, weight);
      }
      clip_global_norm(grads, config.grad_clip);
      ++adam.step;
      std::size_t index = 0;
      std::vector<std::span<const double>> grad_tensors;
      for_each_tensor(grads, [&](const TensorRef& t) { grad_tensors.push_back(t.data); });
      for_each_tensor(model, [&](const TensorRef& t) {
        const std::size_t k = index++;
        if (t.name == "embeddings" && !model.embeddings.trainable) return;
        if (config.optimizer == OptimizerKind::adam) {
          adam_step(t.data, grad_tensors[k], adam.first_moment[k], adam.second_moment[k], adam.step, config);
        } else {
          kernels::axpy(-config.lr, grad_tensors[k], t.data);
        }
      });
    }
    ckpt.epoch = epoch;
    ckpt.history.push_back(
        {epoch, epoch_loss / static_cast<double>(examples.size()), val_perplexity(model, val_examples)});
    if (on_epoch) on_epoch(ckpt.history.back());
  }
  ckpt.final_loss = config.epochs == 0 ? ckpt.initial_loss : mean_loss(model, examples);
  return ckpt;
}

double perplexity(const Model& model, const Vocabulary& vocab, std::span<const ImageRecord> records,
                  const FeatureMap& features, std::size_t max_len) {
  std::vector<ImageRecord> copy(records.begin(), records.end());
  attach_features(copy, features, /*require_all=*/true);
  const auto examples = make_examples(copy, vocab, max_len);
  if (examples.empty()) throw Error("perplexity needs at least one question");
  return *val_perplexity(model, examples);
}

double perplexity(const Checkpoint& checkpoint, std::span<const ImageRecord> records,
                  const FeatureMap& features) {
  return perplexity(checkpoint.model, checkpoint.vocab, records, features, checkpoint.config.max_len);
}

}  // namespace vqg
