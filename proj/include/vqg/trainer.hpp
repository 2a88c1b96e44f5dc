#pragma once

// Deterministic mini-batch training with teacher forcing, checkpoint
// serialization and perplexity evaluation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vqg/corpus.hpp"
#include "vqg/seq_model.hpp"

namespace vqg {

enum class OptimizerKind { sgd, adam };

// Defaults are sized for minute-scale desk runs.
struct TrainConfig {
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t image_dim = 0;  // 0: take it from the features
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int epochs = 300;
  std::size_t batch_size = 8;
  double grad_clip = 5.0;  // global L2 norm; <= 0 disables clipping
  std::size_t max_len = 20;
  std::uint64_t seed = 42;
  bool embeddings_trainable = true;
  std::optional<std::string> pretrained_embedding_path;
  int min_count = 1;
  std::array<double, 3> split_ratios{0.6, 0.2, 0.2};

  // Throws UsageError naming the offending field.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& config);
// Missing fields keep their defaults; unknown fields and wrong types are
// UsageErrors.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_perplexity;

  bool operator==(const EpochLog&) const = default;
};

struct Checkpoint {
  static constexpr int kVersion = 1;

  TrainConfig config;
  Vocabulary vocab;
  Model model;
  int epoch = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  // Entry 0 is the untrained model.
  std::vector<EpochLog> history;
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(std::string_view text);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Every parameter uniform(-0.08, 0.08) from the seed. When `pretrained` is
// given its rows replace the embedding table.
Model initialize_model(const ModelDims& dims, std::uint64_t seed, const EmbeddingTable* pretrained = nullptr);

// One example per (image, question): <start> question <end>, the question
// clipped to max_len tokens. Records need features attached.
std::vector<Example> make_examples(std::span<const ImageRecord> records, const Vocabulary& vocab,
                                   std::size_t max_len);

// Mean loss over examples.
double mean_loss(const Model& model, std::span<const Example> examples);

// Scales grads so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_global_norm(Model& grads, double max_norm);

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  int step = 0;
};

// Bias-corrected Adam update of one tensor at step t >= 1.
void adam_step(std::span<double> param, std::span<const double> grad, std::span<double> first_moment,
               std::span<double> second_moment, int t, const TrainConfig& config);

using EpochCallback = std::function<void(const EpochLog&)>;

// Trains on the records tagged train; val records feed the per-epoch
// perplexity. Throws Error naming the image_id of a train record without a
// feature.
Checkpoint train(std::span<const ImageRecord> records, const FeatureMap& features, const Vocabulary& vocab,
                 const TrainConfig& config, const EpochCallback& on_epoch = {});

// exp(mean per-token cross-entropy) over every (image, question) pair.
double perplexity(const Model& model, const Vocabulary& vocab, std::span<const ImageRecord> records,
                  const FeatureMap& features, std::size_t max_len);
double perplexity(const Checkpoint& checkpoint, std::span<const ImageRecord> records,
                  const FeatureMap& features);

}  // namespace vqg
