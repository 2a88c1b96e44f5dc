#pragma once

// Single-layer LSTM decoder with a softmax output layer. The forward pass
// caches every activation so backward() can produce exact gradients for all
// trainable parameters, encoder included.

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "vqg/corpus.hpp"
#include "vqg/encoder.hpp"
#include "vqg/tensor.hpp"

namespace vqg {

struct ModelDims {
  std::size_t vocab = 0;
  std::size_t embed = 0;
  std::size_t hidden = 0;
  std::size_t image = 0;

  bool operator==(const ModelDims&) const = default;
};

// Gate blocks are stacked row-wise in the order input, forget, output,
// candidate: rows [0,H) are W_i, [H,2H) W_f, [2H,3H) W_o, [3H,4H) W_g.
struct LstmParams {
  Matrix input_weights;      // 4H x E
  Matrix recurrent_weights;  // 4H x H
  Vector bias;               // 4H
};

struct OutputLayer {
  Matrix weights;  // V x H
  Vector bias;     // V
};

struct Model {
  ModelDims dims;
  EncoderParams encoder;
  EmbeddingTable embeddings;
  LstmParams lstm;
  OutputLayer output;

  static Model zeros(const ModelDims& dims);
};

struct TensorRef {
  std::string_view name;
  std::vector<std::size_t> shape;
  std::span<double> data;
};

struct ConstTensorRef {
  std::string_view name;
  std::vector<std::size_t> shape;
  std::span<const double> data;
};

// Visits every parameter tensor in a fixed order.
void for_each_tensor(Model& model, const std::function<void(const TensorRef&)>& fn);
void for_each_tensor(const Model& model, const std::function<void(const ConstTensorRef&)>& fn);
std::size_t parameter_count(const Model& model);

struct GateActivations {
  Vector input;
  Vector forget;
  Vector output;
  Vector candidate;
};

// i = sigma(W_i x + U_i h + b_i), likewise f and o; g = tanh(W_g x + U_g h + b_g)
// c' = f * c + i * g;  h' = o * tanh(c')
RecurrentState lstm_step(std::span<const double> x, const RecurrentState& state,
                         const LstmParams& params, GateActivations* gates = nullptr);

void softmax_inplace(std::span<double> logits);
// log softmax, computed with max subtraction.
Vector log_softmax(std::span<const double> logits);

// Next-token log-probabilities after feeding `token` in `state`.
Vector next_token_logprobs(const Model& model, RecurrentState& state, TokenId token);

struct StepCache {
  TokenId input = 0;
  TokenId label = 0;
  RecurrentState prev;
  GateActivations gates;
  Vector cell;
  Vector tanh_cell;
  Vector hidden;
  Vector probs;
  double label_logprob = 0.0;
};

struct ForwardTrace {
  RecurrentState init;
  std::vector<StepCache> steps;
  std::size_t n_labels = 0;  // non-pad labels
  double loss = 0.0;
};

// Step t consumes target[t] and predicts target[t + 1]. The loss is the mean
// cross-entropy over non-pad labels. Throws Error unless the target starts
// with <start> and ends with <end>.
ForwardTrace forward_teacher_forced(const RecurrentState& init, std::span<const TokenId> target,
                                    const Model& model);

// Accumulates weight * d(loss)/d(param) into grads for the decoder tensors
// (embeddings only when model.embeddings.trainable) and returns the gradient
// with respect to the initial state.
RecurrentState backward(const ForwardTrace& trace, const Model& model, Model& grads, double weight = 1.0);

// Sum of log p(tokens[t] | <start>, tokens[..t]) under teacher forcing,
// with every token counted (pads included).
double score_tokens(const RecurrentState& init, std::span<const TokenId> tokens, const Model& model);

struct Example {
  std::vector<double> feature;
  std::vector<TokenId> keywords;
  std::vector<TokenId> target;  // <start> ... <end>
};

double example_loss(const Model& model, const Example& example);
// Encoder + decoder gradient of one example scaled by weight; returns the loss.
double accumulate_gradient(const Model& model, const Example& example, Model& grads, double weight = 1.0);

// Largest |a - b| / max(1e-12, |a| + |b|) between `analytic` and central
// finite differences with step epsilon, over every trainable parameter. The
// probe loss is evaluated in long double.
double max_relative_error(const Model& model, const Example& example, const Model& analytic,
                          double epsilon);

struct GradCheckSetup {
  Model model;
  Example example;
};

// A random model of the given dims (weights uniform(-0.5, 0.5)) plus a
// random example with two keywords and a six-token question.
GradCheckSetup make_grad_check_setup(const ModelDims& dims, std::uint64_t seed);

// max_relative_error of backward() on make_grad_check_setup(dims, seed).
// Throws Error when epsilon is outside [1e-7, 1e-3].
double grad_check(const ModelDims& dims, std::uint64_t seed, double epsilon);

}  // namespace vqg
