#include "vqg/seq_model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "vqg/error.hpp"
#include "vqg/kernels.hpp"
#include "vqg/random.hpp"

namespace vqg {
namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_token(const Model& model, TokenId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= model.dims.vocab) {
    throw Error(fmt::format("token id {} outside vocabulary of {}", id, model.dims.vocab));
  }
}

Vector output_logits(const Model& model, std::span<const double> hidden) {
  Vector logits = model.output.bias;
  kernels::gemv(model.output.weights, hidden, logits);
  return logits;
}

// Runs the decoder over inputs, recording the label log-probability at each
// step. Loss bookkeeping is left to the caller.
ForwardTrace run_forward(const RecurrentState& init, std::span<const TokenId> inputs,
                         std::span<const TokenId> labels, const Model& model) {
  if (init.h.size() != model.dims.hidden || init.c.size() != model.dims.hidden) {
    throw Error("initial state does not match hidden dimension");
  }
  ForwardTrace trace;
  trace.init = init;
  trace.steps.reserve(inputs.size());
  RecurrentState state = init;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    check_token(model, inputs[t]);
    check_token(model, labels[t]);
    StepCache step;
    step.input = inputs[t];
    step.label = labels[t];
    step.prev = state;
    state = lstm_step(model.embeddings.rows.row(static_cast<std::size_t>(inputs[t])), state, model.lstm,
                      &step.gates);
    step.cell = state.c;
    step.hidden = state.h;
    step.tanh_cell.resize(state.c.size());
    for (std::size_t i = 0; i < state.c.size(); ++i) step.tanh_cell[i] = std::tanh(state.c[i]);
    const Vector logits = output_logits(model, state.h);
    const Vector logp = log_softmax(logits);
    step.label_logprob = logp[static_cast<std::size_t>(labels[t])];
    step.probs.resize(logp.size());
    for (std::size_t v = 0; v < logp.size(); ++v) step.probs[v] = std::exp(logp[v]);
    trace.steps.push_back(std::move(step));
  }
  return trace;
}

}  // namespace

Model Model::zeros(const ModelDims& dims) {
  Model m;
  m.dims = dims;
  const std::size_t h = dims.hidden;
  m.encoder.image_proj = Matrix(h, dims.image);
  m.encoder.keyword_proj = Matrix(h, dims.embed);
  m.encoder.bias.assign(h, 0.0);
  m.embeddings.rows = Matrix(dims.vocab, dims.embed);
  m.lstm.input_weights = Matrix(4 * h, dims.embed);
  m.lstm.recurrent_weights = Matrix(4 * h, h);
  m.lstm.bias.assign(4 * h, 0.0);
  m.output.weights = Matrix(dims.vocab, h);
  m.output.bias.assign(dims.vocab, 0.0);
  return m;
}

void for_each_tensor(Model& m, const std::function<void(const TensorRef&)>& fn) {
  auto mat = [&](std::string_view name, Matrix& x) { fn({name, {x.rows, x.cols}, x.data}); };
  auto vec = [&](std::string_view name, Vector& x) { fn({name, {x.size()}, x}); };
  mat("encoder.image_proj", m.encoder.image_proj);
  mat("encoder.keyword_proj", m.encoder.keyword_proj);
  vec("encoder.bias", m.encoder.bias);
  mat("embeddings", m.embeddings.rows);
  mat("lstm.input_weights", m.lstm.input_weights);
  mat("lstm.recurrent_weights", m.lstm.recurrent_weights);
  vec("lstm.bias", m.lstm.bias);
  mat("output.weights", m.output.weights);
  vec("output.bias", m.output.bias);
}

void for_each_tensor(const Model& model, const std::function<void(const ConstTensorRef&)>& fn) {
  for_each_tensor(const_cast<Model&>(model), [&](const TensorRef& t) { fn({t.name, t.shape, t.data}); });
}

std::size_t parameter_count(const Model& model) {
  std::size_t n = 0;
  for_each_tensor(model, [&](const ConstTensorRef& t) { n += t.data.size(); });
  return n;
}

RecurrentState lstm_step(std::span<const double> x, const RecurrentState& state,
                         const LstmParams& params, GateActivations* gates) {
  const std::size_t h = state.h.size();
  if (params.input_weights.rows != 4 * h || params.input_weights.cols != x.size() ||
      params.recurrent_weights.cols != h || state.c.size() != h) {
    throw Error(fmt::format("lstm_step dimension mismatch: x={} h={} W={}x{}", x.size(), h,
                            params.input_weights.rows, params.input_weights.cols));
  }
  Vector pre = params.bias;
  kernels::gemv(params.input_weights, x, pre);
  kernels::gemv(params.recurrent_weights, state.h, pre);

  RecurrentState next;
  next.h.resize(h);
  next.c.resize(h);
  GateActivations local;
  GateActivations& g = gates != nullptr ? *gates : local;
  g.input.resize(h);
  g.forget.resize(h);
  g.output.resize(h);
  g.candidate.resize(h);
  for (std::size_t k = 0; k < h; ++k) {
    g.input[k] = sigmoid(pre[k]);
    g.forget[k] = sigmoid(pre[h + k]);
    g.output[k] = sigmoid(pre[2 * h + k]);
    g.candidate[k] = std::tanh(pre[3 * h + k]);
    next.c[k] = g.forget[k] * state.c[k] + g.input[k] * g.candidate[k];
    next.h[k] = g.output[k] * std::tanh(next.c[k]);
  }
  return next;
}

void softmax_inplace(std::span<double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (auto& x : logits) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : logits) x /= sum;
}

Vector log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double x : logits) sum += std::exp(x - mx);
  const double log_z = mx + std::log(sum);
  Vector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_z;
  return out;
}

Vector next_token_logprobs(const Model& model, RecurrentState& state, TokenId token) {
  check_token(model, token);
  state = lstm_step(model.embeddings.rows.row(static_cast<std::size_t>(token)), state, model.lstm);
  return log_softmax(output_logits(model, state.h));
}

ForwardTrace forward_teacher_forced(const RecurrentState& init, std::span<const TokenId> target,
                                    const Model& model) {
  if (target.size() < 2 || target.front() != kStartId || target.back() != kEndId) {
    throw Error("target must begin with <start> and end with <end>");
  }
  ForwardTrace trace = run_forward(init, target.first(target.size() - 1), target.subspan(1), model);
  double total = 0.0;
  for (const auto& step : trace.steps) {
    if (step.label == kPadId) continue;
    total -= step.label_logprob;
    ++trace.n_labels;
  }
  trace.loss = total / static_cast<double>(trace.n_labels);
  return trace;
}

RecurrentState backward(const ForwardTrace& trace, const Model& model, Model& grads, double weight) {
  const std::size_t h = model.dims.hidden;
  const double scale = trace.n_labels == 0 ? 0.0 : weight / static_cast<double>(trace.n_labels);
  Vector dh_next(h, 0.0);
  Vector dc_next(h, 0.0);
  Vector dlogits(model.dims.vocab);
  Vector dpre(4 * h);
  Vector dx(model.dims.embed);
  for (std::size_t t = trace.steps.size(); t-- > 0;) {
    const StepCache& s = trace.steps[t];
    Vector dh = dh_next;
    if (s.label != kPadId) {
      for (std::size_t v = 0; v < dlogits.size(); ++v) dlogits[v] = scale * s.probs[v];
      dlogits[static_cast<std::size_t>(s.label)] -= scale;
      kernels::ger(1.0, dlogits, s.hidden, grads.output.weights);
      kernels::axpy(1.0, dlogits, grads.output.bias);
      kernels::gemv_t(model.output.weights, dlogits, dh);
    }
    for (std::size_t k = 0; k < h; ++k) {
      const double i = s.gates.input[k], f = s.gates.forget[k], o = s.gates.output[k],
                   g = s.gates.candidate[k];
      const double tc = s.tanh_cell[k];
      const double dc = dh[k] * o * (1.0 - tc * tc) + dc_next[k];
      dpre[k] = dc * g * i * (1.0 - i);
      dpre[h + k] = dc * s.prev.c[k] * f * (1.0 - f);
      dpre[2 * h + k] = dh[k] * tc * o * (1.0 - o);
      dpre[3 * h + k] = dc * i * (1.0 - g * g);
      dc_next[k] = dc * f;
    }
    const auto x = model.embeddings.rows.row(static_cast<std::size_t>(s.input));
    kernels::ger(1.0, dpre, x, grads.lstm.input_weights);
    kernels::ger(1.0, dpre, s.prev.h, grads.lstm.recurrent_weights);
    kernels::axpy(1.0, dpre, grads.lstm.bias);
    if (model.embeddings.trainable) {
      std::fill(dx.begin(), dx.end(), 0.0);
      kernels::gemv_t(model.lstm.input_weights, dpre, dx);
      kernels::axpy(1.0, dx, grads.embeddings.rows.row(static_cast<std::size_t>(s.input)));
    }
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    kernels::gemv_t(model.lstm.recurrent_weights, dpre, dh_next);
  }
  return {std::move(dh_next), std::move(dc_next)};
}

double score_tokens(const RecurrentState& init, std::span<const TokenId> tokens, const Model& model) {
  if (tokens.empty()) return 0.0;
  std::vector<TokenId> inputs{kStartId};
  inputs.insert(inputs.end(), tokens.begin(), tokens.end() - 1);
  const ForwardTrace trace = run_forward(init, inputs, tokens, model);
  double total = 0.0;
  for (const auto& step : trace.steps) total += step.label_logprob;
  return total;
}

double example_loss(const Model& model, const Example& example) {
  const RecurrentState init =
      encode(example.feature, example.keywords, model.encoder, model.embeddings.rows);
  return forward_teacher_forced(init, example.target, model).loss;
}

double accumulate_gradient(const Model& model, const Example& example, Model& grads, double weight) {
  const RecurrentState init =
      encode(example.feature, example.keywords, model.encoder, model.embeddings.rows);
  const ForwardTrace trace = forward_teacher_forced(init, example.target, model);
  const RecurrentState d_init = backward(trace, model, grads, weight);
  // c0 is a constant zero, so only dh0 reaches the encoder.
  encode_backward(example.feature, example.keywords, init.h, d_init.h, model.encoder,
                  model.embeddings.rows, grads.encoder,
                  model.embeddings.trainable ? &grads.embeddings.rows : nullptr);
  return trace.loss;
}

namespace {

using Wide = long double;

std::vector<Wide> wide_affine(const Matrix& w, std::span<const Wide> x, std::span<const double> b) {
  std::vector<Wide> y(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    Wide acc = b.empty() ? 0.0L : b[r];
    for (std::size_t c = 0; c < w.cols; ++c) acc += static_cast<Wide>(w(r, c)) * x[c];
    y[r] = acc;
  }
  return y;
}

std::vector<Wide> widen(std::span<const double> v) { return {v.begin(), v.end()}; }

Wide sigmoid_wide(Wide x) { return 1.0L / (1.0L + std::exp(-x)); }

// example_loss in extended precision; the probe for finite differences.
Wide wide_example_loss(const Model& m, const Example& ex) {
  const std::size_t hd = m.dims.hidden;
  const std::size_t ed = m.dims.embed;
  std::vector<Wide> kw(ed, 0.0L);
  for (TokenId t : ex.keywords) {
    for (std::size_t c = 0; c < ed; ++c) kw[c] += m.embeddings.rows(t, c);
  }
  if (!ex.keywords.empty()) {
    for (auto& x : kw) x /= static_cast<Wide>(ex.keywords.size());
  }
  std::vector<Wide> h = wide_affine(m.encoder.image_proj, widen(ex.feature), m.encoder.bias);
  const std::vector<Wide> hk = wide_affine(m.encoder.keyword_proj, kw, {});
  for (std::size_t k = 0; k < hd; ++k) h[k] = std::tanh(h[k] + hk[k]);
  std::vector<Wide> c(hd, 0.0L);

  Wide total = 0.0L;
  std::size_t labels = 0;
  for (std::size_t t = 0; t + 1 < ex.target.size(); ++t) {
    const auto x = widen(m.embeddings.rows.row(ex.target[t]));
    const auto zx = wide_affine(m.lstm.input_weights, x, m.lstm.bias);
    const auto zh = wide_affine(m.lstm.recurrent_weights, h, {});
    for (std::size_t k = 0; k < hd; ++k) {
      const Wide i = sigmoid_wide(zx[k] + zh[k]);
      const Wide f = sigmoid_wide(zx[hd + k] + zh[hd + k]);
      const Wide o = sigmoid_wide(zx[2 * hd + k] + zh[2 * hd + k]);
      const Wide g = std::tanh(zx[3 * hd + k] + zh[3 * hd + k]);
      c[k] = f * c[k] + i * g;
      h[k] = o * std::tanh(c[k]);
    }
    const TokenId label = ex.target[t + 1];
    if (label == kPadId) continue;
    const auto logits = wide_affine(m.output.weights, h, m.output.bias);
    const Wide top = *std::max_element(logits.begin(), logits.end());
    Wide z = 0.0L;
    for (Wide l : logits) z += std::exp(l - top);
    total += top + std::log(z) - logits[label];
    ++labels;
  }
  return labels == 0 ? 0.0L : total / static_cast<Wide>(labels);
}

}  // namespace

double max_relative_error(const Model& model, const Example& example, const Model& analytic,
                          double epsilon) {
  Model probe = model;
  std::vector<std::span<const double>> analytic_tensors;
  for_each_tensor(analytic, [&](const ConstTensorRef& t) { analytic_tensors.push_back(t.data); });
  double worst = 0.0;
  std::size_t index = 0;
  for_each_tensor(probe, [&](const TensorRef& t) {
    const auto expected = analytic_tensors[index++];
    if (t.name == "embeddings" && !model.embeddings.trainable) return;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const double saved = t.data[i];
      const double plus = saved + epsilon;
      const double minus = saved - epsilon;
      t.data[i] = plus;
      const Wide up = wide_example_loss(probe, example);
      t.data[i] = minus;
      const Wide down = wide_example_loss(probe, example);
      t.data[i] = saved;
      const double numeric = static_cast<double>((up - down) / (static_cast<Wide>(plus) - minus));
      const double a = expected[i];
      const double rel = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  });
  return worst;
}

GradCheckSetup make_grad_check_setup(const ModelDims& dims, std::uint64_t seed) {
  if (dims.vocab <= kNumReserved) throw Error("grad check needs at least one non-reserved token");
  GradCheckSetup setup{Model::zeros(dims), {}};
  Rng rng(seed);
  for_each_tensor(setup.model, [&](const TensorRef& t) {
    for (auto& x : t.data) x = rng.uniform(-0.5, 0.5);
  });
  auto word = [&] { return static_cast<TokenId>(kUnkId + rng.below(dims.vocab - kUnkId)); };
  Example& ex = setup.example;
  ex.feature.resize(dims.image);
  for (auto& x : ex.feature) x = rng.uniform(-1.0, 1.0);
  ex.keywords = {word(), word()};
  ex.target = {kStartId};
  for (int i = 0; i < 6; ++i) ex.target.push_back(word());
  ex.target.push_back(kEndId);
  return setup;
}

double grad_check(const ModelDims& dims, std::uint64_t seed, double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw Error(fmt::format("grad check epsilon {} outside [1e-7, 1e-3]", epsilon));
  }
  const GradCheckSetup setup = make_grad_check_setup(dims, seed);
  Model analytic = Model::zeros(dims);
  accumulate_gradient(setup.model, setup.example, analytic);
  return max_relative_error(setup.model, setup.example, analytic, epsilon);
}

}  // namespace vqg
