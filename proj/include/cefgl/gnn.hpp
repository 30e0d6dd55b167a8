#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cefgl/error.hpp"
#include "cefgl/graphdata.hpp"
#include "cefgl/linalg.hpp"
#include "cefgl/rng.hpp"

namespace cefgl {

// Two sum-aggregation message-passing layers behind an MLP encoder, mean
// readout and a linear head.
struct ArchConfig {
  std::size_t feature_dim = 1;
  std::size_t hidden = 16;
  std::size_t classes = 2;
};

// Ordered named parameter record. The same shape carries model weights, the
// sparse channel, correction terms and gradients.
struct ModelParams {
  std::vector<NamedMatrix> tensors;

  static constexpr std::string_view kNames[] = {"mlp_w", "mlp_b", "gnn1_w", "gnn1_b",
                                                "gnn2_w", "gnn2_b", "head_w", "head_b"};
  enum Slot : std::size_t { MlpW, MlpB, Gnn1W, Gnn1B, Gnn2W, Gnn2B, HeadW, HeadB };

  std::size_t size() const { return tensors.size(); }
  Matrix& operator[](std::size_t i) { return tensors[i].value; }
  const Matrix& operator[](std::size_t i) const { return tensors[i].value; }

  const Matrix& at(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw ShapeMismatch("ModelParams: no tensor named " + std::string(name));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.value.size();
    return n;
  }

  bool operator==(const ModelParams&) const = default;
};

inline ModelParams zeros(const ArchConfig& cfg) {
  const std::size_t d = cfg.feature_dim, h = cfg.hidden, c = cfg.classes;
  const std::pair<std::size_t, std::size_t> shapes[] = {{d, h}, {1, h}, {h, h}, {1, h},
                                                        {h, h}, {1, h}, {h, c}, {1, c}};
  ModelParams p;
  for (std::size_t i = 0; i < 8; ++i) {
    p.tensors.push_back({std::string(ModelParams::kNames[i]), Matrix(shapes[i].first, shapes[i].second)});
  }
  return p;
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z;
  for (const auto& t : p.tensors) z.tensors.push_back({t.name, Matrix(t.value.rows(), t.value.cols())});
  return z;
}

inline void require_congruent(const ModelParams& a, const ModelParams& b, const char* where) {
  if (a.size() != b.size()) throw ShapeMismatch(std::string(where) + ": tensor counts differ");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.tensors[i].name != b.tensors[i].name || !a[i].same_shape(b[i])) {
      throw ShapeMismatch(std::string(where) + ": tensor '" + a.tensors[i].name + "' does not match");
    }
  }
}

// Weights uniform in ±1/sqrt(fan_in), biases zero.
inline ModelParams init_params(const ArchConfig& cfg, std::uint64_t seed) {
  if (cfg.feature_dim < 1 || cfg.hidden < 1 || cfg.classes < 1) {
    throw ShapeMismatch("init_params: feature_dim, hidden and classes must be >= 1");
  }
  ModelParams p = zeros(cfg);
  Rng rng = make_stream(seed, 0x1417);
  for (std::size_t slot : {ModelParams::MlpW, ModelParams::Gnn1W, ModelParams::Gnn2W, ModelParams::HeadW}) {
    Matrix& w = p[slot];
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
    for (double& v : w.data()) v = bound * (2.0 * uniform01(rng) - 1.0);
  }
  return p;
}

// Elementwise w + s.
inline ModelParams combine(const ModelParams& w, const ModelParams& s) {
  require_congruent(w, s, "combine");
  ModelParams out = w;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s[i];
  return out;
}

// a += scale * b
inline void axpy(ModelParams& a, double scale, const ModelParams& b) {
  require_congruent(a, b, "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) a[i].axpy(scale, b[i]);
}

inline bool all_finite(const ModelParams& p) {
  return std::all_of(p.tensors.begin(), p.tensors.end(), [](const auto& t) { return all_finite(t.value); });
}

inline std::size_t nnz(const ModelParams& p) {
  std::size_t n = 0;
  for (const auto& t : p.tensors)
    for (double v : t.value.data()) n += v != 0.0;
  return n;
}

inline ArchConfig arch_of(const ModelParams& p) {
  return {p[ModelParams::MlpW].rows(), p[ModelParams::MlpW].cols(), p[ModelParams::HeadW].cols()};
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

// out = x + A x with A the symmetric 0/1 adjacency.
inline Matrix aggregate(const Graph& g, const Matrix& x) {
  Matrix out = x;
  for (const auto& [a, b] : g.edges) {
    auto ra = x.row(a);
    auto rb = x.row(b);
    auto oa = out.row(a);
    if (a == b) {
      for (std::size_t j = 0; j < x.cols(); ++j) oa[j] += ra[j];
      continue;
    }
    auto ob = out.row(b);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      oa[j] += rb[j];
      ob[j] += ra[j];
    }
  }
  return out;
}

inline void add_bias(Matrix& z, const Matrix& b) {
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto r = z.row(i);
    for (std::size_t j = 0; j < z.cols(); ++j) r[j] += b(0, j);
  }
}

inline Matrix relu(const Matrix& z) {
  Matrix h = z;
  for (double& v : h.data()) v = v > 0.0 ? v : 0.0;
  return h;
}

inline void relu_backward(Matrix& grad, const Matrix& pre) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(pre.data()[i] > 0.0)) grad.data()[i] = 0.0;
}

inline void accumulate_colsum(Matrix& bias_grad, const Matrix& g) {
  for (std::size_t i = 0; i < g.rows(); ++i) {
    auto r = g.row(i);
    for (std::size_t j = 0; j < g.cols(); ++j) bias_grad(0, j) += r[j];
  }
}

struct Activations {
  Matrix z0, h0, m1, z1, h1, m2, z2, h2;
  Matrix pooled;  // 1 x hidden
  Matrix logits;  // 1 x classes
};

inline Activations run_forward(const ModelParams& p, const Graph& g) {
  using S = ModelParams::Slot;
  if (g.features.cols() != p[S::MlpW].rows() || g.features.rows() != g.num_nodes) {
    throw ShapeMismatch("forward: graph features are " + std::to_string(g.features.rows()) + "x" +
                        std::to_string(g.features.cols()) + ", model expects d=" +
                        std::to_string(p[S::MlpW].rows()));
  }
  if (g.num_nodes == 0) throw ShapeMismatch("forward: graph has no nodes");
  Activations a;
  a.z0 = matmul(g.features, p[S::MlpW]);
  add_bias(a.z0, p[S::MlpB]);
  a.h0 = relu(a.z0);
  a.m1 = aggregate(g, a.h0);
  a.z1 = matmul(a.m1, p[S::Gnn1W]);
  add_bias(a.z1, p[S::Gnn1B]);
  a.h1 = relu(a.z1);
  a.m2 = aggregate(g, a.h1);
  a.z2 = matmul(a.m2, p[S::Gnn2W]);
  add_bias(a.z2, p[S::Gnn2B]);
  a.h2 = relu(a.z2);
  a.pooled = Matrix(1, a.h2.cols());
  accumulate_colsum(a.pooled, a.h2);
  a.pooled *= 1.0 / static_cast<double>(g.num_nodes);
  a.logits = matmul(a.pooled, p[S::HeadW]);
  add_bias(a.logits, p[S::HeadB]);
  return a;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += out[i] = std::exp(logits[i] - mx);
  for (double& v : out) v /= total;
  return out;
}

inline double cross_entropy(std::span<const double> logits, std::size_t label) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double l : logits) total += std::exp(l - mx);
  return mx + std::log(total) - logits[label];
}

// Adds d(scale * loss)/d(params) for one graph into `grad`.
inline double backprop_one(const ModelParams& p, const Graph& g, double scale, ModelParams& grad) {
  using S = ModelParams::Slot;
  const std::size_t classes = p[S::HeadW].cols();
  if (g.label >= classes) {
    throw ShapeMismatch("loss: label " + std::to_string(g.label) + " >= classes " + std::to_string(classes));
  }
  const Activations a = run_forward(p, g);
  const double loss = cross_entropy(a.logits.data(), g.label);

  Matrix dlogits(1, classes, softmax(a.logits.data()));
  dlogits(0, g.label) -= 1.0;
  dlogits *= scale;

  grad[S::HeadW] += matmul_tn(a.pooled, dlogits);
  grad[S::HeadB] += dlogits;
  const Matrix dpooled = matmul_nt(dlogits, p[S::HeadW]);

  Matrix dz2(a.h2.rows(), a.h2.cols());
  const double inv_n = 1.0 / static_cast<double>(g.num_nodes);
  for (std::size_t i = 0; i < dz2.rows(); ++i)
    for (std::size_t j = 0; j < dz2.cols(); ++j) dz2(i, j) = dpooled(0, j) * inv_n;
  relu_backward(dz2, a.z2);
  grad[S::Gnn2W] += matmul_tn(a.m2, dz2);
  accumulate_colsum(grad[S::Gnn2B], dz2);

  Matrix dz1 = aggregate(g, matmul_nt(dz2, p[S::Gnn2W]));
  relu_backward(dz1, a.z1);
  grad[S::Gnn1W] += matmul_tn(a.m1, dz1);
  accumulate_colsum(grad[S::Gnn1B], dz1);

  Matrix dz0 = aggregate(g, matmul_nt(dz1, p[S::Gnn1W]));
  relu_backward(dz0, a.z0);
  grad[S::MlpW] += matmul_tn(g.features, dz0);
  accumulate_colsum(grad[S::MlpB], dz0);
  return loss;
}

}  // namespace detail

inline std::vector<double> forward(const ModelParams& p, const Graph& g) {
  const auto a = detail::run_forward(p, g);
  return a.logits.values();
}

inline std::vector<double> predict_proba(const ModelParams& p, const Graph& g) {
  return detail::softmax(forward(p, g));
}

struct LossGrad {
  double loss = 0.0;
  ModelParams grad;
};

// Mean cross-entropy over the batch and its gradient.
inline LossGrad loss_and_grad(const ModelParams& p, std::span<const Graph* const> batch) {
  if (batch.empty()) throw ShapeMismatch("loss_and_grad: empty batch");
  LossGrad out{0.0, zeros_like(p)};
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const Graph* g : batch) out.loss += scale * detail::backprop_one(p, *g, scale, out.grad);
  return out;
}

inline LossGrad loss_and_grad(const ModelParams& p, std::span<const Graph> batch) {
  std::vector<const Graph*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& g : batch) ptrs.push_back(&g);
  return loss_and_grad(p, ptrs);
}

// Gradient with respect to the sparse channel `s`, taken at base + s.
inline LossGrad loss_and_grad_sparse(const ModelParams& base, const ModelParams& s,
                                     std::span<const Graph* const> batch) {
  return loss_and_grad(combine(base, s), batch);
}

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline Evaluation evaluate(const ModelParams& p, const GraphDataset& data) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::size_t correct = 0;
  double loss = 0.0;
  const std::size_t classes = p[ModelParams::HeadW].cols();
  for (const auto& g : data.graphs) {
    if (g.label >= classes) throw ShapeMismatch("evaluate: label outside the model's classes");
    const auto logits = forward(p, g);
    correct += argmax(logits) == g.label;
    loss += detail::cross_entropy(logits, g.label);
  }
  const double n = static_cast<double>(data.size());
  return {static_cast<double>(correct) / n, loss / n};
}

}  // namespace cefgl
