#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cefgl/compress.hpp"
#include "cefgl/error.hpp"
#include "cefgl/gnn.hpp"
#include "cefgl/graphdata.hpp"
#include "cefgl/linalg.hpp"
#include "cefgl/rng.hpp"

namespace cefgl {

// ---------------------------------------------------------------------------
// Configuration

enum class SparsifierKind { Threshold, TopK };

struct SparsifierConfig {
  SparsifierKind kind = SparsifierKind::Threshold;
  double cut = 1e-3;  // Threshold: drop |v| < cut
  double beta = 0.1;  // TopK: keep ceil(beta * N) entries across the whole channel
};

struct ClientConfig {
  double eta = 0.01;
  double alpha = 0.6;  // pull toward the global view
  double nu = 0.5;     // l1 weight on the sparse channel
  SparsifierConfig sparsifier;
  std::size_t local_epochs = 1;
  std::size_t finetune_epochs = 1;
  std::size_t batch_size = 0;  // 0 = full local training set
  bool use_correction = true;
  // Update h only on communicated rounds with step p/eta instead of every
  // round with 1/eta.
  bool proxskip_h = false;
  QuantMode quant_mode = QuantMode::Deterministic;
};

// Which channels take part in training and inference.
enum class Ablation { Full, GlobalOnly, SparseOnly };

struct NetworkModel {
  double bandwidth_bps = 100e6;
  double latency_s = 0.02;

  double message_time(std::uint64_t bits) const {
    return static_cast<double>(bits) / bandwidth_bps + latency_s;
  }
};

struct DropoutConfig {
  bool enabled = false;
  double a = 10.0;
  double b = 1.0;
};

struct ServerConfig {
  double p = 0.5;    // communication probability
  double rho = 1.0;  // client joining ratio
  double eta = 0.01;
  double tau_lowrank = 1e-4;
  ThresholdMode threshold_mode = ThresholdMode::Relative;
  unsigned r_bits = 16;
  Scheme downlink = Scheme::Quantized;
  QuantMode quant_mode = QuantMode::Deterministic;
  DropoutConfig dropout;
  NetworkModel net;
  Ablation ablation = Ablation::Full;
};

// ---------------------------------------------------------------------------
// State

struct ClientState {
  std::size_t id = 0;
  ModelParams w;           // low-rank channel (shared)
  ModelParams s;           // sparse channel (private)
  ModelParams h;           // correction term
  ModelParams theta_view;  // latest global model seen by this client
  std::shared_ptr<const GraphDataset> train;
  std::shared_ptr<const GraphDataset> val;
  std::shared_ptr<const GraphDataset> test;
  ClientConfig cfg;
  Rng rng;
};

struct ServerState {
  ModelParams theta;
  std::size_t t = 0;
  ServerConfig cfg;
  Rng coin_rng;
  Rng sample_rng;
  Rng dropout_rng;
  Rng quant_rng;
  double lowrank_ratio = 1.0;
  double lowrank_param_ratio = 1.0;
};

struct ClientMetrics {
  std::size_t id = 0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  bool has_test = false;
};

struct RoundRecord {
  std::size_t t = 0;
  bool coin = false;
  bool communicated = false;
  std::vector<std::size_t> participants;
  std::vector<std::size_t> dropped;
  std::optional<double> drop_rate;
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;
  // Scalar values carried by the billed transfers, for per-value accounting.
  std::uint64_t transmitted_values = 0;
  std::vector<ClientMetrics> clients;
  double mean_accuracy = 0.0;
  double mean_train_loss = 0.0;
  double sim_wall_time = 0.0;
  double lowrank_ratio = 1.0;
  double lowrank_param_ratio = 1.0;
  double density_ratio = 0.0;
};

// ---------------------------------------------------------------------------
// Client side

// Applies the configured sparsifier to the whole channel. TopK ranks all
// entries of all tensors together.
inline void sparsify(ModelParams& s, const SparsifierConfig& cfg) {
  if (cfg.kind == SparsifierKind::Threshold) {
    for (auto& t : s.tensors) t.value = to_dense(sparsify_threshold(t.value, cfg.cut));
    return;
  }
  const std::size_t total = s.parameter_count();
  const auto k = static_cast<std::size_t>(
      std::clamp(std::ceil(cfg.beta * static_cast<double>(total) - 1e-9), 0.0, static_cast<double>(total)));
  std::vector<double> flat;
  flat.reserve(total);
  for (const auto& t : s.tensors) flat.insert(flat.end(), t.value.data().begin(), t.value.data().end());
  const Matrix kept = to_dense(sparsify_topk(Matrix(1, total, std::move(flat)), k));
  std::size_t off = 0;
  for (auto& t : s.tensors) {
    std::copy_n(kept.data().begin() + static_cast<std::ptrdiff_t>(off), t.value.size(), t.value.data().begin());
    off += t.value.size();
  }
}

namespace detail {

inline std::vector<std::vector<const Graph*>> epoch_batches(ClientState& c) {
  std::vector<std::vector<const Graph*>> batches;
  if (!c.train || c.train->empty()) return batches;
  const auto& graphs = c.train->graphs;
  const std::size_t n = graphs.size();
  if (c.cfg.batch_size == 0 || c.cfg.batch_size >= n) {
    std::vector<const Graph*> all;
    for (const auto& g : graphs) all.push_back(&g);
    batches.push_back(std::move(all));
    return batches;
  }
  auto order = iota_indices(n);
  shuffle_in_place(order, c.rng);
  for (std::size_t lo = 0; lo < n; lo += c.cfg.batch_size) {
    std::vector<const Graph*> b;
    for (std::size_t i = lo; i < std::min(n, lo + c.cfg.batch_size); ++i) b.push_back(&graphs[order[i]]);
    batches.push_back(std::move(b));
  }
  return batches;
}

inline void require_finite(const ModelParams& p, const ClientState& c, const char* what) {
  if (!all_finite(p)) {
    throw DivergenceDetected("client " + std::to_string(c.id) + ": " + what +
                             " became non-finite (learning rate too large?)");
  }
}

}  // namespace detail

struct LocalTrainResult {
  double last_loss = 0.0;  // mean loss of the last batch processed
  std::size_t steps = 0;
};

// E epochs of W <- W - eta (grad f(W) - h) + eta alpha (theta_view - W).
inline LocalTrainResult local_train_round(ClientState& c) {
  LocalTrainResult res;
  const double eta = c.cfg.eta, alpha = c.cfg.alpha;
  for (std::size_t e = 0; e < c.cfg.local_epochs; ++e) {
    for (const auto& batch : detail::epoch_batches(c)) {
      const LossGrad lg = loss_and_grad(c.w, batch);
      res.last_loss = lg.loss;
      ++res.steps;
      for (std::size_t i = 0; i < c.w.size(); ++i) {
        Matrix& w = c.w[i];
        const Matrix pull = c.theta_view[i] - w;
        w.axpy(-eta, lg.grad[i]);
        w.axpy(eta, c.h[i]);
        w.axpy(eta * alpha, pull);
      }
      detail::require_finite(c.w, c, "low-rank channel");
    }
  }
  return res;
}

// F epochs of S <- Sparsify(S - eta (grad_S f(base + S) + nu sign(S))) with
// the shared channel frozen.
inline void finetune_sparse(ClientState& c, const ModelParams& base) {
  const double eta = c.cfg.eta, nu = c.cfg.nu;
  for (std::size_t e = 0; e < c.cfg.finetune_epochs; ++e) {
    for (const auto& batch : detail::epoch_batches(c)) {
      const LossGrad lg = loss_and_grad_sparse(base, c.s, batch);
      for (std::size_t i = 0; i < c.s.size(); ++i) {
        auto s = c.s[i].data();
        auto g = lg.grad[i].data();
        for (std::size_t k = 0; k < s.size(); ++k) {
          const double sub = s[k] > 0.0 ? 1.0 : (s[k] < 0.0 ? -1.0 : 0.0);
          s[k] -= eta * (g[k] + nu * sub);
        }
      }
      sparsify(c.s, c.cfg.sparsifier);
      detail::require_finite(c.s, c, "sparse channel");
    }
  }
}

inline void finetune_sparse(ClientState& c) { finetune_sparse(c, c.theta_view); }

// h <- h + (theta_view - W) * step, step = 1/eta by default. After several
// local steps in one round, run_round passes 1/(eta * steps) so h keeps
// estimating a single gradient.
inline void update_correction(ClientState& c, double step) {
  for (std::size_t i = 0; i < c.h.size(); ++i) c.h[i].axpy(step, c.theta_view[i] - c.w[i]);
}

inline void update_correction(ClientState& c) { update_correction(c, 1.0 / c.cfg.eta); }

inline std::vector<NamedMatrix> prefixed(const ModelParams& p, const std::string& prefix) {
  std::vector<NamedMatrix> out;
  for (const auto& t : p.tensors) out.push_back({prefix + t.name, t.value});
  return out;
}

// Quantized W followed by quantized h; S never leaves the client.
inline CompressedPayload client_uplink(ClientState& c, unsigned r_bits) {
  auto tensors = prefixed(c.w, "w/");
  auto h = prefixed(c.h, "h/");
  tensors.insert(tensors.end(), h.begin(), h.end());
  EncodeOptions opt;
  opt.scheme = Scheme::Quantized;
  opt.bits = r_bits;
  opt.quant_mode = c.cfg.quant_mode;
  opt.rng = &c.rng;
  return encode_payload(tensors, opt);
}

// ---------------------------------------------------------------------------
// Server side

struct AggregateResult {
  ModelParams theta;
  std::vector<std::size_t> ranks;  // per tensor; vectors report min(rows, cols)
  double lowrank_ratio = 1.0;        // retained rank / full rank over weight matrices
  double lowrank_param_ratio = 1.0;  // k(m+n+1) / (mn) over weight matrices
};

namespace detail {

// Splits a decoded uplink into its W and h records.
inline std::pair<ModelParams, ModelParams> split_uplink(const std::vector<NamedMatrix>& tensors) {
  ModelParams w, h;
  for (const auto& t : tensors) {
    if (t.name.starts_with("w/")) {
      w.tensors.push_back({t.name.substr(2), t.value});
    } else if (t.name.starts_with("h/")) {
      h.tensors.push_back({t.name.substr(2), t.value});
    } else {
      throw MalformedPayload("uplink tensor with unexpected name '" + t.name + "'");
    }
  }
  return {std::move(w), std::move(h)};
}

inline std::vector<double> normalized_weights(std::span<const double> sizes) {
  double total = 0.0;
  for (double s : sizes) total += s;
  std::vector<double> w(sizes.size(), 1.0 / static_cast<double>(sizes.size()));
  if (total > 0.0)
    for (std::size_t i = 0; i < sizes.size(); ++i) w[i] = sizes[i] / total;
  return w;
}

inline AggregateResult truncate_all(ModelParams pre, ThresholdMode mode, double tau) {
  AggregateResult out;
  double kept = 0.0, full = 0.0, kept_params = 0.0, full_params = 0.0;
  for (auto& t : pre.tensors) {
    const Matrix& m = t.value;
    if (std::min(m.rows(), m.cols()) <= 1) {
      out.ranks.push_back(std::min(m.rows(), m.cols()));
      continue;
    }
    LowRankApprox lr = lowrank_truncate(m, mode, tau);
    kept += static_cast<double>(lr.retained_rank);
    full += static_cast<double>(std::min(m.rows(), m.cols()));
    kept_params += static_cast<double>(lr.retained_rank * (m.rows() + m.cols() + 1));
    full_params += static_cast<double>(m.rows() * m.cols());
    out.ranks.push_back(lr.retained_rank);
    t.value = std::move(lr.matrix);
  }
  out.theta = std::move(pre);
  if (full > 0.0) {
    out.lowrank_ratio = kept / full;
    out.lowrank_param_ratio = kept_params / full_params;
  }
  return out;
}

}  // namespace detail

// Theta = LowRank(Σ w_i W_i − eta Σ w_i h_i), w_i = n_i / Σ n_j over the
// payloads given. Bias vectors are not truncated.
inline AggregateResult server_aggregate(std::span<const CompressedPayload> payloads,
                                        std::span<const double> sample_sizes, double eta, double tau_lowrank,
                                        ThresholdMode mode = ThresholdMode::Relative) {
  if (payloads.empty()) throw ShapeMismatch("server_aggregate: no payloads");
  if (payloads.size() != sample_sizes.size()) throw ShapeMismatch("server_aggregate: one sample size per payload");
  const auto weights = detail::normalized_weights(sample_sizes);
  ModelParams pre;
  for (std::size_t i = 0; i < payloads.size(); ++i) {
    auto [w, h] = detail::split_uplink(decode_payload(payloads[i]));
    require_congruent(w, h, "server_aggregate");
    if (i == 0) {
      pre = zeros_like(w);
    } else {
      require_congruent(pre, w, "server_aggregate");
    }
    axpy(pre, weights[i], w);
    axpy(pre, -eta * weights[i], h);
  }
  if (!all_finite(pre)) throw DivergenceDetected("server: aggregate became non-finite");
  return detail::truncate_all(std::move(pre), mode, tau_lowrank);
}

// ⌈K·rho⌉ distinct clients, ascending.
inline std::vector<std::size_t> sample_clients(std::size_t k, double rho, Rng& rng) {
  const auto m = static_cast<std::size_t>(
      std::clamp(std::ceil(static_cast<double>(k) * rho - 1e-9), 1.0, static_cast<double>(k)));
  auto idx = iota_indices(k);
  if (m < k) {
    for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + uniform_index(rng, k - i)]);
    idx.resize(m);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct DropoutResult {
  std::vector<std::size_t> survivors;
  std::vector<std::size_t> dropped;
  double drop_rate = 0.0;
};

// One drop rate q ~ Beta(a, b) per call; each participant leaves with
// probability q.
inline DropoutResult dropout_filter(std::span<const std::size_t> participants, double a, double b, Rng& rng) {
  if (!(a > 0.0) || !(b > 0.0)) throw std::invalid_argument("dropout_filter: Beta parameters must be > 0");
  DropoutResult out;
  if (participants.empty()) return out;
  out.drop_rate = beta_draw(rng, a, b);
  for (std::size_t id : participants) {
    (bernoulli(rng, out.drop_rate) ? out.dropped : out.survivors).push_back(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline ModelParams inference_model(const ClientState& c, Ablation ablation) {
  switch (ablation) {
    case Ablation::GlobalOnly:
      return c.theta_view;
    case Ablation::SparseOnly:
      return c.s;
    case Ablation::Full:
      break;
  }
  return combine(c.theta_view, c.s);
}

namespace detail {

inline void fill_metrics(RoundRecord& rec, const std::vector<ClientState>& clients, Ablation ablation) {
  double acc_sum = 0.0, loss_sum = 0.0, density = 0.0;
  std::size_t with_test = 0, with_train = 0;
  for (const auto& c : clients) {
    const ModelParams model = inference_model(c, ablation);
    ClientMetrics m{c.id, 0.0, 0.0, false};
    if (c.train && !c.train->empty()) {
      m.train_loss = evaluate(model, *c.train).mean_loss;
      loss_sum += m.train_loss;
      ++with_train;
    }
    if (c.test && !c.test->empty()) {
      m.test_accuracy = evaluate(model, *c.test).accuracy;
      m.has_test = true;
      acc_sum += m.test_accuracy;
      ++with_test;
    }
    density += static_cast<double>(nnz(c.s)) / static_cast<double>(c.s.parameter_count());
    rec.clients.push_back(m);
  }
  rec.mean_accuracy = with_test ? acc_sum / static_cast<double>(with_test) : 0.0;
  rec.mean_train_loss = with_train ? loss_sum / static_cast<double>(with_train) : 0.0;
  rec.density_ratio = clients.empty() ? 0.0 : density / static_cast<double>(clients.size());
}

inline DropoutResult select_round_clients(ServerState& server, std::size_t k) {
  const auto participants = sample_clients(k, server.cfg.rho, server.sample_rng);
  if (!server.cfg.dropout.enabled) return {participants, {}, 0.0};
  return dropout_filter(participants, server.cfg.dropout.a, server.cfg.dropout.b, server.dropout_rng);
}

inline CompressedPayload encode_downlink(ServerState& server, const ModelParams& theta) {
  EncodeOptions opt;
  opt.scheme = server.cfg.downlink;
  opt.bits = server.cfg.r_bits;
  opt.tau_lowrank = server.cfg.tau_lowrank;
  opt.threshold_mode = server.cfg.threshold_mode;
  opt.quant_mode = server.cfg.quant_mode;
  opt.rng = &server.quant_rng;
  return encode_payload(theta.tensors, opt);
}

inline ModelParams to_params(std::vector<NamedMatrix> tensors) { return ModelParams{std::move(tensors)}; }

}  // namespace detail

// One round of the protocol: coin flip, client sampling and dropout, local
// training, sparse fine-tuning, correction update, uplink; then either
// aggregation and downlink to every client, or a skipped round where each
// client adopts its own W as its global view.
inline RoundRecord run_round(ServerState& server, std::vector<ClientState>& clients) {
  const ServerConfig& cfg = server.cfg;
  RoundRecord rec;
  rec.t = server.t;
  rec.coin = bernoulli(server.coin_rng, cfg.p);
  const DropoutResult sel = detail::select_round_clients(server, clients.size());
  rec.participants = sel.survivors;
  rec.participants.insert(rec.participants.end(), sel.dropped.begin(), sel.dropped.end());
  std::sort(rec.participants.begin(), rec.participants.end());
  rec.dropped = sel.dropped;
  if (cfg.dropout.enabled && !rec.participants.empty()) rec.drop_rate = sel.drop_rate;

  const bool trains_global = cfg.ablation != Ablation::SparseOnly;
  const bool trains_sparse = cfg.ablation != Ablation::GlobalOnly;

  std::vector<CompressedPayload> payloads;
  std::vector<double> sizes;
  std::vector<std::size_t> steps_of(clients.size(), 0);
  for (std::size_t id : sel.survivors) {
    ClientState& c = clients.at(id);
    std::size_t& steps = steps_of.at(id);
    if (trains_global) steps = local_train_round(c).steps;
    if (trains_sparse) finetune_sparse(c);
    if (steps > 0 && c.cfg.use_correction && !c.cfg.proxskip_h)
      update_correction(c, 1.0 / (c.cfg.eta * static_cast<double>(steps)));
    if (rec.coin && trains_global) {
      payloads.push_back(client_uplink(c, cfg.r_bits));
      sizes.push_back(static_cast<double>(c.train ? c.train->size() : 0));
    }
  }

  rec.communicated = rec.coin && !payloads.empty();
  if (rec.communicated) {
    for (const auto& p : payloads) {
      for (const auto& t : p.tensors) rec.transmitted_values += t.rows * t.cols;
      const std::uint64_t bits = payload_bits(p);
      rec.uplink_bits += bits;
      rec.sim_wall_time += cfg.net.message_time(bits);
    }
    AggregateResult agg = server_aggregate(payloads, sizes, cfg.eta, cfg.tau_lowrank, cfg.threshold_mode);
    server.lowrank_ratio = agg.lowrank_ratio;
    server.lowrank_param_ratio = agg.lowrank_param_ratio;
    const CompressedPayload down = detail::encode_downlink(server, agg.theta);
    const std::uint64_t down_bits = payload_bits(down);
    server.theta = detail::to_params(decode_payload(down));
    for (std::size_t id : sel.survivors) {
      ClientState& c = clients.at(id);
      if (c.cfg.use_correction && c.cfg.proxskip_h && steps_of[id] > 0) {
        const double step = cfg.p / (c.cfg.eta * static_cast<double>(steps_of[id]));
        for (std::size_t i = 0; i < c.h.size(); ++i) c.h[i].axpy(step, server.theta[i] - c.w[i]);
      }
    }
    for (auto& c : clients) {
      c.theta_view = server.theta;
      c.w = server.theta;
      rec.transmitted_values += server.theta.parameter_count();
      rec.downlink_bits += down_bits;
      rec.sim_wall_time += cfg.net.message_time(down_bits);
    }
  } else if (!rec.coin) {
    for (auto& c : clients) c.theta_view = c.w;
  }

  ++server.t;
  rec.lowrank_ratio = server.lowrank_ratio;
  rec.lowrank_param_ratio = server.lowrank_param_ratio;
  detail::fill_metrics(rec, clients, cfg.ablation);
  return rec;
}

// ---------------------------------------------------------------------------
// Baselines

// W <- W - eta (grad f(W) + mu (W - theta)) on one batch.
inline double fedprox_local_step(ClientState& c, const ModelParams& theta, double mu_prox,
                                 std::span<const Graph* const> batch) {
  if (!(mu_prox >= 0.0)) throw std::invalid_argument("fedprox_local_step: mu must be >= 0");
  const LossGrad lg = loss_and_grad(c.w, batch);
  for (std::size_t i = 0; i < c.w.size(); ++i) {
    Matrix& w = c.w[i];
    const Matrix prox = w - theta[i];
    w.axpy(-c.cfg.eta, lg.grad[i]);
    w.axpy(-c.cfg.eta * mu_prox, prox);
  }
  detail::require_finite(c.w, c, "model");
  return lg.loss;
}

namespace detail {

inline RoundRecord dense_baseline_round(ServerState& server, std::vector<ClientState>& clients, double mu_prox) {
  const ServerConfig& cfg = server.cfg;
  RoundRecord rec;
  rec.t = server.t;
  rec.coin = true;
  const DropoutResult sel = select_round_clients(server, clients.size());
  rec.participants = sel.survivors;
  rec.participants.insert(rec.participants.end(), sel.dropped.begin(), sel.dropped.end());
  std::sort(rec.participants.begin(), rec.participants.end());
  rec.dropped = sel.dropped;
  if (cfg.dropout.enabled && !rec.participants.empty()) rec.drop_rate = sel.drop_rate;

  EncodeOptions dense;
  std::vector<ModelParams> uploaded;
  std::vector<double> sizes;
  for (std::size_t id : sel.survivors) {
    ClientState& c = clients.at(id);
    for (std::size_t e = 0; e < c.cfg.local_epochs; ++e)
      for (const auto& batch : epoch_batches(c)) fedprox_local_step(c, c.theta_view, mu_prox, batch);
    const CompressedPayload up = encode_payload(c.w.tensors, dense);
    const std::uint64_t bits = payload_bits(up);
    rec.transmitted_values += c.w.parameter_count();
    rec.uplink_bits += bits;
    rec.sim_wall_time += cfg.net.message_time(bits);
    uploaded.push_back(to_params(decode_payload(up)));
    sizes.push_back(static_cast<double>(c.train ? c.train->size() : 0));
  }

  rec.communicated = !uploaded.empty();
  if (rec.communicated) {
    const auto weights = normalized_weights(sizes);
    ModelParams theta = zeros_like(uploaded.front());
    for (std::size_t i = 0; i < uploaded.size(); ++i) axpy(theta, weights[i], uploaded[i]);
    const CompressedPayload down = encode_payload(theta.tensors, dense);
    const std::uint64_t down_bits = payload_bits(down);
    server.theta = to_params(decode_payload(down));
    for (auto& c : clients) {
      c.theta_view = server.theta;
      c.w = server.theta;
      rec.transmitted_values += server.theta.parameter_count();
      rec.downlink_bits += down_bits;
      rec.sim_wall_time += cfg.net.message_time(down_bits);
    }
  }
  ++server.t;
  fill_metrics(rec, clients, Ablation::GlobalOnly);
  return rec;
}

}  // namespace detail

// Plain local SGD and a dense weighted average every round.
inline RoundRecord fedavg_round(ServerState& server, std::vector<ClientState>& clients) {
  return detail::dense_baseline_round(server, clients, 0.0);
}

inline RoundRecord fedprox_round(ServerState& server, std::vector<ClientState>& clients, double mu_prox) {
  return detail::dense_baseline_round(server, clients, mu_prox);
}

}  // namespace cefgl
