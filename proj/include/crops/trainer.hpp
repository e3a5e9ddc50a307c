#pragma once

// Forward/backward through the dual encoder, AdamW updates, and the seeded
// training loop over labeled query groups.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "crops/corpus.hpp"
#include "crops/encoder.hpp"
#include "crops/error.hpp"
#include "crops/io.hpp"
#include "crops/linalg.hpp"
#include "crops/loss.hpp"
#include "crops/random.hpp"

namespace crops {

// ---------------------------------------------------------------------------
// Forward and backward

struct Forward {
  Matrix s;  // num_queries x num_docs
  std::vector<Encoding> queries;
  std::vector<Encoding> docs;
};

inline Forward forward(const EncoderParams& p, const Batch& batch) {
  Forward f;
  f.queries.reserve(batch.num_queries());
  f.docs.reserve(batch.num_docs());
  for (const auto& ids : batch.query_tokens) f.queries.push_back(encode_full(p, Side::Query, ids));
  for (const auto& ids : batch.doc_tokens) f.docs.push_back(encode_full(p, Side::Doc, ids));
  f.s = Matrix(f.queries.size(), f.docs.size());
  for (std::size_t g = 0; g < f.queries.size(); ++g)
    for (std::size_t k = 0; k < f.docs.size(); ++k) f.s(g, k) = similarity(f.queries[g].vec, f.docs[k].vec);
  return f;
}

// S[q][j] = similarity(encode(query q), encode(doc j)).
inline Matrix similarity_matrix(const EncoderParams& p, const Batch& batch) { return forward(p, batch).s; }

struct Gradients {
  Matrix embed;
  Matrix proj_q;
  Matrix proj_d;
  double log_tau = 0.0;

  static Gradients zeros_like(const EncoderParams& p) {
    return {Matrix(p.embed.rows, p.embed.cols), Matrix(p.proj_q.rows, p.proj_q.cols),
            Matrix(p.proj_d.rows, p.proj_d.cols), 0.0};
  }

  friend bool operator==(const Gradients&, const Gradients&) = default;
};

namespace detail {

// Accumulates the gradient of one encoding given dL/dv.
inline void encoding_backward(const EncoderParams& p, const Encoding& e, std::span<const TokenId> ids,
                              std::span<const double> grad_v, const Matrix& proj, Matrix& grad_proj,
                              Matrix& grad_embed) {
  if (e.degenerate) return;
  const std::size_t de = p.embed_dim(), d = p.out_dim();
  // v = z/|z|  =>  dz = (I - v v^T) dv / |z|
  const double vg = dot(e.vec, grad_v);
  std::vector<double> dz(d);
  for (std::size_t i = 0; i < d; ++i) dz[i] = (grad_v[i] - e.vec[i] * vg) / e.norm;
  // z = pooled * proj
  std::vector<double> dpooled(de, 0.0);
  for (std::size_t k = 0; k < de; ++k) {
    auto wrow = proj.row(k);
    if (e.pooled[k] != 0.0) axpy(e.pooled[k], dz, grad_proj.row(k));
    dpooled[k] = dot(wrow, dz);
  }
  // pooled = mean of embedding rows
  const double inv = 1.0 / static_cast<double>(ids.size());
  for (TokenId t : ids) axpy(inv, dpooled, grad_embed.row(t));
}

}  // namespace detail

// Chain rule from dL/dS and dL/dtau back to every parameter tensor.
// grad_tau is with respect to tau; the log_tau entry is grad_tau * tau.
inline Gradients backward(const EncoderParams& p, const Batch& batch, const Forward& f, const Matrix& grad_s,
                          double grad_tau) {
  Gradients g = Gradients::zeros_like(p);
  g.log_tau = grad_tau * p.tau();
  const std::size_t d = p.out_dim();
  std::vector<double> gv(d);
  for (std::size_t q = 0; q < f.queries.size(); ++q) {
    std::fill(gv.begin(), gv.end(), 0.0);
    for (std::size_t k = 0; k < f.docs.size(); ++k)
      if (grad_s(q, k) != 0.0) axpy(grad_s(q, k), f.docs[k].vec, gv);
    detail::encoding_backward(p, f.queries[q], batch.query_tokens[q], gv, p.proj_q, g.proj_q, g.embed);
  }
  for (std::size_t k = 0; k < f.docs.size(); ++k) {
    std::fill(gv.begin(), gv.end(), 0.0);
    for (std::size_t q = 0; q < f.queries.size(); ++q)
      if (grad_s(q, k) != 0.0) axpy(grad_s(q, k), f.queries[q].vec, gv);
    detail::encoding_backward(p, f.docs[k], batch.doc_tokens[k], gv, p.proj_d, g.proj_d, g.embed);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 2e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainState {
  EncoderParams params;
  Gradients m;  // first moments, same shapes as params
  Gradients v;  // second moments
  std::int64_t step = 0;
  std::uint64_t seed = 0;

  static TrainState fresh(EncoderParams p, std::uint64_t seed) {
    TrainState s;
    s.m = Gradients::zeros_like(p);
    s.v = Gradients::zeros_like(p);
    s.params = std::move(p);
    s.seed = seed;
    return s;
  }

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

namespace detail {

inline void adam_tensor(std::vector<double>& param, const std::vector<double>& grad, std::vector<double>& m,
                        std::vector<double>& v, const AdamConfig& c, double bc1, double bc2, double decay) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double gi = grad[i];
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
    const double mhat = m[i] / bc1, vhat = v[i] / bc2;
    param[i] -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + decay * param[i]);
  }
}

}  // namespace detail

// Adam with bias correction and decoupled weight decay on the embedding and
// projection tensors; log_tau is never decayed.
inline void adam_step(TrainState& st, const Gradients& g, const AdamConfig& c = {}) {
  auto& p = st.params;
  if (!g.embed.same_shape(p.embed) || !g.proj_q.same_shape(p.proj_q) || !g.proj_d.same_shape(p.proj_d) ||
      !st.m.embed.same_shape(p.embed) || !st.v.embed.same_shape(p.embed) || !st.m.proj_q.same_shape(p.proj_q) ||
      !st.v.proj_q.same_shape(p.proj_q) || !st.m.proj_d.same_shape(p.proj_d) || !st.v.proj_d.same_shape(p.proj_d))
    throw ValidationError("gradient or moment shape does not match parameters");
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t), bc2 = 1.0 - std::pow(c.beta2, t);
  detail::adam_tensor(p.embed.data, g.embed.data, st.m.embed.data, st.v.embed.data, c, bc1, bc2, c.weight_decay);
  detail::adam_tensor(p.proj_q.data, g.proj_q.data, st.m.proj_q.data, st.v.proj_q.data, c, bc1, bc2, c.weight_decay);
  detail::adam_tensor(p.proj_d.data, g.proj_d.data, st.m.proj_d.data, st.v.proj_d.data, c, bc1, bc2, c.weight_decay);
  std::vector<double> lt{p.log_tau}, gt{g.log_tau}, mt{st.m.log_tau}, vt{st.v.log_tau};
  detail::adam_tensor(lt, gt, mt, vt, c, bc1, bc2, 0.0);
  p.log_tau = lt[0];
  st.m.log_tau = mt[0];
  st.v.log_tau = vt[0];
}

// ---------------------------------------------------------------------------
// Training loop

enum class LossVariant { HInfoNce, InfoNceBinary, HlaDemoted };

inline std::string_view to_string(LossVariant v) {
  switch (v) {
    case LossVariant::HInfoNce: return "h_infonce";
    case LossVariant::InfoNceBinary: return "infonce_binary";
    case LossVariant::HlaDemoted: return "hla_demoted";
  }
  return "";
}

inline std::optional<LossVariant> parse_loss_variant(std::string_view s) {
  for (auto v : {LossVariant::HInfoNce, LossVariant::InfoNceBinary, LossVariant::HlaDemoted})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

struct TrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_groups = 8;
  std::uint64_t seed = 0;
  LossVariant loss = LossVariant::HInfoNce;
  AdamConfig adam;
  EncoderDims dims;
  std::size_t max_len = 128;
  std::size_t max_group_docs = 32;

  Tokenizer tokenizer() const { return {dims.vocab_size, max_len}; }

  void validate() const {
    if (epochs == 0) throw ValidationError("train.epochs must be positive");
    if (batch_groups == 0) throw ValidationError("train.batch_groups must be positive");
    if (max_group_docs == 0) throw ValidationError("train.max_group_docs must be positive");
    if (max_len == 0) throw ValidationError("encoder.max_len must be positive");
    if (!(adam.lr > 0.0) || !(adam.weight_decay >= 0.0)) throw ValidationError("invalid optimizer settings");
  }
};

struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double loss_per_anchor = 0.0;
  double tau = 0.0;
};

struct TrainResult {
  TrainState state;
  std::vector<StepRecord> curve;
};

// Tokenized group kept for batching.
struct PreparedGroup {
  QueryId query_id = 0;
  std::vector<TokenId> query_tokens;
  std::vector<std::vector<TokenId>> doc_tokens;
  std::vector<DocId> doc_ids;
  std::vector<int> labels;
};

inline PreparedGroup prepare_group(const TrainingGroup& g, const Tokenizer& tok) {
  PreparedGroup p;
  p.query_id = g.query_id;
  p.query_tokens = tok.tokenize(g.query_text);
  for (const auto& s : g.samples) {
    p.doc_ids.push_back(s.doc_id);
    p.doc_tokens.push_back(tok.tokenize(doc_text(s.content)));
    p.labels.push_back(s.label);
  }
  return p;
}

// Picks at most `cap` doc indices of a group, always keeping one label >= 4
// sample. Returned indices are in ascending order.
inline std::vector<std::size_t> subsample_group(const std::vector<int>& labels, std::size_t cap, Rng& rng) {
  std::vector<std::size_t> all(labels.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  if (labels.size() <= cap) return all;
  std::vector<std::size_t> pos, rest;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] >= kPositiveLabel ? pos : rest).push_back(i);
  std::vector<std::size_t> keep;
  if (!pos.empty()) {
    std::size_t anchor = pos[rng.below(pos.size())];
    keep.push_back(anchor);
    rest.clear();
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (i != anchor) rest.push_back(i);
  }
  for (std::size_t i : rng.sample(rest, cap - keep.size())) keep.push_back(i);
  std::sort(keep.begin(), keep.end());
  return keep;
}

inline Batch make_batch(std::span<const PreparedGroup* const> groups, std::span<const std::vector<std::size_t>> picks,
                        bool demote_top_label) {
  Batch b;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = *groups[gi];
    b.query_ids.push_back(g.query_id);
    b.query_tokens.push_back(g.query_tokens);
    for (std::size_t i : picks[gi]) {
      b.doc_ids.push_back(g.doc_ids[i]);
      b.doc_tokens.push_back(g.doc_tokens[i]);
      b.group_of.push_back(gi);
      int label = g.labels[i];
      if (demote_top_label && label == kMaxLabel) label = kPositiveLabel;
      b.label_of.push_back(label);
    }
  }
  return b;
}

// Loss and dL/dS for one batch under the chosen variant.
inline LossResult batch_loss(const Matrix& s, const Batch& b, double tau, LossVariant variant) {
  if (variant == LossVariant::InfoNceBinary) return infonce_baseline(s, b, tau);
  return h_infonce_masked(s, build_mask(b), b, tau);
}

inline TrainResult train(std::span<const TrainingGroup> groups, const TrainConfig& cfg) {
  cfg.validate();
  const Tokenizer tok = cfg.tokenizer();
  std::vector<PreparedGroup> prepared;
  for (const auto& g : groups)
    if (g.trainable()) prepared.push_back(prepare_group(g, tok));
  if (prepared.empty()) throw ValidationError("no trainable groups");

  TrainResult out;
  out.state = TrainState::fresh(init_params(mix_seed(cfg.seed, 1), cfg.dims), cfg.seed);
  auto& st = out.state;
  const bool demote = cfg.loss == LossVariant::HlaDemoted;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, 1000 + epoch));
    std::vector<std::size_t> order(prepared.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_groups) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_groups);
      std::vector<const PreparedGroup*> members;
      std::vector<std::vector<std::size_t>> picks;
      for (std::size_t i = start; i < end; ++i) {
        members.push_back(&prepared[order[i]]);
        picks.push_back(subsample_group(members.back()->labels, cfg.max_group_docs, rng));
      }
      Batch b = make_batch(members, picks, demote);
      Forward f = forward(st.params, b);
      LossResult lr = batch_loss(f.s, b, st.params.tau(), cfg.loss);
      Gradients g = backward(st.params, b, f, lr.grad_s, lr.grad_tau);
      StepRecord rec;
      rec.loss = lr.loss;
      rec.loss_per_anchor = lr.loss / static_cast<double>(b.num_docs());
      adam_step(st, g, cfg.adam);
      rec.step = st.step;
      rec.tau = st.params.tau();
      out.curve.push_back(rec);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string format_double(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline void write_curve_csv(const std::filesystem::path& path, std::span<const StepRecord> curve) {
  write_file_atomic(path, [&](std::ostream& out) {
    out << "step,loss,tau\n";
    for (const auto& r : curve) out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.tau) << '\n';
  });
}

// Checkpoint: the encoder parameter layout, then the step counter (int64), the
// seed (uint64), and the Adam moments m then v, each as embed, proj_q, proj_d,
// log_tau.
inline void write_checkpoint(const std::filesystem::path& path, const TrainState& st) {
  write_file_atomic(path, [&](std::ostream& out) {
    write_params(out, st.params);
    detail::put_i64(out, st.step);
    out.write(reinterpret_cast<const char*>(&st.seed), sizeof st.seed);
    for (const Gradients* mom : {&st.m, &st.v}) {
      detail::put_matrix(out, mom->embed);
      detail::put_matrix(out, mom->proj_q);
      detail::put_matrix(out, mom->proj_d);
      detail::put_f64(out, mom->log_tau);
    }
  });
}

inline TrainState read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  TrainState st;
  st.params = read_params(in);
  st.m = Gradients::zeros_like(st.params);
  st.v = Gradients::zeros_like(st.params);
  st.step = detail::get_i64(in);
  st.seed = static_cast<std::uint64_t>(detail::get_i64(in));
  for (Gradients* mom : {&st.m, &st.v}) {
    detail::get_matrix(in, mom->embed);
    detail::get_matrix(in, mom->proj_q);
    detail::get_matrix(in, mom->proj_d);
    mom->log_tau = detail::get_f64(in);
  }
  return st;
}

}  // namespace crops
