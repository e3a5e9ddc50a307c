#pragma once

// Hierarchy-masked contrastive losses over a batch of query groups.
//
// Every doc i in the batch is an anchor for its own query g = group_of(i).
// Its comparator set is i itself, every doc of another query, and the docs of
// query g with a strictly lower label. Same-query docs with a higher or equal
// label are masked out. The loss sums -log softmax over anchors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "crops/corpus.hpp"
#include "crops/encoder.hpp"
#include "crops/error.hpp"
#include "crops/linalg.hpp"

namespace crops {

struct Batch {
  std::vector<QueryId> query_ids;
  std::vector<std::vector<TokenId>> query_tokens;
  std::vector<DocId> doc_ids;
  std::vector<std::vector<TokenId>> doc_tokens;
  std::vector<std::size_t> group_of;  // doc index -> query index
  std::vector<int> label_of;          // doc index -> label in [0,5]

  std::size_t num_queries() const { return query_ids.size(); }
  std::size_t num_docs() const { return group_of.size(); }

  void validate() const {
    if (query_ids.empty()) throw ValidationError("batch has no queries");
    if (label_of.size() != group_of.size()) throw ValidationError("batch label/group size mismatch");
    std::vector<std::size_t> sizes(query_ids.size(), 0);
    for (std::size_t i = 0; i < group_of.size(); ++i) {
      if (group_of[i] >= query_ids.size()) throw ValidationError("batch doc refers to unknown query");
      if (label_of[i] < 0 || label_of[i] > kMaxLabel) throw ValidationError("batch label outside [0,5]");
      ++sizes[group_of[i]];
    }
    for (std::size_t s : sizes)
      if (s == 0) throw ValidationError("batch query without docs");
  }
};

enum class MaskEntry : std::uint8_t { Positive, Negative, Masked };

struct MaskMatrix {
  std::size_t n = 0;
  std::vector<MaskEntry> entries;  // n x n, row = anchor

  MaskEntry operator()(std::size_t i, std::size_t k) const { return entries[i * n + k]; }
};

inline MaskMatrix build_mask(const Batch& batch) {
  const std::size_t n = batch.num_docs();
  MaskMatrix m{n, std::vector<MaskEntry>(n * n, MaskEntry::Masked)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      MaskEntry& e = m.entries[i * n + k];
      if (k == i)
        e = MaskEntry::Positive;
      else if (batch.group_of[k] != batch.group_of[i])
        e = MaskEntry::Negative;
      else
        e = batch.label_of[k] < batch.label_of[i] ? MaskEntry::Negative : MaskEntry::Masked;
    }
  }
  return m;
}

struct LossResult {
  double loss = 0.0;
  Matrix grad_s;  // dL/dS, num_queries x num_docs
  double grad_tau = 0.0;
};

namespace detail {

inline void check_inputs(const Matrix& s, const Batch& batch, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("temperature must be positive and finite");
  if (s.rows != batch.num_queries() || s.cols != batch.num_docs())
    throw ValidationError("similarity matrix shape does not match batch");
  for (double x : s.data)
    if (!std::isfinite(x)) throw ValidationError("non-finite similarity score");
}

}  // namespace detail

// After max-shifting a row, masked logits are pushed this far below the
// row maximum; exp() of the result is exactly 0 in double precision.
inline constexpr double kMaskedLogitOffset = 1.0e4;

// Single pass over the expanded N x N logit matrix (row i holds the
// similarities of query group_of(i)), with analytic gradients.
inline LossResult h_infonce_masked(const Matrix& s, const MaskMatrix& mask, const Batch& batch, double tau) {
  detail::check_inputs(s, batch, tau);
  const std::size_t n = batch.num_docs();
  if (mask.n != n) throw ValidationError("mask does not match batch");
  LossResult r;
  r.grad_s = Matrix(s.rows, s.cols);
  if (n == 0) return r;

  const double inv_tau = 1.0 / tau;
  Matrix logits(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    auto src = s.row(batch.group_of[i]);
    auto dst = logits.row(i);
    for (std::size_t k = 0; k < n; ++k) dst[k] = src[k] * inv_tau;
  }

  for (std::size_t i = 0; i < n; ++i) {
    auto row = logits.row(i);
    const auto* m = &mask.entries[i * n];
    const double anchor = row[i];
    double mx = anchor;
    for (std::size_t k = 0; k < n; ++k)
      if (m[k] != MaskEntry::Masked && row[k] > mx) mx = row[k];
    double rest = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      double shifted = row[k] - mx;
      if (m[k] == MaskEntry::Masked) shifted = std::min(shifted, 0.0) - kMaskedLogitOffset;
      row[k] = std::exp(shifted);
      if (k != i) rest += row[k];
    }
    const double sum = row[i] + rest;
    // loss_i = logsumexp - anchor logit; when the anchor is the row maximum
    // this is log1p(rest), which keeps full relative precision near zero.
    const std::size_t g = batch.group_of[i];
    auto srow = s.row(g);
    r.loss += mx == anchor ? std::log1p(rest) : mx + std::log(sum) - anchor;

    auto grow = r.grad_s.row(g);
    const double inv_sum = 1.0 / sum;
    double expect_s = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double p = row[k] * inv_sum;
      if (p == 0.0) continue;
      grow[k] += p * inv_tau;
      expect_s += p * srow[k];
    }
    grow[i] -= inv_tau;
    r.grad_tau += (srow[i] - expect_s) * inv_tau * inv_tau;
  }
  return r;
}

// Direct transcription: for each anchor, -log(exp(s_i/t) / sum over its
// comparator set of exp(s_j/t)). Loss only; used as the correctness oracle.
inline double h_infonce_naive(const Matrix& s, const Batch& batch, double tau) {
  detail::check_inputs(s, batch, tau);
  double total = 0.0;
  const std::size_t n = batch.num_docs();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t g = batch.group_of[i];
    const double num = std::exp(s(g, i) / tau);
    double den = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const bool comparator = j == i || batch.group_of[j] != g || batch.label_of[j] < batch.label_of[i];
      if (comparator) den += std::exp(s(g, j) / tau);
    }
    total += -std::log(num / den);
  }
  return total;
}

// Binary InfoNCE: each doc with label >= positive_threshold is a positive for
// its query against every other doc in the batch. Per-positive terms summed.
inline LossResult infonce_baseline(const Matrix& s, const Batch& batch, double tau, int positive_threshold = kPositiveLabel) {
  detail::check_inputs(s, batch, tau);
  const std::size_t n = batch.num_docs();
  std::vector<bool> has_positive(batch.num_queries(), false);
  for (std::size_t i = 0; i < n; ++i)
    if (batch.label_of[i] >= positive_threshold) has_positive[batch.group_of[i]] = true;
  for (std::size_t g = 0; g < has_positive.size(); ++g)
    if (!has_positive[g]) throw ValidationError("group " + std::to_string(batch.query_ids[g]) + " has no positive");

  LossResult r;
  r.grad_s = Matrix(s.rows, s.cols);
  const double inv_tau = 1.0 / tau;
  // The softmax over all docs depends only on the query row.
  std::vector<double> p(n);
  for (std::size_t g = 0; g < s.rows; ++g) {
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (batch.group_of[i] == g && batch.label_of[i] >= positive_threshold) ++positives;
    if (positives == 0) continue;
    auto srow = s.row(g);
    double mx = srow[0] * inv_tau;
    for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, srow[k] * inv_tau);
    double sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) sum += (p[k] = std::exp(srow[k] * inv_tau - mx));
    const double lse = mx + std::log(sum);
    double expect_s = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      p[k] /= sum;
      expect_s += p[k] * srow[k];
    }
    auto grow = r.grad_s.row(g);
    const double cnt = static_cast<double>(positives);
    for (std::size_t k = 0; k < n; ++k) grow[k] += cnt * p[k] * inv_tau;
    for (std::size_t i = 0; i < n; ++i) {
      if (batch.group_of[i] != g || batch.label_of[i] < positive_threshold) continue;
      r.loss += lse - srow[i] * inv_tau;
      grow[i] -= inv_tau;
      r.grad_tau += (srow[i] - expect_s) * inv_tau * inv_tau;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Embedding-level helpers

// S = Q * D^T for unit query rows Q (num_queries x d) and doc rows D (num_docs x d).
inline Matrix similarity_from_vectors(const Matrix& qv, const Matrix& dv) {
  Matrix s(qv.rows, dv.rows);
  for (std::size_t g = 0; g < qv.rows; ++g)
    for (std::size_t k = 0; k < dv.rows; ++k) s(g, k) = dot(qv.row(g), dv.row(k));
  return s;
}

struct VectorGrads {
  Matrix query;  // dL/dQ
  Matrix doc;    // dL/dD
};

inline VectorGrads similarity_backward(const Matrix& grad_s, const Matrix& qv, const Matrix& dv) {
  VectorGrads out{Matrix(qv.rows, qv.cols), Matrix(dv.rows, dv.cols)};
  for (std::size_t g = 0; g < qv.rows; ++g) {
    auto gq = out.query.row(g);
    for (std::size_t k = 0; k < dv.rows; ++k) {
      const double w = grad_s(g, k);
      if (w == 0.0) continue;
      axpy(w, dv.row(k), gq);
      axpy(w, qv.row(g), out.doc.row(k));
    }
  }
  return out;
}

struct AnchorLoopResult {
  double loss = 0.0;
  VectorGrads grads;
  double grad_tau = 0.0;
};

// Anchor-by-anchor evaluation: each anchor gathers its comparator set and
// recomputes the similarities it needs from the embeddings. Produces the same
// loss and embedding gradients as the masked path; kept as the efficiency
// reference.
inline AnchorLoopResult h_infonce_per_anchor(const Matrix& qv, const Matrix& dv, const Batch& batch, double tau) {
  AnchorLoopResult r;
  r.grads = {Matrix(qv.rows, qv.cols), Matrix(dv.rows, dv.cols)};
  const std::size_t n = batch.num_docs();
  const double inv_tau = 1.0 / tau;
  std::vector<std::size_t> comp;
  std::vector<double> logit, sims;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t g = batch.group_of[i];
    comp.clear();
    for (std::size_t k = 0; k < n; ++k)
      if (k == i || batch.group_of[k] != g || batch.label_of[k] < batch.label_of[i]) comp.push_back(k);
    logit.resize(comp.size());
    sims.resize(comp.size());
    double mx = -std::numeric_limits<double>::infinity();
    double anchor = 0.0, anchor_s = 0.0;
    for (std::size_t c = 0; c < comp.size(); ++c) {
      sims[c] = dot(qv.row(g), dv.row(comp[c]));
      logit[c] = sims[c] * inv_tau;
      mx = std::max(mx, logit[c]);
      if (comp[c] == i) anchor = logit[c], anchor_s = sims[c];
    }
    double sum = 0.0;
    for (double& x : logit) sum += (x = std::exp(x - mx));
    r.loss += mx + std::log(sum) - anchor;
    auto gq = r.grads.query.row(g);
    double expect_s = 0.0;
    for (std::size_t c = 0; c < comp.size(); ++c) {
      const double p = logit[c] / sum;
      const double w = (p - (comp[c] == i ? 1.0 : 0.0)) * inv_tau;
      axpy(w, dv.row(comp[c]), gq);
      axpy(w, qv.row(g), r.grads.doc.row(comp[c]));
      expect_s += p * sims[c];
    }
    r.grad_tau += (anchor_s - expect_s) * inv_tau * inv_tau;
  }
  return r;
}

}  // namespace crops
