#pragma once

// Compact dual encoder: hashed word tokens, a shared embedding table, mean
// pooling, one projection per tower and L2 normalization.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string_view>
#include <vector>

#include "crops/discriminator.hpp"
#include "crops/error.hpp"
#include "crops/io.hpp"
#include "crops/linalg.hpp"
#include "crops/random.hpp"
#include "crops/text.hpp"

namespace crops {

using TokenId = std::uint32_t;

struct Tokenizer {
  std::size_t vocab_size = 32768;
  std::size_t max_len = 128;

  // Lowercased word tokens hashed with FNV-1a 64 modulo vocab_size,
  // truncated to max_len.
  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> ids;
    for (auto& w : split_words(text)) {
      if (ids.size() == max_len) break;
      ids.push_back(static_cast<TokenId>(fnv1a64(w) % vocab_size));
    }
    return ids;
  }
};

enum class Side { Query, Doc };

struct EncoderDims {
  std::size_t vocab_size = 32768;
  std::size_t embed_dim = 64;
  std::size_t out_dim = 64;
};

inline constexpr double kInitialTemperature = 0.05;

struct EncoderParams {
  Matrix embed;   // vocab_size x embed_dim
  Matrix proj_q;  // embed_dim x out_dim
  Matrix proj_d;  // embed_dim x out_dim
  double log_tau = std::log(kInitialTemperature);

  std::size_t vocab_size() const { return embed.rows; }
  std::size_t embed_dim() const { return embed.cols; }
  std::size_t out_dim() const { return proj_q.cols; }
  double tau() const { return std::exp(log_tau); }

  const Matrix& proj(Side s) const { return s == Side::Query ? proj_q : proj_d; }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

// Entries uniform in [-1/sqrt(embed_dim), 1/sqrt(embed_dim)]; every tensor
// here has fan-in embed_dim. log_tau starts at ln(0.05).
inline EncoderParams init_params(std::uint64_t seed, const EncoderDims& dims) {
  if (dims.vocab_size == 0 || dims.embed_dim == 0 || dims.out_dim == 0)
    throw ValidationError("encoder dimensions must be positive");
  Rng rng(seed);
  const double a = 1.0 / std::sqrt(static_cast<double>(dims.embed_dim));
  EncoderParams p;
  p.embed = Matrix(dims.vocab_size, dims.embed_dim);
  p.proj_q = Matrix(dims.embed_dim, dims.out_dim);
  p.proj_d = Matrix(dims.embed_dim, dims.out_dim);
  for (Matrix* m : {&p.embed, &p.proj_q, &p.proj_d})
    for (double& x : m->data) x = rng.uniform(-a, a);
  p.log_tau = std::log(kInitialTemperature);
  return p;
}

// Intermediate values of one encoding, kept for the backward pass.
struct Encoding {
  std::vector<double> pooled;  // mean of embedding rows (embed_dim)
  std::vector<double> vec;     // unit output (out_dim)
  double norm = 0.0;           // ||pooled * proj|| before normalization
  bool degenerate = false;     // zero pre-norm vector, output is the fallback
};

// Mean-pool, project, L2-normalize. A zero pre-normalization vector (empty
// input included) maps to the first basis vector.
inline Encoding encode_full(const EncoderParams& p, Side side, std::span<const TokenId> ids) {
  const std::size_t de = p.embed_dim(), d = p.out_dim();
  Encoding e;
  e.pooled.assign(de, 0.0);
  if (!ids.empty()) {
    for (TokenId t : ids) axpy(1.0, p.embed.row(t), e.pooled);
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (double& x : e.pooled) x *= inv;
  }
  const Matrix& w = p.proj(side);
  std::vector<double> z(d, 0.0);
  for (std::size_t k = 0; k < de; ++k)
    if (e.pooled[k] != 0.0) axpy(e.pooled[k], w.row(k), z);
  double sq = 0.0;
  for (double x : z) sq += x * x;
  e.norm = std::sqrt(sq);
  if (e.norm == 0.0 || !std::isfinite(e.norm)) {
    e.degenerate = true;
    e.vec.assign(d, 0.0);
    e.vec[0] = 1.0;
    return e;
  }
  e.vec.resize(d);
  for (std::size_t i = 0; i < d; ++i) e.vec[i] = z[i] / e.norm;
  return e;
}

inline std::vector<double> encode(const EncoderParams& p, Side side, std::span<const TokenId> ids) {
  return encode_full(p, side, ids).vec;
}

inline double similarity(std::span<const double> u, std::span<const double> v) { return dot(u, v); }

// ---------------------------------------------------------------------------
// Binary layout: vocab_size, embed_dim, out_dim as int64, log_tau as float64,
// then embed, proj_q, proj_d row-major float64. Host byte order (little-endian
// on every supported target).

namespace detail {

inline void put_i64(std::ostream& out, std::int64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
inline void put_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
inline void put_matrix(std::ostream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}

inline std::int64_t get_i64(std::istream& in) {
  std::int64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ValidationError("truncated parameter file");
  return v;
}
inline double get_f64(std::istream& in) {
  double v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ValidationError("truncated parameter file");
  return v;
}
inline void get_matrix(std::istream& in, Matrix& m) {
  if (!in.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * sizeof(double))))
    throw ValidationError("truncated parameter file");
}

}  // namespace detail

inline void write_params(std::ostream& out, const EncoderParams& p) {
  detail::put_i64(out, static_cast<std::int64_t>(p.vocab_size()));
  detail::put_i64(out, static_cast<std::int64_t>(p.embed_dim()));
  detail::put_i64(out, static_cast<std::int64_t>(p.out_dim()));
  detail::put_f64(out, p.log_tau);
  detail::put_matrix(out, p.embed);
  detail::put_matrix(out, p.proj_q);
  detail::put_matrix(out, p.proj_d);
}

inline EncoderParams read_params(std::istream& in) {
  const auto v = detail::get_i64(in), de = detail::get_i64(in), d = detail::get_i64(in);
  constexpr std::int64_t kLimit = std::int64_t{1} << 26;
  if (v <= 0 || de <= 0 || d <= 0 || v > kLimit || de > 4096 || d > 4096)
    throw ValidationError("parameter file header has invalid dimensions");
  EncoderParams p;
  p.log_tau = detail::get_f64(in);
  p.embed = Matrix(static_cast<std::size_t>(v), static_cast<std::size_t>(de));
  p.proj_q = Matrix(static_cast<std::size_t>(de), static_cast<std::size_t>(d));
  p.proj_d = Matrix(static_cast<std::size_t>(de), static_cast<std::size_t>(d));
  detail::get_matrix(in, p.embed);
  detail::get_matrix(in, p.proj_q);
  detail::get_matrix(in, p.proj_d);
  return p;
}

// Relevance scorer backed by the trained encoder: cosine of the two tower
// outputs, negative values clipped to 0.
class EncoderScorer final : public RelevanceScorer {
 public:
  EncoderScorer(const EncoderParams& params, Tokenizer tok) : params_(&params), tok_(tok) {}

  double score(std::string_view a, std::string_view b) const override {
    auto ia = tok_.tokenize(a), ib = tok_.tokenize(b);
    if (ia.empty() || ib.empty()) return 0.0;
    double s = similarity(encode(*params_, Side::Query, ia), encode(*params_, Side::Doc, ib));
    return s < 0.0 ? 0.0 : (s > 1.0 ? 1.0 : s);
  }

 private:
  const EncoderParams* params_;
  Tokenizer tok_;
};

}  // namespace crops
