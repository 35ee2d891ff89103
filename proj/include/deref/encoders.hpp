#pragma once

// Class-token attention pooling over a bag of token features.
//
//   P      = X Wp + bp                      (I x C1)
//   q      = c Wq                           class-token query
//   a_i    = <P_i Wk, q> / sqrt(C1)         attention logit per token
//   w      = softmax(a)
//   out    = (sum_i w_i P_i) Wv
//
// <P_i Wk, q> is evaluated as <P_i, Wk q> and the value map is applied after
// pooling; both are exact rewrites that keep the cost at O(I C1 + C1^2).

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "deref/errors.hpp"
#include "deref/tensor.hpp"

namespace deref {

struct EncoderParams {
  Linear token_proj;  // C0 -> C1
  Tensor class_token;  // 1 x C1
  Tensor attn_query;   // C1 x C1
  Tensor attn_key;     // C1 x C1
  Tensor attn_value;   // C1 x C1

  EncoderParams() = default;
  EncoderParams(std::size_t c0, std::size_t c1)
      : token_proj(c0, c1), class_token(1, c1), attn_query(c1, c1), attn_key(c1, c1), attn_value(c1, c1) {}

  [[nodiscard]] std::size_t input_dim() const { return token_proj.in_features(); }
  [[nodiscard]] std::size_t output_dim() const { return token_proj.out_features(); }

  template <class Rng>
  void init(Rng& rng) {
    token_proj.init_uniform(rng);
    init_uniform(class_token, output_dim(), rng);
    init_uniform(attn_query, output_dim(), rng);
    init_uniform(attn_key, output_dim(), rng);
    init_uniform(attn_value, output_dim(), rng);
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    Linear::visit(self.token_proj, prefix + ".token_proj", f);
    f(prefix + ".class_token", self.class_token);
    f(prefix + ".attn_query", self.attn_query);
    f(prefix + ".attn_key", self.attn_key);
    f(prefix + ".attn_value", self.attn_value);
  }
};

/// Intermediates kept for the backward pass.
struct EncoderCache {
  Tensor projected;  // I x C1
  Vec query;
  Vec key_query;     // Wk q
  Vec weights;       // softmax over tokens
  Vec pooled;        // sum_i w_i P_i
};

inline Vec encode_modality(const Tensor& tokens, const EncoderParams& p, EncoderCache* cache = nullptr) {
  if (tokens.rows == 0) throw DataError("encode_modality: token matrix has no rows");
  if (tokens.cols != p.input_dim()) {
    throw DimensionError("encode_modality: token dim " + std::to_string(tokens.cols) + " != encoder input dim " +
                         std::to_string(p.input_dim()));
  }
  const std::size_t c1 = p.output_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c1));

  Tensor projected(tokens.rows, c1);
  for (std::size_t i = 0; i < tokens.rows; ++i) {
    auto row = projected.row(i);
    std::copy(p.token_proj.bias.data.begin(), p.token_proj.bias.data.end(), row.begin());
    gemv_acc(tokens.row(i), p.token_proj.weight, row);
  }

  Vec query(c1, 0.0);
  gemv_acc(p.class_token.flat(), p.attn_query, query);
  Vec key_query(c1, 0.0);
  gemv_t_acc(p.attn_key, query, key_query);

  Vec weights(tokens.rows);
  for (std::size_t i = 0; i < tokens.rows; ++i) {
    double dot = 0.0;
    auto row = projected.row(i);
    for (std::size_t c = 0; c < c1; ++c) dot += row[c] * key_query[c];
    weights[i] = dot * scale;
  }
  softmax_inplace<double>(weights);

  Vec pooled(c1, 0.0);
  for (std::size_t i = 0; i < tokens.rows; ++i) {
    auto row = projected.row(i);
    for (std::size_t c = 0; c < c1; ++c) pooled[c] += weights[i] * row[c];
  }
  Vec out(c1, 0.0);
  gemv_acc(pooled, p.attn_value, out);

  if (cache) {
    cache->projected = std::move(projected);
    cache->query = std::move(query);
    cache->key_query = std::move(key_query);
    cache->weights = std::move(weights);
    cache->pooled = std::move(pooled);
  }
  return out;
}

/// Accumulates dL/dparams into grad given dL/dout.
inline void encode_modality_backward(const Tensor& tokens, const EncoderParams& p, const EncoderCache& cache,
                                     std::span<const double> d_out, EncoderParams& grad) {
  const std::size_t c1 = p.output_dim();
  const std::size_t n = tokens.rows;
  const double scale = 1.0 / std::sqrt(static_cast<double>(c1));

  outer_acc(cache.pooled, d_out, grad.attn_value);
  Vec d_pooled(c1, 0.0);
  gemv_t_acc(p.attn_value, d_out, d_pooled);

  Tensor d_projected(n, c1);
  Vec d_weights(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = cache.projected.row(i);
    auto drow = d_projected.row(i);
    double dot = 0.0;
    for (std::size_t c = 0; c < c1; ++c) {
      drow[c] += cache.weights[i] * d_pooled[c];
      dot += row[c] * d_pooled[c];
    }
    d_weights[i] = dot;
  }
  const Vec d_logits = softmax_backward(cache.weights, d_weights);

  Vec d_key_query(c1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = d_logits[i] * scale;
    if (g == 0.0) continue;
    auto row = cache.projected.row(i);
    auto drow = d_projected.row(i);
    for (std::size_t c = 0; c < c1; ++c) {
      drow[c] += g * cache.key_query[c];
      d_key_query[c] += g * row[c];
    }
  }

  // key_query = Wk q  =>  dWk += d_key_query (outer) q,  dq += Wk^T d_key_query.
  outer_acc(d_key_query, cache.query, grad.attn_key);
  Vec d_query(c1, 0.0);
  gemv_acc(d_key_query, p.attn_key, d_query);

  outer_acc(p.class_token.flat(), d_query, grad.attn_query);
  gemv_t_acc(p.attn_query, d_query, grad.class_token.flat());

  for (std::size_t i = 0; i < n; ++i) {
    p.token_proj.backward(tokens.row(i), d_projected.row(i), grad.token_proj, {});
  }
}

}  // namespace deref
