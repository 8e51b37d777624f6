#include "attnbias/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace attnbias {

WeightVector softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::domain_error("softmax: empty logit vector");
  double shift = logits[0];
  for (double z : logits) {
    if (!std::isfinite(z)) throw std::domain_error("softmax: non-finite logit");
    shift = std::max(shift, z);
  }
  WeightVector w(logits.size());
  double total = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    w[j] = std::exp(logits[j] - shift);
    total += w[j];
  }
  for (double& x : w) x /= total;
  return w;
}

LogitVector scaled_dot_logits(std::span<const double> query, const Matrix& keys, int dim) {
  if (dim < 1) throw std::domain_error("scaled_dot_logits: dim must be >= 1");
  if (query.size() != keys.cols()) {
    throw std::domain_error("scaled_dot_logits: query length differs from key length");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  LogitVector z(keys.rows());
  for (std::size_t j = 0; j < keys.rows(); ++j) z[j] = dot(query, keys.row(j)) * scale;
  return z;
}

Matrix attention(const AttentionInstance& in, Masking mask) {
  if (in.dim < 1) throw std::domain_error("attention: dim must be >= 1");
  if (in.queries.cols() != in.keys.cols()) {
    throw std::domain_error("attention: query and key widths differ");
  }
  if (in.keys.rows() != in.values.rows()) {
    throw std::domain_error("attention: key and value counts differ");
  }
  if (in.keys.rows() == 0) throw std::domain_error("attention: no keys");
  if (mask == Masking::causal && in.queries.rows() > in.keys.rows()) {
    throw std::domain_error("attention: causal mask needs T_q <= T");
  }

  Matrix out(in.queries.rows(), in.values.cols());
  for (std::size_t l = 0; l < in.queries.rows(); ++l) {
    LogitVector z = scaled_dot_logits(in.queries.row(l), in.keys, in.dim);
    // Masked entries are -inf before the softmax, i.e. simply dropped.
    if (mask == Masking::causal) z.resize(l + 1);
    const WeightVector a = softmax(z);
    auto dst = out.row(l);
    for (std::size_t j = 0; j < a.size(); ++j) {
      const auto v = in.values.row(j);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += a[j] * v[c];
    }
  }
  return out;
}

}  // namespace attnbias
