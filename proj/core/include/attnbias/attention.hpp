#pragma once

#include <span>

#include "attnbias/matrix.hpp"

namespace attnbias {

// Pre-softmax scores and softmax-normalized weights. Plain vectors; the
// producing functions enforce the invariants (finite logits, weights on the
// simplex).
using LogitVector = Vector;
using WeightVector = Vector;

struct AttentionInstance {
  Matrix queries;  // T_q x d
  Matrix keys;     // T x d
  Matrix values;   // T x d_v
  int dim = 1;     // d in the 1/sqrt(d) scaling
};

enum class Masking { none, causal };

/// Shift-stable softmax (max subtracted before exponentiation).
/// Throws std::domain_error on empty input or a non-finite entry.
WeightVector softmax(std::span<const double> logits);

/// <q, k_j> / sqrt(dim) for every key row.
LogitVector scaled_dot_logits(std::span<const double> query, const Matrix& keys, int dim);

/// softmax(Q K^T / sqrt(d)) V, row-wise. With causal masking, query row l
/// only sees key rows 0..l (requires T_q <= T).
Matrix attention(const AttentionInstance& instance, Masking mask = Masking::none);

}  // namespace attnbias
