#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "attnbias/attention.hpp"
#include "attnbias/matrix.hpp"
#include "attnbias/rng.hpp"

namespace attnbias {

using ItemCode = std::vector<int>;

struct TokenVocab {
  int size = 1;
};

// Raised when a catalog would not be a bijection between items and codes
// (or is otherwise malformed).
class CatalogError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bijective item <-> code map with a prefix tree over the codes.
class Catalog {
 public:
  static Catalog create(TokenVocab vocab, int code_length, std::vector<ItemCode> codes);

  // Identity coding for L = 1: item i is token i.
  static Catalog item_ids(int items);

  // Every code in {0..vocab-1}^L, lexicographic order.
  static Catalog full(TokenVocab vocab, int code_length);

  // `items` distinct codes chosen uniformly from {0..vocab-1}^L.
  static Catalog random(TokenVocab vocab, int code_length, int items, CounterRng& rng);

  int vocab() const { return vocab_; }
  int code_length() const { return code_length_; }
  int size() const { return static_cast<int>(codes_.size()); }

  const ItemCode& encode(int item) const;

  /// Throws std::out_of_range for a code that belongs to no item.
  int decode(std::span<const int> code) const;

  /// Tokens that extend `prefix` toward at least one catalog code, ascending.
  std::vector<int> continuations(std::span<const int> prefix) const;

  // {"L": int, "vocab": int, "codes": [[int, ...], ...]}
  std::string to_json() const;
  static Catalog from_json(std::string_view text);

 private:
  struct Node {
    std::vector<int> children;  // token -> node index, -1 if absent
    int item = -1;
  };

  int find_node(std::span<const int> prefix) const;

  int vocab_ = 1;
  int code_length_ = 1;
  std::vector<ItemCode> codes_;
  std::vector<Node> trie_;
};

struct History {
  std::vector<int> items;
};

// One encoder layer, one decoder layer, single head, identity FFN.
struct ModelWeights {
  int vocab = 1;
  int dim = 1;
  Matrix embedding;  // vocab x dim
  Vector start;      // decoder input at code position 1
  Matrix enc_q, enc_k, enc_v;
  Matrix dec_q, dec_k, dec_v;
  Matrix cross_q, cross_k, cross_v;
  Matrix out;       // vocab x dim
  Vector out_bias;  // vocab

  static ModelWeights gaussian(int vocab, int dim, CounterRng& rng, double stddev = 0.2);

  void validate() const;
};

// Distribution over the token vocabulary.
struct NextTokenDistribution {
  WeightVector probs;
};

/// Encoder memory H_enc (T x dim) for a history, T = t * L.
Matrix encode_history(const ModelWeights& weights, const Catalog& catalog, const History& history);

/// Output-head logits for every decoder row: row m scores token m+1 of the
/// code given prefix[0..m). Shape (prefix.size() + 1) x vocab.
Matrix decoder_logits(const ModelWeights& weights, const Matrix& memory, std::span<const int> prefix);

NextTokenDistribution next_token(const ModelWeights& weights, const Matrix& memory,
                                 std::span<const int> prefix);

/// p(c_l | H_t, c_<l). Throws std::domain_error if prefix.size() >= L.
NextTokenDistribution forward_step(const ModelWeights& weights, const Catalog& catalog,
                                   const History& history, std::span<const int> prefix);

/// Unconstrained product of next-token probabilities along `code`.
double code_probability(const ModelWeights& weights, const Catalog& catalog, const History& history,
                        std::span<const int> code);

double item_probability(const ModelWeights& weights, const Catalog& catalog, const History& history,
                        int item);

/// Catalog-constrained item distribution: at every step, tokens that leave
/// the prefix tree get zero mass and the rest is renormalized.
Vector constrained_decode(const ModelWeights& weights, const Catalog& catalog, const History& history);

}  // namespace attnbias
