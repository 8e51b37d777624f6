#include "attnbias/generative_model.hpp"

#include <cmath>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

namespace attnbias {

namespace {

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw std::invalid_argument(std::string("ModelWeights: bad shape for ") + name);
  }
}

void require_finite(std::span<const double> xs, const char* name) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw std::invalid_argument(std::string("ModelWeights: non-finite ") + name);
  }
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, CounterRng& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (auto& x : m.row(r)) x = normal(rng);
  }
  return m;
}

Matrix project(const Matrix& x, const Matrix& w) { return matmul(x, w); }

}  // namespace

// ---------------------------------------------------------------- Catalog

Catalog Catalog::create(TokenVocab vocab, int code_length, std::vector<ItemCode> codes) {
  if (vocab.size < 1) throw CatalogError("catalog: vocabulary size must be >= 1");
  if (code_length < 1) throw CatalogError("catalog: code length must be >= 1");

  Catalog c;
  c.vocab_ = vocab.size;
  c.code_length_ = code_length;
  c.trie_.push_back(Node{std::vector<int>(vocab.size, -1), -1});

  for (std::size_t item = 0; item < codes.size(); ++item) {
    const ItemCode& code = codes[item];
    if (static_cast<int>(code.size()) != code_length) {
      throw CatalogError("catalog: item " + std::to_string(item) + " has code length " +
                         std::to_string(code.size()) + ", expected " + std::to_string(code_length));
    }
    int node = 0;
    for (int token : code) {
      if (token < 0 || token >= vocab.size) {
        throw CatalogError("catalog: item " + std::to_string(item) + " uses token " +
                           std::to_string(token) + " outside vocabulary of size " +
                           std::to_string(vocab.size));
      }
      int next = c.trie_[node].children[token];
      if (next < 0) {
        next = static_cast<int>(c.trie_.size());
        c.trie_[node].children[token] = next;
        c.trie_.push_back(Node{std::vector<int>(vocab.size, -1), -1});
      }
      node = next;
    }
    if (c.trie_[node].item >= 0) {
      throw CatalogError("catalog: items " + std::to_string(c.trie_[node].item) + " and " +
                         std::to_string(item) + " share a code; the item-code map must be a bijection");
    }
    c.trie_[node].item = static_cast<int>(item);
  }
  c.codes_ = std::move(codes);
  return c;
}

Catalog Catalog::item_ids(int items) {
  std::vector<ItemCode> codes;
  for (int i = 0; i < items; ++i) codes.push_back({i});
  return create(TokenVocab{items}, 1, std::move(codes));
}

Catalog Catalog::full(TokenVocab vocab, int code_length) {
  std::vector<ItemCode> codes;
  ItemCode code(code_length, 0);
  for (;;) {
    codes.push_back(code);
    int pos = code_length - 1;
    while (pos >= 0 && ++code[pos] == vocab.size) code[pos--] = 0;
    if (pos < 0) break;
  }
  return create(vocab, code_length, std::move(codes));
}

Catalog Catalog::random(TokenVocab vocab, int code_length, int items, CounterRng& rng) {
  const double space = std::pow(static_cast<double>(vocab.size), code_length);
  if (items < 0 || items > space) throw CatalogError("catalog: more items than distinct codes");
  std::uniform_int_distribution<int> token(0, vocab.size - 1);
  std::set<ItemCode> seen;
  std::vector<ItemCode> codes;
  while (static_cast<int>(codes.size()) < items) {
    ItemCode code(code_length);
    for (int& t : code) t = token(rng);
    if (seen.insert(code).second) codes.push_back(std::move(code));
  }
  return create(vocab, code_length, std::move(codes));
}

const ItemCode& Catalog::encode(int item) const {
  if (item < 0 || item >= size()) throw std::out_of_range("catalog: item index " + std::to_string(item));
  return codes_[item];
}

int Catalog::find_node(std::span<const int> prefix) const {
  int node = 0;
  for (int token : prefix) {
    if (token < 0 || token >= vocab_) return -1;
    node = trie_[node].children[token];
    if (node < 0) return -1;
  }
  return node;
}

int Catalog::decode(std::span<const int> code) const {
  if (static_cast<int>(code.size()) != code_length_) throw std::out_of_range("catalog: code has wrong length");
  const int node = find_node(code);
  if (node < 0 || trie_[node].item < 0) throw std::out_of_range("catalog: unknown item code");
  return trie_[node].item;
}

std::vector<int> Catalog::continuations(std::span<const int> prefix) const {
  std::vector<int> out;
  if (static_cast<int>(prefix.size()) >= code_length_) return out;
  const int node = find_node(prefix);
  if (node < 0) return out;
  for (int t = 0; t < vocab_; ++t) {
    if (trie_[node].children[t] >= 0) out.push_back(t);
  }
  return out;
}

std::string Catalog::to_json() const {
  nlohmann::json j;
  j["L"] = code_length_;
  j["vocab"] = vocab_;
  j["codes"] = codes_;
  return j.dump();
}

Catalog Catalog::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw CatalogError(std::string("catalog: invalid JSON: ") + e.what());
  }
  for (const char* key : {"L", "vocab", "codes"}) {
    if (!j.contains(key)) throw CatalogError(std::string("catalog: missing key \"") + key + "\"");
  }
  if (!j["L"].is_number_integer() || !j["vocab"].is_number_integer() || !j["codes"].is_array()) {
    throw CatalogError("catalog: \"L\" and \"vocab\" must be integers and \"codes\" an array");
  }
  std::vector<ItemCode> codes;
  try {
    codes = j["codes"].get<std::vector<ItemCode>>();
  } catch (const nlohmann::json::exception&) {
    throw CatalogError("catalog: \"codes\" must be an array of integer arrays");
  }
  return create(TokenVocab{j["vocab"].get<int>()}, j["L"].get<int>(), std::move(codes));
}

// ---------------------------------------------------------------- Weights

ModelWeights ModelWeights::gaussian(int vocab, int dim, CounterRng& rng, double stddev) {
  if (vocab < 1 || dim < 1) throw std::invalid_argument("ModelWeights: vocab and dim must be >= 1");
  const auto d = static_cast<std::size_t>(dim);
  const auto c = static_cast<std::size_t>(vocab);
  ModelWeights w;
  w.vocab = vocab;
  w.dim = dim;
  w.embedding = gaussian_matrix(c, d, rng, stddev);
  Matrix s = gaussian_matrix(1, d, rng, stddev);
  w.start.assign(s.row(0).begin(), s.row(0).end());
  w.enc_q = gaussian_matrix(d, d, rng, stddev);
  w.enc_k = gaussian_matrix(d, d, rng, stddev);
  w.enc_v = gaussian_matrix(d, d, rng, stddev);
  w.dec_q = gaussian_matrix(d, d, rng, stddev);
  w.dec_k = gaussian_matrix(d, d, rng, stddev);
  w.dec_v = gaussian_matrix(d, d, rng, stddev);
  w.cross_q = gaussian_matrix(d, d, rng, stddev);
  w.cross_k = gaussian_matrix(d, d, rng, stddev);
  w.cross_v = gaussian_matrix(d, d, rng, stddev);
  w.out = gaussian_matrix(c, d, rng, stddev);
  Matrix b = gaussian_matrix(1, c, rng, stddev);
  w.out_bias.assign(b.row(0).begin(), b.row(0).end());
  return w;
}

void ModelWeights::validate() const {
  if (vocab < 1 || dim < 1) throw std::invalid_argument("ModelWeights: vocab and dim must be >= 1");
  const auto d = static_cast<std::size_t>(dim);
  const auto c = static_cast<std::size_t>(vocab);
  require_shape(embedding, c, d, "embedding");
  for (const auto* m : {&enc_q, &enc_k, &enc_v, &dec_q, &dec_k, &dec_v, &cross_q, &cross_k, &cross_v}) {
    require_shape(*m, d, d, "projection");
    require_finite(m->data(), "projection");
  }
  require_shape(out, c, d, "out");
  if (start.size() != d) throw std::invalid_argument("ModelWeights: start vector length");
  if (out_bias.size() != c) throw std::invalid_argument("ModelWeights: bias length");
  require_finite(embedding.data(), "embedding");
  require_finite(out.data(), "out");
  require_finite(start, "start");
  require_finite(out_bias, "bias");
}

// ---------------------------------------------------------------- Forward

Matrix encode_history(const ModelWeights& w, const Catalog& catalog, const History& history) {
  if (history.items.empty()) throw std::domain_error("encode_history: empty history");
  if (catalog.vocab() != w.vocab) throw std::domain_error("encode_history: catalog/weights vocab mismatch");
  const auto L = static_cast<std::size_t>(catalog.code_length());
  Matrix h0(history.items.size() * L, static_cast<std::size_t>(w.dim));
  std::size_t row = 0;
  for (int item : history.items) {
    for (int token : catalog.encode(item)) {
      const auto e = w.embedding.row(static_cast<std::size_t>(token));
      std::copy(e.begin(), e.end(), h0.row(row++).begin());
    }
  }
  return attention({project(h0, w.enc_q), project(h0, w.enc_k), project(h0, w.enc_v), w.dim});
}

Matrix decoder_logits(const ModelWeights& w, const Matrix& memory, std::span<const int> prefix) {
  Matrix y0(prefix.size() + 1, static_cast<std::size_t>(w.dim));
  std::copy(w.start.begin(), w.start.end(), y0.row(0).begin());
  for (std::size_t m = 0; m < prefix.size(); ++m) {
    if (prefix[m] < 0 || prefix[m] >= w.vocab) throw std::domain_error("decoder_logits: token outside vocabulary");
    const auto e = w.embedding.row(static_cast<std::size_t>(prefix[m]));
    std::copy(e.begin(), e.end(), y0.row(m + 1).begin());
  }
  const Matrix y_self =
      attention({project(y0, w.dec_q), project(y0, w.dec_k), project(y0, w.dec_v), w.dim}, Masking::causal);
  const Matrix y_cross =
      attention({project(y_self, w.cross_q), project(memory, w.cross_k), project(memory, w.cross_v), w.dim});

  Matrix u(y_cross.rows(), static_cast<std::size_t>(w.vocab));
  for (std::size_t m = 0; m < y_cross.rows(); ++m) {
    const Vector scores = matvec(w.out, y_cross.row(m));
    for (std::size_t k = 0; k < scores.size(); ++k) u(m, k) = scores[k] + w.out_bias[k];
  }
  return u;
}

NextTokenDistribution next_token(const ModelWeights& w, const Matrix& memory, std::span<const int> prefix) {
  const Matrix u = decoder_logits(w, memory, prefix);
  return {softmax(u.row(u.rows() - 1))};
}

NextTokenDistribution forward_step(const ModelWeights& w, const Catalog& catalog, const History& history,
                                   std::span<const int> prefix) {
  if (static_cast<int>(prefix.size()) >= catalog.code_length()) {
    throw std::domain_error("forward_step: prefix length must be < L");
  }
  return next_token(w, encode_history(w, catalog, history), prefix);
}

double code_probability(const ModelWeights& w, const Catalog& catalog, const History& history,
                        std::span<const int> code) {
  if (static_cast<int>(code.size()) != catalog.code_length()) {
    throw std::domain_error("code_probability: code length differs from L");
  }
  const Matrix memory = encode_history(w, catalog, history);
  double p = 1.0;
  for (std::size_t l = 0; l < code.size(); ++l) {
    const auto dist = next_token(w, memory, code.first(l));
    p *= dist.probs.at(static_cast<std::size_t>(code[l]));
  }
  return p;
}

double item_probability(const ModelWeights& w, const Catalog& catalog, const History& history, int item) {
  return code_probability(w, catalog, history, catalog.encode(item));
}

namespace {

void decode_subtree(const ModelWeights& w, const Catalog& catalog, const Matrix& memory,
                    std::vector<int>& prefix, double mass, Vector& out) {
  if (static_cast<int>(prefix.size()) == catalog.code_length()) {
    out[static_cast<std::size_t>(catalog.decode(prefix))] = mass;
    return;
  }
  const std::vector<int> valid = catalog.continuations(prefix);
  const WeightVector probs = next_token(w, memory, prefix).probs;
  double kept = 0.0;
  for (int t : valid) kept += probs[static_cast<std::size_t>(t)];
  for (int t : valid) {
    prefix.push_back(t);
    decode_subtree(w, catalog, memory, prefix, mass * probs[static_cast<std::size_t>(t)] / kept, out);
    prefix.pop_back();
  }
}

}  // namespace

Vector constrained_decode(const ModelWeights& w, const Catalog& catalog, const History& history) {
  if (catalog.size() == 0) throw std::domain_error("constrained_decode: empty catalog");
  const Matrix memory = encode_history(w, catalog, history);
  Vector out(static_cast<std::size_t>(catalog.size()), 0.0);
  std::vector<int> prefix;
  decode_subtree(w, catalog, memory, prefix, 1.0, out);
  return out;
}

}  // namespace attnbias
