#pragma once

// Word embeddings, BiLSTM sequence encoding and self-attention pooling. The
// same machinery encodes questions, history snippets and answer candidates;
// each use site owns its own encoder and pool parameters.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "redan/autodiff.hpp"
#include "redan/vocab.hpp"

namespace redan {

inline constexpr double kInitRange = 0.08;
inline constexpr double kForgetBias = 1.0;
inline constexpr double kMaskedLogit = -1e9;

inline Tensor init_uniform(Shape shape, std::mt19937_64& rng,
                           double range = kInitRange) {
  Tensor t(std::move(shape), 0.0, true);
  t.fill_uniform(rng, -range, range);
  return t;
}

inline Tensor init_zeros(Shape shape) { return Tensor(std::move(shape), 0.0, true); }

// Glorot-uniform for a matrix made of `blocks` stacked row blocks, each
// treated as its own fan_out x fan_in map.
inline Tensor init_glorot(Shape shape, std::mt19937_64& rng, std::size_t blocks = 1) {
  const double fan_out = static_cast<double>(shape.at(0) / blocks);
  const double fan_in = static_cast<double>(shape.at(1));
  return init_uniform(std::move(shape), rng, std::sqrt(6.0 / (fan_in + fan_out)));
}

// ------------------------------------------------------------------ embedding

class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  EmbeddingTable(std::size_t vocab_size, std::size_t learned_dim,
                 std::mt19937_64& rng)
      : learned_(init_uniform({vocab_size, learned_dim}, rng, 1.0)) {
    for (std::size_t j = 0; j < learned_dim; ++j) learned_.at(Vocabulary::kPad, j) = 0.0;
  }

  // Attaches a frozen pretrained table (vocab_size x d_pre), placed before
  // the learned part in every embedded column.
  void set_pretrained(Tensor table) {
    if (table.rows() != learned_.rows())
      throw ShapeError("set_pretrained", table.shape(), learned_.shape());
    table.set_requires_grad(false);
    pretrained_ = std::move(table);
  }

  bool has_pretrained() const { return pretrained_.has_value(); }
  std::size_t vocab_size() const { return learned_.rows(); }
  std::size_t learned_dim() const { return learned_.cols(); }
  std::size_t width() const {
    return learned_.cols() + (pretrained_ ? pretrained_->cols() : 0);
  }

  Tensor& learned() { return learned_; }
  const Tensor& learned() const { return learned_; }
  const std::optional<Tensor>& pretrained() const { return pretrained_; }

  // d_emb x L; <PAD> columns are zero.
  Var embed(Graph& g, std::span<const std::size_t> ids) {
    if (ids.empty()) throw PreconditionError("embed: empty sequence");
    Var learned = embedding(g.param(learned_), ids, Vocabulary::kPad);
    if (!pretrained_) return learned;
    Var pre = embedding(g.param(*pretrained_), ids, Vocabulary::kPad);
    return concat({pre, learned}, 0);
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "learned", self.learned_);
    if (self.pretrained_) f(prefix + "pretrained", *self.pretrained_);
  }

 private:
  Tensor learned_;
  std::optional<Tensor> pretrained_;
};

// Reads "word v1 ... v_dim" lines. Words outside the vocabulary are skipped;
// vocabulary words absent from the file keep a zero row.
inline Tensor load_glove(const std::string& path, const Vocabulary& vocab,
                         std::size_t dim = 300) {
  std::ifstream in(path);
  if (!in) throw DataError("glove: cannot open " + path);
  Tensor table({vocab.size(), dim}, 0.0, false);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    if (!vocab.contains(word)) continue;
    const std::size_t row = vocab.id(word);
    std::vector<double> vals;
    vals.reserve(dim);
    double x;
    while (ls >> x) vals.push_back(x);
    if (vals.size() != dim || !ls.eof())
      throw DataError("glove: line " + std::to_string(line_no) + " has " +
                      std::to_string(vals.size()) + " values, expected " +
                      std::to_string(dim));
    for (std::size_t j = 0; j < dim; ++j) table.at(row, j) = vals[j];
  }
  return table;
}

// ----------------------------------------------------------------------- LSTM

struct LstmState {
  Var h;  // hidden x 1; invalid handle means the zero state
  Var c;
};

// Standard LSTM cell with gate order (input, forget, candidate, output).
class LstmCell {
 public:
  LstmCell() = default;

  LstmCell(std::size_t input_dim, std::size_t hidden, std::mt19937_64& rng)
      : w_x_(init_uniform({4 * hidden, input_dim}, rng)),
        w_h_(init_uniform({4 * hidden, hidden}, rng)),
        b_(init_uniform({4 * hidden, 1}, rng)) {
    for (std::size_t i = hidden; i < 2 * hidden; ++i) b_[i] = kForgetBias;
  }

  std::size_t hidden() const { return w_h_.cols(); }
  std::size_t input_dim() const { return w_x_.cols(); }

  Tensor& w_x() { return w_x_; }
  Tensor& w_h() { return w_h_; }
  Tensor& bias() { return b_; }

  // W_x X + b for a whole (input_dim x L) sequence, one column per step.
  Var project_inputs(Graph& g, Var xs) {
    if (xs.rows() != input_dim())
      throw ShapeError("lstm input", xs.shape(), w_x_.shape());
    return add(matmul(g.param(w_x_), xs), g.param(b_));
  }

  LstmState step(Graph& g, Var preact, const LstmState& prev) {
    const std::size_t h = hidden();
    Var pre = prev.h.valid() ? add(preact, matmul(g.param(w_h_), prev.h)) : preact;
    Var in_forget = sigmoid(slice_rows(pre, 0, 2 * h));
    Var i = slice_rows(in_forget, 0, h);
    Var f = slice_rows(in_forget, h, 2 * h);
    Var cand = tanh(slice_rows(pre, 2 * h, 3 * h));
    Var o = sigmoid(slice_rows(pre, 3 * h, 4 * h));
    Var c = prev.c.valid() ? add(mul(f, prev.c), mul(i, cand)) : mul(i, cand);
    return {mul(o, tanh(c)), c};
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "w_x", self.w_x_);
    f(prefix + "w_h", self.w_h_);
    f(prefix + "b", self.b_);
  }

 private:
  Tensor w_x_, w_h_, b_;
};

// --------------------------------------------------------------------- BiLSTM

class BiLstmEncoder {
 public:
  BiLstmEncoder() = default;

  // `output_width` is the concatenated width n_h; each direction has n_h/2.
  BiLstmEncoder(std::size_t input_dim, std::size_t output_width,
                std::mt19937_64& rng) {
    if (output_width % 2 != 0)
      throw PreconditionError("BiLstmEncoder: output width must be even");
    fwd_ = LstmCell(input_dim, output_width / 2, rng);
    bwd_ = LstmCell(input_dim, output_width / 2, rng);
  }

  std::size_t output_width() const { return 2 * fwd_.hidden(); }
  LstmCell& forward_cell() { return fwd_; }
  LstmCell& backward_cell() { return bwd_; }

  // n_h x L; column t = [forward h_t ; backward h_t] for t < valid_length,
  // zero beyond. The backward direction starts at valid_length - 1.
  Var encode(Graph& g, Var embedded, std::size_t valid_length) {
    const std::size_t len = embedded.cols();
    if (valid_length == 0 || valid_length > len)
      throw PreconditionError("bilstm_encode: valid length " +
                              std::to_string(valid_length) + " not in [1, " +
                              std::to_string(len) + "]");
    Var xs = valid_length == len ? embedded : slice_cols(embedded, 0, valid_length);
    std::vector<Var> fwd_h(valid_length), bwd_h(valid_length);

    Var pf = fwd_.project_inputs(g, xs);
    LstmState s;
    for (std::size_t t = 0; t < valid_length; ++t) {
      s = fwd_.step(g, valid_length == 1 ? pf : slice_cols(pf, t, t + 1), s);
      fwd_h[t] = s.h;
    }
    Var pb = bwd_.project_inputs(g, xs);
    s = LstmState{};
    for (std::size_t t = valid_length; t-- > 0;) {
      s = bwd_.step(g, valid_length == 1 ? pb : slice_cols(pb, t, t + 1), s);
      bwd_h[t] = s.h;
    }
    Var out = concat({concat(fwd_h, 1), concat(bwd_h, 1)}, 0);
    if (valid_length < len)
      out = concat({out, g.zeros(output_width(), len - valid_length)}, 1);
    return out;
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    LstmCell::visit(self.fwd_, prefix + "fwd.", f);
    LstmCell::visit(self.bwd_, prefix + "bwd.", f);
  }

 private:
  LstmCell fwd_, bwd_;
};

// ------------------------------------------------------------ self-attention

struct Pooled {
  Var vector;   // 1 x n_h
  Var weights;  // 1 x L
};

// weights = softmax(p^T tanh(W M + b)) over the first valid_length columns,
// vector = weights M^T.
class SelfAttentionPool {
 public:
  SelfAttentionPool() = default;

  SelfAttentionPool(std::size_t width, std::mt19937_64& rng)
      : w_(init_glorot({width, width}, rng)),
        b_(init_zeros({width, 1})),
        p_(init_glorot({width, 1}, rng)) {}

  Tensor& projection() { return w_; }
  Tensor& bias() { return b_; }
  Tensor& probe() { return p_; }

  Pooled attend(Graph& g, Var matrix, std::size_t valid_length) {
    const std::size_t len = matrix.cols();
    if (valid_length == 0 || valid_length > len)
      throw PreconditionError("self_attend: valid length " +
                              std::to_string(valid_length) + " not in [1, " +
                              std::to_string(len) + "]");
    if (matrix.rows() != w_.cols())
      throw ShapeError("self_attend", matrix.shape(), w_.shape());
    Var hidden = tanh(add(matmul(g.param(w_), matrix), g.param(b_)));
    Var logits = matmul(transpose(g.param(p_)), hidden);
    if (valid_length < len) {
      std::vector<double> mask(len, 0.0);
      for (std::size_t j = valid_length; j < len; ++j) mask[j] = kMaskedLogit;
      logits = add(logits, g.constant(1, len, std::move(mask)));
    }
    Var weights = row_softmax(logits);
    return {matmul(weights, transpose(matrix)), weights};
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "w", self.w_);
    f(prefix + "b", self.b_);
    f(prefix + "p", self.p_);
  }

 private:
  Tensor w_, b_, p_;
};

// One text channel: its own BiLSTM and pool over the shared embedding table.
struct TextEncoder {
  BiLstmEncoder lstm;
  SelfAttentionPool pool;

  TextEncoder() = default;
  TextEncoder(std::size_t input_dim, std::size_t width, std::mt19937_64& rng)
      : lstm(input_dim, width, rng), pool(width, rng) {}

  Pooled encode(Graph& g, EmbeddingTable& table, std::span<const std::size_t> ids) {
    Var emb = table.embed(g, ids);
    Var states = lstm.encode(g, emb, ids.size());
    return pool.attend(g, states, ids.size());
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    BiLstmEncoder::visit(self.lstm, prefix + "lstm.", f);
    SelfAttentionPool::visit(self.pool, prefix + "pool.", f);
  }
};

}  // namespace redan
