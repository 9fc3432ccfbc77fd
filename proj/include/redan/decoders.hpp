#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "redan/autodiff.hpp"
#include "redan/encoders.hpp"
#include "redan/memory.hpp"
#include "redan/vocab.hpp"

namespace redan {

struct CandidateSet {
  std::vector<std::vector<std::size_t>> options;
  std::size_t gt = 0;
};

// --------------------------------------------------------------- ranking ops

// 1-based ranks, highest score first, ties by ascending index.
inline std::vector<std::size_t> rank_candidates(std::span<const double> scores) {
  for (double s : scores)
    if (std::isnan(s)) throw NumericError("rank_candidates: NaN score");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> ranks(scores.size());
  for (std::size_t r = 0; r < order.size(); ++r) ranks[order[r]] = r + 1;
  return ranks;
}

// ------------------------------------------------------------ discriminative

// Maps the 3 n_h context onto the candidate width before the dot product.
class DiscriminativeHead {
 public:
  DiscriminativeHead() = default;
  DiscriminativeHead(std::size_t width, std::mt19937_64& rng)
      : w_(init_glorot({width, 3 * width}, rng)), b_(init_zeros({width, 1})) {}

  Tensor& weight() { return w_; }
  Tensor& bias() { return b_; }

  // scores[j] = (W_c c^T + b)^T a_j^T, returned as 1 x N.
  Var score(Graph& g, Var context, std::span<const Var> candidates) {
    if (candidates.empty()) throw PreconditionError("score_discriminative: no candidates");
    if (context.cols() != w_.cols())
      throw ShapeError("score_discriminative", context.shape(), w_.shape());
    Var projected = add(matmul(g.param(w_), transpose(context)), g.param(b_));
    Var stacked = concat(candidates, 0);  // N x n_h
    return transpose(matmul(stacked, projected));
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "w", self.w_);
    f(prefix + "b", self.b_);
  }

 private:
  Tensor w_, b_;
};

inline Var score_discriminative(Graph& g, Var context, const CandidateSet& candidates,
                                EmbeddingTable& table, TextEncoder& encoder,
                                DiscriminativeHead& head) {
  if (candidates.options.empty())
    throw PreconditionError("score_discriminative: empty candidate set");
  std::vector<Var> encoded;
  encoded.reserve(candidates.options.size());
  for (const auto& opt : candidates.options)
    encoded.push_back(encoder.encode(g, table, non_empty(opt)).vector);
  return head.score(g, context, encoded);
}

// -log softmax(scores)[gt]
inline Var loss_discriminative(Var scores, std::size_t gt) {
  if (scores.rows() != 1) throw ShapeError("loss_discriminative", scores.shape(), {1, scores.cols()});
  if (gt >= scores.cols())
    throw PreconditionError("loss_discriminative: gt index out of range");
  const std::size_t target[] = {gt};
  return cross_entropy(scores, target);
}

// ---------------------------------------------------------------- generative

// Single-layer LSTM answer model. Step 0 consumes the projected context,
// then <BOS>, then the answer tokens; it predicts the answer tokens and <EOS>.
class GenerativeDecoder {
 public:
  GenerativeDecoder() = default;
  GenerativeDecoder(std::size_t width, std::size_t context_width, std::size_t emb_width,
                    std::size_t vocab_size, std::mt19937_64& rng,
                    std::size_t bos = Vocabulary::kBos, std::size_t eos = Vocabulary::kEos)
      : w_ctx_(init_glorot({width, context_width}, rng)),
        b_ctx_(init_zeros({width, 1})),
        w_emb_(init_glorot({width, emb_width}, rng)),
        b_emb_(init_zeros({width, 1})),
        cell_(width, width, rng),
        w_out_(init_glorot({vocab_size, width}, rng)),
        b_out_(init_zeros({vocab_size, 1})),
        bos_(bos),
        eos_(eos) {}

  std::size_t vocab_size() const { return w_out_.rows(); }
  Tensor& output_weight() { return w_out_; }
  Tensor& output_bias() { return b_out_; }
  LstmCell& cell() { return cell_; }

  // State after the context step and the <BOS> step; shared by all candidates.
  LstmState prefix(Graph& g, Var context, EmbeddingTable& table) {
    if (context.rows() != 1 || context.cols() != w_ctx_.cols())
      throw ShapeError("generative decoder: context", context.shape(), {1, w_ctx_.cols()});
    Var x0 = add(matmul(g.param(w_ctx_), transpose(context)), g.param(b_ctx_));
    LstmState s = cell_.step(g, cell_.project_inputs(g, x0), {});
    const std::size_t bos[] = {bos_};
    Var e = add(matmul(g.param(w_emb_), table.embed(g, bos)), g.param(b_emb_));
    return cell_.step(g, cell_.project_inputs(g, e), s);
  }

  // sum_t log P(token_t | prefix, c) over the answer tokens and <EOS>.
  Var log_likelihood(Graph& g, const LstmState& start, EmbeddingTable& table,
                     std::span<const std::size_t> answer) {
    std::vector<Var> hidden{start.h};
    if (!answer.empty()) {
      Var emb = add(matmul(g.param(w_emb_), table.embed(g, answer)), g.param(b_emb_));
      Var pre = cell_.project_inputs(g, emb);
      LstmState s = start;
      for (std::size_t t = 0; t < answer.size(); ++t) {
        s = cell_.step(g, answer.size() == 1 ? pre : slice_cols(pre, t, t + 1), s);
        hidden.push_back(s.h);
      }
    }
    std::vector<std::size_t> targets(answer.begin(), answer.end());
    targets.push_back(eos_);
    for (auto t : targets)
      if (t >= vocab_size())
        throw PreconditionError("generative decoder: token " + std::to_string(t) +
                                " outside output vocabulary");
    Var logits = add(matmul(g.param(w_out_), concat(hidden, 1)), g.param(b_out_));
    return affine(sum(cross_entropy(transpose(logits), targets)), -1.0);
  }

  Var log_likelihood(Graph& g, Var context, EmbeddingTable& table,
                     std::span<const std::size_t> answer) {
    return log_likelihood(g, prefix(g, context, table), table, answer);
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "w_ctx", self.w_ctx_);
    f(prefix + "b_ctx", self.b_ctx_);
    f(prefix + "w_emb", self.w_emb_);
    f(prefix + "b_emb", self.b_emb_);
    LstmCell::visit(self.cell_, prefix + "lstm.", f);
    f(prefix + "w_out", self.w_out_);
    f(prefix + "b_out", self.b_out_);
  }

 private:
  Tensor w_ctx_, b_ctx_, w_emb_, b_emb_;
  LstmCell cell_;
  Tensor w_out_, b_out_;
  std::size_t bos_ = Vocabulary::kBos;
  std::size_t eos_ = Vocabulary::kEos;
};

// Per-candidate summed log-likelihoods as a 1 x N row.
inline Var score_generative(Graph& g, Var context, const CandidateSet& candidates,
                            EmbeddingTable& table, GenerativeDecoder& decoder) {
  if (candidates.options.empty())
    throw PreconditionError("score_generative: empty candidate set");
  LstmState start = decoder.prefix(g, context, table);
  std::vector<Var> scores;
  scores.reserve(candidates.options.size());
  for (const auto& opt : candidates.options)
    scores.push_back(decoder.log_likelihood(g, start, table, opt));
  return concat(scores, 1);
}

}  // namespace redan
