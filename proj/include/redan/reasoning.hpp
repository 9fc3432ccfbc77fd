#pragma once

// Recurrent dual attention: T shared-weight steps of
//   s_t -> v_t (image attention) -> d_t (history attention) -> s_{t+1} (GRU)
// followed by three MFB fusions that form the context vector.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "redan/autodiff.hpp"
#include "redan/encoders.hpp"
#include "redan/memory.hpp"

namespace redan {

// Inverted dropout with explicit masks. Inactive sources pass values through.
class Dropout {
 public:
  Dropout() = default;
  Dropout(double p, std::uint64_t seed) : p_(p), rng_(seed), active_(p > 0.0) {
    if (p < 0.0 || p >= 1.0) throw PreconditionError("dropout: p must be in [0, 1)");
  }

  bool active() const { return active_; }

  Var apply(Var x) {
    if (!active_) return x;
    Tensor mask({x.rows(), x.cols()}, 0.0);
    std::bernoulli_distribution keep(1.0 - p_);
    const double scale = 1.0 / (1.0 - p_);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(rng_) ? scale : 0.0;
    return dropout(x, mask);
  }

 private:
  double p_ = 0.0;
  std::mt19937_64 rng_;
  bool active_ = false;
};

// Query-conditioned attention over the columns of a memory matrix.
class AttentionParams {
 public:
  AttentionParams() = default;
  AttentionParams(std::size_t width, std::mt19937_64& rng)
      : w_mem_(init_glorot({width, width}, rng)),
        w_query_(init_glorot({width, width}, rng)),
        w_other_(init_glorot({width, width}, rng)),
        b_(init_zeros({width, 1})),
        p_(init_glorot({width, 1}, rng)) {}

  Tensor& w_memory() { return w_mem_; }
  Tensor& w_query() { return w_query_; }
  Tensor& w_other() { return w_other_; }
  Tensor& bias() { return b_; }
  Tensor& probe() { return p_; }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "w_mem", self.w_mem_);
    f(prefix + "w_query", self.w_query_);
    f(prefix + "w_other", self.w_other_);
    f(prefix + "b", self.b_);
    f(prefix + "p", self.p_);
  }

 private:
  Tensor w_mem_, w_query_, w_other_, b_, p_;
};

struct Attended {
  Var vector;   // 1 x n_h
  Var weights;  // 1 x columns
};

namespace detail {

// weights = softmax(p^T tanh(projected_memory + W_q query^T + W_o other^T + b))
inline Attended attend_projected(Graph& g, Var projected_memory, Var memory,
                                 Var query, Var other, AttentionParams& params) {
  const std::size_t n = memory.rows();
  if (query.rows() != 1 || query.cols() != n)
    throw ShapeError("attend: query", query.shape(), {1, n});
  if (other.rows() != 1 || other.cols() != n)
    throw ShapeError("attend: context", other.shape(), {1, n});
  Var cond = add(add(matmul(g.param(params.w_query()), transpose(query)),
                     matmul(g.param(params.w_other()), transpose(other))),
                 g.param(params.bias()));
  Var hidden = tanh(add(projected_memory, cond));
  Var weights = row_softmax(matmul(transpose(g.param(params.probe())), hidden));
  return {matmul(weights, transpose(memory)), weights};
}

inline Attended attend(Graph& g, Var memory, Var query, Var other,
                       AttentionParams& params) {
  if (memory.rows() != params.w_memory().cols())
    throw ShapeError("attend: memory", memory.shape(), params.w_memory().shape());
  Var projected = matmul(g.param(params.w_memory()), memory);
  return attend_projected(g, projected, memory, query, other, params);
}

}  // namespace detail

// beta over regions from (s_t, d_{t-1}); v_t = beta M_v^T.
inline Attended attend_image(Graph& g, Var state, Var prev_history,
                             Var visual_memory, AttentionParams& params) {
  return detail::attend(g, visual_memory, state, prev_history, params);
}

// gamma over history snippets from (s_t, v_t); d_t = gamma M_d^T.
inline Attended attend_history(Graph& g, Var state, Var image,
                               Var textual_memory, AttentionParams& params) {
  return detail::attend(g, textual_memory, state, image, params);
}

// Bias-free projection pair for one MFB fusion site.
struct MfbPair {
  Tensor u_a, u_b;

  MfbPair() = default;
  MfbPair(std::size_t width, std::size_t factors, std::mt19937_64& rng)
      : u_a(init_glorot({width * factors, width}, rng)),
        u_b(init_glorot({width * factors, width}, rng)) {}

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "u_a", self.u_a);
    f(prefix + "u_b", self.u_b);
  }
};

// sum-pool_k(U_a a^T o U_b b^T), then signed sqrt and l2 normalization.
inline Var mfb_fuse(Var a, Var b, Var u_a, Var u_b, std::size_t factors) {
  const std::size_t n = a.cols();
  if (a.rows() != 1 || b.rows() != 1 || b.cols() != n)
    throw ShapeError("mfb_fuse", a.shape(), b.shape());
  if (factors == 0 || u_a.rows() % factors != 0 || u_a.rows() != n * factors)
    throw PreconditionError("mfb_fuse: projection rows " + std::to_string(u_a.rows()) +
                            " incompatible with width " + std::to_string(n) +
                            " and k=" + std::to_string(factors));
  if (u_b.rows() != u_a.rows())
    throw ShapeError("mfb_fuse", u_a.shape(), u_b.shape());
  Var pa = matmul(u_a, transpose(a));
  Var pb = matmul(u_b, transpose(b));
  Var pooled = sum_pool(mul(pa, pb), factors);
  return transpose(l2_normalize(signed_sqrt(pooled)));
}

inline Var mfb_fuse(Graph& g, Var a, Var b, MfbPair& pair, std::size_t factors) {
  return mfb_fuse(a, b, g.param(pair.u_a), g.param(pair.u_b), factors);
}

// GRU with reset-gated candidate:
//   r = sigma(W_r z + U_r s + b_r), u = sigma(W_u z + U_u s + b_u)
//   h~ = tanh(W_h z + U_h (r o s) + b_h), s' = u o s + (1 - u) o h~
class GruParams {
 public:
  GruParams() = default;
  GruParams(std::size_t width, std::mt19937_64& rng)
      : w_in_(init_glorot({3 * width, width}, rng, 3)),
        w_gates_(init_glorot({2 * width, width}, rng, 2)),
        w_cand_(init_glorot({width, width}, rng)),
        b_(init_zeros({3 * width, 1})) {}

  std::size_t width() const { return w_cand_.rows(); }
  // Rows [0, n) reset, [n, 2n) update, [2n, 3n) candidate.
  Tensor& w_input() { return w_in_; }
  Tensor& w_gates() { return w_gates_; }
  Tensor& w_candidate() { return w_cand_; }
  Tensor& bias() { return b_; }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "w_in", self.w_in_);
    f(prefix + "w_gates", self.w_gates_);
    f(prefix + "w_cand", self.w_cand_);
    f(prefix + "b", self.b_);
  }

 private:
  Tensor w_in_, w_gates_, w_cand_, b_;
};

inline Var gru_update(Graph& g, Var state, Var input, GruParams& params) {
  const std::size_t n = params.width();
  if (state.rows() != 1 || state.cols() != n)
    throw ShapeError("gru_update: state", state.shape(), {1, n});
  if (input.rows() != 1 || input.cols() != n)
    throw ShapeError("gru_update: input", input.shape(), {1, n});
  Var s = transpose(state);
  Var in = add(matmul(g.param(params.w_input()), transpose(input)), g.param(params.bias()));
  Var gates = sigmoid(add(slice_rows(in, 0, 2 * n), matmul(g.param(params.w_gates()), s)));
  Var reset = slice_rows(gates, 0, n);
  Var update = slice_rows(gates, n, 2 * n);
  Var cand = tanh(add(slice_rows(in, 2 * n, 3 * n),
                      matmul(g.param(params.w_candidate()), mul(reset, s))));
  Var next = add(mul(update, s), mul(affine(update, -1.0, 1.0), cand));
  return transpose(next);
}

struct ReasoningParams {
  AttentionParams image;    // W_v, W_s, W_d, p_beta
  AttentionParams history;  // W'_d, W'_s, W'_v, p_gamma
  MfbPair fuse;             // in-loop MFB(v_t, d_t)
  MfbPair final_sv, final_sd, final_vd;
  GruParams gru;
  std::size_t factors = 1;
  std::size_t steps = 1;

  ReasoningParams() = default;
  ReasoningParams(std::size_t width, std::size_t k, std::size_t t, std::mt19937_64& rng)
      : image(width, rng),
        history(width, rng),
        fuse(width, k, rng),
        final_sv(width, k, rng),
        final_sd(width, k, rng),
        final_vd(width, k, rng),
        gru(width, rng),
        factors(k),
        steps(t) {
    if (k == 0) throw PreconditionError("reasoning: factor count must be >= 1");
    if (t == 0) throw PreconditionError("reasoning: step count must be >= 1");
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    AttentionParams::visit(self.image, prefix + "image_att.", f);
    AttentionParams::visit(self.history, prefix + "history_att.", f);
    MfbPair::visit(self.fuse, prefix + "mfb_loop.", f);
    MfbPair::visit(self.final_sv, prefix + "mfb_sv.", f);
    MfbPair::visit(self.final_sd, prefix + "mfb_sd.", f);
    MfbPair::visit(self.final_vd, prefix + "mfb_vd.", f);
    GruParams::visit(self.gru, prefix + "gru.", f);
  }
};

struct ReasoningStep {
  Var state;  // s_t, the query of this step
  Var beta, image;
  Var gamma, history;
};

struct ReasoningTrace {
  std::vector<ReasoningStep> steps;
  Var final_state;
  Var context;  // 1 x 3 n_h
};

// Runs `steps` shared-weight reasoning steps from s_0 = question. d_0 is zero.
// The final context fuses the state after the last GRU update with the last
// attended image and history vectors.
inline ReasoningTrace run_reasoning(Graph& g, Var question, Var visual_memory,
                                    Var textual_memory, ReasoningParams& params,
                                    std::size_t steps, Dropout* drop = nullptr) {
  if (steps == 0) throw PreconditionError("run_reasoning: T must be >= 1");
  const std::size_t n = question.cols();
  auto maybe_drop = [&](Var x) { return drop ? drop->apply(x) : x; };

  if (visual_memory.rows() != params.image.w_memory().cols())
    throw ShapeError("run_reasoning: visual memory", visual_memory.shape(),
                     params.image.w_memory().shape());
  if (textual_memory.rows() != params.history.w_memory().cols())
    throw ShapeError("run_reasoning: textual memory", textual_memory.shape(),
                     params.history.w_memory().shape());
  Var vis_proj = matmul(g.param(params.image.w_memory()), visual_memory);
  Var txt_proj = matmul(g.param(params.history.w_memory()), textual_memory);

  ReasoningTrace trace;
  Var state = question;
  Var prev_history = g.zeros(1, n);
  Var image, history;
  for (std::size_t t = 0; t < steps; ++t) {
    Attended v = detail::attend_projected(g, vis_proj, visual_memory, state,
                                          prev_history, params.image);
    image = maybe_drop(v.vector);
    Attended d = detail::attend_projected(g, txt_proj, textual_memory, state,
                                          image, params.history);
    history = maybe_drop(d.vector);
    Var z = maybe_drop(mfb_fuse(g, image, history, params.fuse, params.factors));
    trace.steps.push_back({state, v.weights, image, d.weights, history});
    state = gru_update(g, state, z, params.gru);
    prev_history = history;
  }
  trace.final_state = state;
  trace.context = concat({mfb_fuse(g, state, image, params.final_sv, params.factors),
                          mfb_fuse(g, state, history, params.final_sd, params.factors),
                          mfb_fuse(g, image, history, params.final_vd, params.factors)},
                         1);
  return trace;
}

}  // namespace redan
