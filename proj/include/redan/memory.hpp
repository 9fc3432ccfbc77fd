#pragma once

#include <array>
#include <string>
#include <vector>

#include "redan/autodiff.hpp"
#include "redan/encoders.hpp"
#include "redan/vocab.hpp"

namespace redan {

// n_h x M, one column per detected region.
struct VisualMemory {
  Var matrix;
  std::vector<std::array<double, 4>> region_boxes;  // optional, trace only
};

// n_h x l, column 0 is the caption, column j the j-th QA snippet.
struct TextualMemory {
  Var matrix;
  std::vector<std::string> snippet_texts;  // trace only
};

// M_v = tanh(W_I F + b) for features F (n_f x M).
inline VisualMemory build_visual_memory(Var features, Var w_image, Var bias) {
  if (features.cols() == 0) throw PreconditionError("visual memory: no regions");
  if (w_image.cols() != features.rows())
    throw ShapeError("build_visual_memory", w_image.shape(), features.shape());
  return {tanh(add(matmul(w_image, features), bias)), {}};
}

class VisualProjection {
 public:
  VisualProjection() = default;
  VisualProjection(std::size_t feature_dim, std::size_t width, std::mt19937_64& rng)
      : w_(init_glorot({width, feature_dim}, rng)), b_(init_zeros({width, 1})) {}

  Tensor& weight() { return w_; }
  Tensor& bias() { return b_; }

  VisualMemory build(Graph& g, const Tensor& features) {
    if (!features.all_finite()) throw NumericError("visual memory: non-finite features");
    return build_visual_memory(g.constant(features), g.param(w_), g.param(b_));
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "w", self.w_);
    f(prefix + "b", self.b_);
  }

 private:
  Tensor w_, b_;
};

// Snippet j >= 1 is "question <QA> answer".
inline std::vector<std::size_t> history_snippet(const std::vector<std::size_t>& question,
                                                const std::vector<std::size_t>& answer) {
  std::vector<std::size_t> out(question);
  out.push_back(Vocabulary::kQa);
  out.insert(out.end(), answer.begin(), answer.end());
  return out;
}

inline std::vector<std::size_t> non_empty(std::vector<std::size_t> ids) {
  if (ids.empty()) ids.push_back(Vocabulary::kUnk);
  return ids;
}

// Each snippet is encoded and pooled independently with the history channel.
inline TextualMemory build_textual_memory(
    Graph& g, const std::vector<std::vector<std::size_t>>& history,
    EmbeddingTable& table, TextEncoder& encoder,
    std::vector<std::string> snippet_texts = {}) {
  if (history.empty())
    throw PreconditionError("textual memory: history must contain the caption");
  std::vector<Var> cols;
  cols.reserve(history.size());
  for (const auto& snippet : history) {
    auto ids = non_empty(snippet);
    cols.push_back(transpose(encoder.encode(g, table, ids).vector));
  }
  return {concat(cols, 1), std::move(snippet_texts)};
}

}  // namespace redan
