#pragma once

// Full visual-dialog model: memories, question encoding, recurrent dual
// attention, and one answer decoder.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "redan/autodiff.hpp"
#include "redan/data.hpp"
#include "redan/decoders.hpp"
#include "redan/encoders.hpp"
#include "redan/memory.hpp"
#include "redan/ranking.hpp"
#include "redan/reasoning.hpp"

namespace redan {

enum class DecoderKind { kDiscriminative, kGenerative };

inline std::string to_string(DecoderKind k) {
  return k == DecoderKind::kDiscriminative ? "dis" : "gen";
}

inline DecoderKind decoder_from_string(const std::string& s) {
  if (s == "dis") return DecoderKind::kDiscriminative;
  if (s == "gen") return DecoderKind::kGenerative;
  throw PreconditionError("unknown decoder kind '" + s + "' (expected dis or gen)");
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 16;  // n_h, total BiLSTM output width
  std::size_t learned_dim = 8;
  std::size_t pretrained_dim = 0;  // 0 when no GloVe table is attached
  std::size_t feature_dim = 12;
  std::size_t factors = 2;
  std::size_t steps = 2;
  DecoderKind decoder = DecoderKind::kDiscriminative;
  std::uint64_t seed = 0;

  static ModelConfig desk(std::size_t vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    return c;
  }

  static ModelConfig paper(std::size_t vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.hidden = 512;
    c.learned_dim = 300;
    c.pretrained_dim = 300;
    c.feature_dim = 2048;
    c.factors = 5;
    c.steps = 3;
    return c;
  }

  std::size_t embedding_width() const { return learned_dim + pretrained_dim; }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},     {"hidden", c.hidden},
          {"learned_dim", c.learned_dim},   {"pretrained_dim", c.pretrained_dim},
          {"feature_dim", c.feature_dim},   {"factors", c.factors},
          {"steps", c.steps},               {"decoder", to_string(c.decoder)},
          {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.learned_dim = j.at("learned_dim").get<std::size_t>();
  c.pretrained_dim = j.at("pretrained_dim").get<std::size_t>();
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.factors = j.at("factors").get<std::size_t>();
  c.steps = j.at("steps").get<std::size_t>();
  c.decoder = decoder_from_string(j.at("decoder").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

class Model {
 public:
  explicit Model(const ModelConfig& cfg, std::optional<Tensor> pretrained = std::nullopt)
      : config_(cfg) {
    if (cfg.vocab_size < Vocabulary::kNumSpecials)
      throw PreconditionError("model: vocabulary smaller than the special tokens");
    std::mt19937_64 rng(cfg.seed);
    embed = EmbeddingTable(cfg.vocab_size, cfg.learned_dim, rng);
    if (cfg.pretrained_dim > 0) {
      if (!pretrained) pretrained = Tensor({cfg.vocab_size, cfg.pretrained_dim}, 0.0);
      if (pretrained->cols() != cfg.pretrained_dim)
        throw ShapeError("model: pretrained table", pretrained->shape(),
                         {cfg.vocab_size, cfg.pretrained_dim});
      embed.set_pretrained(std::move(*pretrained));
    }
    const std::size_t e = cfg.embedding_width(), n = cfg.hidden;
    question = TextEncoder(e, n, rng);
    history = TextEncoder(e, n, rng);
    visual = VisualProjection(cfg.feature_dim, n, rng);
    reasoning = ReasoningParams(n, cfg.factors, cfg.steps, rng);
    if (cfg.decoder == DecoderKind::kDiscriminative) {
      answer = TextEncoder(e, n, rng);
      head = DiscriminativeHead(n, rng);
    } else {
      generator = GenerativeDecoder(n, 3 * n, e, cfg.vocab_size, rng);
    }
  }

  const ModelConfig& config() const { return config_; }

  template <class F>
  void for_each_parameter(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    visit(*this, f);
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for_each_parameter([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, const Tensor& t) {
      if (t.requires_grad()) n += t.size();
    });
    return n;
  }

  void zero_grad() {
    for_each_parameter([](const std::string&, Tensor& t) { t.zero_grad(); });
  }

  EmbeddingTable embed;
  TextEncoder question, history, answer;
  VisualProjection visual;
  ReasoningParams reasoning;
  DiscriminativeHead head;
  GenerativeDecoder generator;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    EmbeddingTable::visit(self.embed, "embed.", f);
    TextEncoder::visit(self.question, "question.", f);
    TextEncoder::visit(self.history, "history.", f);
    VisualProjection::visit(self.visual, "visual.", f);
    ReasoningParams::visit(self.reasoning, "reasoning.", f);
    if (self.config_.decoder == DecoderKind::kDiscriminative) {
      TextEncoder::visit(self.answer, "answer.", f);
      DiscriminativeHead::visit(self.head, "head.", f);
    } else {
      GenerativeDecoder::visit(self.generator, "generator.", f);
    }
  }

  ModelConfig config_;
};

// Lazily built memories of one dialog inside one graph; later turns reuse the
// snippets encoded for earlier ones.
class DialogEncoding {
 public:
  DialogEncoding(Model& model, Graph& g, const DialogExample& ex)
      : model_(model), g_(g), ex_(ex) {}

  const DialogExample& example() const { return ex_; }

  Var visual() {
    if (!visual_.valid()) {
      if (ex_.features.rows() != model_.config().feature_dim)
        throw ShapeError("visual features", ex_.features.shape(),
                         {model_.config().feature_dim, ex_.features.cols()});
      visual_ = model_.visual.build(g_, ex_.features).matrix;
    }
    return visual_;
  }

  // n_h x (turn + 1): caption and the QA snippets of turns [0, turn).
  Var textual(std::size_t turn) {
    while (columns_.size() < turn + 1) {
      const std::size_t j = columns_.size();
      auto ids = j == 0 ? ex_.caption
                        : history_snippet(ex_.turns[j - 1].question, ex_.turns[j - 1].answer);
      columns_.push_back(
          transpose(model_.history.encode(g_, model_.embed, non_empty(ids)).vector));
    }
    if (turn + 1 == columns_.size() && cache_.valid() && cache_cols_ == turn + 1)
      return cache_;
    cache_ = concat(std::span<const Var>(columns_.data(), turn + 1), 1);
    cache_cols_ = turn + 1;
    return cache_;
  }

  std::vector<std::string> snippet_texts(std::size_t turn) const {
    std::vector<std::string> out{ex_.caption_text};
    for (std::size_t j = 0; j < turn; ++j) out.push_back(ex_.turns[j].question_text);
    return out;
  }

 private:
  Model& model_;
  Graph& g_;
  const DialogExample& ex_;
  Var visual_;
  std::vector<Var> columns_;
  Var cache_;
  std::size_t cache_cols_ = 0;
};

enum class ForwardMode {
  kLoss,   // training objective only
  kScore,  // scores for every candidate (plus the loss)
};

struct TurnOutput {
  Var question_weights;
  ReasoningTrace trace;
  Var scores;  // 1 x N, valid in kScore mode and for discriminative kLoss
  Var loss;    // 1 x 1
};

inline TurnOutput forward_turn(Graph& g, Model& model, DialogEncoding& enc, std::size_t turn,
                               ForwardMode mode, Dropout* drop = nullptr) {
  const DialogExample& ex = enc.example();
  if (turn >= ex.turns.size()) throw PreconditionError("forward_turn: turn out of range");
  const DialogTurn& t = ex.turns[turn];

  TurnOutput out;
  Pooled q = model.question.encode(g, model.embed, non_empty(t.question));
  out.question_weights = q.weights;
  out.trace = run_reasoning(g, q.vector, enc.visual(), enc.textual(turn), model.reasoning,
                            model.config().steps, drop);
  const Var c = out.trace.context;

  CandidateSet cands{t.options, t.gt};
  if (model.config().decoder == DecoderKind::kDiscriminative) {
    out.scores = score_discriminative(g, c, cands, model.embed, model.answer, model.head);
    out.loss = loss_discriminative(out.scores, t.gt);
  } else if (mode == ForwardMode::kScore) {
    out.scores = score_generative(g, c, cands, model.embed, model.generator);
    out.loss = affine(slice_cols(out.scores, t.gt, t.gt + 1), -1.0);
  } else {
    out.loss = affine(model.generator.log_likelihood(g, c, model.embed, non_empty(t.options[t.gt])),
                      -1.0);
  }
  return out;
}

// Summed training loss over all turns of a dialog.
inline Var dialog_loss(Graph& g, Model& model, const DialogExample& ex, Dropout* drop = nullptr,
                       std::size_t max_turns = SIZE_MAX) {
  DialogEncoding enc(model, g, ex);
  std::vector<Var> losses;
  for (std::size_t t = 0; t < std::min(max_turns, ex.turns.size()); ++t)
    losses.push_back(forward_turn(g, model, enc, t, ForwardMode::kLoss, drop).loss);
  return sum(concat(losses, 0));
}

// Ranking table over every turn, in dataset order. Evaluation only reads the
// parameters, so dialogs may be sharded across threads.
inline RankingTable evaluate(Model& model, const Dataset& data, std::size_t threads = 1) {
  std::vector<RankingTable> per_dialog(data.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t d = begin; d < end; ++d) {
      const auto& ex = data[d];
      Graph g;
      DialogEncoding enc(model, g, ex);
      for (std::size_t t = 0; t < ex.turns.size(); ++t) {
        TurnOutput o = forward_turn(g, model, enc, t, ForwardMode::kScore);
        RankedTurn row;
        row.dialog_id = ex.image_id;
        row.turn = t + 1;
        row.scores = std::vector<double>(o.scores.value().begin(), o.scores.value().end());
        row.ranks = rank_candidates(*row.scores);
        row.gt = ex.turns[t].gt;
        row.relevance = ex.turns[t].relevance;
        per_dialog[d].push_back(std::move(row));
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, data.size()));
  if (threads == 1) {
    work(0, data.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (data.size() + threads - 1) / threads;
    for (std::size_t i = 0; i < threads; ++i) {
      const std::size_t b = i * chunk, e = std::min(data.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  RankingTable out;
  for (auto& rows : per_dialog)
    for (auto& r : rows) out.push_back(std::move(r));
  return out;
}

inline std::vector<double> values_of(Var v) {
  return std::vector<double>(v.value().begin(), v.value().end());
}

// Per-turn, per-step attention maps plus the top-ranked candidates.
inline nlohmann::json trace_dialog(Model& model, const DialogExample& ex,
                                   std::size_t top_k = 10) {
  nlohmann::json doc;
  doc["dialog_id"] = ex.image_id;
  doc["turns"] = nlohmann::json::array();
  Graph g;
  DialogEncoding enc(model, g, ex);
  for (std::size_t t = 0; t < ex.turns.size(); ++t) {
    TurnOutput o = forward_turn(g, model, enc, t, ForwardMode::kScore);
    nlohmann::json jt;
    jt["turn"] = t + 1;
    jt["question"] = ex.turns[t].question_text;
    jt["steps"] = nlohmann::json::array();
    for (const auto& step : o.trace.steps)
      jt["steps"].push_back({{"beta", values_of(step.beta)}, {"gamma", values_of(step.gamma)}});
    auto scores = values_of(o.scores);
    auto ranks = rank_candidates(scores);
    std::vector<std::size_t> order(scores.size());
    for (std::size_t j = 0; j < ranks.size(); ++j) order[ranks[j] - 1] = j;
    jt["top_candidates"] = nlohmann::json::array();
    for (std::size_t r = 0; r < std::min(top_k, order.size()); ++r) {
      const std::size_t j = order[r];
      jt["top_candidates"].push_back(
          {{"text", ex.turns[t].option_texts[j]}, {"score", scores[j]}, {"rank", r + 1}});
    }
    doc["turns"].push_back(std::move(jt));
  }
  return doc;
}

}  // namespace redan
