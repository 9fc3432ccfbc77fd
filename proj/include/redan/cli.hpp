#pragma once

// Command-line front end: synth, train, eval, aggregate, trace.
// Exit codes: 0 success, 1 usage error, 2 data or model error. Errors are
// reported on the error stream as a single JSON line {"code", "message"}.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "redan/checkpoint.hpp"
#include "redan/data.hpp"
#include "redan/model.hpp"
#include "redan/ranking.hpp"
#include "redan/training.hpp"

namespace redan {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace cli {

// REDAN_SEED, when set, replaces any --seed value.
inline std::uint64_t effective_seed(std::uint64_t flag) {
  const char* env = std::getenv("REDAN_SEED");
  if (!env || !*env) return flag;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("REDAN_SEED is not an unsigned integer: ") + env);
  }
}

inline void emit_error(std::ostream& err, int code, const std::string& message) {
  err << nlohmann::json{{"code", code}, {"message", message}}.dump() << std::endl;
}

inline Dataset load_split(const DataPaths& paths, const std::string& split,
                          const Vocabulary& vocab, const TruncationLimits& limits) {
  if (split != "train" && split != "val") throw UsageError("--split must be train or val");
  const auto& dialogs = split == "train" ? paths.train_dialogs : paths.val_dialogs;
  return load_dataset(dialogs, paths.features, vocab, limits);
}

inline TruncationLimits limits_of(const CheckpointInfo& info) {
  return info.train_config ? info.train_config->limits : TruncationLimits::desk();
}

struct SynthArgs {
  std::string out;
  std::size_t dialogs = 20;
  std::optional<std::size_t> val_dialogs;
  std::size_t turns = 10;
  std::size_t candidates = 5;
  std::uint64_t seed = 0;
};

inline int run_synth(const SynthArgs& a, std::ostream& out) {
  SyntheticSpec spec;
  spec.train_dialogs = a.dialogs;
  spec.val_dialogs = a.val_dialogs.value_or((a.dialogs + 1) / 2);
  spec.turns = a.turns;
  spec.candidates = a.candidates;
  spec.seed = effective_seed(a.seed);
  auto paths = write_synthetic(a.out, spec);
  out << nlohmann::json{{"train", paths.train_dialogs},
                        {"val", paths.val_dialogs},
                        {"features", paths.features},
                        {"seed", spec.seed}}
             .dump()
      << std::endl;
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::string decoder = "dis";
  std::optional<std::size_t> steps;
  std::string preset = "desk";
  std::string out;
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> patience;
  std::optional<std::string> glove;
  std::size_t threads = 1;
};

inline int run_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig tc = a.preset == "paper" ? TrainConfig::paper() : TrainConfig::desk();
  tc.seed = effective_seed(a.seed);
  if (a.steps) tc.steps = *a.steps;
  if (a.epochs) tc.max_epochs = *a.epochs;
  if (a.patience) tc.patience = *a.patience;
  tc.eval_threads = a.threads;
  tc.validate();

  const auto paths = DataPaths::in(a.data);
  const auto train_raw = read_dialogs(paths.train_dialogs);
  const Vocabulary vocab = build_vocabulary(train_raw, tc.limits, tc.min_count);
  const auto features = read_features(paths.features);
  if (features.empty()) throw DataError(paths.features + ": no feature records");
  const Dataset train_ds = encode_dataset(train_raw, features, vocab, tc.limits);
  Dataset val_ds;
  if (std::filesystem::exists(paths.val_dialogs))
    val_ds = encode_dataset(read_dialogs(paths.val_dialogs), features, vocab, tc.limits);

  ModelConfig mc = a.preset == "paper" ? ModelConfig::paper(vocab.size())
                                       : ModelConfig::desk(vocab.size());
  mc.decoder = decoder_from_string(a.decoder);
  mc.steps = tc.steps;
  mc.factors = tc.factors;
  mc.seed = tc.seed;
  mc.feature_dim = features.front().dim;
  std::optional<Tensor> pretrained;
  if (a.glove) {
    pretrained = load_glove(*a.glove, vocab);
    mc.pretrained_dim = pretrained->cols();
  } else {
    mc.pretrained_dim = 0;
  }

  Model model(mc, std::move(pretrained));
  auto result = train(model, train_ds, val_ds, tc,
                      [&](const EpochRecord& r) { out << to_json(r).dump() << std::endl; });
  CheckpointInfo info{tc, result.best_epoch, result.history.front().metric, result.best_metric};
  save_checkpoint(a.out, result.best, vocab, info);
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string split = "val";
  std::size_t threads = 1;
};

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  auto ck = load_checkpoint(a.ckpt);
  const Dataset ds =
      load_split(DataPaths::in(a.data), a.split, ck.vocab, limits_of(ck.info));
  const RankingTable table = evaluate(ck.model, ds, a.threads);
  write_ranking_table(a.out, table);
  out << metrics_to_json(compute_metrics(table)).dump() << std::endl;
  return kExitOk;
}

struct AggregateArgs {
  std::string method;
  std::vector<std::string> inputs;
  std::string out;
};

inline int run_aggregate(const AggregateArgs& a, std::ostream& out) {
  std::vector<RankingTable> tables;
  for (const auto& path : a.inputs) tables.push_back(read_ranking_table(path));
  const RankingTable fused =
      a.method == "average" ? aggregate_average(tables) : aggregate_reciprocal(tables);
  write_ranking_table(a.out, fused);
  out << metrics_to_json(compute_metrics(fused)).dump() << std::endl;
  return kExitOk;
}

struct TraceArgs {
  std::string ckpt;
  std::string data;
  std::int64_t dialog = 0;
  std::string out;
  std::string split = "val";
};

inline int run_trace(const TraceArgs& a, std::ostream& out) {
  auto ck = load_checkpoint(a.ckpt);
  const Dataset ds =
      load_split(DataPaths::in(a.data), a.split, ck.vocab, limits_of(ck.info));
  for (const auto& ex : ds) {
    if (ex.image_id != a.dialog) continue;
    const auto doc = trace_dialog(ck.model, ex);
    std::ofstream f(a.out, std::ios::binary);
    if (!f) throw DataError("cannot write " + a.out);
    f << doc.dump(1) << '\n';
    out << nlohmann::json{{"dialog_id", a.dialog}, {"turns", doc["turns"].size()}, {"out", a.out}}
               .dump()
        << std::endl;
    return kExitOk;
  }
  throw DataError("dialog " + std::to_string(a.dialog) + " not found in the " + a.split +
                  " split");
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Recurrent dual attention visual dialog engine", "redan"};
  app.require_subcommand(1);

  cli::SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write a synthetic dialog corpus");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--dialogs", synth.dialogs, "training dialogs")->check(CLI::PositiveNumber);
  s->add_option("--val-dialogs", synth.val_dialogs, "validation dialogs (default: half)");
  s->add_option("--turns", synth.turns, "turns per dialog")->check(CLI::PositiveNumber);
  s->add_option("--candidates", synth.candidates, "candidates per turn")
      ->check(CLI::PositiveNumber);
  s->add_option("--seed", synth.seed, "generator seed");

  cli::TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model and write the best checkpoint");
  t->add_option("--data", tr.data, "data directory")->required();
  t->add_option("--decoder", tr.decoder, "decoder")
      ->check(CLI::IsMember({"dis", "gen"}))
      ->required();
  t->add_option("--steps", tr.steps, "reasoning steps T")->check(CLI::PositiveNumber);
  t->add_option("--preset", tr.preset, "hyperparameter preset")
      ->check(CLI::IsMember({"paper", "desk"}));
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--seed", tr.seed, "seed for initialization, shuffling and dropout");
  t->add_option("--epochs", tr.epochs, "maximum epochs")->check(CLI::PositiveNumber);
  t->add_option("--patience", tr.patience, "early-stopping patience");
  t->add_option("--glove", tr.glove, "GloVe text file (300-d)")->check(CLI::ExistingFile);
  t->add_option("--threads", tr.threads, "validation threads")->check(CLI::PositiveNumber);

  cli::EvalArgs ev;
  auto* e = app.add_subcommand("eval", "rank candidates and report metrics");
  e->add_option("--ckpt", ev.ckpt, "checkpoint")->required();
  e->add_option("--data", ev.data, "data directory")->required();
  e->add_option("--out", ev.out, "ranking table (JSON Lines)")->required();
  e->add_option("--split", ev.split, "train or val")->check(CLI::IsMember({"train", "val"}));
  e->add_option("--threads", ev.threads, "worker threads")->check(CLI::PositiveNumber);

  cli::AggregateArgs ag;
  auto* a = app.add_subcommand("aggregate", "fuse ranking tables");
  a->add_option("--method", ag.method, "fusion rule")
      ->check(CLI::IsMember({"average", "reciprocal"}))
      ->required();
  a->add_option("inputs", ag.inputs, "ranking tables")->required();
  a->add_option("--out", ag.out, "fused ranking table")->required();

  cli::TraceArgs tc;
  auto* c = app.add_subcommand("trace", "dump per-step attention weights for one dialog");
  c->add_option("--ckpt", tc.ckpt, "checkpoint")->required();
  c->add_option("--data", tc.data, "data directory")->required();
  c->add_option("--dialog", tc.dialog, "dialog (image) id")->required();
  c->add_option("--out", tc.out, "trace JSON path")->required();
  c->add_option("--split", tc.split, "train or val")->check(CLI::IsMember({"train", "val"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& pe) {
    cli::emit_error(err, kExitUsage, pe.what());
    return kExitUsage;
  }

  try {
    if (*s) return cli::run_synth(synth, out);
    if (*t) return cli::run_train(tr, out);
    if (*e) return cli::run_eval(ev, out);
    if (*a) return cli::run_aggregate(ag, out);
    if (*c) return cli::run_trace(tc, out);
  } catch (const UsageError& ue) {
    cli::emit_error(err, kExitUsage, ue.what());
    return kExitUsage;
  } catch (const std::exception& ex) {
    cli::emit_error(err, kExitData, ex.what());
    return kExitData;
  }
  cli::emit_error(err, kExitUsage, "no subcommand");
  return kExitUsage;
}

}  // namespace redan
