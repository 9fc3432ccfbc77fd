#pragma once

// Rank aggregation across models and retrieval metrics over ranking tables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <json.hpp>

#include "redan/decoders.hpp"
#include "redan/vocab.hpp"

namespace redan {

struct RankedTurn {
  std::int64_t dialog_id = 0;
  std::size_t turn = 0;
  std::vector<std::size_t> ranks;  // 1-based, permutation of 1..N
  std::optional<std::vector<double>> scores;
  std::size_t gt = 0;
  std::optional<std::vector<double>> relevance;

  friend bool operator==(const RankedTurn&, const RankedTurn&) = default;
};

using RankingTable = std::vector<RankedTurn>;

inline void validate_turn(const RankedTurn& t) {
  const std::size_t n = t.ranks.size();
  if (n == 0) throw DataError("ranking table: empty ranks");
  std::vector<bool> seen(n + 1, false);
  for (auto r : t.ranks) {
    if (r < 1 || r > n || seen[r])
      throw DataError("ranking table: ranks of dialog " + std::to_string(t.dialog_id) +
                      " turn " + std::to_string(t.turn) + " are not a permutation of 1..N");
    seen[r] = true;
  }
  if (t.gt >= n) throw DataError("ranking table: gt index out of range");
  if (t.scores && t.scores->size() != n) throw DataError("ranking table: scores length != N");
  if (t.relevance && t.relevance->size() != n)
    throw DataError("ranking table: relevance length != N");
}

// ---------------------------------------------------------------- aggregation

namespace detail {

inline void check_aligned(const std::vector<RankingTable>& tables) {
  if (tables.empty()) throw PreconditionError("aggregate: need at least one table");
  const auto& ref = tables.front();
  for (const auto& t : tables) {
    if (t.size() != ref.size())
      throw DataError("aggregate: tables cover different numbers of turns");
    for (std::size_t i = 0; i < t.size(); ++i) {
      validate_turn(t[i]);
      if (t[i].dialog_id != ref[i].dialog_id || t[i].turn != ref[i].turn)
        throw DataError("aggregate: misaligned turn sets at row " + std::to_string(i));
      if (t[i].ranks.size() != ref[i].ranks.size())
        throw DataError("aggregate: candidate counts differ at row " + std::to_string(i));
    }
  }
}

// Re-ranks by a per-candidate key; `ascending` selects the sort direction.
// Ties resolve to the lower candidate index.
template <class Key>
std::vector<std::size_t> rank_by(const std::vector<Key>& key, bool ascending) {
  std::vector<std::size_t> order(key.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ascending ? key[a] < key[b] : key[b] < key[a];
  });
  std::vector<std::size_t> ranks(key.size());
  for (std::size_t r = 0; r < order.size(); ++r) ranks[order[r]] = r + 1;
  return ranks;
}

// Keys are summed exactly so that equal means tie regardless of model order;
// dividing by K does not change the order and is skipped.
template <class Key, class Transform>
RankingTable aggregate(const std::vector<RankingTable>& tables, Transform f,
                       bool ascending) {
  check_aligned(tables);
  RankingTable out;
  out.reserve(tables.front().size());
  for (std::size_t i = 0; i < tables.front().size(); ++i) {
    const RankedTurn& ref = tables.front()[i];
    std::vector<Key> key(ref.ranks.size(), Key(0));
    for (const auto& t : tables)
      for (std::size_t j = 0; j < key.size(); ++j) key[j] += f(t[i].ranks[j]);
    RankedTurn row;
    row.dialog_id = ref.dialog_id;
    row.turn = ref.turn;
    row.gt = ref.gt;
    row.relevance = ref.relevance;
    row.ranks = rank_by(key, ascending);
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace detail

// Re-rank by ascending mean rank (1/K) sum_k r_k.
inline RankingTable aggregate_average(const std::vector<RankingTable>& tables) {
  return detail::aggregate<std::uint64_t>(tables, [](std::size_t r) { return std::uint64_t{r}; },
                                         true);
}

// Re-rank by descending mean reciprocal rank (1/K) sum_k 1/r_k.
inline RankingTable aggregate_reciprocal(const std::vector<RankingTable>& tables) {
  using boost::multiprecision::cpp_rational;
  return detail::aggregate<cpp_rational>(
      tables, [](std::size_t r) { return cpp_rational(1, static_cast<long long>(r)); }, false);
}

// -------------------------------------------------------------------- metrics

// DCG over the first K_rel predicted positions (K_rel = #candidates with
// relevance > 0), normalized by the ideal ordering. Zero when K_rel = 0.
inline double ndcg(const std::vector<std::size_t>& ranks, const std::vector<double>& relevance) {
  const std::size_t n = ranks.size();
  std::size_t k = 0;
  for (double r : relevance) k += r > 0.0 ? 1 : 0;
  if (k == 0) return 0.0;
  std::vector<double> by_rank(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) by_rank[ranks[j] - 1] = relevance[j];
  std::vector<double> ideal(relevance);
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double dcg = 0.0, idcg = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double discount = std::log2(static_cast<double>(i) + 2.0);
    dcg += by_rank[i] / discount;
    idcg += ideal[i] / discount;
  }
  return dcg / idcg;
}

struct Metrics {
  std::size_t turns = 0;
  double mrr = 0.0;
  double mean_rank = 0.0;
  std::map<std::size_t, double> recall;  // k -> R@k
  std::optional<double> ndcg;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

enum class NdcgMode { kIfAvailable, kRequired };

// NDCG is averaged over turns carrying relevance annotations.
inline Metrics compute_metrics(const RankingTable& table,
                               const std::vector<std::size_t>& ks = {1, 5, 10},
                               NdcgMode mode = NdcgMode::kIfAvailable) {
  if (table.empty()) throw PreconditionError("metrics: empty ranking table");
  Metrics m;
  m.turns = table.size();
  for (auto k : ks) m.recall[k] = 0.0;
  double ndcg_sum = 0.0;
  std::size_t ndcg_turns = 0;
  for (const auto& t : table) {
    validate_turn(t);
    const std::size_t r = t.ranks[t.gt];
    m.mrr += 1.0 / static_cast<double>(r);
    m.mean_rank += static_cast<double>(r);
    for (auto k : ks)
      if (r <= k) m.recall[k] += 1.0;
    if (t.relevance) {
      ndcg_sum += ndcg(t.ranks, *t.relevance);
      ++ndcg_turns;
    } else if (mode == NdcgMode::kRequired) {
      throw DataError("metrics: NDCG requested but dialog " + std::to_string(t.dialog_id) +
                      " turn " + std::to_string(t.turn) + " has no relevance scores");
    }
  }
  const double n = static_cast<double>(table.size());
  m.mrr /= n;
  m.mean_rank /= n;
  for (auto& [k, v] : m.recall) v /= n;
  if (ndcg_turns > 0) m.ndcg = ndcg_sum / static_cast<double>(ndcg_turns);
  return m;
}

inline nlohmann::json metrics_to_json(const Metrics& m) {
  nlohmann::json j;
  j["turns"] = m.turns;
  j["mrr"] = m.mrr;
  for (const auto& [k, v] : m.recall) j["r@" + std::to_string(k)] = v;
  j["mean_rank"] = m.mean_rank;
  if (m.ndcg) j["ndcg"] = *m.ndcg;
  else j["ndcg"] = nullptr;
  return j;
}

// ----------------------------------------------------------------- JSON Lines

inline nlohmann::json turn_to_json(const RankedTurn& t) {
  nlohmann::json j;
  j["dialog_id"] = t.dialog_id;
  j["turn"] = t.turn;
  j["ranks"] = t.ranks;
  if (t.scores) j["scores"] = *t.scores;
  j["gt"] = t.gt;
  if (t.relevance) j["relevance"] = *t.relevance;
  return j;
}

inline RankedTurn turn_from_json(const nlohmann::json& j) {
  RankedTurn t;
  try {
    t.dialog_id = j.at("dialog_id").get<std::int64_t>();
    t.turn = j.at("turn").get<std::size_t>();
    t.ranks = j.at("ranks").get<std::vector<std::size_t>>();
    t.gt = j.at("gt").get<std::size_t>();
    if (j.contains("scores") && !j["scores"].is_null())
      t.scores = j["scores"].get<std::vector<double>>();
    if (j.contains("relevance") && !j["relevance"].is_null())
      t.relevance = j["relevance"].get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("ranking table: ") + e.what());
  }
  validate_turn(t);
  return t;
}

inline void write_ranking_table(const std::string& path, const RankingTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& t : table) out << turn_to_json(t).dump() << '\n';
}

inline RankingTable read_ranking_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  RankingTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": malformed JSON at byte " +
                      std::to_string(e.byte));
    }
    table.push_back(turn_from_json(j));
  }
  return table;
}

}  // namespace redan
