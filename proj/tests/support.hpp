#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "redan/autodiff.hpp"
#include "redan/data.hpp"
#include "redan/encoders.hpp"

namespace redan::testing {

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c,
                            double lo = -1.0, double hi = 1.0, bool grad = true) {
  Tensor t({r, c}, 0.0, grad);
  t.fill_uniform(rng, lo, hi);
  return t;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

inline std::vector<double> values(Var v) { return {v.value().begin(), v.value().end()}; }

inline double row_sum(Var v) {
  double s = 0.0;
  for (double x : v.value()) s += x;
  return s;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Column j of a (rows x cols) row-major buffer.
inline std::vector<double> column(const Tensor& t, std::size_t j) {
  std::vector<double> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) out[i] = t.at(i, j);
  return out;
}

// y = W x (+ b) on plain vectors.
inline std::vector<double> matvec(const Tensor& w, const std::vector<double>& x) {
  std::vector<double> y(w.rows(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) y[i] += w.at(i, j) * x[j];
  return y;
}

inline std::vector<double> plus(std::vector<double> a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

inline std::vector<double> as_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Numerically stable softmax over a plain vector.
inline std::vector<double> softmax(const std::vector<double>& x) {
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> e(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += e[i] = std::exp(x[i] - m);
  for (double& v : e) v /= z;
  return e;
}

// Plain-vector LSTM cell, gate order i, f, g, o.
struct OracleState {
  std::vector<double> h, c;
};

inline OracleState oracle_step(LstmCell& cell, const std::vector<double>& x,
                               const OracleState& prev) {
  const std::size_t n = cell.hidden();
  auto pre = plus(plus(matvec(cell.w_x(), x), matvec(cell.w_h(), prev.h)),
                  std::vector<double>(cell.bias().data().begin(), cell.bias().data().end()));
  OracleState s{std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t k = 0; k < n; ++k) {
    const double i = sigmoid(pre[k]);
    const double f = sigmoid(pre[n + k]);
    const double g = std::tanh(pre[2 * n + k]);
    const double o = sigmoid(pre[3 * n + k]);
    s.c[k] = f * prev.c[k] + i * g;
    s.h[k] = o * std::tanh(s.c[k]);
  }
  return s;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path = std::filesystem::temp_directory_path() /
           ("redan_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// Small encoded synthetic corpus shared by model-level tests.
struct SyntheticFixture {
  SyntheticCorpus corpus;
  Vocabulary vocab;
  Dataset train;
  Dataset val;

  explicit SyntheticFixture(SyntheticSpec spec,
                            TruncationLimits limits = TruncationLimits::desk())
      : corpus(generate_synthetic(spec)) {
    vocab = build_vocabulary(corpus.train, limits, 1);
    train = encode_dataset(corpus.train, corpus.features, vocab, limits);
    val = encode_dataset(corpus.val, corpus.features, vocab, limits);
  }
};

inline SyntheticSpec small_spec(std::size_t train, std::size_t val, std::size_t turns,
                                std::uint64_t seed) {
  SyntheticSpec s;
  s.train_dialogs = train;
  s.val_dialogs = val;
  s.turns = turns;
  s.seed = seed;
  return s;
}

}  // namespace redan::testing
