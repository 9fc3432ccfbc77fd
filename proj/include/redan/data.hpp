#pragma once

// Dialog JSON and RDNF feature ingestion, truncation, and the synthetic
// desk-scale corpus generator.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "redan/tensor.hpp"
#include "redan/vocab.hpp"

namespace redan {

struct TruncationLimits {
  std::size_t caption = 40;
  std::size_t question = 20;
  std::size_t answer = 20;

  static TruncationLimits paper() { return {40, 20, 20}; }
  static TruncationLimits desk() { return {10, 10, 10}; }
};

inline std::vector<std::string> truncate_tokens(std::vector<std::string> tokens,
                                                std::size_t limit) {
  if (tokens.size() > limit) tokens.resize(limit);
  return tokens;
}

// ------------------------------------------------------------ text-level data

struct RawTurn {
  std::string question;
  std::string answer;
  std::vector<std::string> options;
  std::size_t gt = 0;
  std::optional<std::vector<double>> relevance;
};

struct RawDialog {
  std::int64_t image_id = 0;
  std::string caption;
  std::vector<RawTurn> turns;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<RawDialog> parse_dialogs(const std::string& text,
                                            const std::string& source = "<memory>") {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(source + ": malformed JSON at byte " + std::to_string(e.byte));
  }
  std::vector<RawDialog> out;
  try {
    for (const auto& d : doc.at("dialogs")) {
      RawDialog rd;
      rd.image_id = d.at("image_id").get<std::int64_t>();
      rd.caption = d.at("caption").get<std::string>();
      for (const auto& t : d.at("dialog")) {
        RawTurn rt;
        rt.question = t.at("question").get<std::string>();
        rt.answer = t.at("answer").get<std::string>();
        rt.options = t.at("answer_options").get<std::vector<std::string>>();
        rt.gt = t.at("gt_index").get<std::size_t>();
        if (t.contains("relevance") && !t["relevance"].is_null())
          rt.relevance = t["relevance"].get<std::vector<double>>();
        rd.turns.push_back(std::move(rt));
      }
      out.push_back(std::move(rd));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(source + ": schema error: " + e.what());
  }
  return out;
}

inline std::vector<RawDialog> read_dialogs(const std::string& path) {
  return parse_dialogs(read_file(path), path);
}

inline nlohmann::json dialogs_to_json(const std::vector<RawDialog>& dialogs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : dialogs) {
    nlohmann::json jd;
    jd["image_id"] = d.image_id;
    jd["caption"] = d.caption;
    jd["dialog"] = nlohmann::json::array();
    for (const auto& t : d.turns) {
      nlohmann::json jt;
      jt["question"] = t.question;
      jt["answer"] = t.answer;
      jt["answer_options"] = t.options;
      jt["gt_index"] = t.gt;
      if (t.relevance) jt["relevance"] = *t.relevance;
      jd["dialog"].push_back(std::move(jt));
    }
    arr.push_back(std::move(jd));
  }
  return nlohmann::json{{"dialogs", std::move(arr)}};
}

// Truncated token streams used to build the vocabulary.
inline std::vector<std::vector<std::string>> corpus_tokens(
    const std::vector<RawDialog>& dialogs, const TruncationLimits& limits) {
  std::vector<std::vector<std::string>> corpus;
  for (const auto& d : dialogs) {
    corpus.push_back(truncate_tokens(tokenize(d.caption), limits.caption));
    for (const auto& t : d.turns) {
      corpus.push_back(truncate_tokens(tokenize(t.question), limits.question));
      corpus.push_back(truncate_tokens(tokenize(t.answer), limits.answer));
      for (const auto& o : t.options)
        corpus.push_back(truncate_tokens(tokenize(o), limits.answer));
    }
  }
  return corpus;
}

inline Vocabulary build_vocabulary(const std::vector<RawDialog>& dialogs,
                                   const TruncationLimits& limits, std::size_t min_count) {
  return Vocabulary::build(corpus_tokens(dialogs, limits), min_count);
}

// -------------------------------------------------------------- RDNF features
//
// "RDNF", u32 version = 1, u32 image_count; per image: u64 image_id, u32 M,
// u32 n_f, then M * n_f little-endian f32, region-major.

struct FeatureRecord {
  std::int64_t image_id = 0;
  std::size_t regions = 0;
  std::size_t dim = 0;
  std::vector<float> values;  // region-major: values[m * dim + f]

  // n_f x M matrix with one column per region.
  Tensor matrix() const {
    Tensor t({dim, regions}, 0.0);
    for (std::size_t m = 0; m < regions; ++m)
      for (std::size_t f = 0; f < dim; ++f) t.at(f, m) = values[m * dim + f];
    return t;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  std::uint64_t uint(int width) {
    if (pos_ + width > bytes_.size())
      throw DataError(source_ + ": truncated feature file at byte " + std::to_string(pos_));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }
  std::string raw(std::size_t n) {
    if (pos_ + n > bytes_.size())
      throw DataError(source_ + ": truncated feature file at byte " + std::to_string(pos_));
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::string encode_features(const std::vector<FeatureRecord>& records) {
  std::string out = "RDNF";
  detail::put_u32(out, kFeatureVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.values.size() != r.regions * r.dim)
      throw DataError("feature record " + std::to_string(r.image_id) + ": size mismatch");
    detail::put_u64(out, static_cast<std::uint64_t>(r.image_id));
    detail::put_u32(out, static_cast<std::uint32_t>(r.regions));
    detail::put_u32(out, static_cast<std::uint32_t>(r.dim));
    for (float f : r.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline std::vector<FeatureRecord> decode_features(const std::string& bytes,
                                                  const std::string& source = "<memory>") {
  detail::ByteReader rd(bytes, source);
  if (bytes.size() < 4 || rd.raw(4) != "RDNF")
    throw DataError(source + ": bad magic, not an RDNF feature file");
  const auto version = rd.uint(4);
  if (version != kFeatureVersion)
    throw DataError(source + ": unsupported RDNF version " + std::to_string(version));
  const auto count = rd.uint(4);
  std::vector<FeatureRecord> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    FeatureRecord r;
    r.image_id = static_cast<std::int64_t>(rd.uint(8));
    r.regions = rd.uint(4);
    r.dim = rd.uint(4);
    if (r.regions == 0 || r.dim == 0)
      throw DataError(source + ": image " + std::to_string(r.image_id) + " has no features");
    r.values.resize(r.regions * r.dim);
    for (auto& f : r.values) {
      f = std::bit_cast<float>(static_cast<std::uint32_t>(rd.uint(4)));
      if (!std::isfinite(f))
        throw DataError(source + ": non-finite feature in image " + std::to_string(r.image_id));
    }
    out.push_back(std::move(r));
  }
  if (!rd.done()) throw DataError(source + ": trailing bytes after last record");
  return out;
}

inline void write_binary(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<FeatureRecord> read_features(const std::string& path) {
  return decode_features(read_file(path), path);
}

// ------------------------------------------------------------- encoded dialogs

struct DialogTurn {
  std::string question_text;
  std::vector<std::size_t> question;
  std::vector<std::size_t> answer;
  std::vector<std::string> option_texts;
  std::vector<std::vector<std::size_t>> options;
  std::size_t gt = 0;
  std::optional<std::vector<double>> relevance;
};

struct DialogExample {
  std::int64_t image_id = 0;
  Tensor features;  // n_f x M
  std::string caption_text;
  std::vector<std::size_t> caption;
  std::vector<DialogTurn> turns;
};

using Dataset = std::vector<DialogExample>;

inline std::vector<std::size_t> encode_text(const Vocabulary& vocab, const std::string& text,
                                            std::size_t limit) {
  auto ids = vocab.encode(truncate_tokens(tokenize(text), limit));
  if (ids.empty()) ids.push_back(Vocabulary::kUnk);
  return ids;
}

inline Dataset encode_dataset(const std::vector<RawDialog>& dialogs,
                              const std::vector<FeatureRecord>& features,
                              const Vocabulary& vocab, const TruncationLimits& limits) {
  std::unordered_map<std::int64_t, const FeatureRecord*> by_id;
  for (const auto& f : features) by_id[f.image_id] = &f;

  Dataset out;
  out.reserve(dialogs.size());
  std::optional<std::size_t> n_candidates;
  for (const auto& d : dialogs) {
    auto it = by_id.find(d.image_id);
    if (it == by_id.end())
      throw DataError("missing image feature for image_id " + std::to_string(d.image_id));
    DialogExample ex;
    ex.image_id = d.image_id;
    ex.features = it->second->matrix();
    ex.caption_text = d.caption;
    ex.caption = encode_text(vocab, d.caption, limits.caption);
    if (d.turns.empty())
      throw DataError("dialog " + std::to_string(d.image_id) + " has no turns");
    for (const auto& t : d.turns) {
      DialogTurn dt;
      dt.question_text = t.question;
      dt.question = encode_text(vocab, t.question, limits.question);
      dt.answer = encode_text(vocab, t.answer, limits.answer);
      dt.option_texts = t.options;
      for (const auto& o : t.options) dt.options.push_back(encode_text(vocab, o, limits.answer));
      if (dt.options.empty())
        throw DataError("dialog " + std::to_string(d.image_id) + ": turn without candidates");
      if (n_candidates && *n_candidates != dt.options.size())
        throw DataError("dialog " + std::to_string(d.image_id) +
                        ": candidate count differs from the rest of the dataset");
      n_candidates = dt.options.size();
      if (t.gt >= dt.options.size())
        throw DataError("dialog " + std::to_string(d.image_id) + ": gt_index out of range");
      dt.gt = t.gt;
      if (t.relevance && t.relevance->size() != dt.options.size())
        throw DataError("dialog " + std::to_string(d.image_id) + ": relevance length != N");
      dt.relevance = t.relevance;
      ex.turns.push_back(std::move(dt));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// Streams examples in dialog-file order.
inline Dataset load_dataset(const std::string& dialog_path, const std::string& feature_path,
                            const Vocabulary& vocab,
                            const TruncationLimits& limits = TruncationLimits::paper()) {
  return encode_dataset(read_dialogs(dialog_path), read_features(feature_path), vocab, limits);
}

// ------------------------------------------------------------------ synthetic
//
// Each image has M regions of distinct object types. A region's feature is a
// one-hot type block (M dims) followed by a one-hot color block
// (n_f - M dims), plus Gaussian noise. The caption names a focus object.
// Questions either name an object explicitly or say "it", meaning the
// caption's focus; the answer is that region's color. Candidates are the
// true color plus N-1 uniformly drawn distinct other colors.

struct SyntheticSpec {
  std::size_t train_dialogs = 20;
  std::size_t val_dialogs = 10;
  std::size_t turns = 10;
  std::size_t candidates = 5;
  std::size_t regions = 4;
  std::size_t feature_dim = 12;
  double noise = 0.1;
  double anaphoric_rate = 0.5;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& synthetic_objects() {
  static const std::vector<std::string> w{"cube", "ball", "cone", "ring",
                                          "disk", "star", "box",  "cup"};
  return w;
}

inline const std::vector<std::string>& synthetic_colors() {
  static const std::vector<std::string> w{"red",   "blue",  "green", "yellow",
                                          "purple", "orange", "white", "black",
                                          "brown", "pink",  "gray",  "gold"};
  return w;
}

struct SyntheticCorpus {
  std::vector<RawDialog> train;
  std::vector<RawDialog> val;
  std::vector<FeatureRecord> features;
};

struct SyntheticLayout {
  std::size_t regions;
  std::size_t colors;
};

inline SyntheticLayout validate_synthetic(const SyntheticSpec& s) {
  if (s.train_dialogs < 1 || s.turns < 1 || s.candidates < 1 || s.regions < 1)
    throw PreconditionError("synthetic: sizes must be >= 1");
  if (s.regions > synthetic_objects().size())
    throw PreconditionError("synthetic: at most " + std::to_string(synthetic_objects().size()) +
                            " regions supported");
  if (s.feature_dim <= s.regions)
    throw PreconditionError("synthetic: feature_dim must exceed the region count");
  const std::size_t colors = s.feature_dim - s.regions;
  if (colors > synthetic_colors().size())
    throw PreconditionError("synthetic: feature_dim leaves more colors than available");
  if (colors < s.candidates)
    throw PreconditionError("synthetic: need at least as many colors as candidates");
  return {s.regions, colors};
}

inline SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  const auto layout = validate_synthetic(spec);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const auto& objects = synthetic_objects();
  const auto& colors = synthetic_colors();
  const std::array<const char*, 3> captions{"there is a {} in this picture",
                                            "a photo showing a {}",
                                            "we talk about the {} here"};
  const std::array<const char*, 3> anaphoric{"what color is it ?", "what is its color ?",
                                             "which color does it have ?"};
  const std::array<const char*, 2> explicit_q{"what color is the {} ?",
                                              "what is the color of the {} ?"};
  auto fill = [](const char* tmpl, const std::string& word) {
    std::string s(tmpl);
    auto pos = s.find("{}");
    if (pos != std::string::npos) s.replace(pos, 2, word);
    return s;
  };
  auto pick = [&](std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  };

  SyntheticCorpus corpus;
  const std::size_t total = spec.train_dialogs + spec.val_dialogs;
  for (std::size_t d = 0; d < total; ++d) {
    // Region m holds object type perm[m] with color region_color[m].
    std::vector<std::size_t> perm(layout.regions);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::size_t> region_color(layout.regions);
    for (auto& c : region_color) c = pick(layout.colors);

    FeatureRecord rec;
    rec.image_id = static_cast<std::int64_t>(d + 1);
    rec.regions = layout.regions;
    rec.dim = spec.feature_dim;
    rec.values.resize(rec.regions * rec.dim);
    for (std::size_t m = 0; m < layout.regions; ++m)
      for (std::size_t f = 0; f < spec.feature_dim; ++f) {
        double base = (f == perm[m] || f == layout.regions + region_color[m]) ? 1.0 : 0.0;
        rec.values[m * rec.dim + f] = static_cast<float>(base + noise(rng));
      }

    const std::size_t focus_region = pick(layout.regions);
    const std::size_t focus_type = perm[focus_region];
    RawDialog dialog;
    dialog.image_id = rec.image_id;
    dialog.caption = fill(captions[pick(captions.size())], objects[focus_type]);

    for (std::size_t t = 0; t < spec.turns; ++t) {
      std::size_t region = focus_region;
      RawTurn turn;
      if (layout.regions == 1 || coin(rng) < spec.anaphoric_rate) {
        turn.question = anaphoric[pick(anaphoric.size())];
      } else {
        region = (focus_region + 1 + pick(layout.regions - 1)) % layout.regions;
        turn.question = fill(explicit_q[pick(explicit_q.size())], objects[perm[region]]);
      }
      const std::size_t answer_color = region_color[region];
      turn.answer = colors[answer_color];

      std::vector<std::size_t> others;
      for (std::size_t c = 0; c < layout.colors; ++c)
        if (c != answer_color) others.push_back(c);
      std::shuffle(others.begin(), others.end(), rng);
      std::vector<std::size_t> option_colors(others.begin(),
                                             others.begin() + (spec.candidates - 1));
      turn.gt = pick(spec.candidates);
      option_colors.insert(option_colors.begin() + static_cast<std::ptrdiff_t>(turn.gt),
                           answer_color);

      std::vector<double> relevance;
      for (std::size_t c : option_colors) {
        turn.options.push_back(colors[c]);
        bool elsewhere = false;
        for (std::size_t m = 0; m < layout.regions; ++m)
          elsewhere = elsewhere || (m != region && region_color[m] == c);
        relevance.push_back(c == answer_color ? 1.0 : elsewhere ? 0.5 : 0.0);
      }
      turn.relevance = std::move(relevance);
      dialog.turns.push_back(std::move(turn));
    }
    corpus.features.push_back(std::move(rec));
    (d < spec.train_dialogs ? corpus.train : corpus.val).push_back(std::move(dialog));
  }
  return corpus;
}

struct DataPaths {
  std::string train_dialogs;
  std::string val_dialogs;
  std::string features;

  static DataPaths in(const std::string& dir) {
    namespace fs = std::filesystem;
    return {(fs::path(dir) / "dialogs_train.json").string(),
            (fs::path(dir) / "dialogs_val.json").string(),
            (fs::path(dir) / "features.rdnf").string()};
  }
};

inline DataPaths write_synthetic(const std::string& dir, const SyntheticSpec& spec) {
  std::filesystem::create_directories(dir);
  auto corpus = generate_synthetic(spec);
  auto paths = DataPaths::in(dir);
  write_binary(paths.train_dialogs, dialogs_to_json(corpus.train).dump(1) + "\n");
  write_binary(paths.val_dialogs, dialogs_to_json(corpus.val).dump(1) + "\n");
  write_binary(paths.features, encode_features(corpus.features));
  return paths;
}

}  // namespace redan
