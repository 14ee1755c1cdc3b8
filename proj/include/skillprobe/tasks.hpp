#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "skillprobe/errors.hpp"
#include "skillprobe/model.hpp"
#include "skillprobe/numerics.hpp"

namespace skillprobe {

// ---------------------------------------------------------------------------
// Vocabulary layout
// ---------------------------------------------------------------------------

enum class Family { polarity, inference, topic };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::polarity: return "polarity";
    case Family::inference: return "inference";
    case Family::topic: return "topic";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "polarity") return Family::polarity;
  if (s == "inference") return Family::inference;
  if (s == "topic") return Family::topic;
  throw ConfigError("unknown task family '" + s + "'");
}

inline std::size_t family_classes(Family f) {
  switch (f) {
    case Family::polarity: return 2;
    case Family::inference: return 3;
    case Family::topic: return 4;
  }
  return 0;
}

/// Partition of a synthetic vocabulary:
///   [0, 8)        reserved (pad, unk, mask, sep, ...)
///   [8, 32)       label words
///   [32, ...)     cue tokens, one block per (family, class)
///   rest          filler, split into two pools
struct VocabLayout {
  static constexpr int sep = 3;
  static constexpr int first_label_word = 8;
  static constexpr int first_cue = 32;
  static constexpr int negative = 8;
  static constexpr int positive = 9;
  static constexpr int neutral = 10;
  static constexpr int first_topic_word = 13;

  std::size_t vocab_size = 0;
  std::size_t cues_per_class = 0;

  explicit VocabLayout(std::size_t vocab) : vocab_size(vocab) {
    if (vocab < static_cast<std::size_t>(first_cue) + 15 * 4)
      throw ConfigError("vocabulary of " + std::to_string(vocab) +
                        " tokens is too small for the synthetic families (need >= 92)");
    cues_per_class = (vocab - first_cue) / 15;
  }

  static std::size_t family_offset(Family f) {
    switch (f) {
      case Family::polarity: return 0;
      case Family::inference: return 2;
      case Family::topic: return 5;
    }
    return 0;
  }
  /// Cue tokens of one class of a family.
  std::vector<int> cue_tokens(Family f, std::size_t cls) const {
    if (cls >= family_classes(f)) throw ContractError("class index outside family");
    const std::size_t block = family_offset(f) + cls;
    std::vector<int> out(cues_per_class);
    std::iota(out.begin(), out.end(), first_cue + static_cast<int>(block * cues_per_class));
    return out;
  }
  int first_filler() const { return first_cue + static_cast<int>(9 * cues_per_class); }
  /// Filler pool 0 or 1.
  std::vector<int> filler(int pool) const {
    const int lo = first_filler();
    const int mid = lo + (static_cast<int>(vocab_size) - lo) / 2;
    std::vector<int> out;
    for (int t = pool == 0 ? lo : mid; t < (pool == 0 ? mid : static_cast<int>(vocab_size)); ++t)
      out.push_back(t);
    return out;
  }
  bool is_cue(int t) const { return t >= first_cue && t < first_filler(); }

  /// Label words for a k-class task: Negative/Positive, Negative/Neutral/Positive,
  /// or one topic word per class.
  static std::vector<int> label_words(std::size_t k) {
    if (k == 2) return {negative, positive};
    if (k == 3) return {negative, neutral, positive};
    std::vector<int> out(k);
    std::iota(out.begin(), out.end(), first_topic_word);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Tasks and datasets
// ---------------------------------------------------------------------------

struct Sample {
  std::vector<int> tokens;
  int label = 0;
  bool operator==(const Sample&) const = default;
};

enum class Split { train, dev, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

/// Relabeling of a multi-class task into two classes. relabel[c] is 0 or 1,
/// or -1 to drop samples of class c.
struct BinarySubtask {
  std::string name;
  std::vector<int> relabel;
  bool operator==(const BinarySubtask&) const = default;
};

struct TaskSpec {
  std::string name;
  std::size_t num_classes = 2;
  std::vector<int> verbalizer;  // label -> label-word token
  std::string family;
  std::vector<BinarySubtask> decomposition;

  void validate() const {
    if (num_classes < 2) throw ConfigError(name + ": need at least two classes");
    if (verbalizer.size() != num_classes)
      throw ConfigError(name + ": verbalizer must map every label");
    if (std::set<int>(verbalizer.begin(), verbalizer.end()).size() != verbalizer.size())
      throw ConfigError(name + ": verbalizer is not injective");
    if ((num_classes > 2) != !decomposition.empty())
      throw ConfigError(name + ": decomposition must exist exactly for multi-class tasks");
  }
};

struct Dataset {
  std::size_t num_classes = 2;
  std::vector<Sample> train, dev, test;

  const std::vector<Sample>& split(Split s) const {
    switch (s) {
      case Split::train: return train;
      case Split::dev: return dev;
      case Split::test: return test;
    }
    return train;
  }

  void validate() const {
    for (Split s : {Split::train, Split::dev, Split::test}) {
      if (split(s).empty()) throw InputError(std::string("dataset split '") + split_name(s) + "' is empty");
      for (const Sample& x : split(s))
        if (x.label < 0 || static_cast<std::size_t>(x.label) >= num_classes)
          throw InputError("label " + std::to_string(x.label) + " outside " +
                           std::to_string(num_classes) + " classes");
    }
  }
};

/// The standard decomposition: 3 classes give (0 vs 2, middle class dropped)
/// and (1 vs rest); more classes give one-vs-rest per class.
inline std::vector<BinarySubtask> standard_decomposition(std::size_t k) {
  if (k < 3) return {};
  if (k == 3) return {{"0-vs-2", {0, -1, 1}}, {"1-vs-rest", {0, 1, 0}}};
  std::vector<BinarySubtask> out;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<int> r(k, 0);
    r[c] = 1;
    out.push_back({std::to_string(c) + "-vs-rest", r});
  }
  return out;
}

inline std::vector<Sample> relabel_samples(const std::vector<Sample>& in, const BinarySubtask& b) {
  std::vector<Sample> out;
  for (const Sample& s : in) {
    const int y = b.relabel.at(static_cast<std::size_t>(s.label));
    if (y >= 0) out.push_back({s.tokens, y});
  }
  return out;
}

/// Binary views of a multi-class task; tokens are never modified.
inline std::vector<std::pair<BinarySubtask, Dataset>> decompose(const TaskSpec& task,
                                                                const Dataset& data) {
  if (task.num_classes < 3)
    throw ContractError("decompose: task '" + task.name + "' is already binary");
  std::vector<std::pair<BinarySubtask, Dataset>> out;
  for (const BinarySubtask& b : task.decomposition) {
    Dataset d;
    d.num_classes = 2;
    d.train = relabel_samples(data.train, b);
    d.dev = relabel_samples(data.dev, b);
    d.test = relabel_samples(data.test, b);
    out.emplace_back(b, std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

/// Surface properties of a synthetic task. Two tasks of one family share cue
/// classes and differ only here.
struct SyntheticStyle {
  std::size_t len_min = 10;
  std::size_t len_max = 14;
  std::size_t dominant_min = 3;
  std::size_t dominant_max = 5;
  std::size_t minority_max = 2;
  int filler_pool = 0;
  double zipf = 0.0;           // 0 = uniform choice within a cue class
  double cue_fraction = 1.0;   // leading share of each cue class that is used
  bool separator = false;      // insert SEP mid-sequence (pair-style input)
  // Label-irrelevant cues: one random class of this family per sample.
  std::optional<Family> distractor;
  std::size_t distractor_min = 0;
  std::size_t distractor_max = 0;
};

struct SyntheticSpec {
  std::string name;
  Family family = Family::polarity;
  std::vector<std::size_t> classes;  // family classes used, in label order
  std::size_t size = 1000;
  double noise = 0.05;
  SyntheticStyle style;
};

namespace detail {

inline std::vector<int> used_cues(const VocabLayout& v, Family f, std::size_t cls,
                                  double fraction) {
  std::vector<int> all = v.cue_tokens(f, cls);
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(all.size())));
  all.resize(std::clamp<std::size_t>(n, 1, all.size()));
  return all;
}

inline int pick(const std::vector<int>& pool, double zipf, SeededRng& rng) {
  if (zipf <= 0.0) return pool[rng.below(pool.size())];
  double total = 0.0;
  for (std::size_t i = 0; i < pool.size(); ++i) total += std::pow(static_cast<double>(i + 1), -zipf);
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    u -= std::pow(static_cast<double>(i + 1), -zipf);
    if (u < 0.0) return pool[i];
  }
  return pool.back();
}

/// One sequence whose dominant cue class is `cls` (an index into `classes`).
inline std::vector<int> synth_tokens(const VocabLayout& v, Family f,
                                     const std::vector<std::size_t>& classes, std::size_t cls,
                                     const SyntheticStyle& st, SeededRng& rng,
                                     std::size_t* distractor_class = nullptr) {
  const std::size_t len = st.len_min + rng.below(st.len_max - st.len_min + 1);
  const std::size_t dom = st.dominant_min + rng.below(st.dominant_max - st.dominant_min + 1);
  std::vector<int> out;
  for (std::size_t i = 0; i < dom; ++i)
    out.push_back(pick(used_cues(v, f, classes[cls], st.cue_fraction), st.zipf, rng));
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (c == cls) continue;
    const std::size_t cap = std::min(st.minority_max, dom - 1);
    const std::size_t n = rng.below(cap + 1);
    for (std::size_t i = 0; i < n; ++i)
      out.push_back(pick(used_cues(v, f, classes[c], st.cue_fraction), st.zipf, rng));
  }
  if (st.distractor) {
    const std::size_t dc = rng.below(family_classes(*st.distractor));
    if (distractor_class) *distractor_class = dc;
    const std::size_t n = st.distractor_min + rng.below(st.distractor_max - st.distractor_min + 1);
    const std::vector<int> pool = v.cue_tokens(*st.distractor, dc);
    for (std::size_t i = 0; i < n; ++i) out.push_back(pick(pool, st.zipf, rng));
  }
  const std::vector<int> fill = v.filler(st.filler_pool);
  while (out.size() < len) out.push_back(fill[rng.below(fill.size())]);
  rng.shuffle(out);
  if (st.separator) out.insert(out.begin() + static_cast<std::ptrdiff_t>(out.size() / 2), VocabLayout::sep);
  return out;
}

}  // namespace detail

inline TaskSpec make_task_spec(const std::string& name, Family family, std::size_t num_classes) {
  TaskSpec t;
  t.name = name;
  t.num_classes = num_classes;
  t.verbalizer = VocabLayout::label_words(num_classes);
  t.family = family_name(family);
  t.decomposition = standard_decomposition(num_classes);
  return t;
}

/// Labels follow the dominant cue class, then flip with probability `noise`
/// to a uniformly chosen other class. Splits are 60/20/20.
inline std::pair<TaskSpec, Dataset> gen_synthetic_task(const SyntheticSpec& spec,
                                                       std::size_t vocab_size, SeededRng& rng) {
  const VocabLayout v(vocab_size);
  const std::size_t k = spec.classes.size();
  if (k < 2) throw ConfigError(spec.name + ": need at least two classes");
  for (std::size_t c : spec.classes)
    if (c >= family_classes(spec.family))
      throw ConfigError(spec.name + ": class " + std::to_string(c) + " not in family " +
                        family_name(spec.family));
  if (spec.size < 60) throw ConfigError(spec.name + ": size must be at least 60");
  if (spec.noise < 0.0 || spec.noise >= 1.0) throw ConfigError(spec.name + ": noise must be in [0, 1)");
  const SyntheticStyle& st = spec.style;
  if (st.len_min > st.len_max || st.dominant_min == 0 || st.dominant_min > st.dominant_max ||
      st.distractor_min > st.distractor_max ||
      (st.distractor && *st.distractor == spec.family) ||
      st.len_min < st.dominant_max + (k - 1) * st.minority_max + (st.distractor ? st.distractor_max : 0))
    throw ConfigError(spec.name + ": inconsistent length/count style");

  std::vector<Sample> all;
  all.reserve(spec.size);
  for (std::size_t i = 0; i < spec.size; ++i) {
    const std::size_t cls = i % k;  // balanced classes
    Sample s;
    s.tokens = detail::synth_tokens(v, spec.family, spec.classes, cls, st, rng);
    s.label = static_cast<int>(cls);
    if (rng.bernoulli(spec.noise)) {
      const std::size_t shift = 1 + rng.below(k - 1);
      s.label = static_cast<int>((cls + shift) % k);
    }
    all.push_back(std::move(s));
  }
  rng.shuffle(all);
  Dataset d;
  d.num_classes = k;
  const std::size_t n_train = spec.size * 6 / 10;
  const std::size_t n_dev = spec.size * 2 / 10;
  d.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.dev.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
               all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  d.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), all.end());
  d.validate();
  TaskSpec t = make_task_spec(spec.name, spec.family, k);
  return {t, d};
}

/// Convenience form: family, class count, size and noise with default style.
inline std::pair<TaskSpec, Dataset> gen_synthetic_task(Family family, std::size_t num_classes,
                                                       std::size_t size, std::size_t vocab_size,
                                                       SeededRng& rng, double noise) {
  if (num_classes > family_classes(family))
    throw ConfigError(std::string("family ") + family_name(family) + " has only " +
                      std::to_string(family_classes(family)) + " classes");
  SyntheticSpec spec;
  spec.name = std::string(family_name(family)) + "-" + std::to_string(num_classes);
  spec.family = family;
  spec.classes.resize(num_classes);
  std::iota(spec.classes.begin(), spec.classes.end(), 0);
  spec.size = size;
  spec.noise = noise;
  return gen_synthetic_task(spec, vocab_size, rng);
}

/// The bundled four-task suite: two polarity tasks with different surface
/// statistics, a binary inference task and a three-way inference task.
inline std::vector<SyntheticSpec> default_suite(std::size_t size = 1000, double noise = 0.05) {
  SyntheticStyle base;
  base.distractor = Family::topic;
  base.distractor_min = 2;
  base.distractor_max = 4;

  SyntheticSpec short_pol{"polarity-short", Family::polarity, {0, 1}, size, noise, base};
  short_pol.style.len_min = 12;
  short_pol.style.len_max = 16;

  SyntheticSpec long_pol{"polarity-long", Family::polarity, {0, 1}, size, noise, base};
  long_pol.style.len_min = 16;
  long_pol.style.len_max = 20;
  long_pol.style.dominant_min = 4;
  long_pol.style.dominant_max = 6;
  long_pol.style.minority_max = 3;
  long_pol.style.filler_pool = 1;
  long_pol.style.zipf = 0.8;
  long_pol.style.cue_fraction = 0.9375;

  SyntheticSpec pair{"inference-pair", Family::inference, {0, 2}, size, noise, base};
  pair.style.len_min = 14;
  pair.style.len_max = 18;
  pair.style.separator = true;

  SyntheticSpec three{"inference-3way", Family::inference, {0, 1, 2}, size, noise, base};
  three.style.len_min = 14;
  three.style.len_max = 18;
  three.style.separator = true;
  return {short_pol, long_pol, pair, three};
}

/// Share of label cue tokens two tasks have in common: |A and B| / |A or B|
/// over the cue tokens that decide each task's labels. Distractors are not
/// counted.
inline double cue_share(const SyntheticSpec& a, const SyntheticSpec& b, std::size_t vocab_size) {
  const VocabLayout v(vocab_size);
  auto cues = [&](const SyntheticSpec& s) {
    std::set<int> out;
    for (std::size_t c : s.classes)
      for (int t : detail::used_cues(v, s.family, c, s.style.cue_fraction)) out.insert(t);
    return out;
  };
  const auto A = cues(a), B = cues(b);
  std::size_t inter = 0;
  for (int t : A) inter += B.count(t);
  const std::size_t uni = A.size() + B.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// MLM corpus drawn from every family. Most sequences mix a second family's
/// cues in, as text mixes sentiment and topic. With probability
/// `label_word_prob` each family present also contributes the label word of
/// its dominant class at a random position, so the model learns which label
/// word goes with which cue class.
inline std::vector<std::vector<int>> gen_pretraining_corpus(std::size_t vocab_size,
                                                            std::size_t count, SeededRng& rng,
                                                            double label_word_prob = 1.0,
                                                            double mixed_prob = 0.7) {
  const VocabLayout v(vocab_size);
  std::vector<std::vector<int>> out;
  out.reserve(count);
  const Family families[] = {Family::polarity, Family::inference, Family::topic};
  for (std::size_t i = 0; i < count; ++i) {
    const Family f = families[rng.below(3)];
    const std::size_t k = family_classes(f);
    std::vector<std::size_t> classes(k);
    std::iota(classes.begin(), classes.end(), 0);
    SyntheticStyle st;
    st.len_min = 12;
    st.len_max = 20;
    st.minority_max = 2;
    st.filler_pool = static_cast<int>(rng.below(2));
    st.zipf = rng.bernoulli(0.5) ? 0.8 : 0.0;
    st.separator = f == Family::inference && rng.bernoulli(0.5);
    if (rng.bernoulli(mixed_prob)) {
      st.distractor = families[(static_cast<std::size_t>(f) + 1 + rng.below(2)) % 3];
      st.distractor_min = 3;
      st.distractor_max = 5;
    }
    const std::size_t cls = rng.below(k);
    std::size_t other = 0;
    std::vector<int> seq = detail::synth_tokens(v, f, classes, cls, st, rng, &other);
    std::vector<int> words;
    if (rng.bernoulli(label_word_prob)) words.push_back(VocabLayout::label_words(k)[cls]);
    if (st.distractor && rng.bernoulli(label_word_prob))
      words.push_back(VocabLayout::label_words(family_classes(*st.distractor))[other]);
    for (int word : words)
      seq.insert(seq.begin() + static_cast<std::ptrdiff_t>(rng.below(seq.size() + 1)), word);
    out.push_back(std::move(seq));
  }
  return out;
}

/// Every label word any synthetic task can use.
inline std::vector<int> all_label_words() {
  std::vector<int> out(VocabLayout::first_cue - VocabLayout::first_label_word);
  std::iota(out.begin(), out.end(), VocabLayout::first_label_word);
  return out;
}

// ---------------------------------------------------------------------------
// File ingestion
// ---------------------------------------------------------------------------

/// Token-per-line vocabulary; line number is the id.
inline std::unordered_map<std::string, int> load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  std::unordered_map<std::string, int> vocab;
  std::string line;
  int id = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    vocab.emplace(line, id++);
  }
  if (vocab.empty()) throw InputError("vocabulary " + path.string() + " is empty");
  return vocab;
}

/// JSONL records {"tokens": [...] | "text": "...", "label": int, "split"?}.
/// Lines without a split are ranked by a stable hash of their line index and
/// the ranking is cut 60/20/20.
inline Dataset load_jsonl(const std::filesystem::path& path,
                          const std::unordered_map<std::string, int>& vocab,
                          std::size_t num_classes = 0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  struct Row {
    Sample sample;
    int split;  // -1 = unassigned
    std::size_t line;
  };
  std::vector<Row> rows;
  std::string line;
  std::size_t lineno = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    auto fail = [&](const std::string& why) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + why);
    };
    if (!j.is_object()) fail("record is not an object");
    if (!j.contains("label") || !j["label"].is_number_integer()) fail("missing integer label");
    Row r{{}, -1, lineno};
    r.sample.label = j["label"].get<int>();
    if (r.sample.label < 0) fail("negative label");
    if (j.contains("tokens")) {
      if (!j["tokens"].is_array()) fail("tokens must be an array");
      for (const auto& t : j["tokens"]) {
        if (!t.is_number_integer() || t.get<long long>() < 0) fail("tokens must be non-negative integers");
        r.sample.tokens.push_back(t.get<int>());
      }
    } else if (j.contains("text")) {
      if (!j["text"].is_string()) fail("text must be a string");
      std::istringstream words(j["text"].get<std::string>());
      std::string w;
      while (words >> w) {
        const auto it = vocab.find(w);
        r.sample.tokens.push_back(it == vocab.end() ? tokens::unk : it->second);
      }
    } else {
      fail("record needs tokens or text");
    }
    if (j.contains("split")) {
      const std::string s = j["split"].get<std::string>();
      if (s == "train") r.split = 0;
      else if (s == "dev") r.split = 1;
      else if (s == "test") r.split = 2;
      else fail("unknown split '" + s + "'");
    }
    max_label = std::max(max_label, r.sample.label);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw InputError("dataset " + path.string() + " has no records");
  Dataset d;
  d.num_classes = num_classes ? num_classes : static_cast<std::size_t>(std::max(max_label + 1, 2));
  for (const Row& r : rows)
    if (static_cast<std::size_t>(r.sample.label) >= d.num_classes)
      throw InputError(path.string() + ":" + std::to_string(r.line) + ": label " +
                       std::to_string(r.sample.label) + " outside " +
                       std::to_string(d.num_classes) + " classes");

  std::vector<std::size_t> unassigned;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].split < 0) unassigned.push_back(i);
  std::stable_sort(unassigned.begin(), unassigned.end(), [&](std::size_t a, std::size_t b) {
    return SeededRng::mix(rows[a].line) < SeededRng::mix(rows[b].line);
  });
  const std::size_t n = unassigned.size();
  const std::size_t n_train = (n * 6 + 5) / 10;
  const std::size_t n_dev = (n * 2 + 5) / 10;
  for (std::size_t r = 0; r < n; ++r)
    rows[unassigned[r]].split = r < n_train ? 0 : (r < n_train + n_dev ? 1 : 2);
  for (const Row& r : rows) {
    auto& target = r.split == 0 ? d.train : (r.split == 1 ? d.dev : d.test);
    target.push_back(r.sample);
  }
  d.validate();
  return d;
}

}  // namespace skillprobe
