#pragma once

// Corpora: vocabulary, JSON-lines ingestion and export, the synthetic
// salient-token task, and low-resource subsampling.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpt/errors.hpp"
#include "json.hpp"

namespace dpt {

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kBos = 2;
inline constexpr int kEos = 3;
inline constexpr int kSeg = 4;
inline constexpr int kReservedTokens = 5;

// Bijective token <-> id map. Ids 0-4 are reserved for PAD, UNK, BOS, EOS
// and the segment marker, in that order.
class Vocab {
 public:
  Vocab() {
    for (const char* t : {"<pad>", "<unk>", "<s>", "</s>", "<seg>"}) add(t);
  }

  int add(const std::string& token) {
    if (token.empty() || token.find_first_of(" \t\n\r") != std::string::npos)
      throw InputError("vocab tokens must be non-empty and free of whitespace");
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    index_.emplace(token, id);
    tokens_.push_back(token);
    return id;
  }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw InputError("token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream is(text);
    for (std::string tok; is >> tok;) out.push_back(id(tok));
    return out;
  }

  // Space-joined tokens; PAD, BOS and EOS are dropped.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
      if (i == kPad || i == kBos || i == kEos) continue;
      if (!out.empty()) out += ' ';
      out += token(i);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write vocab file " + path);
    for (std::size_t i = 0; i < tokens_.size(); ++i) os << tokens_[i] << '\t' << i << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open vocab file " + path);
    Vocab v;
    std::string line;
    std::size_t lineno = 0;
    std::vector<std::pair<int, std::string>> entries;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw ParseError("vocab line " + std::to_string(lineno) + ": expected token<TAB>id");
      try {
        entries.emplace_back(std::stoi(line.substr(tab + 1)), line.substr(0, tab));
      } catch (const std::exception&) {
        throw ParseError("vocab line " + std::to_string(lineno) + ": bad id");
      }
    }
    std::sort(entries.begin(), entries.end());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].first != static_cast<int>(i)) throw ParseError("vocab ids are not contiguous from 0");
      if (i < kReservedTokens) {
        if (entries[i].second != v.tokens_[i]) throw ParseError("vocab reserved token mismatch at id " + std::to_string(i));
        continue;
      }
      if (v.add(entries[i].second) != static_cast<int>(i)) throw ParseError("duplicate vocab token " + entries[i].second);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct Example {
  std::vector<int> source;
  // First token of every segment; starts at 0, strictly increasing.
  std::vector<std::size_t> segment_starts;
  std::vector<int> target;

  bool operator==(const Example&) const = default;
};

using Corpus = std::vector<Example>;

struct DataSplits {
  Corpus train, validation, test;
};

inline void validate_example(const Example& ex, std::size_t vocab_size) {
  if (ex.source.empty()) throw InputError("example has an empty source");
  if (ex.segment_starts.empty() || ex.segment_starts.front() != 0) throw InputError("segments must start at token 0");
  for (std::size_t i = 1; i < ex.segment_starts.size(); ++i)
    if (ex.segment_starts[i] <= ex.segment_starts[i - 1]) throw InputError("segment starts must be strictly increasing");
  if (ex.segment_starts.back() >= ex.source.size()) throw InputError("segment start beyond the source");
  for (const auto* seq : {&ex.source, &ex.target})
    for (int id : *seq)
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) throw InputError("token id outside the vocabulary");
}

// Maps character offsets of segment starts onto token indices of the
// whitespace tokenization of `text`.
inline std::vector<std::size_t> char_offsets_to_token_starts(const std::string& text, const std::vector<std::size_t>& offsets,
                                                             std::size_t line) {
  std::vector<std::size_t> token_chars;
  for (std::size_t i = 0; i < text.size(); ++i)
    if (!std::isspace(static_cast<unsigned char>(text[i])) && (i == 0 || std::isspace(static_cast<unsigned char>(text[i - 1]))))
      token_chars.push_back(i);
  std::vector<std::size_t> starts{0};
  for (std::size_t off : offsets) {
    if (off > text.size()) throw ParseError("line " + std::to_string(line) + ": segment offset beyond source text");
    const auto it = std::lower_bound(token_chars.begin(), token_chars.end(), off);
    const auto idx = static_cast<std::size_t>(it - token_chars.begin());
    if (idx >= token_chars.size()) throw ParseError("line " + std::to_string(line) + ": empty trailing segment");
    if (idx == 0) continue;
    if (idx <= starts.back()) throw ParseError("line " + std::to_string(line) + ": segment offsets out of order or empty segment");
    starts.push_back(idx);
  }
  return starts;
}

// Reads {"source": str, "target": str, "segments": [char offsets]} lines.
// With `extend_vocab` unseen tokens are added; otherwise they map to UNK.
inline Corpus load_jsonl(const std::string& path, Vocab& vocab, bool extend_vocab) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open corpus " + path);
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  auto map_tokens = [&](const std::string& text) {
    std::vector<int> ids;
    std::istringstream ts(text);
    for (std::string tok; ts >> tok;) ids.push_back(extend_vocab ? vocab.add(tok) : vocab.id(tok));
    return ids;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("source") || !j.contains("target") || !j["source"].is_string() ||
        !j["target"].is_string())
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected string fields 'source' and 'target'");
    Example ex;
    const std::string src = j["source"].get<std::string>();
    ex.source = map_tokens(src);
    ex.target = map_tokens(j["target"].get<std::string>());
    if (ex.source.empty()) throw ParseError(path + ":" + std::to_string(lineno) + ": empty source");
    std::vector<std::size_t> offsets;
    if (j.contains("segments")) {
      if (!j["segments"].is_array()) throw ParseError(path + ":" + std::to_string(lineno) + ": 'segments' must be a list");
      for (const auto& o : j["segments"]) {
        if (!o.is_number_unsigned() && !(o.is_number_integer() && o.get<long long>() >= 0))
          throw ParseError(path + ":" + std::to_string(lineno) + ": segment offsets must be non-negative integers");
        offsets.push_back(o.get<std::size_t>());
      }
    }
    ex.segment_starts = char_offsets_to_token_starts(src, offsets, lineno);
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

inline void export_jsonl(const std::string& path, const Corpus& corpus, const Vocab& vocab) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write corpus " + path);
  for (const auto& ex : corpus) {
    std::string src;
    std::vector<std::size_t> offsets;
    for (std::size_t i = 0; i < ex.source.size(); ++i) {
      if (i > 0) src += ' ';
      if (std::binary_search(ex.segment_starts.begin(), ex.segment_starts.end(), i)) offsets.push_back(src.size());
      src += vocab.token(ex.source[i]);
    }
    std::string tgt;
    for (std::size_t i = 0; i < ex.target.size(); ++i) tgt += (i ? " " : "") + vocab.token(ex.target[i]);
    nlohmann::json j = {{"source", src}, {"target", tgt}, {"segments", offsets}};
    os << j.dump() << '\n';
  }
}

// Each segment is a <seg> marker followed by segment_length tokens: one
// salient token ("s*") at a random position among distractors ("d*"). The
// target lists the salient tokens in segment order.
struct SyntheticTaskSpec {
  int n_segments = 2;
  int segment_length = 4;
  int distractor_vocab = 40;
  int salient_vocab = 16;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_segments < 1 || n_segments > 3) throw ConfigError("synthetic task: n_segments must be 1, 2 or 3");
    if (segment_length < 1) throw ConfigError("synthetic task: segment_length must be >= 1");
    if (salient_vocab < 1) throw ConfigError("synthetic task: salient_vocab must be >= 1");
    if (distractor_vocab < 1 && segment_length > 1) throw ConfigError("synthetic task: distractors needed for segments longer than 1");
    if (distractor_vocab < 0) throw ConfigError("synthetic task: distractor_vocab must be >= 0");
    if (static_cast<long long>(distractor_vocab) + salient_vocab + kReservedTokens > 1'000'000)
      throw ConfigError("synthetic task: vocabulary overflow");
  }

  std::size_t source_length() const { return static_cast<std::size_t>(n_segments * (segment_length + 1)); }
};

inline std::string salient_token(int i) { return "s" + std::to_string(i); }
inline std::string distractor_token(int i) { return "d" + std::to_string(i); }

// Task cues used only by backbone pretraining; they follow the s* tokens.
enum class PretrainTask { Copy, Extract, First };
inline constexpr PretrainTask kPretrainTasks[] = {PretrainTask::Copy, PretrainTask::Extract, PretrainTask::First};

inline std::string task_cue_token(PretrainTask t) {
  switch (t) {
    case PretrainTask::Copy: return "<copy>";
    case PretrainTask::Extract: return "<extract>";
    case PretrainTask::First: return "<first>";
  }
  return "<copy>";
}

inline Vocab synthetic_vocab(const SyntheticTaskSpec& spec) {
  spec.validate();
  Vocab v;
  for (int i = 0; i < spec.distractor_vocab; ++i) v.add(distractor_token(i));
  for (int i = 0; i < spec.salient_vocab; ++i) v.add(salient_token(i));
  for (auto t : kPretrainTasks) v.add(task_cue_token(t));
  return v;
}

inline bool is_salient(int id, const SyntheticTaskSpec& spec) {
  const int first = kReservedTokens + spec.distractor_vocab;
  return id >= first && id < first + spec.salient_vocab;
}

inline Corpus generate_synthetic(const SyntheticTaskSpec& spec, std::size_t n_examples, std::size_t max_vocab = 0) {
  spec.validate();
  const std::size_t vocab_size = synthetic_vocab(spec).size();
  if (max_vocab > 0 && vocab_size > max_vocab)
    throw ConfigError("synthetic task needs " + std::to_string(vocab_size) + " tokens, model vocabulary holds " +
                      std::to_string(max_vocab));
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> pick_distractor(0, std::max(0, spec.distractor_vocab - 1));
  std::uniform_int_distribution<int> pick_salient(0, spec.salient_vocab - 1);
  std::uniform_int_distribution<int> pick_slot(0, spec.segment_length - 1);
  const int salient_base = kReservedTokens + spec.distractor_vocab;
  Corpus out;
  out.reserve(n_examples);
  for (std::size_t n = 0; n < n_examples; ++n) {
    Example ex;
    for (int s = 0; s < spec.n_segments; ++s) {
      ex.segment_starts.push_back(ex.source.size());
      ex.source.push_back(kSeg);
      const int slot = pick_slot(rng);
      for (int j = 0; j < spec.segment_length; ++j) {
        if (j == slot) {
          const int tok = salient_base + pick_salient(rng);
          ex.source.push_back(tok);
          ex.target.push_back(tok);
        } else {
          ex.source.push_back(kReservedTokens + pick_distractor(rng));
        }
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// Construction oracle: reads the salient token of every segment.
inline std::vector<int> oracle_salient_copy(const Example& ex, const SyntheticTaskSpec& spec) {
  std::vector<int> out;
  for (int id : ex.source)
    if (is_salient(id, spec)) out.push_back(id);
  return out;
}

// Multi-task corpus over varied segment counts and lengths. Cued sources
// start with a task token; targets are the whole source without markers
// (copy), the salient tokens (extract) or the first token of every segment
// (first). A further n_per_task sources carry no cue and cycle through the
// three targets, so an un-cued input is ambiguous between the tasks.
inline Corpus pretraining_corpus(const SyntheticTaskSpec& spec, std::size_t n_per_task, std::uint64_t seed) {
  const Vocab vocab = synthetic_vocab(spec);
  std::vector<SyntheticTaskSpec> shapes;
  for (int segs = 1; segs <= 3; ++segs)
    for (int len = std::max(1, spec.segment_length - 1); len <= spec.segment_length + 1; ++len) {
      SyntheticTaskSpec s = spec;
      s.n_segments = segs;
      s.segment_length = len;
      if (len > 1 && s.distractor_vocab < 1) continue;
      shapes.push_back(s);
    }
  auto make = [&](PretrainTask task, bool cued, std::size_t i, std::uint64_t stream) {
    SyntheticTaskSpec s = shapes[i % shapes.size()];
    s.seed = seed + 0x9E3779B97F4A7C15ULL * stream;
    Example ex = generate_synthetic(s, 1).front();
    std::vector<int> target;
    if (task == PretrainTask::Copy) {
      for (int t : ex.source)
        if (t != kSeg) target.push_back(t);
    } else if (task == PretrainTask::Extract) {
      target = oracle_salient_copy(ex, s);
    } else {
      for (std::size_t st : ex.segment_starts) target.push_back(ex.source[st + 1]);
    }
    if (cued) {
      ex.source.insert(ex.source.begin(), vocab.id(task_cue_token(task)));
      for (auto& st : ex.segment_starts) ++st;
      ex.segment_starts.insert(ex.segment_starts.begin(), 0);
    }
    ex.target = std::move(target);
    return ex;
  };
  Corpus out;
  std::uint64_t stream = 0;
  for (auto task : kPretrainTasks)
    for (std::size_t i = 0; i < n_per_task; ++i) out.push_back(make(task, true, i, ++stream));
  for (std::size_t i = 0; i < n_per_task; ++i) out.push_back(make(kPretrainTasks[i % 3], false, i / 3, ++stream));
  std::mt19937_64 rng(seed);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

inline std::size_t subsample_count(std::size_t n, double k_percent) {
  return static_cast<std::size_t>(std::floor(k_percent * static_cast<double>(n) / 100.0 + 1e-9));
}

// floor(k% * N) examples drawn without replacement, kept in corpus order.
inline Corpus subsample(const Corpus& corpus, double k_percent, std::uint64_t seed) {
  if (!(k_percent > 0.0 && k_percent <= 100.0)) throw ConfigError("subsample: k must lie in (0, 100]");
  const std::size_t m = subsample_count(corpus.size(), k_percent);
  if (m == 0) throw ConfigError("subsample: " + std::to_string(k_percent) + "% of " + std::to_string(corpus.size()) +
                                " examples is empty");
  std::vector<std::size_t> idx(corpus.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  Corpus out;
  out.reserve(m);
  for (std::size_t i : idx) out.push_back(corpus[i]);
  return out;
}

}  // namespace dpt
