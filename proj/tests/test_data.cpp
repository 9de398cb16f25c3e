#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "dpt/data.hpp"
#include "dpt/rouge.hpp"

using namespace dpt;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& content) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << content;
  return p;
}

}  // namespace

TEST(Vocab, ReservedIdsAndRoundTrip) {
  Vocab v;
  EXPECT_EQ(v.size(), std::size_t(kReservedTokens));
  EXPECT_EQ(v.token(kSeg), "<seg>");
  EXPECT_EQ(v.add("cat"), 5);
  EXPECT_EQ(v.add("cat"), 5);
  EXPECT_EQ(v.id("dog"), kUnk);
  EXPECT_EQ(v.encode("cat dog"), (std::vector<int>{5, kUnk}));
  EXPECT_EQ(v.decode({kBos, 5, kEos, kPad}), "cat");
  EXPECT_THROW(v.add("two words"), InputError);
  EXPECT_THROW(v.token(99), InputError);

  const auto path = std::filesystem::temp_directory_path() / "dpt_vocab_test.txt";
  v.add("ran");
  v.save(path.string());
  EXPECT_EQ(Vocab::load(path.string()), v);
  std::filesystem::remove(path);
}

TEST(Vocab, LoadRejectsBrokenFiles) {
  auto gap = temp_file("dpt_vocab_gap.txt", "<pad>\t0\n<unk>\t1\n<s>\t2\n</s>\t3\n<seg>\t4\ncat\t6\n");
  EXPECT_THROW(Vocab::load(gap.string()), ParseError);
  auto notab = temp_file("dpt_vocab_notab.txt", "<pad> 0\n");
  EXPECT_THROW(Vocab::load(notab.string()), ParseError);
  auto swapped = temp_file("dpt_vocab_swap.txt", "<unk>\t0\n<pad>\t1\n<s>\t2\n</s>\t3\n<seg>\t4\n");
  EXPECT_THROW(Vocab::load(swapped.string()), ParseError);
  EXPECT_THROW(Vocab::load("/nonexistent/vocab.txt"), InputError);
}

TEST(Synthetic, DeterministicForSeed) {
  SyntheticTaskSpec spec;
  EXPECT_EQ(generate_synthetic(spec, 50), generate_synthetic(spec, 50));
  auto other = spec;
  other.seed = 2;
  EXPECT_NE(generate_synthetic(spec, 50), generate_synthetic(other, 50));
}

TEST(Synthetic, StructureOfExamples) {
  for (int segs = 1; segs <= 3; ++segs) {
    SyntheticTaskSpec spec;
    spec.n_segments = segs;
    spec.segment_length = 5;
    const Vocab vocab = synthetic_vocab(spec);
    for (const auto& ex : generate_synthetic(spec, 100)) {
      EXPECT_NO_THROW(validate_example(ex, vocab.size()));
      ASSERT_EQ(ex.source.size(), spec.source_length());
      ASSERT_EQ(ex.segment_starts.size(), std::size_t(segs));
      ASSERT_EQ(ex.target.size(), std::size_t(segs));
      for (int s = 0; s < segs; ++s) {
        const std::size_t start = ex.segment_starts[std::size_t(s)];
        EXPECT_EQ(ex.source[start], kSeg);
        int salient = 0;
        for (std::size_t j = start + 1; j <= start + 5; ++j)
          if (is_salient(ex.source[j], spec)) {
            ++salient;
            EXPECT_EQ(ex.source[j], ex.target[std::size_t(s)]);
            EXPECT_EQ(vocab.token(ex.source[j])[0], 's');
          }
        EXPECT_EQ(salient, 1);
      }
    }
  }
}

TEST(Synthetic, OracleCopierScoresPerfectRouge) {
  SyntheticTaskSpec spec;
  const Vocab vocab = synthetic_vocab(spec);
  double total = 0.0;
  const auto corpus = generate_synthetic(spec, 200);
  for (const auto& ex : corpus)
    total += rouge(vocab.decode(oracle_salient_copy(ex, spec)), vocab.decode(ex.target)).rougeL.f1;
  EXPECT_DOUBLE_EQ(total / double(corpus.size()), 1.0);
}

TEST(Synthetic, VocabularyLimits) {
  SyntheticTaskSpec spec;
  EXPECT_THROW(generate_synthetic(spec, 10, 20), ConfigError);
  spec.n_segments = 4;
  EXPECT_THROW(generate_synthetic(spec, 10), ConfigError);
}

TEST(Subsample, CountsAreFloorOfFraction) {
  EXPECT_EQ(subsample_count(2000, 5), 100u);
  EXPECT_EQ(subsample_count(2000, 10), 200u);
  EXPECT_EQ(subsample_count(2000, 25), 500u);
  EXPECT_EQ(subsample_count(2000, 50), 1000u);
  EXPECT_EQ(subsample_count(33, 10), 3u);
  EXPECT_EQ(subsample_count(7, 100), 7u);
}

TEST(Subsample, DrawsDistinctExamplesInOrder) {
  Corpus corpus;
  for (int i = 0; i < 300; ++i) corpus.push_back({{i + kReservedTokens}, {0}, {i}});
  for (double k : {5.0, 10.0, 25.0, 50.0, 100.0}) {
    auto sub = subsample(corpus, k, 42);
    ASSERT_EQ(sub.size(), subsample_count(300, k));
    std::set<int> seen;
    int last = -1;
    for (const auto& ex : sub) {
      EXPECT_TRUE(seen.insert(ex.target[0]).second);
      EXPECT_GT(ex.target[0], last);
      last = ex.target[0];
    }
    EXPECT_EQ(sub, subsample(corpus, k, 42));
  }
  EXPECT_NE(subsample(corpus, 10, 1), subsample(corpus, 10, 2));
  EXPECT_THROW(subsample(corpus, 0.0, 1), ConfigError);
  EXPECT_THROW(subsample(corpus, 0.1, 1), ConfigError);
}

TEST(Jsonl, RoundTripThroughExport) {
  SyntheticTaskSpec spec;
  spec.n_segments = 3;
  Vocab vocab = synthetic_vocab(spec);
  const auto corpus = generate_synthetic(spec, 20);
  const auto path = std::filesystem::temp_directory_path() / "dpt_roundtrip.jsonl";
  export_jsonl(path.string(), corpus, vocab);
  Vocab reread = vocab;
  EXPECT_EQ(load_jsonl(path.string(), reread, false), corpus);
  std::filesystem::remove(path);
}

TEST(Jsonl, OffsetsMapToTokenStarts) {
  auto p = temp_file("dpt_offsets.jsonl",
                     "{\"source\": \"a b c d e\", \"target\": \"a\", \"segments\": [0, 4]}\n\n"
                     "{\"source\": \"x  y z\", \"target\": \"z\"}\n");
  Vocab v;
  auto corpus = load_jsonl(p.string(), v, true);
  ASSERT_EQ(corpus.size(), 2u);
  EXPECT_EQ(corpus[0].segment_starts, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(corpus[1].segment_starts, (std::vector<std::size_t>{0}));
  EXPECT_EQ(v.token(corpus[1].target[0]), "z");
}

TEST(Jsonl, MalformedLinesReportLocation) {
  Vocab v;
  auto bad_json = temp_file("dpt_bad1.jsonl", "{\"source\": \"a\", \"target\": \"b\"}\n{oops\n");
  try {
    load_jsonl(bad_json.string(), v, true);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  auto missing = temp_file("dpt_bad2.jsonl", "{\"source\": \"a\"}\n");
  EXPECT_THROW(load_jsonl(missing.string(), v, true), ParseError);
  auto disorder = temp_file("dpt_bad3.jsonl", "{\"source\": \"a b c\", \"target\": \"b\", \"segments\": [4, 2]}\n");
  EXPECT_THROW(load_jsonl(disorder.string(), v, true), ParseError);
  auto beyond = temp_file("dpt_bad4.jsonl", "{\"source\": \"a b\", \"target\": \"b\", \"segments\": [40]}\n");
  EXPECT_THROW(load_jsonl(beyond.string(), v, true), ParseError);
  auto empty = temp_file("dpt_bad5.jsonl", "{\"source\": \"  \", \"target\": \"b\"}\n");
  EXPECT_THROW(load_jsonl(empty.string(), v, true), ParseError);
  EXPECT_THROW(load_jsonl("/nonexistent.jsonl", v, true), InputError);
}

TEST(Jsonl, FrozenVocabMapsUnknownTokens) {
  auto p = temp_file("dpt_unk.jsonl", "{\"source\": \"novel words\", \"target\": \"here\"}\n");
  Vocab v;
  auto corpus = load_jsonl(p.string(), v, false);
  EXPECT_EQ(corpus[0].source, (std::vector<int>{kUnk, kUnk}));
  EXPECT_EQ(v.size(), std::size_t(kReservedTokens));
}

TEST(ValidateExample, RejectsBadExamples) {
  EXPECT_THROW(validate_example({{}, {0}, {}}, 10), InputError);
  EXPECT_THROW(validate_example({{5, 6}, {1}, {}}, 10), InputError);
  EXPECT_THROW(validate_example({{5, 6}, {0, 0}, {}}, 10), InputError);
  EXPECT_THROW(validate_example({{5, 60}, {0}, {}}, 10), InputError);
  EXPECT_NO_THROW(validate_example({{5, 6}, {0, 1}, {6}}, 10));
}
