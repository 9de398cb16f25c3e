#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dpt/trainer.hpp"

using namespace dpt;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.model = {2, 2, 2, 16, 32, 0, 64};
  c.n_train = 30;
  c.n_val = 8;
  c.n_test = 8;
  c.epochs = 2;
  c.beam = 1;
  c.seeds = {3};
  c.lr = 1e-2;
  c.prefix_length = 4;
  c.pretrain_epochs = 0;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dpt_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Config, IniRoundTrip) {
  TrainConfig c = small_config();
  c.design = AttentionDesign::HierBlockSoftSA;
  c.top_p = 0.8;
  c.tau_soft = 0.1;
  c.seeds = {1, 2, 99};
  c.softsa_variant = SoftVariant::CellBernoulli;
  c.renormalize_trunc = true;
  std::istringstream is(c.to_ini());
  const TrainConfig back = TrainConfig::from_ini(is);
  EXPECT_EQ(back.to_ini(), c.to_ini());
  EXPECT_EQ(back.get("design"), c.get("design"));
  EXPECT_EQ(back.top_p, 0.8);
  EXPECT_EQ(back.seeds, (std::vector<std::uint64_t>{1, 2, 99}));
}

TEST(Config, CommentsSectionsAndBase) {
  std::istringstream is("# header\n[run]\nepochs = 7  ; trailing\n\n  design=truncsa\n");
  TrainConfig base;
  base.beam = 3;
  const TrainConfig c = TrainConfig::from_ini(is, base);
  EXPECT_EQ(c.epochs, 7);
  EXPECT_EQ(c.design, AttentionDesign::TruncSA);
  EXPECT_EQ(c.beam, 3);
}

TEST(Config, RejectsBadInput) {
  TrainConfig c;
  EXPECT_THROW(c.set("nope", "1"), ConfigError);
  EXPECT_THROW(c.set("epochs", "seven"), ConfigError);
  EXPECT_THROW(c.set("design", "sparse"), ConfigError);
  std::istringstream no_eq("epochs 3\n");
  EXPECT_THROW(TrainConfig::from_ini(no_eq), ConfigError);
  EXPECT_THROW(TrainConfig::load("/nonexistent/dpt.ini"), ConfigError);

  auto bad = [](auto mutate) {
    TrainConfig t = small_config();
    mutate(t);
    EXPECT_THROW(t.validate(), ConfigError);
  };
  bad([](TrainConfig& t) { t.top_p = 0.0; });
  bad([](TrainConfig& t) { t.tau_soft = 0.0; });
  bad([](TrainConfig& t) { t.seeds.clear(); });
  bad([](TrainConfig& t) { t.enc_segments = 0; });
  bad([](TrainConfig& t) { t.lower_band = 5; });
  bad([](TrainConfig& t) {
    t.design = AttentionDesign::HierBlock;
    t.enc_segments = 3;
    t.prefix_length = 2;
  });
  bad([](TrainConfig& t) { t.data = DataSource::Jsonl; });
  EXPECT_NO_THROW(small_config().validate());
}

TEST(Splits, HeldOutSourcesNeverAppearInTraining) {
  SyntheticTaskSpec spec;
  spec.n_segments = 1;
  spec.segment_length = 2;
  spec.distractor_vocab = 4;
  spec.salient_vocab = 4;  // only 32 distinct sources, forcing redraws
  const DataSplits d = make_synthetic_splits(spec, 12, 6, 6);
  std::set<std::vector<int>> train;
  for (const auto& ex : d.train) train.insert(ex.source);
  std::set<std::vector<int>> val;
  for (const auto& ex : d.validation) {
    EXPECT_FALSE(train.count(ex.source));
    val.insert(ex.source);
  }
  for (const auto& ex : d.test) {
    EXPECT_FALSE(train.count(ex.source));
    EXPECT_FALSE(val.count(ex.source));
  }
  EXPECT_EQ(d.validation.size(), 6u);
  EXPECT_EQ(d.test.size(), 6u);
}

TEST(PretrainingCorpus, CuesAndTargets) {
  SyntheticTaskSpec spec;
  const Vocab vocab = synthetic_vocab(spec);
  const std::size_t n = 30;
  const Corpus corpus = pretraining_corpus(spec, n, 5);
  ASSERT_EQ(corpus.size(), 4 * n);
  EXPECT_EQ(corpus, pretraining_corpus(spec, n, 5));
  EXPECT_NE(corpus, pretraining_corpus(spec, n, 6));

  std::map<std::string, std::size_t> per_cue;
  for (const auto& ex : corpus) {
    EXPECT_NO_THROW(validate_example(ex, vocab.size()));
    const std::string first = vocab.token(ex.source.front());
    const bool cued = first != "<seg>";
    const std::size_t body = cued ? 1 : 0;
    std::vector<int> plain, salient, heads;
    for (std::size_t i = body; i < ex.source.size(); ++i) {
      const int t = ex.source[i];
      if (t == kSeg) {
        heads.push_back(ex.source[i + 1]);
        continue;
      }
      plain.push_back(t);
      if (is_salient(t, spec)) salient.push_back(t);
    }
    if (!cued) {
      EXPECT_TRUE(ex.target == plain || ex.target == salient || ex.target == heads);
      ++per_cue["none"];
      continue;
    }
    ++per_cue[first];
    EXPECT_EQ(ex.segment_starts.front(), 0u);
    if (first == "<copy>") EXPECT_EQ(ex.target, plain);
    else if (first == "<extract>") EXPECT_EQ(ex.target, salient);
    else if (first == "<first>") EXPECT_EQ(ex.target, heads);
    else ADD_FAILURE() << "unexpected leading token " << first;
  }
  for (const char* cue : {"<copy>", "<extract>", "<first>", "none"}) EXPECT_EQ(per_cue[cue], n) << cue;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TrainConfig cfg = small_config();
  cfg.design = AttentionDesign::HierBlock;
  Vocab vocab;
  const DataSplits data = load_splits(cfg, vocab);
  Seq2SeqTransformer model = build_model(cfg, vocab.size(), 11, nullptr);
  const AttentionPlan plan = make_plan(cfg, data.train);
  const auto dir = scratch("ckpt");
  save_checkpoint(dir.string(), model, cfg.mode, plan, vocab);

  const Checkpoint ck = read_checkpoint(dir.string());
  EXPECT_EQ(ck.vocab, vocab);
  EXPECT_EQ(ck.plan.design, plan.design);
  const Seq2SeqTransformer back = load_model(ck);
  ASSERT_EQ(back.parameters().size(), model.parameters().size());
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    EXPECT_EQ(back.parameters()[i].name, model.parameters()[i].name);
    EXPECT_EQ(values(back.parameters()[i].value), values(model.parameters()[i].value)) << model.parameters()[i].name;
  }
  const auto a = evaluate(model, data.test, vocab, plan, 2, 6);
  const auto b = evaluate(back, data.test, ck.vocab, ck.plan, 2, 6);
  EXPECT_EQ(a.candidates, b.candidates);
  EXPECT_THROW(read_checkpoint((dir / "missing").string()), InputError);
  fs::remove_all(dir);
}

TEST(Evaluate, GoldReferencesScoreOne) {
  const auto r = score_texts({"s1 s2", "s3"}, {"s1 s2", "s3"});
  EXPECT_DOUBLE_EQ(r.rouge.mean_r1, 1.0);
  EXPECT_DOUBLE_EQ(r.rouge.mean_rl, 1.0);
  EXPECT_THROW(score_texts({"a"}, {}), DimensionError);
}

TEST(Experiment, ZeroEpochsReportsInitialModel) {
  TrainConfig cfg = small_config();
  cfg.epochs = 0;
  Vocab vocab;
  const DataSplits data = load_splits(cfg, vocab);
  const auto rep = run_experiment(cfg, data, vocab, std::nullopt);
  ASSERT_EQ(rep.runs.size(), 1u);
  EXPECT_EQ(rep.runs[0].train.best_epoch, 0);
  EXPECT_EQ(rep.runs[0].train.steps, 0);
  EXPECT_EQ(rep.runs[0].train.backbone_max_delta, 0.0);
}

TEST(Experiment, PrefixtuneFreezesBackboneFinetuneDoesNot) {
  TrainConfig cfg = small_config();
  Vocab vocab;
  const DataSplits data = load_splits(cfg, vocab);
  const auto pt = run_experiment(cfg, data, vocab, std::nullopt);
  EXPECT_EQ(pt.runs[0].train.backbone_max_delta, 0.0);
  EXPECT_EQ(pt.runs[0].train.backbone_changed, 0u);
  EXPECT_EQ(pt.runs[0].train.trainable_params, pt.runs[0].train.prefix_params);
  cfg.mode = TrainMode::Finetune;
  const auto ft = run_experiment(cfg, data, vocab, std::nullopt);
  EXPECT_GT(ft.runs[0].train.backbone_max_delta, 0.0);
  EXPECT_EQ(ft.runs[0].train.prefix_params, 0u);
}

TEST(Experiment, RepeatedRunsWriteIdenticalFiles) {
  TrainConfig cfg = small_config();
  cfg.design = AttentionDesign::HSoftSA;
  cfg.seeds = {3, 4};
  Vocab vocab;
  const DataSplits data = load_splits(cfg, vocab);
  const auto a = scratch("det_a"), b = scratch("det_b");
  run_experiment(cfg, data, vocab, std::nullopt, {a.string(), nullptr, false});
  run_experiment(cfg, data, vocab, std::nullopt, {b.string(), nullptr, false});
  for (const char* f : {"report.csv", "epochs.csv", "test_seed3.csv", "test_seed4.csv"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Experiment, InitialBackboneIsSharedAcrossModes) {
  TrainConfig cfg = small_config();
  Vocab vocab;
  load_splits(cfg, vocab);
  EXPECT_FALSE(initial_backbone(cfg, vocab).has_value());
  cfg.pretrain_epochs = 1;
  cfg.n_train = 20;
  const auto bb = initial_backbone(cfg, vocab);
  ASSERT_TRUE(bb.has_value());
  for (const auto& p : *bb) EXPECT_EQ(p.role, ParamRole::Backbone);
  Seq2SeqTransformer m = build_model(cfg, vocab.size(), 1, &*bb);
  cfg.mode = TrainMode::Finetune;
  Seq2SeqTransformer f = build_model(cfg, vocab.size(), 2, &*bb);
  for (const auto& p : *bb) {
    for (const auto* model : {&m, &f}) {
      const auto& ps = model->parameters();
      auto it = std::find_if(ps.begin(), ps.end(), [&](const Parameter& q) { return q.name == p.name; });
      ASSERT_NE(it, ps.end());
      EXPECT_EQ(values(it->value), values(p.value));
    }
  }
}

TEST(LowResource, RowsPerPercentageAndSeed) {
  TrainConfig cfg = small_config();
  cfg.n_train = 40;
  cfg.epochs = 1;
  cfg.seeds = {3, 4};
  Vocab vocab;
  const DataSplits data = load_splits(cfg, vocab);
  const auto out = scratch("lowres");
  const auto rep = run_lowresource(cfg, data, vocab, {10, 50}, std::nullopt, {out.string(), nullptr, false});
  ASSERT_EQ(rep.rows.size(), 4u);
  EXPECT_EQ(rep.ks, (std::vector<double>{10, 50}));
  for (const auto& row : rep.rows) EXPECT_EQ(row.n_train, subsample_count(40, row.k));
  EXPECT_NE(subsample_seed(3, 10), subsample_seed(3, 50));
  std::ifstream is(out / "lowres.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  EXPECT_EQ(lines, 1u + 4u);
  EXPECT_THROW(run_lowresource(cfg, data, vocab, {0.5}, std::nullopt), ConfigError);
  fs::remove_all(out);
}
