// Command-line driver: train, eval, spectrum, attn-dump, lowres, synth-gen.
//
// Exit codes: 0 success, 2 configuration or input error, 3 numeric failure
// (divergence or a degenerate spectrum), 1 anything else.

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "dpt/trainer.hpp"

namespace fs = std::filesystem;
using namespace dpt;

namespace {

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string design, mode, softsa_variant, schedule, data, train_path, val_path, test_path, init_checkpoint;
  std::optional<double> top_p, tau_trunc, tau_soft, lr;
  std::optional<int> lower_band, enc_segments, dec_segments, prefix_length, epochs, batch_size, beam, pretrain_epochs;
  std::vector<std::uint64_t> seeds;
  bool renormalize_trunc = false;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "INI file with key = value lines")->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "override one config key (key=value); repeatable");
    app->add_option("--design", design, "dense | uniblock | hierblock | truncsa | softsa | htruncsa | hsoftsa | hierblocksoftsa");
    app->add_option("--mode", mode, "prefixtune | finetune");
    app->add_option("--top-p", top_p, "TruncSA key-mass threshold in (0, 1]");
    app->add_option("--tau-trunc", tau_trunc, "TruncSA softmax temperature");
    app->add_option("--tau-soft", tau_soft, "SoftSA Gumbel-softmax temperature");
    app->add_option("--softsa-variant", softsa_variant, "row_gumbel | cell_bernoulli");
    app->add_flag("--renormalize-trunc", renormalize_trunc, "renormalize rows after truncation or gating");
    app->add_option("--lower-band", lower_band, "layers 1..k form the lower band (-1: default split)");
    app->add_option("--enc-segments", enc_segments, "encoder prefix blocks");
    app->add_option("--dec-segments", dec_segments, "decoder prefix blocks");
    app->add_option("--prefix-length", prefix_length, "prefix length per attention site");
    app->add_option("--schedule", schedule, "layers holding prefixes: all | top:k | low:k | single:l");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--batch-size", batch_size, "examples per step");
    app->add_option("--beam", beam, "beam size for test decoding");
    app->add_option("--seeds", seeds, "run seeds")->delimiter(',');
    app->add_option("--data", data, "synthetic | jsonl");
    app->add_option("--train", train_path, "training corpus (jsonl)");
    app->add_option("--val", val_path, "validation corpus (jsonl)");
    app->add_option("--test", test_path, "test corpus (jsonl)");
    app->add_option("--init-checkpoint", init_checkpoint, "start from this checkpoint's backbone");
    app->add_option("--pretrain-epochs", pretrain_epochs, "backbone pretraining epochs when no checkpoint is given");
  }

  TrainConfig resolve() const {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : TrainConfig::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    auto put = [&](const char* key, const std::string& v) {
      if (!v.empty()) cfg.set(key, v);
    };
    auto put_num = [&](const char* key, const auto& v) {
      if (v) cfg.set(key, detail::format_double(static_cast<double>(*v)));
    };
    put("design", design);
    put("mode", mode);
    put("softsa_variant", softsa_variant);
    put("schedule", schedule);
    put("data", data);
    put("train_path", train_path);
    put("val_path", val_path);
    put("test_path", test_path);
    put("init_checkpoint", init_checkpoint);
    put_num("top_p", top_p);
    put_num("tau_trunc", tau_trunc);
    put_num("tau_soft", tau_soft);
    put_num("lr", lr);
    put_num("lower_band", lower_band);
    put_num("enc_segments", enc_segments);
    put_num("dec_segments", dec_segments);
    put_num("prefix_length", prefix_length);
    put_num("epochs", epochs);
    put_num("batch_size", batch_size);
    put_num("beam", beam);
    put_num("pretrain_epochs", pretrain_epochs);
    if (renormalize_trunc) cfg.renormalize_trunc = true;
    if (!seeds.empty()) cfg.seeds = seeds;
    cfg.validate();
    return cfg;
  }
};

// Corpus for checkpoint-based commands: a jsonl file read with the
// checkpoint vocabulary, or a split of the configured synthetic task.
Corpus checkpoint_corpus(const Checkpoint& ck, const std::string& corpus_path, const ConfigArgs& args,
                         const std::string& split) {
  if (!corpus_path.empty()) {
    Vocab v = ck.vocab;
    Corpus c = load_jsonl(corpus_path, v, false);
    if (c.empty()) throw InputError("corpus " + corpus_path + " is empty");
    return c;
  }
  TrainConfig cfg = args.resolve();
  Vocab vocab;
  DataSplits d = load_splits(cfg, vocab);
  if (!(vocab == ck.vocab)) throw InputError("configured corpus vocabulary differs from the checkpoint vocabulary");
  if (split == "train") return d.train;
  if (split == "val") return d.validation;
  if (split == "test") return d.test;
  throw ConfigError("unknown split '" + split + "' (train | val | test)");
}

int run(int argc, char** argv) {
  CLI::App app{"Discourse-aware prefix-tuning on a miniature encoder-decoder transformer"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand every subcommand's help");

  ConfigArgs args;
  std::string out_dir = "runs/latest";
  std::string checkpoint, corpus_path, split = "test", out_path;
  std::size_t example_index = 0, n_examples = 100;
  bool full_matrix = false, gold = false, quiet = false;
  int band = -1;
  std::vector<double> ks{5, 10, 25, 50};
  std::optional<std::size_t> eval_beam;

  auto* train = app.add_subcommand("train", "train one model per seed and evaluate on the test split");
  args.attach(train);
  train->add_option("-o,--out", out_dir, "output directory");
  train->add_flag("-q,--quiet", quiet, "no per-epoch log");

  auto* lowres = app.add_subcommand("lowres", "train on k% subsamples of the training split");
  args.attach(lowres);
  lowres->add_option("-o,--out", out_dir, "output directory");
  lowres->add_option("--ks", ks, "percentages, e.g. 5,10,25,50")->delimiter(',');
  lowres->add_flag("-q,--quiet", quiet, "no per-epoch log");

  auto* eval = app.add_subcommand("eval", "decode a corpus with a checkpoint and score ROUGE");
  args.attach(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval->add_option("--corpus", corpus_path, "jsonl corpus (default: configured synthetic split)");
  eval->add_option("--split", split, "train | val | test for synthetic data");
  eval->add_option("--eval-beam", eval_beam, "beam size (default: config beam)");
  eval->add_flag("--gold", gold, "score the references against themselves");
  eval->add_option("-o,--out", out_path, "per-example CSV path");

  auto* spectrum = app.add_subcommand("spectrum", "cumulative singular-value spectrum of encoder attention");
  args.attach(spectrum);
  spectrum->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  spectrum->add_option("--corpus", corpus_path, "jsonl corpus (default: configured synthetic split)");
  spectrum->add_option("--split", split, "train | val | test for synthetic data");
  spectrum->add_option("--band", band, "layers 1..k are lower (-1: the checkpoint plan's band)");
  spectrum->add_flag("--full", full_matrix, "analyze [T, P+T] instead of the prefix slice");
  spectrum->add_option("--max-examples", n_examples, "examples to average over");
  spectrum->add_option("-o,--out", out_dir, "output directory");

  auto* attn = app.add_subcommand("attn-dump", "per-layer head-averaged encoder attention of one example");
  args.attach(attn);
  attn->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  attn->add_option("--corpus", corpus_path, "jsonl corpus (default: configured synthetic split)");
  attn->add_option("--split", split, "train | val | test for synthetic data");
  attn->add_option("--example", example_index, "example index in the corpus");
  attn->add_option("-o,--out", out_dir, "output directory");

  auto* synth = app.add_subcommand("synth-gen", "write the synthetic splits as jsonl files");
  args.attach(synth);
  synth->add_option("-o,--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::ostream* log = quiet ? nullptr : &std::cerr;

  if (train->parsed() || lowres->parsed()) {
    TrainConfig cfg = args.resolve();
    Vocab vocab;
    const DataSplits data = load_splits(cfg, vocab);
    const auto backbone = initial_backbone(cfg, vocab, {log});
    ExperimentOptions opts{out_dir, log, true};
    if (train->parsed()) {
      const ExperimentReport rep = run_experiment(cfg, data, vocab, backbone, opts);
      std::cout << summary_text(rep) << "results in " << out_dir << '\n';
    } else {
      opts.save_checkpoints = false;
      const LowResourceReport rep = run_lowresource(cfg, data, vocab, ks, backbone, opts);
      for (std::size_t i = 0; i < rep.ks.size(); ++i)
        std::cout << "k=" << fmt(rep.ks[i]) << "%  mean test ROUGE-L " << fmt(rep.mean_rl[i]) << "  mean best val loss "
                  << fmt(rep.mean_val_loss[i]) << '\n';
      std::cout << "results in " << out_dir << '\n';
    }
    return 0;
  }

  if (synth->parsed()) {
    TrainConfig cfg = args.resolve();
    if (cfg.data != DataSource::Synthetic) throw ConfigError("synth-gen needs data = synthetic");
    Vocab vocab;
    const DataSplits d = load_splits(cfg, vocab);
    fs::create_directories(out_dir);
    export_jsonl((fs::path(out_dir) / "train.jsonl").string(), d.train, vocab);
    export_jsonl((fs::path(out_dir) / "val.jsonl").string(), d.validation, vocab);
    export_jsonl((fs::path(out_dir) / "test.jsonl").string(), d.test, vocab);
    std::cout << "wrote " << d.train.size() << '/' << d.validation.size() << '/' << d.test.size()
              << " examples to " << out_dir << '\n';
    return 0;
  }

  const Checkpoint ck = read_checkpoint(checkpoint);
  const Corpus corpus = checkpoint_corpus(ck, corpus_path, args, split);

  if (eval->parsed()) {
    const Seq2SeqTransformer model = load_model(ck);
    const TrainConfig cfg = args.resolve();
    EvalResult r;
    if (gold) {
      std::vector<std::string> refs;
      for (const auto& ex : corpus) refs.push_back(ck.vocab.decode(ex.target));
      r = score_texts(refs, refs);
    } else {
      r = evaluate(model, corpus, ck.vocab, ck.plan, eval_beam.value_or(static_cast<std::size_t>(cfg.beam)),
                   static_cast<std::size_t>(cfg.max_decode_len));
    }
    if (!out_path.empty()) write_eval_csv(out_path, r);
    std::cout << "examples " << corpus.size() << "  ROUGE-1 " << fmt(r.rouge.mean_r1) << "  ROUGE-2 "
              << fmt(r.rouge.mean_r2) << "  ROUGE-L " << fmt(r.rouge.mean_rl) << '\n';
    return 0;
  }

  if (spectrum->parsed()) {
    SpectrumOptions so{band, !full_matrix, n_examples};
    const SpectrumReport rep = run_spectrum(ck, corpus, so, out_dir);
    std::cout << "band 1.." << rep.band << "  lower AUC " << fmt(rep.lower.auc) << " (" << rep.lower.samples
              << " slices)  higher AUC " << fmt(rep.higher.auc) << " (" << rep.higher.samples << " slices)\n"
              << "results in " << out_dir << '\n';
    return 0;
  }

  if (attn->parsed()) {
    if (example_index >= corpus.size())
      throw InputError("example " + std::to_string(example_index) + " outside a corpus of " +
                       std::to_string(corpus.size()));
    run_attn_dump(ck, corpus[example_index], out_dir);
    std::cout << "attention maps in " << out_dir << '\n';
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const DegenerateError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
