// SPDX-License-Identifier: Apache-2.0
//
// xstr command-line front end.
//
//   xstr gen-data --spec corpus.cfg --out DIR
//   xstr train    --proc baseline|me|me-md|me-rpld --rp DIR [--rr DIR] --config FILE --seed N --out CKPT
//   xstr graft    --encoder CKPT --decoder CKPT --out CKPT
//   xstr eval     --ckpt CKPT --test DIR --report FILE
//   xstr pipeline --config FILE --out DIR
//   xstr ablate   --config FILE --sizes 0,2500,10000,20000 --seeds 3 --out DIR
//
// Exit codes: 0 ok, 1 internal error, 2 configuration error, 3 data error,
// 4 numerical divergence.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "xstr/harness.hpp"

namespace fs = std::filesystem;
using namespace xstr;

namespace {

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::BadSize:
      return 2;
    case ErrorCode::EmptyText:
    case ErrorCode::UnknownSymbol:
    case ErrorCode::BadSpec:
    case ErrorCode::VocabClash:
    case ErrorCode::MissingFile:
    case ErrorCode::UndecodableImage:
    case ErrorCode::EmptyDataset:
    case ErrorCode::IncompatibleShapes:
    case ErrorCode::VocabMismatch:
    case ErrorCode::BadCheckpoint:
    case ErrorCode::LengthMismatch:
    case ErrorCode::EmptySet:
      return 3;
    case ErrorCode::DivergedLoss:
    case ErrorCode::NumericalError:
      return 4;
    default:
      return 1;
  }
}

void log_line(const std::string& msg) {
  std::cerr << "[xstr] " << msg << std::endl;
}

/// A gen-data output root holds train/ and test/; a corpus directory holds labels.tsv.
fs::path split_dir(const fs::path& dir, const char* split) {
  if (!fs::exists(dir / "labels.tsv") && fs::exists(dir / split / "labels.tsv")) return dir / split;
  return dir;
}

Dataset load_dataset(const fs::path& dir, const char* split) {
  CorpusDir c = load_corpus_dir(split_dir(dir, split));
  return {std::move(c.charset), std::move(c.samples)};
}

ModelConfig fit_to_images(ModelConfig cfg, const Dataset& d) {
  require(!d.samples.empty(), ErrorCode::EmptyDataset, "corpus has no samples");
  const Shape& s = d.samples.front().image.shape();
  cfg.image_h = s[1];
  cfg.image_w = s[2];
  return cfg;
}

fs::path sibling(const fs::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix + p.extension().string());
}

int cmd_gen_data(const fs::path& spec_path, const fs::path& out) {
  const CorpusSpec spec = parse_corpus_spec(ConfigFile::load(spec_path));
  const CorpusSplit split = generate_corpus(spec);
  save_corpus_dir(out / "train", spec.charset, split.train);
  save_corpus_dir(out / "test", spec.charset, split.test);
  std::cout << "train=" << split.train.size() << "\ntest=" << split.test.size() << "\ncharset=" << spec.charset.digest()
            << '\n';
  return 0;
}

int cmd_train(const std::string& proc_name, const fs::path& rp_dir, const std::string& rr_dir, const fs::path& config,
              std::uint64_t seed, const fs::path& out) {
  const Procedure proc = parse_procedure(proc_name);
  const ExperimentConfig e = parse_experiment(ConfigFile::load(config));
  const Dataset rp = load_dataset(rp_dir, "train");
  Dataset rr;
  if (proc != Procedure::Baseline) {
    require(!rr_dir.empty(), ErrorCode::ConfigError, "--rr is required for procedure " + proc_name);
    rr = load_dataset(rr_dir, "train");
  }
  RecipeConfig rc = e.recipe;
  rc.model = fit_to_images(rc.model, rp);
  rc.train.seed = seed;
  PretrainCache cache;
  ProcedureHooks hooks;
  hooks.on_phase = [](const std::string& p) { log_line("phase " + p); };
  hooks.on_epoch = [](const EpochLog& ep) {
    log_line("  epoch " + std::to_string(ep.epoch) + " loss " + fixed2(ep.train_loss) + " val_acc " +
             fixed2(ep.val_accuracy) + (ep.improved ? " *" : ""));
  };
  const Checkpoint ck = run_procedure(proc, rp, rr, rc, &cache, hooks);
  save_checkpoint(out, ck);
  if (cache.me) save_checkpoint(sibling(out, ".me_pretrain"), *cache.me);
  if (cache.rpld) save_checkpoint(sibling(out, ".rpld"), *cache.rpld);
  std::cout << "checkpoint=" << out.string() << "\ndigest=" << ck.digest() << "\nbest_epoch=" << ck.meta.epoch
            << "\nval_accuracy=" << format_double(ck.meta.val_accuracy) << '\n';
  return 0;
}

int cmd_graft(const fs::path& enc_path, const fs::path& dec_path, const fs::path& out) {
  const Checkpoint me = load_checkpoint(enc_path);
  const Checkpoint rpld = load_checkpoint(dec_path);
  const ModelConfig target = checkpoint_model_config(rpld);
  Checkpoint g;
  g.params = graft(me.params, rpld.params, target);
  g.meta = rpld.meta;
  g.meta.phase = Phase::Finetune;
  g.meta.parents = {me.digest(), rpld.digest()};
  g.meta.epoch = 0;
  g.meta.val_accuracy = 0;
  g.meta.extra["grafted"] = "true";
  save_checkpoint(out, g);
  std::cout << "checkpoint=" << out.string() << "\ndigest=" << g.digest() << '\n';
  return 0;
}

int cmd_eval(const fs::path& ckpt_path, const fs::path& test_dir, const fs::path& report) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const ModelConfig cfg = checkpoint_model_config(ck);
  const Dataset test = load_dataset(test_dir, "test");
  const EvalReport r = evaluate(ck, test.samples, cfg, to_string(ck.meta.phase));
  write_text(report, format_eval_report(r));
  std::cout << "accuracy=" << format_double(r.accuracy) << "\nn_test=" << r.n_test
            << "\nruntime_seconds=" << format_double(r.runtime_seconds) << '\n';
  return 0;
}

int cmd_pipeline(const fs::path& config, const fs::path& out) {
  const ExperimentConfig e = parse_experiment(ConfigFile::load(config));
  const ComparisonTable t = run_pipeline(e, out, log_line);
  std::cout << format_comparison(e, t);
  return 0;
}

int cmd_ablate(const fs::path& config, const std::string& sizes, std::size_t n_seeds, const fs::path& out) {
  ExperimentConfig e = parse_experiment(ConfigFile::load(config));
  if (!sizes.empty()) {
    const ConfigFile f = ConfigFile::parse("ablation.sizes = " + sizes, "--sizes");
    e.ablation_sizes.clear();
    for (const auto& s : f.list("ablation.sizes", {})) e.ablation_sizes.push_back(detail::parse_count("--sizes", s));
  }
  if (n_seeds > 0) {
    e.seeds.clear();
    for (std::size_t i = 0; i < n_seeds; ++i) e.seeds.push_back(i);
  }
  const auto start = std::chrono::steady_clock::now();
  const ExperimentData data = build_data(e);
  const auto rows = ablation_sweep(e.ablation_sizes, data, e, nullptr, log_line);
  write_text(out / "sweep.txt", format_sweep(e, rows));
  write_text(out / "sweep.kv", format_sweep_records(e, rows));
  write_text(out / "timings.txt",
             "total_seconds=" +
                 format_double(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()) + "\n");
  std::cout << format_sweep(e, rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer scene-text recognition with cross-lingual transfer"};
  app.require_subcommand(1);

  std::string spec, out, proc, rp, rr, config, encoder, decoder, ckpt, test, report, sizes;
  std::uint64_t seed = 0;
  std::size_t n_seeds = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus (train/ and test/ directories)");
  gen->add_option("--spec", spec, "corpus spec file")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "run one training procedure");
  train->add_option("--proc", proc, "baseline | me | me-md | me-rpld")->required();
  train->add_option("--rp", rp, "resource-poor corpus directory")->required();
  train->add_option("--rr", rr, "resource-rich corpus directory");
  train->add_option("--config", config, "experiment config file")->required();
  train->add_option("--seed", seed, "run seed")->required();
  train->add_option("--out", out, "output checkpoint")->required();

  auto* gr = app.add_subcommand("graft", "combine an ME encoder with an RPLD decoder");
  gr->add_option("--encoder", encoder, "checkpoint providing enc.*")->required();
  gr->add_option("--decoder", decoder, "checkpoint providing dec.*")->required();
  gr->add_option("--out", out, "output checkpoint")->required();

  auto* ev = app.add_subcommand("eval", "greedy-decode a test corpus and report exact match");
  ev->add_option("--ckpt", ckpt, "checkpoint")->required();
  ev->add_option("--test", test, "test corpus directory")->required();
  ev->add_option("--report", report, "report file")->required();

  auto* pipe = app.add_subcommand("pipeline", "run all procedures and write the comparison table");
  pipe->add_option("--config", config, "experiment config file")->required();
  pipe->add_option("--out", out, "output directory")->required();

  auto* abl = app.add_subcommand("ablate", "sweep the resource-rich training-set size");
  abl->add_option("--config", config, "experiment config file")->required();
  abl->add_option("--sizes", sizes, "comma-separated resource-rich sizes");
  abl->add_option("--seeds", n_seeds, "number of seeds (0..n-1)");
  abl->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(spec, out);
    if (*train) return cmd_train(proc, rp, rr, config, seed, out);
    if (*gr) return cmd_graft(encoder, decoder, out);
    if (*ev) return cmd_eval(ckpt, test, report);
    if (*pipe) return cmd_pipeline(config, out);
    if (*abl) return cmd_ablate(config, sizes, n_seeds, out);
  } catch (const Error& e) {
    std::cerr << "xstr: " << to_string(e.code()) << ": " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "xstr: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
