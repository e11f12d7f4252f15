// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "xstr/harness.hpp"

using namespace xstr;
namespace fs = std::filesystem;

namespace {

bool throws_code(ErrorCode code, const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code() == code;
  }
  return false;
}

ModelConfig toy_model(std::size_t vocab) {
  ModelConfig cfg;
  cfg.variant = Variant::Wang;
  cfg.d_model = 16;
  cfg.d_ffn = 16;
  cfg.heads = 2;
  cfg.cnn_preset = CnnPresetKind::Tiny;
  cfg.cnn_channels = {2};
  cfg.vocab_size = vocab;
  cfg.image_h = 4;
  cfg.image_w = 8;
  cfg.max_len = 6;
  return cfg;
}

std::vector<Sample> toy_samples(std::size_t n, std::uint64_t seed, const std::string& lang, std::size_t classes = 4) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Label l(1 + rng.below(2));
    Tensor img({1, 4, 8}, 0.0f);
    for (std::size_t p = 0; p < l.size(); ++p) {
      l[p] = static_cast<SymbolId>(rng.below(classes));
      for (std::size_t x = 4 * p; x < 4 * p + 4; ++x) img.at(0, l[p] % 4, x) = 1.0f;
    }
    out.push_back({std::move(img), std::move(l), lang});
  }
  return out;
}

Charset toy_charset(const std::string& lang) {
  Charset cs;
  cs.language_id = lang;
  for (int i = 0; i < 4; ++i) cs.text.push_back(lang + std::to_string(i));
  return cs;
}

ExperimentConfig toy_experiment() {
  ExperimentConfig e;
  e.recipe.model = toy_model(0);
  e.recipe.train.max_epochs = 2;
  e.recipe.train.batch_size = 4;
  e.recipe.train.patience = 2;
  e.seeds = {0, 1};
  return e;
}

ExperimentData toy_data() {
  return {{toy_charset("p"), toy_samples(40, 1, "p")}, {toy_charset("r"), toy_samples(80, 2, "r")},
          toy_samples(20, 3, "p")};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(XSTR_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("xstr_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST_CASE("exact match accuracy") {
  const std::vector<Label> refs{{1, 2, 3}, {4, 5}};
  CHECK(exact_match_accuracy(refs, refs) == 100.0);
  CHECK(exact_match_accuracy({{1, 2, 3}, {4, 6}}, refs) == 50.0);
  CHECK(exact_match_accuracy({{1, 2}, {4, 5}}, refs) == 50.0);
  CHECK(exact_match_accuracy({{1, 2, 3, 0}, {}}, refs) == 0.0);
  CHECK(throws_code(ErrorCode::LengthMismatch, [&] { exact_match_accuracy({{1}}, refs); }));
  CHECK(throws_code(ErrorCode::EmptySet, [] { exact_match_accuracy({}, {}); }));

  Rng rng(4);
  std::vector<Label> p, r;
  for (int i = 0; i < 50; ++i) {
    Label a(1 + rng.below(3));
    for (auto& c : a) c = static_cast<SymbolId>(rng.below(3));
    r.push_back(a);
    if (rng.below(2)) a[0] = static_cast<SymbolId>(rng.below(3));
    p.push_back(a);
  }
  const double acc = exact_match_accuracy(p, r);
  const auto perm = rng.permutation(50);
  std::vector<Label> pp, rp;
  for (auto i : perm) {
    pp.push_back(p[i]);
    rp.push_back(r[i]);
  }
  CHECK(exact_match_accuracy(pp, rp) == acc);
}

TEST_CASE("config files fail fast") {
  const ConfigFile f = ConfigFile::parse("# comment\ntrain.lr = 0.05\n\nrun.seeds = 3, 4\nmodel.d_model = 64\n");
  const ExperimentConfig e = parse_experiment(f);
  CHECK(e.recipe.train.lr == 0.05f);
  CHECK(e.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(e.recipe.model.d_model == 64);

  auto config_error = [](const std::string& text) {
    return throws_code(ErrorCode::ConfigError, [&] { parse_experiment(ConfigFile::parse(text)); });
  };
  CHECK(config_error("train.learning_rate = 0.1\n"));
  CHECK(config_error("model.colour = red\n"));
  CHECK(config_error("train.lr = 0.1\ntrain.lr = 0.2\n"));
  CHECK(config_error("train.lr 0.1\n"));
  CHECK(config_error("train.lr = fast\n"));
  CHECK(config_error("train.val_fraction = 0.6\n"));
  CHECK(config_error("model.vocab_size = 10\n"));
  CHECK(config_error("run.procedures = baseline, magic\n"));
  CHECK(config_error("model.d_model = 30\n"));
  CHECK(throws_code(ErrorCode::ConfigError, [] { parse_corpus_spec(ConfigFile::parse("corpus.script = runic\n")); }));
}

TEST_CASE("evaluate scores greedy decodes") {
  const ModelConfig cfg = toy_model(7);
  const auto data = toy_samples(8, 3, "p");
  Checkpoint ck{init_params(cfg, 1), {}};
  std::vector<const Sample*> batch;
  for (const auto& s : data) batch.push_back(&s);
  for (int i = 0; i < 500 && sgd_batch(ck.params, batch, cfg, 0.1f) >= 0.01; ++i) {
  }
  const EvalReport r = evaluate(ck, data, cfg, "overfit");
  CHECK(r.accuracy == 100.0);
  CHECK(r.n_test == 8);
  CHECK(r.errors.empty());
  CHECK(format_eval_report(r) == format_eval_report(evaluate(ck, data, cfg, "overfit")));

  CHECK(throws_code(ErrorCode::VocabMismatch, [&] { evaluate(ck, data, toy_model(11)); }));
  auto bad = data;
  bad[0].label = {4};
  CHECK(throws_code(ErrorCode::VocabMismatch, [&] { evaluate(ck, bad, cfg); }));
}

TEST_CASE("a fresh model is at chance on 40-class labels") {
  const ModelConfig cfg = toy_model(43);
  Rng rng(7);
  std::vector<Sample> test;
  for (int i = 0; i < 100; ++i) {
    Label l(3 + rng.below(4));
    for (auto& c : l) c = static_cast<SymbolId>(rng.below(40));
    Tensor img({1, 4, 8});
    for (auto& v : img.values()) v = static_cast<float>(rng.uniform(0, 1));
    test.push_back({std::move(img), std::move(l), "p"});
  }
  const EvalReport r = evaluate(Checkpoint{init_params(cfg, 5), {}}, test, cfg);
  CHECK(r.accuracy < 5.0);
  CHECK(r.errors.size() == 20);
  std::size_t total = 0;
  for (const auto& [len, b] : r.by_length) total += b.total;
  CHECK(total == 100);
}

TEST_CASE("subsample is deterministic and nested") {
  const Dataset full{toy_charset("r"), toy_samples(100, 2, "r")};
  const Dataset a = subsample(full, 30), b = subsample(full, 30), c = subsample(full, 60);
  REQUIRE(a.samples.size() == 30);
  for (std::size_t i = 0; i < 30; ++i) CHECK(a.samples[i].image.bit_equal(b.samples[i].image));
  std::size_t found = 0;
  for (const auto& s : a.samples)
    for (const auto& t : c.samples) found += s.image.bit_equal(t.image) && s.label == t.label;
  CHECK(found >= 30);
  CHECK(subsample(full, 0).samples.empty());
  CHECK(subsample(full, 100).samples.size() == 100);
}

TEST_CASE("ablation sweep validates sizes and reuses the baseline at size 0") {
  const ExperimentConfig e = toy_experiment();
  const ExperimentData data = toy_data();
  CHECK(throws_code(ErrorCode::BadSize, [&] { ablation_sweep({10, 0}, data, e); }));
  CHECK(throws_code(ErrorCode::BadSize, [&] { ablation_sweep({0, 81}, data, e); }));
  CHECK(throws_code(ErrorCode::BadSize, [&] { ablation_sweep({}, data, e); }));

  SweepCache cache;
  const auto rows = ablation_sweep({0, 40}, data, e, &cache);
  REQUIRE(rows.size() == 2);
  for (std::size_t i = 0; i < e.seeds.size(); ++i) {
    const Checkpoint base = run_procedure(Procedure::Baseline, data.rp_train, data.rr_train,
                                          recipe_for(e, Variant::Wang, e.seeds[i]));
    CHECK(rows[0].checkpoints.at(Variant::Wang)[i] == base.digest());
  }
  // Cached points are not recomputed.
  const auto again = ablation_sweep({0, 40}, data, e, &cache);
  CHECK(again[1].checkpoints.at(Variant::Wang) == rows[1].checkpoints.at(Variant::Wang));
  CHECK(format_sweep_records(e, rows).find("sweep.wang.size40.mean=") != std::string::npos);
}

TEST_CASE("comparison reuses the baseline as the resource-poor decoder") {
  ExperimentConfig e = toy_experiment();
  e.seeds = {3};
  const ExperimentData data = toy_data();
  const ComparisonTable t = run_comparison(e, data);
  REQUIRE(t.runs.size() == 4);
  CHECK(t.runs[0].procedure == Procedure::Baseline);
  const auto& rpld_run = std::find_if(t.runs.begin(), t.runs.end(), [](const RunResult& r) {
    return r.procedure == Procedure::MeRpld;
  })->checkpoint;
  REQUIRE(rpld_run.meta.parents.size() == 2);
  CHECK(rpld_run.meta.parents[1] == t.runs[0].checkpoint.digest());
  const std::string text = format_comparison(e, t);
  for (const char* p : {"baseline", "me_md", "me_rpld"}) CHECK(text.find(p) != std::string::npos);
}

TEST_CASE("CLI exit codes and round trip") {
  const fs::path dir = scratch("cli");
  CHECK(run_cli("") == 2);
  CHECK(run_cli("frobnicate") == 2);

  write_file(dir / "corpus.cfg", "corpus.script = latin\ncorpus.n_samples = 20\ncorpus.seed = 4\n");
  CHECK(run_cli("gen-data --spec " + (dir / "corpus.cfg").string() + " --out " + (dir / "rr").string()) == 0);
  write_file(dir / "rp.cfg", "corpus.script = procedural\ncorpus.symbols = 12\ncorpus.n_samples = 20\ncorpus.seed = 5\n");
  CHECK(run_cli("gen-data --spec " + (dir / "rp.cfg").string() + " --out " + (dir / "rp").string()) == 0);
  CHECK(fs::exists(dir / "rp" / "train" / "labels.tsv"));
  CHECK(fs::exists(dir / "rp" / "test" / "images" / "0.pgm"));

  write_file(dir / "bad_spec.cfg", "corpus.script = latin\ncorpus.n_samples = 5\n");
  CHECK(run_cli("gen-data --spec " + (dir / "bad_spec.cfg").string() + " --out " + (dir / "x").string()) == 3);
  write_file(dir / "unknown.cfg", "corpus.scirpt = latin\n");
  CHECK(run_cli("gen-data --spec " + (dir / "unknown.cfg").string() + " --out " + (dir / "x").string()) == 2);

  write_file(dir / "run.cfg",
             "model.d_model = 8\nmodel.d_ffn = 8\nmodel.heads = 2\nmodel.cnn_preset = tiny\nmodel.cnn_channels = 2\n"
             "model.max_len = 12\ntrain.max_epochs = 1\ntrain.batch_size = 8\n");
  const std::string common = " --rp " + (dir / "rp").string() + " --rr " + (dir / "rr").string() + " --config " +
                             (dir / "run.cfg").string() + " --seed 1";
  CHECK(run_cli("train --proc me-rpld" + common + " --out " + (dir / "m.xstr").string()) == 0);
  CHECK(fs::exists(dir / "m.me_pretrain.xstr"));
  CHECK(fs::exists(dir / "m.rpld.xstr"));
  CHECK(run_cli("graft --encoder " + (dir / "m.me_pretrain.xstr").string() + " --decoder " +
                (dir / "m.rpld.xstr").string() + " --out " + (dir / "g.xstr").string()) == 0);
  const Checkpoint g = load_checkpoint(dir / "g.xstr");
  const Checkpoint me = load_checkpoint(dir / "m.me_pretrain.xstr");
  CHECK(g.meta.phase == Phase::Finetune);
  for (const auto& [name, entry] : g.params)
    if (name.rfind("enc.", 0) == 0) CHECK(entry.value.bit_equal(me.params.value(name)));
  CHECK(run_cli("eval --ckpt " + (dir / "m.xstr").string() + " --test " + (dir / "rp").string() + " --report " +
                (dir / "report.txt").string()) == 0);
  CHECK(fs::exists(dir / "report.txt"));

  CHECK(run_cli("graft --encoder " + (dir / "missing.xstr").string() + " --decoder " +
                (dir / "m.rpld.xstr").string() + " --out " + (dir / "bad.xstr").string()) == 3);
  CHECK(run_cli("eval --ckpt " + (dir / "missing.xstr").string() + " --test " + (dir / "rp").string() +
                " --report " + (dir / "r.txt").string()) == 3);
  CHECK(run_cli("train --proc baseline --rp " + (dir / "nowhere").string() + " --config " +
                (dir / "run.cfg").string() + " --seed 1 --out " + (dir / "b.xstr").string()) == 3);

  write_file(dir / "diverge.cfg",
             "model.d_model = 8\nmodel.d_ffn = 8\nmodel.heads = 2\nmodel.cnn_preset = tiny\nmodel.cnn_channels = 2\n"
             "model.max_len = 12\ntrain.max_epochs = 2\ntrain.lr = 1e30\ntrain.clip_norm = 0\n");
  CHECK(run_cli("train --proc baseline --rp " + (dir / "rp").string() + " --config " + (dir / "diverge.cfg").string() +
                " --seed 1 --out " + (dir / "d.xstr").string()) == 4);
}
