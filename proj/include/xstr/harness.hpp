// SPDX-License-Identifier: Apache-2.0
//
// Evaluation, experiment configuration, the procedure comparison and the
// resource-rich data-size sweep.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "xstr/config.hpp"
#include "xstr/training.hpp"

namespace xstr {

// ---------------------------------------------------------------------------
// Evaluation

struct LengthBucket {
  std::size_t total = 0;
  std::size_t correct = 0;
};

struct EvalReport {
  std::string procedure;
  double accuracy = 0;  // percent
  std::size_t n_test = 0;
  std::map<std::size_t, LengthBucket> by_length;
  std::vector<std::pair<Label, Label>> errors;  // (reference, hypothesis), at most 20
  double runtime_seconds = 0;
  std::vector<std::uint64_t> seeds;
};

inline std::string label_text(const Label& l) {
  std::string s;
  for (std::size_t i = 0; i < l.size(); ++i) s += (i ? " " : "") + std::to_string(l[i]);
  return s;
}

/// Greedy-decodes every test image and scores exact match.
inline EvalReport evaluate(const Checkpoint& ckpt, const std::vector<Sample>& test, const ModelConfig& cfg,
                           const std::string& procedure = "") {
  const auto start = std::chrono::steady_clock::now();
  require(ckpt.params.contains("dec.embed") && ckpt.params.value("dec.embed").dim(0) == cfg.vocab_size,
          ErrorCode::VocabMismatch, "checkpoint vocabulary does not match the model config");
  for (const auto& s : test)
    for (SymbolId c : s.label)
      require(cfg.is_symbol(c), ErrorCode::VocabMismatch, "test label id " + std::to_string(c) + " outside the vocabulary");
  EvalReport r;
  r.procedure = procedure;
  r.n_test = test.size();
  r.seeds = {ckpt.meta.seed};
  const auto preds = decode_all(ckpt.params, test, cfg);
  const auto refs = labels_of(test);
  r.accuracy = exact_match_accuracy(preds, refs);
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto& b = r.by_length[refs[i].size()];
    ++b.total;
    if (preds[i] == refs[i]) {
      ++b.correct;
    } else if (r.errors.size() < 20) {
      r.errors.emplace_back(refs[i], preds[i]);
    }
  }
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

/// Report text without the runtime (which is not reproducible).
inline std::string format_eval_report(const EvalReport& r) {
  std::ostringstream os;
  os << "procedure=" << r.procedure << '\n'
     << "accuracy=" << format_double(r.accuracy) << '\n'
     << "n_test=" << r.n_test << '\n'
     << "seeds=";
  for (std::size_t i = 0; i < r.seeds.size(); ++i) os << (i ? "," : "") << r.seeds[i];
  os << '\n';
  for (const auto& [len, b] : r.by_length)
    os << "length." << len << "=" << b.correct << "/" << b.total << '\n';
  for (std::size_t i = 0; i < r.errors.size(); ++i)
    os << "error." << i << "=" << label_text(r.errors[i].first) << " -> " << label_text(r.errors[i].second) << '\n';
  os << "\n  length   n  correct  accuracy\n";
  for (const auto& [len, b] : r.by_length)
    os << std::setw(8) << len << std::setw(4) << b.total << std::setw(9) << b.correct << std::setw(10) << std::fixed
       << std::setprecision(2) << 100.0 * static_cast<double>(b.correct) / static_cast<double>(b.total) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct CorpusSection {
  std::string script = "procedural";  // procedural | latin
  std::size_t symbols = 40;           // procedural only
  std::uint64_t glyph_seed = 11;      // procedural only
  std::string language_id;
  std::size_t n_samples = 0;
  double split_ratio = 0.9;
  std::uint64_t seed = 0;
};

struct DataSection {
  std::size_t image_h = 32, image_w = 96;
  std::size_t len_min = 1, len_max = 10;
  DistortionSpec distortion;
};

/// The charset a corpus section describes. Procedural glyphs never coincide
/// with the Latin set, so the two scripts can always be combined.
inline Charset make_charset(const CorpusSection& c) {
  if (c.script == "latin") return latin_charset(c.language_id.empty() ? "latin" : c.language_id);
  require(c.script == "procedural", ErrorCode::ConfigError, "unknown script '" + c.script + "'");
  return procedural_charset(c.symbols, c.glyph_seed, c.language_id.empty() ? "synthetic" : c.language_id,
                            latin_charset().glyphs);
}

inline CorpusSpec make_corpus_spec(const CorpusSection& c, const DataSection& d) {
  CorpusSpec s;
  s.charset = make_charset(c);
  s.n_samples = c.n_samples;
  s.image_h = d.image_h;
  s.image_w = d.image_w;
  s.len_min = d.len_min;
  s.len_max = d.len_max;
  s.distortion = d.distortion;
  s.split_ratio = c.split_ratio;
  s.seed = c.seed;
  return s;
}

struct ExperimentConfig {
  DataSection data;
  CorpusSection rp{"procedural", 40, 11, "synthetic", 2400, 5.0 / 6.0, 1};
  CorpusSection rr{"latin", 36, 0, "latin", 22222, 0.9, 2};
  RecipeConfig recipe;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<Procedure> procedures{Procedure::Baseline, Procedure::Me, Procedure::MeMd, Procedure::MeRpld};
  std::vector<Variant> variants{Variant::Wang};
  std::vector<std::size_t> ablation_sizes{0, 2500, 10000, 20000};
};

namespace detail {

inline void read_corpus_section(const ConfigFile& f, const std::string& sec, CorpusSection& c) {
  c.script = f.str(sec + ".script", c.script);
  c.symbols = f.u64(sec + ".symbols", c.symbols);
  c.glyph_seed = f.u64(sec + ".glyph_seed", c.glyph_seed);
  c.language_id = f.str(sec + ".language_id", c.language_id);
  c.n_samples = f.u64(sec + ".n_samples", c.n_samples);
  c.split_ratio = f.real(sec + ".split_ratio", c.split_ratio);
  c.seed = f.u64(sec + ".seed", c.seed);
}

inline void read_data_sections(const ConfigFile& f, DataSection& d) {
  d.image_h = f.u64("data.image_h", d.image_h);
  d.image_w = f.u64("data.image_w", d.image_w);
  d.len_min = f.u64("data.len_min", d.len_min);
  d.len_max = f.u64("data.len_max", d.len_max);
  auto& x = d.distortion;
  x.rotate_deg_max = f.real("distortion.rotate_deg_max", x.rotate_deg_max);
  x.curve_amp_px = f.real("distortion.curve_amp_px", x.curve_amp_px);
  x.blur_sigma_max = f.real("distortion.blur_sigma_max", x.blur_sigma_max);
  x.noise_std = f.real("distortion.noise_std", x.noise_std);
  x.enabled = f.boolean("distortion.enabled", x.enabled);
}

template <class T, class F>
std::vector<T> parse_list(const ConfigFile& f, const std::string& key, const std::vector<T>& fallback, F parse) {
  if (!f.has(key)) return fallback;
  std::vector<T> out;
  for (const auto& item : f.list(key, {})) out.push_back(parse(item));
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  return static_cast<std::uint64_t>(parse_count(key, v));
}

}  // namespace detail

/// Reads model.*, train.* (model and training only; for `train` / `eval`).
inline RecipeConfig parse_recipe(const ConfigFile& f, RecipeConfig rc = {}) {
  for (const auto& [key, value] : f.section("model")) {
    require(key != "vocab_size" && key != "image_h" && key != "image_w", ErrorCode::ConfigError,
            f.where("model." + key) + ": model." + key + " is derived from the data");
    require(set_model_key(rc.model, key, f.raw("model." + key)), ErrorCode::ConfigError,
            f.where("model." + key) + ": unknown key 'model." + key + "'");
  }
  auto& t = rc.train;
  t.lr = static_cast<float>(f.real("train.lr", t.lr));
  t.batch_size = f.u64("train.batch_size", t.batch_size);
  t.max_epochs = f.u64("train.max_epochs", t.max_epochs);
  rc.pretrain_max_epochs = f.u64("train.pretrain_max_epochs", rc.pretrain_max_epochs);
  t.val_fraction = f.real("train.val_fraction", t.val_fraction);
  t.patience = f.u64("train.patience", t.patience);
  t.clip_norm = f.real("train.clip_norm", t.clip_norm);
  t.shuffle = f.boolean("train.shuffle", t.shuffle);
  const std::string metric = f.str("train.metric", t.metric == StopMetric::ExactMatch ? "exact_match" : "loss");
  require(metric == "exact_match" || metric == "loss", ErrorCode::ConfigError, "train.metric must be exact_match or loss");
  t.metric = metric == "loss" ? StopMetric::Loss : StopMetric::ExactMatch;
  t.validate();
  ModelConfig probe = rc.model;  // the vocabulary is only known once data is loaded
  probe.vocab_size = std::max<std::size_t>(probe.vocab_size, Specials::kCount + 1);
  probe.validate();
  return rc;
}

inline ExperimentConfig parse_experiment(const ConfigFile& f) {
  ExperimentConfig e;
  detail::read_data_sections(f, e.data);
  detail::read_corpus_section(f, "rp", e.rp);
  detail::read_corpus_section(f, "rr", e.rr);
  e.recipe = parse_recipe(f, e.recipe);
  e.recipe.model.image_h = e.data.image_h;
  e.recipe.model.image_w = e.data.image_w;
  e.seeds = detail::parse_list<std::uint64_t>(f, "run.seeds", e.seeds,
                                              [](const std::string& s) { return detail::parse_u64("run.seeds", s); });
  e.procedures = detail::parse_list<Procedure>(f, "run.procedures", e.procedures, parse_procedure);
  e.variants = detail::parse_list<Variant>(f, "run.variants", e.variants, parse_variant);
  e.ablation_sizes = detail::parse_list<std::size_t>(f, "ablation.sizes", e.ablation_sizes,
                                                     [](const std::string& s) { return detail::parse_count("ablation.sizes", s); });
  f.reject_unclaimed();
  require(!e.seeds.empty() && !e.variants.empty(), ErrorCode::ConfigError, "run.seeds and run.variants must be non-empty");
  return e;
}

/// gen-data spec: corpus.* plus data.* / distortion.*.
inline CorpusSpec parse_corpus_spec(const ConfigFile& f) {
  DataSection d;
  CorpusSection c;
  detail::read_data_sections(f, d);
  detail::read_corpus_section(f, "corpus", c);
  f.reject_unclaimed();
  return make_corpus_spec(c, d);
}

// ---------------------------------------------------------------------------
// Experiments

using Logger = std::function<void(const std::string&)>;

struct ExperimentData {
  Dataset rp_train, rr_train;
  std::vector<Sample> rp_test;
};

inline ExperimentData build_data(const ExperimentConfig& e) {
  const CorpusSpec rps = make_corpus_spec(e.rp, e.data);
  const CorpusSpec rrs = make_corpus_spec(e.rr, e.data);
  union_charset(rps.charset, rrs.charset);  // fail early on clashing scripts
  auto rp = generate_corpus(rps);
  auto rr = generate_corpus(rrs);
  return {{rps.charset, std::move(rp.train)}, {rrs.charset, std::move(rr.train)}, std::move(rp.test)};
}

inline RecipeConfig recipe_for(const ExperimentConfig& e, Variant v, std::uint64_t seed) {
  RecipeConfig rc = e.recipe;
  rc.model.variant = v;
  rc.train.seed = seed;
  return rc;
}

/// Model config a checkpoint was trained under (stored in its metadata).
inline ModelConfig checkpoint_model_config(const Checkpoint& c) {
  auto it = c.meta.extra.find("model");
  require(it != c.meta.extra.end(), ErrorCode::BadCheckpoint, "checkpoint lacks its model config");
  ModelConfig cfg = model_config_from_text(it->second);
  require(cfg.digest() == c.meta.model_config, ErrorCode::BadCheckpoint, "model config digest mismatch");
  return cfg;
}

struct RunResult {
  Variant variant;
  std::uint64_t seed;
  Procedure procedure;
  Checkpoint checkpoint;
  EvalReport report;
};

struct ComparisonTable {
  std::vector<RunResult> runs;

  std::vector<double> accuracies(Variant v, Procedure p) const {
    std::vector<double> out;
    for (const auto& r : runs)
      if (r.variant == v && r.procedure == p) out.push_back(r.report.accuracy);
    return out;
  }
  double mean(Variant v, Procedure p) const {
    const auto a = accuracies(v, p);
    return a.empty() ? 0.0 : std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  }
};

/// Runs the requested procedures for every (variant, seed). Pre-trained
/// checkpoints are shared inside one (variant, seed); the RPLD is the
/// baseline checkpoint relabelled, since both minimise the same objective on
/// the same data from the same init.
inline ComparisonTable run_comparison(const ExperimentConfig& e, const ExperimentData& data, const Logger& log = {},
                         const std::function<void(const RunResult&, const PretrainCache&)>& on_run = {}) {
  ComparisonTable t;
  for (Variant v : e.variants)
    for (std::uint64_t seed : e.seeds) {
      const RecipeConfig rc = recipe_for(e, v, seed);
      PretrainCache cache;
      ProcedureHooks hooks;
      hooks.on_phase = [&](const std::string& phase) {
        if (log) log(to_string(v) + " seed " + std::to_string(seed) + ": " + phase);
      };
      hooks.on_epoch = [&](const EpochLog& ep) {
        if (log) {
          std::ostringstream os;
          os << "  epoch " << ep.epoch << " loss " << std::fixed << std::setprecision(3) << ep.train_loss << " val "
             << ep.val_loss << " acc " << std::setprecision(2) << ep.val_accuracy << (ep.improved ? " *" : "");
          log(os.str());
        }
      };
      std::vector<Procedure> order = e.procedures;
      // The baseline goes first so the RPLD can reuse it.
      std::stable_partition(order.begin(), order.end(), [](Procedure p) { return p == Procedure::Baseline; });
      for (Procedure p : order) {
        if (p == Procedure::MeRpld && !cache.rpld) {
          const auto base = std::find_if(t.runs.begin(), t.runs.end(), [&](const RunResult& r) {
            return r.variant == v && r.seed == seed && r.procedure == Procedure::Baseline;
          });
          if (base != t.runs.end()) {
            cache.rpld = base->checkpoint;
            cache.rpld->meta.phase = Phase::RpPretrain;
          }
        }
        Checkpoint ck = run_procedure(p, data.rp_train, data.rr_train, rc, &cache, hooks);
        const ModelConfig cfg = checkpoint_model_config(ck);
        EvalReport rep = evaluate(ck, data.rp_test, cfg, to_string(p));
        if (log) log(to_string(v) + " seed " + std::to_string(seed) + " " + to_string(p) + ": " +
                     format_double(rep.accuracy) + "%");
        t.runs.push_back({v, seed, p, std::move(ck), std::move(rep)});
        if (on_run) on_run(t.runs.back(), cache);
      }
    }
  return t;
}

inline std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

/// Aligned text table: one row per procedure, one column per (variant, seed)
/// plus the per-variant mean.
inline std::string format_comparison(const ExperimentConfig& e, const ComparisonTable& t) {
  std::ostringstream os;
  os << "Exact-match accuracy (%) on the resource-poor test set\n\n";
  os << std::left << std::setw(12) << "procedure" << std::right;
  for (Variant v : e.variants) {
    for (auto s : e.seeds) os << std::setw(14) << (to_string(v) + "/s" + std::to_string(s));
    os << std::setw(14) << (to_string(v) + "/mean");
  }
  os << '\n';
  for (Procedure p : e.procedures) {
    os << std::left << std::setw(12) << to_string(p) << std::right;
    for (Variant v : e.variants) {
      for (double a : t.accuracies(v, p)) os << std::setw(14) << fixed2(a);
      os << std::setw(14) << fixed2(t.mean(v, p));
    }
    os << '\n';
  }
  return os.str();
}

inline std::string format_comparison_records(const ExperimentConfig& e, const ComparisonTable& t) {
  std::ostringstream os;
  for (Variant v : e.variants)
    for (Procedure p : e.procedures) {
      const std::string base = "comparison." + to_string(v) + "." + to_string(p);
      for (const auto& r : t.runs)
        if (r.variant == v && r.procedure == p) {
          os << base << ".seed" << r.seed << ".accuracy=" << format_double(r.report.accuracy) << '\n';
          os << base << ".seed" << r.seed << ".checkpoint=" << r.checkpoint.digest() << '\n';
        }
      os << base << ".mean=" << format_double(t.mean(v, p)) << '\n';
    }
  return os.str();
}

// ---------------------------------------------------------------------------
// Ablation over the resource-rich set size

struct AblationRow {
  std::size_t rr_size = 0;
  std::map<Variant, std::vector<double>> accuracy;           // per seed, in seed order
  std::map<Variant, std::vector<std::string>> checkpoints;   // digests, per seed

  double mean(Variant v) const {
    const auto& a = accuracy.at(v);
    return std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  }
};

/// The first `size` samples of a fixed permutation of `full` (original order
/// kept), so smaller subsets nest inside larger ones.
inline Dataset subsample(const Dataset& full, std::size_t size) {
  require(size <= full.samples.size(), ErrorCode::BadSize,
          "subsample of " + std::to_string(size) + " from " + std::to_string(full.samples.size()));
  Rng rng(derive_seed(0x5ab5a3b1eULL, "rr-subsample"));
  auto perm = rng.permutation(full.samples.size());
  perm.resize(size);
  std::sort(perm.begin(), perm.end());
  Dataset out{full.charset, {}};
  out.samples.reserve(size);
  for (auto i : perm) out.samples.push_back(full.samples[i]);
  return out;
}

/// Accuracy and checkpoint digest of a finished (variant, seed, size) point.
using SweepKey = std::tuple<Variant, std::uint64_t, std::size_t>;
struct SweepPoint {
  double accuracy = 0;
  std::string digest;
};
using SweepCache = std::map<SweepKey, SweepPoint>;

/// For each size: me_rpld with that many rr samples (size 0: the baseline),
/// for every variant and seed. Points already in `cache` are not rerun.
inline std::vector<AblationRow> ablation_sweep(const std::vector<std::size_t>& rr_sizes, const ExperimentData& data,
                                               const ExperimentConfig& e, SweepCache* cache = nullptr,
                                               const Logger& log = {}) {
  require(!rr_sizes.empty(), ErrorCode::BadSize, "no ablation sizes");
  for (std::size_t i = 0; i < rr_sizes.size(); ++i) {
    require(rr_sizes[i] <= data.rr_train.samples.size(), ErrorCode::BadSize,
            "size " + std::to_string(rr_sizes[i]) + " exceeds the " + std::to_string(data.rr_train.samples.size()) +
                " available resource-rich samples");
    require(i == 0 || rr_sizes[i - 1] < rr_sizes[i], ErrorCode::BadSize, "sizes must be strictly ascending");
  }
  SweepCache local;
  SweepCache& C = cache ? *cache : local;
  std::vector<AblationRow> rows(rr_sizes.size());
  for (Variant v : e.variants)
    for (std::uint64_t seed : e.seeds) {
      const RecipeConfig rc = recipe_for(e, v, seed);
      std::optional<Checkpoint> rpld;
      for (std::size_t i = 0; i < rr_sizes.size(); ++i) {
        const std::size_t size = rr_sizes[i];
        rows[i].rr_size = size;
        const SweepKey key{v, seed, size};
        if (!C.contains(key)) {
          if (log) log("ablation " + to_string(v) + " seed " + std::to_string(seed) + " size " + std::to_string(size));
          const Dataset rr = subsample(data.rr_train, size);
          Checkpoint ck;
          if (size == 0) {
            ck = run_procedure(Procedure::Baseline, data.rp_train, rr, rc);
          } else {
            PretrainCache pc;
            if (!rpld) {
              rpld = pretrain_decoder(data.rp_train, rc);
            }
            pc.rpld = rpld;
            ck = run_procedure(Procedure::MeRpld, data.rp_train, rr, rc, &pc);
          }
          if (size == 0) {
            rpld = ck;
            rpld->meta.phase = Phase::RpPretrain;
          }
          const EvalReport rep = evaluate(ck, data.rp_test, checkpoint_model_config(ck));
          C[key] = {rep.accuracy, ck.digest()};
          if (log) log("  accuracy " + format_double(rep.accuracy));
        }
        rows[i].accuracy[v].push_back(C[key].accuracy);
        rows[i].checkpoints[v].push_back(C[key].digest);
      }
    }
  return rows;
}

inline std::string format_sweep(const ExperimentConfig& e, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "Exact-match accuracy (%) versus resource-rich training-set size\n\n";
  os << std::left << std::setw(10) << "rr_size" << std::right;
  for (Variant v : e.variants) {
    for (auto s : e.seeds) os << std::setw(14) << (to_string(v) + "/s" + std::to_string(s));
    os << std::setw(14) << (to_string(v) + "/mean");
  }
  os << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(10) << (r.rr_size == 0 ? std::string("0 (base)") : std::to_string(r.rr_size))
       << std::right;
    for (Variant v : e.variants) {
      for (double a : r.accuracy.at(v)) os << std::setw(14) << fixed2(a);
      os << std::setw(14) << fixed2(r.mean(v));
    }
    os << '\n';
  }
  return os.str();
}

inline std::string format_sweep_records(const ExperimentConfig& e, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  for (const auto& r : rows)
    for (Variant v : e.variants) {
      const std::string base = "sweep." + to_string(v) + ".size" + std::to_string(r.rr_size);
      for (std::size_t i = 0; i < e.seeds.size(); ++i) {
        os << base << ".seed" << e.seeds[i] << ".accuracy=" << format_double(r.accuracy.at(v)[i]) << '\n';
        os << base << ".seed" << e.seeds[i] << ".checkpoint=" << r.checkpoints.at(v)[i] << '\n';
      }
      os << base << ".mean=" << format_double(r.mean(v)) << '\n';
    }
  return os.str();
}

/// Writes text to a file atomically.
inline void write_text(const std::filesystem::path& path, const std::string& text) { atomic_write(path, text); }

/// Full `pipeline` command: data, all procedures, checkpoints and reports
/// under `out`. Runtimes go to timings.txt, which is the only output that is
/// not reproducible.
inline ComparisonTable run_pipeline(const ExperimentConfig& e, const std::filesystem::path& out, const Logger& log = {}) {
  namespace fs = std::filesystem;
  const auto start = std::chrono::steady_clock::now();
  const ExperimentData data = build_data(e);
  std::ostringstream timings;
  ComparisonTable t = run_comparison(e, data, log, [&](const RunResult& r, const PretrainCache& cache) {
    const fs::path dir = out / "checkpoints" / to_string(r.variant) / ("seed" + std::to_string(r.seed));
    save_checkpoint(dir / (to_string(r.procedure) + ".xstr"), r.checkpoint);
    if (cache.me) save_checkpoint(dir / "me_pretrain.xstr", *cache.me);
    if (cache.rpld) save_checkpoint(dir / "rpld.xstr", *cache.rpld);
    const std::string name = to_string(r.variant) + "_seed" + std::to_string(r.seed) + "_" + to_string(r.procedure);
    write_text(out / "reports" / (name + ".txt"), format_eval_report(r.report));
    timings << name << ".eval_seconds=" << format_double(r.report.runtime_seconds) << '\n';
  });
  write_text(out / "comparison.txt", format_comparison(e, t));
  write_text(out / "comparison.kv", format_comparison_records(e, t));
  timings << "total_seconds="
          << format_double(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()) << '\n';
  write_text(out / "timings.txt", timings.str());
  return t;
}

}  // namespace xstr
