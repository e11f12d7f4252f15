// SPDX-License-Identifier: Apache-2.0
//
// Teacher-forced SGD training with early stopping, and the transfer recipe
// built on it: multilingual pre-training (ME), resource-poor pre-training
// (RPLD), grafting, and fine-tuning.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xstr/checkpoint.hpp"
#include "xstr/corpus.hpp"
#include "xstr/metrics.hpp"
#include "xstr/model.hpp"

namespace xstr {

enum class StopMetric { ExactMatch, Loss };

struct TrainConfig {
  float lr = 0.01f;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 30;
  double val_fraction = 0.1;
  std::size_t patience = 5;
  double clip_norm = 5.0;  // 0 disables
  StopMetric metric = StopMetric::ExactMatch;
  bool shuffle = true;
  std::uint64_t seed = 0;

  void validate() const {
    auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::ConfigError, what); };
    check(std::isfinite(lr) && lr > 0, "train.lr must be positive");
    check(batch_size >= 1, "train.batch_size must be at least 1");
    check(max_epochs >= 1, "train.max_epochs must be at least 1");
    check(val_fraction > 0.0 && val_fraction < 0.5, "train.val_fraction must lie in (0, 0.5)");
    check(patience >= 1, "train.patience must be at least 1");
    check(std::isfinite(clip_norm) && clip_norm >= 0, "train.clip_norm must be non-negative");
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;  // mean per-sample summed NLL over the epoch
  double val_loss = 0;
  double val_accuracy = 0;
  bool improved = false;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  std::size_t samples_seen = 0;
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  std::size_t clamped_probs = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Greedy predictions for every sample.
inline std::vector<Label> decode_all(const ParamSet& params, const std::vector<Sample>& samples, const ModelConfig& cfg) {
  std::vector<Label> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(greedy_decode(params, s.image, cfg));
  return out;
}

inline std::vector<Label> labels_of(const std::vector<Sample>& samples) {
  std::vector<Label> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

/// Mean per-sample summed NLL without recording gradients.
inline double mean_loss(const ParamSet& params, const std::vector<Sample>& samples, const ModelConfig& cfg) {
  double total = 0;
  for (const auto& s : samples) {
    Tape tape(false);
    total += sample_loss(tape, params, s.image, s.label, cfg).value()[0];
  }
  return samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
}

struct ValidationScore {
  double loss = 0;      // mean per-sample summed NLL
  double accuracy = 0;  // greedy exact match, percent
};

/// Loss and greedy exact match from one teacher-forced pass per sample.
inline ValidationScore validation_score(const ParamSet& params, const std::vector<Sample>& samples,
                                        const ModelConfig& cfg) {
  ValidationScore r;
  if (samples.empty()) return r;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    Tape tape(false);
    const auto [in, out] = teacher_forcing_pair(s.label, cfg);
    const Var probs = decoder_forward(tape, params, in, encode(tape, params, s.image, cfg), cfg);
    r.loss += sequence_nll(probs, out).value()[0];
    correct += teacher_forced_match(probs.value(), s.label, cfg);
  }
  const double n = static_cast<double>(samples.size());
  r.loss /= n;
  r.accuracy = 100.0 * static_cast<double>(correct) / n;
  return r;
}

/// Visiting order of the n training samples in `epoch` (1-based).
inline std::vector<std::size_t> epoch_order(std::size_t n, const TrainConfig& config, std::size_t epoch) {
  if (config.shuffle) {
    Rng rng(derive_seed(derive_seed(config.seed, "epoch-order"), static_cast<std::uint64_t>(epoch)));
    return rng.permutation(n);
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  return order;
}

/// Indices held out for validation: round(n_lang * fraction) per language
/// (at least one when the language has two or more samples), drawn by a
/// seeded permutation within each language, returned sorted.
inline std::vector<std::size_t> validation_indices(const std::vector<Sample>& samples, double fraction,
                                                   std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_lang;
  for (std::size_t i = 0; i < samples.size(); ++i) by_lang[samples[i].language_id].push_back(i);
  std::vector<std::size_t> val;
  for (const auto& [lang, idx] : by_lang) {
    std::size_t k = static_cast<std::size_t>(std::llround(static_cast<double>(idx.size()) * fraction));
    if (k == 0 && idx.size() >= 2) k = 1;
    Rng rng(derive_seed(derive_seed(seed, "validation-split"), lang));
    const auto perm = rng.permutation(idx.size());
    for (std::size_t j = 0; j < k; ++j) val.push_back(idx[perm[j]]);
  }
  std::sort(val.begin(), val.end());
  return val;
}

/// One SGD step on `batch` (mean of per-sample summed NLL); returns the batch
/// mean loss. Non-finite values surface as DivergedLoss.
inline double sgd_batch(ParamSet& params, const std::vector<const Sample*>& batch, const ModelConfig& cfg, float lr,
                        std::size_t* clamped = nullptr, double clip_norm = 0) {
  double total = 0;
  const float w = 1.0f / static_cast<float>(batch.size());
  try {
    for (const Sample* s : batch) {
      Tape tape;
      NllStats stats;
      Var loss = sample_loss(tape, params, s->image, s->label, cfg, &stats);
      total += loss.value()[0];
      if (clamped) *clamped += stats.clamped;
      tape.backward(loss, w);
    }
    clip_grad_norm(params, clip_norm);
    sgd_step(params, lr);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NumericalError) throw;
    fail(ErrorCode::DivergedLoss, std::string("training diverged: ") + e.what());
  }
  require(std::isfinite(total), ErrorCode::DivergedLoss, "non-finite training loss");
  return total / static_cast<double>(batch.size());
}

/// Minimises the teacher-forced loss over `train` from `init`. A seeded
/// validation split is held out; after every epoch the model is scored on it
/// and the parameters of the best epoch (highest exact match, ties broken by
/// lower validation loss) are returned. Training stops after `patience`
/// epochs without improvement or at max_epochs.
inline Checkpoint train_phase(const std::vector<Sample>& train, const TrainConfig& config, const ModelConfig& model_config,
                              const ParamSet& init, TrainLog* log = nullptr, const EpochCallback& on_epoch = {}) {
  config.validate();
  model_config.validate();
  require(!train.empty(), ErrorCode::EmptyDataset, "no training samples");
  {
    const ParamSet fresh = init_params(model_config, 0);
    require(fresh.size() == init.size(), ErrorCode::IncompatibleShapes, "initial parameters do not match the model");
    for (const auto& [name, e] : fresh)
      require(init.contains(name) && init.value(name).shape() == e.value.shape(), ErrorCode::IncompatibleShapes,
              "initial parameter " + name + " does not match the model");
  }
  for (const auto& s : train)
    for (SymbolId c : s.label)
      require(model_config.is_symbol(c), ErrorCode::VocabMismatch, "label id outside the model vocabulary");

  const auto val_idx = validation_indices(train, config.val_fraction, config.seed);
  std::vector<const Sample*> fit;
  std::vector<Sample> val;
  for (std::size_t i = 0, v = 0; i < train.size(); ++i) {
    if (v < val_idx.size() && val_idx[v] == i) {
      val.push_back(train[i]);
      ++v;
    } else {
      fit.push_back(&train[i]);
    }
  }
  require(!fit.empty(), ErrorCode::EmptyDataset, "validation split leaves no training samples");

  TrainLog local;
  TrainLog& L = log ? *log : local;
  L = TrainLog{};
  L.train_size = fit.size();
  L.val_size = val.size();

  ParamSet params = init.subset("");
  Checkpoint best{params.subset(""), {}};
  double best_acc = -1, best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto order = epoch_order(fit.size(), config, epoch);
    double epoch_loss = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      std::vector<const Sample*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + config.batch_size); ++i) batch.push_back(fit[order[i]]);
      epoch_loss += sgd_batch(params, batch, model_config, config.lr, &L.clamped_probs, config.clip_norm) *
                    static_cast<double>(batch.size());
      ++L.steps;
      L.samples_seen += batch.size();
    }

    EpochLog e;
    e.epoch = epoch;
    e.train_loss = epoch_loss / static_cast<double>(fit.size());
    if (!val.empty()) {
      const ValidationScore score = validation_score(params, val, model_config);
      e.val_loss = score.loss;
      e.val_accuracy = config.metric == StopMetric::ExactMatch ? score.accuracy : 0.0;
    } else {
      e.val_loss = e.train_loss;
    }
    e.improved = e.val_accuracy > best_acc || (e.val_accuracy == best_acc && e.val_loss < best_loss);
    if (e.improved) {
      best_acc = e.val_accuracy;
      best_loss = e.val_loss;
      best.params = params.subset("");
      best.meta.epoch = epoch;
      best.meta.val_accuracy = e.val_accuracy;
      L.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    L.epochs.push_back(e);
    if (on_epoch) on_epoch(e);
    if (since_best >= config.patience) break;
  }

  best.meta.seed = config.seed;
  best.meta.model_config = model_config.digest();
  best.meta.extra["model"] = model_config.to_text();
  return best;
}

// ---------------------------------------------------------------------------
// Recipe

enum class Procedure { Baseline, Me, MeMd, MeRpld };

inline std::string to_string(Procedure p) {
  switch (p) {
    case Procedure::Baseline: return "baseline";
    case Procedure::Me: return "me";
    case Procedure::MeMd: return "me_md";
    case Procedure::MeRpld: return "me_rpld";
  }
  return "?";
}

inline Procedure parse_procedure(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  for (auto p : {Procedure::Baseline, Procedure::Me, Procedure::MeMd, Procedure::MeRpld})
    if (to_string(p) == s) return p;
  fail(ErrorCode::ConfigError, "unknown procedure '" + s + "'");
}

/// A labelled dataset with the charset its ids refer to.
struct Dataset {
  Charset charset;
  std::vector<Sample> samples;
};

struct RecipeConfig {
  ModelConfig model;  // vocab_size is filled in per phase
  TrainConfig train;
  std::size_t pretrain_max_epochs = 0;  // epoch cap of multilingual pre-training; 0 = train.max_epochs
};

inline ModelConfig with_vocab(ModelConfig cfg, const Charset& cs) {
  cfg.vocab_size = cs.vocab_size();
  cfg.validate();
  return cfg;
}

inline std::uint64_t init_seed(std::uint64_t seed) { return derive_seed(seed, "init"); }

inline void stamp(Checkpoint& c, Phase phase, std::vector<std::string> parents, const Charset& cs) {
  c.meta.phase = phase;
  c.meta.parents = std::move(parents);
  c.meta.charset = cs.digest();
  c.meta.extra["charset.language_id"] = cs.language_id;
}

/// Training on the resource-poor set from a fresh init.
inline Checkpoint train_baseline(const Dataset& rp, const RecipeConfig& rc, TrainLog* log = nullptr,
                                 const EpochCallback& cb = {}) {
  const ModelConfig cfg = with_vocab(rc.model, rp.charset);
  Checkpoint c = train_phase(rp.samples, rc.train, cfg, init_params(cfg, init_seed(rc.train.seed)), log, cb);
  stamp(c, Phase::Baseline, {}, rp.charset);
  return c;
}

/// Multilingual pre-training over rp and rr in the union vocabulary; keeps
/// both the encoder (ME) and decoder (MD).
inline Checkpoint pretrain_encoder(const Dataset& rp, const Dataset& rr, const RecipeConfig& rc, TrainLog* log = nullptr,
                                   const EpochCallback& cb = {}) {
  MultilingualSet mix = make_multilingual(rp.charset, rp.samples, rr.charset, rr.samples);
  const ModelConfig cfg = with_vocab(rc.model, mix.charset);
  TrainConfig tc = rc.train;
  if (rc.pretrain_max_epochs > 0) tc.max_epochs = rc.pretrain_max_epochs;
  Checkpoint c = train_phase(mix.samples, tc, cfg, init_params(cfg, init_seed(rc.train.seed)), log, cb);
  stamp(c, Phase::MultilingualPretrain, {}, mix.charset);
  return c;
}

/// Resource-poor pre-training; the decoder half is the RPLD. Same objective,
/// data, init and seed as the baseline.
inline Checkpoint pretrain_decoder(const Dataset& rp, const RecipeConfig& rc, TrainLog* log = nullptr,
                                   const EpochCallback& cb = {}) {
  Checkpoint c = train_baseline(rp, rc, log, cb);
  c.meta.phase = Phase::RpPretrain;
  return c;
}

/// `enc.*` from `me`, `dec.*` from `rpld`, validated against `target`.
inline ParamSet graft(const ParamSet& me, const ParamSet& rpld, const ModelConfig& target) {
  const ParamSet enc_shape = init_encoder_params(target, 0);
  const ParamSet dec_shape = init_decoder_params(target, 0);
  auto check = [](const ParamSet& want, const ParamSet& have, const std::string& prefix, ErrorCode vocab_code) {
    const auto have_names = have.names(prefix);
    require(have_names.size() == want.size(), ErrorCode::IncompatibleShapes,
            prefix + "* parameter sets differ (" + std::to_string(have_names.size()) + " vs " +
                std::to_string(want.size()) + " tensors)");
    for (const auto& [name, e] : want) {
      require(have.contains(name), ErrorCode::IncompatibleShapes, "missing " + name);
      const Shape& got = have.value(name).shape();
      if (got == e.value.shape()) continue;
      // A shape that differs only along the vocabulary axis is a vocabulary clash.
      const bool vocab_axis = (name == "dec.embed" && got.size() == 2 && got[1] == e.value.dim(1)) ||
                              (name == "dec.out.w" && got.size() == 2 && got[0] == e.value.dim(0)) ||
                              (name == "dec.out.b" && got.size() == 1);
      fail(vocab_axis ? vocab_code : ErrorCode::IncompatibleShapes,
           name + " is " + shape_str(got) + ", target expects " + shape_str(e.value.shape()));
    }
  };
  check(enc_shape, me, "enc.", ErrorCode::IncompatibleShapes);
  check(dec_shape, rpld, "dec.", ErrorCode::VocabMismatch);
  return merge_params(me.subset("enc."), rpld.subset("dec."));
}

/// Fine-tunes `init` on rp; phase=finetune with the given parents.
inline Checkpoint finetune(const Dataset& rp, const RecipeConfig& rc, const ModelConfig& cfg, const ParamSet& init,
                           std::vector<std::string> parents, const Charset& charset, TrainLog* log = nullptr,
                           const EpochCallback& cb = {}) {
  Checkpoint c = train_phase(rp.samples, rc.train, cfg, init, log, cb);
  stamp(c, Phase::Finetune, std::move(parents), charset);
  return c;
}

/// Pre-trained checkpoints shared between procedures of one seed.
struct PretrainCache {
  std::optional<Checkpoint> me;
  std::optional<Checkpoint> rpld;
};

struct ProcedureHooks {
  TrainLog* log = nullptr;  // log of the final phase
  EpochCallback on_epoch;
  std::function<void(const std::string& phase)> on_phase;
};

/// One procedure: baseline, me (ME encoder + fresh decoder),
/// me_md (ME encoder + MD decoder, union vocabulary), me_rpld (ME + RPLD).
inline Checkpoint run_procedure(Procedure proc, const Dataset& rp, const Dataset& rr, const RecipeConfig& rc,
                                PretrainCache* cache = nullptr, const ProcedureHooks& hooks = {}) {
  PretrainCache local;
  PretrainCache& C = cache ? *cache : local;
  auto phase = [&](const char* name) {
    if (hooks.on_phase) hooks.on_phase(name);
  };
  auto need_me = [&]() -> const Checkpoint& {
    if (!C.me) {
      phase("multilingual-pretrain");
      C.me = pretrain_encoder(rp, rr, rc, nullptr, hooks.on_epoch);
    }
    return *C.me;
  };
  const ModelConfig rp_cfg = with_vocab(rc.model, rp.charset);
  switch (proc) {
    case Procedure::Baseline:
      phase("baseline");
      return train_baseline(rp, rc, hooks.log, hooks.on_epoch);
    case Procedure::Me: {
      const Checkpoint& me = need_me();
      const ParamSet fresh = init_decoder_params(rp_cfg, derive_seed(rc.train.seed, "fresh-decoder"));
      phase("finetune");
      return finetune(rp, rc, rp_cfg, graft(me.params, fresh, rp_cfg), {me.digest()}, rp.charset, hooks.log,
                      hooks.on_epoch);
    }
    case Procedure::MeMd: {
      const Checkpoint& me = need_me();
      const Charset u = union_charset(rp.charset, rr.charset);
      phase("finetune");
      return finetune(rp, rc, with_vocab(rc.model, u), me.params, {me.digest()}, u, hooks.log, hooks.on_epoch);
    }
    case Procedure::MeRpld: {
      const Checkpoint& me = need_me();
      if (!C.rpld) {
        phase("rp-pretrain");
        C.rpld = pretrain_decoder(rp, rc, nullptr, hooks.on_epoch);
      }
      phase("finetune");
      return finetune(rp, rc, rp_cfg, graft(me.params, C.rpld->params, rp_cfg), {me.digest(), C.rpld->digest()},
                      rp.charset, hooks.log, hooks.on_epoch);
    }
  }
  fail(ErrorCode::ConfigError, "unknown procedure");
}

}  // namespace xstr
