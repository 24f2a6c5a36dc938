#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mage/checkpoint.hpp"
#include "mage/errors.hpp"
#include "mage/loss.hpp"
#include "mage/optim.hpp"
#include "mage/pipeline.hpp"
#include "mage/rng.hpp"

namespace mage {

struct TrainAbort : Error {
  int64_t step;
  TrainAbort(int64_t s, const std::string& why)
      : Error("training aborted at step " + std::to_string(s) + ": " + why), step(s) {}
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct TrainConfig {
  IanConfig ian;
  LmConfig lm;
  int patch_size = 2;
  ProjectorKind projector = ProjectorKind::ian;
  int stage = 1;
  int64_t steps = 200;
  int batch_size = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lambda_itdm = 1.0;
  double clip_norm = 0.0;  // 0 disables clipping
  uint64_t seed = 42;
  std::set<std::string> freeze;  // subset of {encoder, lm, ian}
  std::string data;
  std::string checkpoint_out;
  std::string metrics_out;
  std::string resume;     // bit-exact continuation: params + optimizer + step
  std::string init_from;  // warm start: params only, fresh optimizer at step 0

  PipelineConfig pipeline() const {
    PipelineConfig p;
    p.ian = ian;
    p.lm = lm;
    p.lm.d_l = ian.d_l;
    p.patch_size = patch_size;
    p.projector = projector;
    return p;
  }
};

inline std::set<std::string> default_freeze_for_stage(int stage) {
  if (stage == 1) return {"encoder", "lm"};
  return {};
}

inline void validate_train_config(const TrainConfig& cfg) {
  cfg.pipeline().validate();
  if (cfg.stage < 1 || cfg.stage > 3)
    throw ConfigError("stage must be 1, 2 or 3, got " + std::to_string(cfg.stage));
  if (cfg.steps < 0) throw ConfigError("steps must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.lr < 0.0 || cfg.lambda_itdm < 0.0 || cfg.clip_norm < 0.0)
    throw ConfigError("lr, lambda_itdm and clip_norm must be >= 0");
  for (const std::string& g : cfg.freeze)
    if (g != "encoder" && g != "lm" && g != "ian")
      throw ConfigError("unknown parameter group '" + g + "' in freeze");
  if (cfg.freeze != default_freeze_for_stage(cfg.stage)) {
    std::string got;
    for (const std::string& g : cfg.freeze) got += g + " ";
    throw ConfigError("invalid freeze/stage combination: stage " + std::to_string(cfg.stage) +
                      " requires freeze == {" + (cfg.stage == 1 ? "encoder, lm" : "") +
                      "}, got {" + got + "}");
  }
}

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["ian"] = {{"d_v", cfg.ian.d_v},         {"d_l", cfg.ian.d_l},
              {"d_b", cfg.ian.d_b},         {"d_attn", cfg.ian.d_attn},
              {"grid_in", cfg.ian.grid_in}, {"grid_out", cfg.ian.grid_out},
              {"hidden", cfg.ian.hidden}};
  j["lm"] = {{"vocab", cfg.lm.vocab}, {"blocks", cfg.lm.blocks}, {"d_ff", cfg.lm.d_ff}};
  j["patch_size"] = cfg.patch_size;
  j["projector"] = projector_name(cfg.projector);
  j["stage"] = cfg.stage;
  j["steps"] = cfg.steps;
  j["batch_size"] = cfg.batch_size;
  j["lr"] = cfg.lr;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["eps"] = cfg.eps;
  j["lambda_itdm"] = cfg.lambda_itdm;
  j["clip_norm"] = cfg.clip_norm;
  j["seed"] = cfg.seed;
  j["freeze"] = cfg.freeze;
  j["data"] = cfg.data;
  j["checkpoint_out"] = cfg.checkpoint_out;
  j["metrics_out"] = cfg.metrics_out;
  j["resume"] = cfg.resume;
  j["init_from"] = cfg.init_from;
  return j;
}

// Strict parse: unknown keys are rejected so typos cannot silently fall back
// to defaults. Freeze defaults to the stage's required mask when absent.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "ian",  "lm",          "patch_size", "projector",   "stage",     "steps",
      "batch_size", "lr",    "beta1",      "beta2",       "eps",       "lambda_itdm",
      "clip_norm",  "seed",  "freeze",     "data",        "checkpoint_out",
      "metrics_out", "resume", "init_from"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  TrainConfig cfg;
  if (j.contains("ian")) {
    static const std::set<std::string> ian_known = {"d_v",     "d_l",      "d_b",   "d_attn",
                                                    "grid_in", "grid_out", "hidden"};
    for (const auto& [key, value] : j.at("ian").items()) {
      (void)value;
      if (!ian_known.count(key)) throw ConfigError("unknown config key 'ian." + key + "'");
    }
    const nlohmann::json& ji = j.at("ian");
    cfg.ian.d_v = ji.value("d_v", cfg.ian.d_v);
    cfg.ian.d_l = ji.value("d_l", cfg.ian.d_l);
    cfg.ian.d_b = ji.value("d_b", cfg.ian.d_b);
    cfg.ian.d_attn = ji.value("d_attn", cfg.ian.d_attn);
    cfg.ian.grid_in = ji.value("grid_in", cfg.ian.grid_in);
    cfg.ian.grid_out = ji.value("grid_out", cfg.ian.grid_out);
    cfg.ian.hidden = ji.value("hidden", cfg.ian.hidden);
  }
  if (j.contains("lm")) {
    static const std::set<std::string> lm_known = {"vocab", "blocks", "d_ff"};
    for (const auto& [key, value] : j.at("lm").items()) {
      (void)value;
      if (!lm_known.count(key)) throw ConfigError("unknown config key 'lm." + key + "'");
    }
    const nlohmann::json& jl = j.at("lm");
    cfg.lm.vocab = jl.value("vocab", cfg.lm.vocab);
    cfg.lm.blocks = jl.value("blocks", cfg.lm.blocks);
    cfg.lm.d_ff = jl.value("d_ff", cfg.lm.d_ff);
  }
  cfg.patch_size = j.value("patch_size", cfg.patch_size);
  if (j.contains("projector")) cfg.projector = parse_projector(j.at("projector").get<std::string>());
  cfg.stage = j.value("stage", cfg.stage);
  cfg.steps = j.value("steps", cfg.steps);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.beta1 = j.value("beta1", cfg.beta1);
  cfg.beta2 = j.value("beta2", cfg.beta2);
  cfg.eps = j.value("eps", cfg.eps);
  cfg.lambda_itdm = j.value("lambda_itdm", cfg.lambda_itdm);
  cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("freeze")) {
    cfg.freeze.clear();
    for (const nlohmann::json& g : j.at("freeze")) cfg.freeze.insert(g.get<std::string>());
  } else {
    cfg.freeze = default_freeze_for_stage(cfg.stage);
  }
  cfg.data = j.value("data", cfg.data);
  cfg.checkpoint_out = j.value("checkpoint_out", cfg.checkpoint_out);
  cfg.metrics_out = j.value("metrics_out", cfg.metrics_out);
  cfg.resume = j.value("resume", cfg.resume);
  cfg.init_from = j.value("init_from", cfg.init_from);
  cfg.lm.d_l = cfg.ian.d_l;
  return cfg;
}

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

// Marks frozen groups and returns the trainable tensors in registry order.
// Frozen parameters never enter optimizer state; their grads stay absent.
inline std::vector<NamedParam> apply_freeze(Pipeline& model, const std::set<std::string>& freeze) {
  for (const std::string& g : freeze)
    if (g != "encoder" && g != "lm" && g != "ian")
      throw ConfigError("unknown parameter group '" + g + "' in freeze");
  std::vector<NamedParam> trainable;
  for (NamedParam& p : named_params(model)) {
    const bool frozen = freeze.count(p.group) > 0;
    p.tensor.set_requires_grad(!frozen);
    if (frozen)
      p.tensor.drop_grad();
    else
      trainable.push_back(p);
  }
  return trainable;
}

inline uint64_t group_hash(Pipeline& model, const std::string& group) {
  uint64_t h = 14695981039346656037ull;
  for (const NamedParam& p : named_params(model)) {
    if (p.group != group) continue;
    h = fnv1a64(p.tensor.data().data(), p.tensor.data().size() * sizeof(double), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoint <-> model state
// ---------------------------------------------------------------------------

inline Checkpoint snapshot_state(Pipeline& model, const std::vector<NamedParam>& trainable,
                                 const Adam& adam, const nlohmann::json& config_echo, int64_t step,
                                 const CounterRng& rng) {
  Checkpoint ckpt;
  ckpt.config = config_echo;
  ckpt.rng_seed = rng.seed();
  ckpt.rng_counter = rng.counter();
  ckpt.step = step;
  for (const NamedParam& p : named_params(model))
    ckpt.entries.push_back({p.name, p.tensor.shape(), p.tensor.data()});
  for (size_t i = 0; i < trainable.size(); ++i) {
    const AdamSlot empty;
    const AdamSlot& slot = i < adam.slots().size() ? adam.slots()[i] : empty;
    const std::vector<double>& m =
        slot.m.empty() ? std::vector<double>(trainable[i].tensor.size(), 0.0) : slot.m;
    const std::vector<double>& v =
        slot.v.empty() ? std::vector<double>(trainable[i].tensor.size(), 0.0) : slot.v;
    ckpt.entries.push_back({"adam.m." + trainable[i].name, trainable[i].tensor.shape(), m});
    ckpt.entries.push_back({"adam.v." + trainable[i].name, trainable[i].tensor.shape(), v});
  }
  return ckpt;
}

inline void restore_state(Pipeline& model, const std::vector<NamedParam>& trainable, Adam& adam,
                          const Checkpoint& ckpt) {
  for (NamedParam& p : named_params(model)) {
    const CheckpointEntry* e = ckpt.find(p.name);
    if (!e) throw CheckpointError("checkpoint is missing tensor '" + p.name + "'");
    if (e->shape != p.tensor.shape())
      throw CheckpointError("checkpoint tensor '" + p.name + "' has shape " + shape_str(e->shape) +
                            ", model expects " + shape_str(p.tensor.shape()));
    p.tensor.data() = e->data;
  }
  adam.slots().assign(trainable.size(), AdamSlot{});
  for (size_t i = 0; i < trainable.size(); ++i) {
    const CheckpointEntry* m = ckpt.find("adam.m." + trainable[i].name);
    const CheckpointEntry* v = ckpt.find("adam.v." + trainable[i].name);
    if (!m || !v)
      throw CheckpointError("checkpoint is missing optimizer state for '" + trainable[i].name +
                            "'");
    adam.slots()[i].m = m->data;
    adam.slots()[i].v = v->data;
  }
  adam.set_step_count(ckpt.step);
}

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

struct TrainResult {
  Checkpoint checkpoint;
  std::string metrics_csv;
  double first_total = 0.0;
  double final_total = 0.0;
  uint64_t dataset_hash = 0;
  int64_t steps_run = 0;
};

// Stage-appropriate slice of the dataset. Stage 1 trains on every caption
// sample; stages 2 and 3 split the caption samples 90/10 by a seeded shuffle,
// with stage 3 adding the tool-plan samples.
inline std::vector<PairedSample> stage_samples(const std::vector<PairedSample>& all, int stage,
                                               uint64_t seed) {
  std::vector<PairedSample> scenes, plans;
  for (const PairedSample& s : all) (s.is_plan() ? plans : scenes).push_back(s);
  if (scenes.empty()) throw ConfigError("dataset has no caption samples");
  if (stage == 1) return scenes;

  std::vector<size_t> idx(scenes.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  CounterRng rng(derive_seed(seed, "split"));
  for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  const size_t cut = scenes.size() * 9 / 10;

  std::vector<PairedSample> out;
  if (stage == 2) {
    for (size_t i = 0; i < cut; ++i) out.push_back(scenes[idx[i]]);
  } else {
    for (size_t i = cut; i < scenes.size(); ++i) out.push_back(scenes[idx[i]]);
    if (plans.empty())
      throw ConfigError("stage 3 requires tool-plan samples in the dataset (gen-data --plans)");
    out.insert(out.end(), plans.begin(), plans.end());
  }
  if (out.empty()) throw ConfigError("stage split left no samples");
  return out;
}

inline std::vector<size_t> epoch_permutation(size_t n, uint64_t seed, int64_t epoch) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  CounterRng rng(derive_seed(seed, "shuffle", static_cast<uint64_t>(epoch)));
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// Executes cfg.steps optimizer steps (continuing from a resume checkpoint if
// given), appends one metrics row per step and snapshots the final state.
inline TrainResult run_stage(const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (cfg.data.empty()) throw ConfigError("train config needs a dataset path in 'data'");
  const std::vector<PairedSample> all = load_dataset(cfg.data);
  const std::vector<PairedSample> samples = stage_samples(all, cfg.stage, cfg.seed);
  const int64_t batches_per_epoch = static_cast<int64_t>(samples.size()) / cfg.batch_size;
  if (batches_per_epoch < 1)
    throw ConfigError("dataset slice of " + std::to_string(samples.size()) +
                      " samples is smaller than one batch of " + std::to_string(cfg.batch_size));

  Pipeline model = init_pipeline(cfg.pipeline(), cfg.seed);
  std::vector<NamedParam> trainable = apply_freeze(model, cfg.freeze);
  AdamConfig adam_cfg{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
  Adam adam(adam_cfg);
  CounterRng train_rng(derive_seed(cfg.seed, "train"));
  int64_t start_step = 0;

  nlohmann::json config_echo = train_config_to_json(cfg);
  if (!cfg.resume.empty() && !cfg.init_from.empty())
    throw ConfigError("resume and init_from are mutually exclusive");
  if (!cfg.resume.empty()) {
    Checkpoint prev = load_checkpoint(cfg.resume);
    restore_state(model, trainable, adam, prev);
    start_step = prev.step;
    train_rng = CounterRng(prev.rng_seed, prev.rng_counter);
  } else if (!cfg.init_from.empty()) {
    // Warm start for stage chaining: parameters only.
    Checkpoint prev = load_checkpoint(cfg.init_from);
    for (NamedParam& p : named_params(model)) {
      const CheckpointEntry* e = prev.find(p.name);
      if (!e) throw CheckpointError("init_from checkpoint is missing tensor '" + p.name + "'");
      if (e->shape != p.tensor.shape())
        throw CheckpointError("init_from tensor '" + p.name + "' has shape " +
                              shape_str(e->shape) + ", model expects " +
                              shape_str(p.tensor.shape()));
      p.tensor.data() = e->data;
    }
  }

  std::string metrics = "step,itg,itdm,total\n";
  TrainResult result;
  std::vector<Tensor> trainable_tensors;
  for (const NamedParam& p : trainable) trainable_tensors.push_back(p.tensor);

  for (int64_t k = 0; k < cfg.steps; ++k) {
    const int64_t step = start_step + k + 1;
    const int64_t epoch = (step - 1) / batches_per_epoch;
    const int64_t batch_index = (step - 1) % batches_per_epoch;
    const std::vector<size_t> perm = epoch_permutation(samples.size(), cfg.seed, epoch);

    std::vector<PairedSample> batch;
    batch.reserve(cfg.batch_size);
    for (int b = 0; b < cfg.batch_size; ++b)
      batch.push_back(samples[perm[batch_index * cfg.batch_size + b]]);

    for (const Tensor& t : trainable_tensors) {
      Tensor tt = t;
      tt.zero_grad();
    }
    LossBreakdown loss = combined_loss(model, batch, cfg.lambda_itdm);
    if (!std::isfinite(loss.total)) throw TrainAbort(step, "non-finite loss");

    char row[128];
    std::snprintf(row, sizeof(row), "%lld,%.17g,%.17g,%.17g\n", static_cast<long long>(step),
                  loss.itg, loss.itdm, loss.total);
    metrics += row;
    if (k == 0) result.first_total = loss.total;
    result.final_total = loss.total;

    loss.total_tensor.backward();
    if (cfg.clip_norm > 0.0) clip_grad_norm(trainable_tensors, cfg.clip_norm);
    adam.step(trainable_tensors);
  }

  result.metrics_csv = std::move(metrics);
  result.dataset_hash = fnv1a64(serialize_dataset(samples));
  result.steps_run = cfg.steps;
  result.checkpoint =
      snapshot_state(model, trainable, adam, config_echo, start_step + cfg.steps, train_rng);

  if (!cfg.metrics_out.empty()) {
    std::ofstream f(cfg.metrics_out, std::ios::binary);
    if (!f) throw IoError("cannot write metrics to '" + cfg.metrics_out + "'");
    f << result.metrics_csv;
  }
  if (!cfg.checkpoint_out.empty()) save_checkpoint(cfg.checkpoint_out, result.checkpoint);
  return result;
}

}  // namespace mage
