#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "mage/errors.hpp"
#include "mage/loss.hpp"
#include "mage/pipeline.hpp"
#include "mage/train.hpp"

namespace mage {

// ---------------------------------------------------------------------------
// Experiment reports
// ---------------------------------------------------------------------------

struct ExperimentReport {
  std::string arm;
  uint64_t seed = 0;
  int64_t steps = 0;
  double final_itg = 0.0;
  double final_itdm = 0.0;
  double final_total = 0.0;
  double heldout_distance = 0.0;  // mean pooled embedding distance, held-out set
  double heldout_itg = 0.0;
  double heldout_total = 0.0;  // itg + itdm, measured with lambda 1
  uint64_t dataset_hash = 0;
  double wall_clock_sec = 0.0;
};

inline std::string reports_to_csv(const std::vector<ExperimentReport>& reports) {
  std::string out =
      "arm,seed,steps,final_itg,final_itdm,final_total,heldout_distance,heldout_itg,"
      "heldout_total,dataset_hash,wall_clock_sec\n";
  for (const ExperimentReport& r : reports) {
    char row[512];
    std::snprintf(row, sizeof(row), "%s,%llu,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%016llx,%.3f\n",
                  r.arm.c_str(), static_cast<unsigned long long>(r.seed),
                  static_cast<long long>(r.steps), r.final_itg, r.final_itdm, r.final_total,
                  r.heldout_distance, r.heldout_itg, r.heldout_total,
                  static_cast<unsigned long long>(r.dataset_hash), r.wall_clock_sec);
    out += row;
  }
  return out;
}

struct HeldoutMetrics {
  double mean_distance = 0.0;
  double itg = 0.0;
  double itdm = 0.0;
  double total = 0.0;
};

// Forward-only metrics on a held-out set: per-sample pooled embedding
// distance plus the measured loss components.
inline HeldoutMetrics evaluate_heldout(Pipeline& model, const std::vector<PairedSample>& samples) {
  if (samples.empty()) throw ContractError("evaluate_heldout: empty set");
  HeldoutMetrics m;
  for (const PairedSample& s : samples) {
    Tensor features = encode_image(s.image, model.encoder);
    IanActivations act = project_tokens(model, s.image, features);
    Tensor prefix = concat_rows({act.tokens, lm_embed(model.lm, s.instruction)});
    m.itg += itg_loss(lm_forward(model.lm, prefix, s.caption), s.caption).item();
    Tensor diff = sub(pool(act.tokens), pool(lm_embed(model.lm, s.caption)));
    double sq = 0.0;
    for (double d : diff.data()) sq += d * d;
    m.itdm += sq;
    m.mean_distance += std::sqrt(sq);
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  m.itg *= inv;
  m.itdm *= inv;
  m.mean_distance *= inv;
  m.total = m.itg + m.itdm;
  return m;
}

// ---------------------------------------------------------------------------
// Ablation arms (the Table 2 analogue, direction-only at desk scale)
// ---------------------------------------------------------------------------

// full      IAN projector, composite loss
// no_ian    linear projector, composite loss
// no_align  IAN projector, generation loss only (distance measured, not trained)
// neither   linear projector, generation loss only
inline const std::vector<std::string>& ablation_arm_names() {
  static const std::vector<std::string> arms = {"full", "no_ian", "no_align", "neither"};
  return arms;
}

// The linear projector keeps one token per patch, so those arms run with
// grid_out == grid_in; metrics stay comparable because both losses live in
// pooled embedding space.
inline TrainConfig arm_config(const TrainConfig& base, const std::string& arm) {
  TrainConfig cfg = base;
  if (arm == "full") {
    cfg.projector = ProjectorKind::ian;
    cfg.lambda_itdm = 1.0;
  } else if (arm == "no_ian") {
    cfg.projector = ProjectorKind::linear;
    cfg.ian.grid_out = cfg.ian.grid_in;
    cfg.lambda_itdm = 1.0;
  } else if (arm == "no_align") {
    cfg.projector = ProjectorKind::ian;
    cfg.lambda_itdm = 0.0;
  } else if (arm == "neither") {
    cfg.projector = ProjectorKind::linear;
    cfg.ian.grid_out = cfg.ian.grid_in;
    cfg.lambda_itdm = 0.0;
  } else {
    throw ConfigError("unknown ablation arm '" + arm + "'");
  }
  return cfg;
}

inline ExperimentReport run_experiment_arm(const TrainConfig& cfg, const std::string& arm_name,
                                           const std::vector<PairedSample>& heldout) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result = run_stage(cfg);

  Pipeline model = init_pipeline(cfg.pipeline(), cfg.seed);
  std::vector<NamedParam> trainable = apply_freeze(model, cfg.freeze);
  Adam adam({cfg.lr, cfg.beta1, cfg.beta2, cfg.eps});
  restore_state(model, trainable, adam, result.checkpoint);
  HeldoutMetrics held = evaluate_heldout(model, heldout);

  ExperimentReport report;
  report.arm = arm_name;
  report.seed = cfg.seed;
  report.steps = cfg.steps;
  report.final_total = result.final_total;
  // Final itg/itdm from the last metrics row.
  {
    const std::string& csv = result.metrics_csv;
    const size_t last_nl = csv.rfind('\n', csv.size() - 2);
    const std::string row = csv.substr(last_nl + 1);
    long long step;
    std::sscanf(row.c_str(), "%lld,%lg,%lg", &step, &report.final_itg, &report.final_itdm);
  }
  report.heldout_distance = held.mean_distance;
  report.heldout_itg = held.itg;
  report.heldout_total = held.total;
  report.dataset_hash = result.dataset_hash;
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// Trains every requested arm on byte-identical data for every seed.
inline std::vector<ExperimentReport> run_ablation(const std::vector<std::string>& arms,
                                                  const std::vector<uint64_t>& seeds,
                                                  const TrainConfig& base,
                                                  const std::vector<PairedSample>& heldout) {
  if (seeds.size() < 3) throw ConfigError("run_ablation needs at least 3 seeds");
  for (const std::string& arm : arms) arm_config(base, arm);  // validate arm names up front
  std::vector<ExperimentReport> reports;
  for (const std::string& arm : arms)
    for (uint64_t seed : seeds) {
      TrainConfig cfg = arm_config(base, arm);
      cfg.seed = seed;
      reports.push_back(run_experiment_arm(cfg, arm, heldout));
    }
  return reports;
}

// Token-budget sweep over the Table 4 axis; identical recipe per budget.
inline std::vector<ExperimentReport> token_sweep(const std::vector<int>& budgets,
                                                 const TrainConfig& base,
                                                 const std::vector<PairedSample>& heldout) {
  std::vector<ExperimentReport> reports;
  for (int budget : budgets) {
    int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(budget))));
    if (grid * grid != budget)
      throw ConfigError("token budget " + std::to_string(budget) + " is not a square grid");
    TrainConfig cfg = base;
    cfg.projector = ProjectorKind::ian;
    cfg.ian.grid_out = grid;
    reports.push_back(run_experiment_arm(cfg, "tokens-" + std::to_string(budget), heldout));
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Attention export (binary portable graymap)
// ---------------------------------------------------------------------------

// One attention row reshaped to the key grid and min-max scaled to 0..255.
// A constant row (min == max) saturates to 255 by convention.
inline std::string attention_row_to_pgm(const Tensor& attention, int token_index, int grid_in) {
  if (token_index < 0 || token_index >= attention.rows())
    throw IndexError("token index " + std::to_string(token_index) + " out of range for " +
                     std::to_string(attention.rows()) + " tokens");
  if (attention.cols() != grid_in * grid_in)
    throw DimensionError("attention row has " + std::to_string(attention.cols()) +
                         " keys, expected " + std::to_string(grid_in * grid_in));
  std::vector<double> row(attention.cols());
  for (int j = 0; j < attention.cols(); ++j) row[j] = attention(token_index, j);
  double lo = row[0], hi = row[0];
  for (double v : row) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string out = "P5\n" + std::to_string(grid_in) + " " + std::to_string(grid_in) + "\n255\n";
  for (double v : row) {
    const int px = (hi == lo) ? 255 : static_cast<int>(std::lround((v - lo) / (hi - lo) * 255.0));
    out.push_back(static_cast<char>(px));
  }
  return out;
}

inline void export_attention(Pipeline& model, const Tensor& image, int token_index,
                             const std::string& path) {
  if (model.cfg.projector != ProjectorKind::ian)
    throw ConfigError("attention export requires the IAN projector");
  Tensor features = encode_image(image, model.encoder);
  IanActivations act = ian_forward(image, features, model.cfg.ian, model.ian);
  const std::string pgm = attention_row_to_pgm(act.attention, token_index, model.cfg.ian.grid_in);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write attention map to '" + path + "'");
  f.write(pgm.data(), static_cast<std::streamsize>(pgm.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

struct PgmImage {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> pixels;
};

inline PgmImage parse_pgm(const std::string& bytes) {
  PgmImage img;
  int maxval = 0;
  size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (next_token() != "P5") throw IoError("not a binary PGM (P5) file");
  img.width = std::stoi(next_token());
  img.height = std::stoi(next_token());
  maxval = std::stoi(next_token());
  if (maxval != 255) throw IoError("expected maxval 255");
  ++pos;  // single whitespace after maxval
  if (bytes.size() - pos < static_cast<size_t>(img.width) * img.height)
    throw IoError("PGM pixel data truncated");
  img.pixels.assign(bytes.begin() + pos, bytes.begin() + pos + img.width * img.height);
  return img;
}

}  // namespace mage
