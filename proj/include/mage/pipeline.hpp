#pragma once

#include <string>
#include <vector>

#include "mage/errors.hpp"
#include "mage/ian.hpp"
#include "mage/rng.hpp"
#include "mage/tensor.hpp"
#include "mage/toy_models.hpp"

namespace mage {

// Projector variants for the experiment harness. All variants map
// (image, encoder features) to [N_out x d_l] visual tokens.
enum class ProjectorKind { linear, avgpool_linear, ian };

inline const char* projector_name(ProjectorKind k) {
  switch (k) {
    case ProjectorKind::linear: return "linear";
    case ProjectorKind::avgpool_linear: return "avgpool_linear";
    case ProjectorKind::ian: return "ian";
  }
  return "?";
}

inline ProjectorKind parse_projector(const std::string& s) {
  for (ProjectorKind k : {ProjectorKind::linear, ProjectorKind::avgpool_linear, ProjectorKind::ian})
    if (s == projector_name(k)) return k;
  throw ConfigError("unknown projector '" + s + "'");
}

// Token-preserving per-feature projection (the classic linear baseline) with
// an optional fixed mean-pooling front end for the reduced-token baseline.
struct LinearProjector {
  Tensor w;  // [d_v x d_l]
  Tensor b;  // [d_l]
};

struct PipelineConfig {
  IanConfig ian;
  LmConfig lm;
  int patch_size = 2;
  ProjectorKind projector = ProjectorKind::ian;

  int image_h() const { return ian.grid_in * patch_size; }
  int image_w() const { return ian.grid_in * patch_size; }

  void validate() const {
    ian.validate();
    if (lm.d_l != ian.d_l)
      throw ConfigError("pipeline: lm.d_l " + std::to_string(lm.d_l) + " must equal ian.d_l " +
                        std::to_string(ian.d_l));
    if (lm.vocab < 1 || lm.blocks < 1 || lm.d_ff < 1)
      throw ConfigError("pipeline: lm dims must be >= 1");
    if (patch_size < 1) throw ConfigError("pipeline: patch_size must be >= 1");
    if (projector == ProjectorKind::linear && ian.grid_out != ian.grid_in)
      throw ConfigError(
          "pipeline: the linear projector preserves token count; set grid_out == grid_in");
  }
};

struct NamedParam {
  std::string name;
  std::string group;  // encoder | ian | lm
  Tensor tensor;
};

// The full desk-scale model: encoder -> projector -> LM.
struct Pipeline {
  PipelineConfig cfg;
  ToyVisualEncoder encoder;
  IanParams ian;           // populated when projector == ian
  LinearProjector linear;  // populated otherwise
  ToyCausalLM lm;
};

inline Pipeline init_pipeline(PipelineConfig cfg, uint64_t seed) {
  cfg.lm.d_l = cfg.ian.d_l;
  cfg.validate();
  CounterRng rng(derive_seed(seed, "init"));
  Pipeline p;
  p.cfg = cfg;
  p.encoder = init_encoder(cfg.ian.c_img, cfg.patch_size, cfg.ian.d_v, rng);
  if (cfg.projector == ProjectorKind::ian) {
    p.ian = init_ian(cfg.ian, rng);
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.ian.d_v));
    std::vector<double> w(static_cast<size_t>(cfg.ian.d_v) * cfg.ian.d_l);
    for (double& v : w) v = rng.uniform(-bound, bound);
    p.linear.w = Tensor::param({cfg.ian.d_v, cfg.ian.d_l}, std::move(w));
    p.linear.b = Tensor::param({cfg.ian.d_l}, std::vector<double>(cfg.ian.d_l, 0.0));
  }
  p.lm = init_lm(cfg.lm, rng);
  return p;
}

// Fixed parameter enumeration order; checkpoint manifests, optimizer slots
// and gradient checks all key off this order. The projector group is named
// "ian" for every projector kind so freeze masks stay uniform.
inline std::vector<NamedParam> named_params(Pipeline& p) {
  std::vector<NamedParam> out;
  out.push_back({"encoder.embed", "encoder", p.encoder.embed});
  out.push_back({"encoder.mix", "encoder", p.encoder.mix});
  if (p.cfg.projector == ProjectorKind::ian) {
    out.push_back({"ian.vab.w1", "ian", p.ian.vab.w1});
    out.push_back({"ian.vab.b1", "ian", p.ian.vab.b1});
    out.push_back({"ian.vab.w2", "ian", p.ian.vab.w2});
    out.push_back({"ian.vab.b2", "ian", p.ian.vab.b2});
    out.push_back({"ian.vab.norm_gamma", "ian", p.ian.vab.norm_gamma});
    out.push_back({"ian.vab.norm_beta", "ian", p.ian.vab.norm_beta});
    out.push_back({"ian.seb.conv_kernels", "ian", p.ian.seb.conv_kernels});
    out.push_back({"ian.seb.wq", "ian", p.ian.seb.wq});
    out.push_back({"ian.seb.wk", "ian", p.ian.seb.wk});
    out.push_back({"ian.seb.wv", "ian", p.ian.seb.wv});
    out.push_back({"ian.seb.wo", "ian", p.ian.seb.wo});
  } else {
    out.push_back({"linear.w", "ian", p.linear.w});
    out.push_back({"linear.b", "ian", p.linear.b});
  }
  out.push_back({"lm.tok_embed", "lm", p.lm.tok_embed});
  for (size_t i = 0; i < p.lm.blocks.size(); ++i) {
    const std::string base = "lm.block" + std::to_string(i) + ".";
    DecoderBlock& blk = p.lm.blocks[i];
    out.push_back({base + "ln1_gamma", "lm", blk.ln1_gamma});
    out.push_back({base + "ln1_beta", "lm", blk.ln1_beta});
    out.push_back({base + "wq", "lm", blk.wq});
    out.push_back({base + "wk", "lm", blk.wk});
    out.push_back({base + "wv", "lm", blk.wv});
    out.push_back({base + "wo", "lm", blk.wo});
    out.push_back({base + "ln2_gamma", "lm", blk.ln2_gamma});
    out.push_back({base + "ln2_beta", "lm", blk.ln2_beta});
    out.push_back({base + "mlp_w1", "lm", blk.mlp_w1});
    out.push_back({base + "mlp_b1", "lm", blk.mlp_b1});
    out.push_back({base + "mlp_w2", "lm", blk.mlp_w2});
    out.push_back({base + "mlp_b2", "lm", blk.mlp_b2});
  }
  out.push_back({"lm.final_gamma", "lm", p.lm.final_gamma});
  out.push_back({"lm.final_beta", "lm", p.lm.final_beta});
  out.push_back({"lm.head", "lm", p.lm.head});
  return out;
}

// Fixed mean-pooling matrix over the patch grid, one row per output token.
inline Tensor mean_pool_matrix(int grid_in, int grid_out) {
  const ConvGeometry geom = conv_geometry(grid_in, grid_out);
  const int n_in = grid_in * grid_in, n_out = grid_out * grid_out;
  std::vector<double> m(static_cast<size_t>(n_out) * n_in, 0.0);
  const double inv = 1.0 / (static_cast<double>(geom.kernel) * geom.kernel);
  for (int oy = 0; oy < grid_out; ++oy)
    for (int ox = 0; ox < grid_out; ++ox) {
      const int row = oy * grid_out + ox;
      for (int u = 0; u < geom.kernel; ++u)
        for (int v = 0; v < geom.kernel; ++v) {
          const int src = (oy * geom.stride + u) * grid_in + (ox * geom.stride + v);
          m[static_cast<size_t>(row) * n_in + src] = inv;
        }
    }
  return Tensor::from({n_out, n_in}, std::move(m));
}

// Visual tokens for the configured projector. The attention tensor is only
// defined for the IAN projector.
inline IanActivations project_tokens(Pipeline& p, const Tensor& image, const Tensor& features) {
  switch (p.cfg.projector) {
    case ProjectorKind::ian:
      return ian_forward(image, features, p.cfg.ian, p.ian);
    case ProjectorKind::linear:
      return {add_rowvec(matmul(features, p.linear.w), p.linear.b), Tensor()};
    case ProjectorKind::avgpool_linear: {
      Tensor pooled = matmul(mean_pool_matrix(p.cfg.ian.grid_in, p.cfg.ian.grid_out), features);
      return {add_rowvec(matmul(pooled, p.linear.w), p.linear.b), Tensor()};
    }
  }
  throw ConfigError("unreachable projector kind");
}

}  // namespace mage
