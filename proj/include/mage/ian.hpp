#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mage/errors.hpp"
#include "mage/rng.hpp"
#include "mage/tensor.hpp"

namespace mage {

// Dimensions of the alignment network. grid_in is the side of the encoder
// patch grid (N_in = grid_in^2 feature rows); grid_out is the side of the
// reduced query grid (N_out = grid_out^2 output tokens, the token budget).
struct IanConfig {
  int d_v = 32;     // encoder feature dim
  int d_l = 64;     // language-model embedding dim
  int d_b = 16;     // conv query channel dim
  int d_attn = 64;  // attention head dim
  int grid_in = 24;
  int grid_out = 12;
  int hidden = 64;  // VAB MLP hidden width
  int c_img = 3;

  int n_in() const { return grid_in * grid_in; }
  int n_out() const { return grid_out * grid_out; }

  void validate() const {
    for (int d : {d_v, d_l, d_b, d_attn, grid_in, grid_out, hidden, c_img})
      if (d < 1) throw ConfigError("IanConfig: all dimensions must be >= 1");
    if (grid_out > grid_in)
      throw ConfigError("IanConfig: grid_out " + std::to_string(grid_out) + " exceeds grid_in " +
                        std::to_string(grid_in));
  }
};

// Kernel size and stride that reduce a grid_in x grid_in image-patch grid to
// exactly grid_out x grid_out conv positions without padding:
//   divisible grids    -> non-overlapping windows, k = stride = ratio
//   indivisible grids  -> overlapping windows, k = grid_in - grid_out + 1, stride 1
struct ConvGeometry {
  int kernel;
  int stride;
};

inline ConvGeometry conv_geometry(int grid_in, int grid_out) {
  if (grid_out < 1 || grid_out > grid_in)
    throw ConfigError("conv_geometry: cannot reduce grid " + std::to_string(grid_in) + " to " +
                      std::to_string(grid_out));
  if (grid_in % grid_out == 0) {
    const int r = grid_in / grid_out;
    return {r, r};
  }
  return {grid_in - grid_out + 1, 1};
}

// Two-layer MLP with a learnable output norm; maps encoder features into the
// LLM embedding space.
struct VabParams {
  Tensor w1;          // [d_v x hidden]
  Tensor b1;          // [hidden]
  Tensor w2;          // [hidden x d_l]
  Tensor b2;          // [d_l]
  Tensor norm_gamma;  // [d_l]
  Tensor norm_beta;   // [d_l]
};

// Convolutional query generator plus single-head cross-attention projections.
struct SebParams {
  Tensor conv_kernels;  // [d_b x c_img x k x k]
  int conv_stride = 1;
  Tensor wq;  // [d_b x d_attn]
  Tensor wk;  // [d_l x d_attn]
  Tensor wv;  // [d_l x d_attn]
  Tensor wo;  // [d_attn x d_l]
};

struct IanParams {
  VabParams vab;
  SebParams seb;
};

namespace detail {
inline Tensor init_weight(Shape shape, int fan_in, CounterRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor::param(std::move(shape), std::move(data));
}
}  // namespace detail

inline IanParams init_ian(const IanConfig& cfg, CounterRng& rng) {
  cfg.validate();
  const ConvGeometry geom = conv_geometry(cfg.grid_in, cfg.grid_out);
  IanParams p;
  p.vab.w1 = detail::init_weight({cfg.d_v, cfg.hidden}, cfg.d_v, rng);
  p.vab.b1 = Tensor::param({cfg.hidden}, std::vector<double>(cfg.hidden, 0.0));
  p.vab.w2 = detail::init_weight({cfg.hidden, cfg.d_l}, cfg.hidden, rng);
  p.vab.b2 = Tensor::param({cfg.d_l}, std::vector<double>(cfg.d_l, 0.0));
  p.vab.norm_gamma = Tensor::param({cfg.d_l}, std::vector<double>(cfg.d_l, 1.0));
  p.vab.norm_beta = Tensor::param({cfg.d_l}, std::vector<double>(cfg.d_l, 0.0));
  p.seb.conv_kernels = detail::init_weight({cfg.d_b, cfg.c_img, geom.kernel, geom.kernel},
                                           cfg.c_img * geom.kernel * geom.kernel, rng);
  p.seb.conv_stride = geom.stride;
  p.seb.wq = detail::init_weight({cfg.d_b, cfg.d_attn}, cfg.d_b, rng);
  p.seb.wk = detail::init_weight({cfg.d_l, cfg.d_attn}, cfg.d_l, rng);
  p.seb.wv = detail::init_weight({cfg.d_l, cfg.d_attn}, cfg.d_l, rng);
  p.seb.wo = detail::init_weight({cfg.d_attn, cfg.d_l}, cfg.d_attn, rng);
  return p;
}

// layer_norm(GELU(v w1 + b1) w2 + b2): token count is preserved.
inline Tensor vab_forward(const Tensor& v, const VabParams& p) {
  Tensor h = gelu(add_rowvec(matmul(v, p.w1), p.b1));
  Tensor projected = add_rowvec(matmul(h, p.w2), p.b2);
  return layer_norm(projected, p.norm_gamma, p.norm_beta);
}

// Block-mean of an image down to the patch grid: [C x G*f x G*f] -> [C x G x G].
// Fixed patchify step in front of the learnable reduction conv; the conv
// geometry rule speaks in grid units.
inline Tensor patch_mean_image(const Tensor& image, int grid) {
  if (image.shape().size() != 3)
    throw DimensionError("patch_mean_image: expected [C x H x W], got " + shape_str(image.shape()));
  const int c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
  if (h != w || h % grid != 0)
    throw ConfigError("patch_mean_image: image " + shape_str(image.shape()) +
                      " is not square with side divisible by grid " + std::to_string(grid));
  const int f = h / grid;
  if (f == 1) return image;
  std::vector<double> out(static_cast<size_t>(c) * grid * grid, 0.0);
  const double inv = 1.0 / (static_cast<double>(f) * f);
  for (int ci = 0; ci < c; ++ci)
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        double s = 0.0;
        for (int py = 0; py < f; ++py)
          for (int px = 0; px < f; ++px)
            s += image.data()[(static_cast<size_t>(ci) * h + gy * f + py) * w + gx * f + px];
        out[(static_cast<size_t>(ci) * grid + gy) * grid + gx] = s * inv;
      }
  return Tensor::from({c, grid, grid}, std::move(out));
}

// Conv features of the patch-grid image become the query tokens, one per
// output grid position, row-major over the spatial grid.
inline Tensor seb_query(const Tensor& image, const SebParams& p) {
  Tensor feat = conv2d(image, p.conv_kernels, p.conv_stride);  // [d_b x G x G]
  const int d_b = feat.shape()[0];
  const int n_out = feat.shape()[1] * feat.shape()[2];
  return transpose(reshape(feat, {d_b, n_out}));  // [N_out x d_b]
}

struct SebAttention {
  Tensor output;     // [N_out x d_l]
  Tensor attention;  // [N_out x N_in], rows sum to 1
};

// Single-head scaled dot-product attention: the conv queries attend over the
// VAB output, which supplies keys and values alike.
inline SebAttention seb_attend(const Tensor& b, const Tensor& a, const SebParams& p) {
  Tensor q = matmul(b, p.wq);  // [N_out x d_attn]
  Tensor k = matmul(a, p.wk);  // [N_in x d_attn]
  Tensor v = matmul(a, p.wv);  // [N_in x d_attn]
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.wq.shape()[1]));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  Tensor attn = softmax(scores);                  // [N_out x N_in]
  Tensor out = matmul(matmul(attn, v), p.wo);     // [N_out x d_l]
  return {out, attn};
}

struct IanActivations {
  Tensor tokens;     // [N_out x d_l]
  Tensor attention;  // [N_out x N_in]
};

// Full projector: VAB alignment followed by SEB token reduction. Accepts the
// raw image at any integer multiple of the patch grid resolution.
inline IanActivations ian_forward(const Tensor& image, const Tensor& v, const IanConfig& cfg,
                                  const IanParams& params) {
  if (v.shape().size() != 2 || v.shape()[0] != cfg.n_in() || v.shape()[1] != cfg.d_v)
    throw DimensionError("ian_forward: encoder features " + shape_str(v.shape()) +
                         " do not match config [" + std::to_string(cfg.n_in()) + " x " +
                         std::to_string(cfg.d_v) + "]");
  Tensor aligned = vab_forward(v, params.vab);
  Tensor queries = seb_query(patch_mean_image(image, cfg.grid_in), params.seb);
  if (queries.shape()[0] != cfg.n_out())
    throw ConfigError("ian_forward: conv geometry produced " + std::to_string(queries.shape()[0]) +
                      " queries, expected " + std::to_string(cfg.n_out()));
  SebAttention att = seb_attend(queries, aligned, params.seb);
  return {att.output, att.attention};
}

}  // namespace mage
