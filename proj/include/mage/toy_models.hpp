#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mage/agent.hpp"
#include "mage/encoding.hpp"
#include "mage/errors.hpp"
#include "mage/rng.hpp"
#include "mage/tensor.hpp"

namespace mage {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Token vocabulary
// ---------------------------------------------------------------------------
//
// A fixed 64-entry word table shared by captions, instructions and tool-plan
// sequences. Ids above the named range are unused padding.

namespace vocab {

constexpr int kVocabSize = 64;

constexpr int kPad = 0;
constexpr int kDescribe = 1;
constexpr int kThe = 2;
constexpr int kImage = 3;
constexpr int kColon = 4;
constexpr int kA = 5;
constexpr int kAt = 6;
constexpr int kColorBase = 7;   // red green blue yellow
constexpr int kShapeBase = 11;  // square circle triangle cross
constexpr int kRowBase = 15;    // top middle bottom
constexpr int kColBase = 18;    // left center right
constexpr int kMake = 21;
constexpr int kFrom = 22;
constexpr int kPlan = 23;
constexpr int kThen = 24;
constexpr int kEnd = 25;
constexpr int kText = 26;
constexpr int kAudio = 27;
constexpr int kVideo = 28;
constexpr int kToolBase = 29;  // tool names of the default registry

inline const std::vector<std::string>& tool_words() {
  static const std::vector<std::string> table = {"text_to_image",  "image_to_text",
                                                 "text_to_audio",  "text_to_video",
                                                 "audio_to_text",  "video_to_text"};
  return table;
}

inline std::string word(int id) {
  static const std::vector<std::string> table = {
      "<pad>", "describe", "the",  "image",    ":",      "a",      "at",
      "red",   "green",    "blue", "yellow",   "square", "circle", "triangle",
      "cross", "top",      "middle", "bottom", "left",   "center", "right",
      "make",  "from",     "plan", "then",     "end",    "text",   "audio",
      "video"};
  if (id >= 0 && id < static_cast<int>(table.size())) return table[id];
  const int t = id - kToolBase;
  if (t >= 0 && t < static_cast<int>(tool_words().size())) return tool_words()[t];
  return "<unused-" + std::to_string(id) + ">";
}

inline int modality_token(agent::Modality m) {
  switch (m) {
    case agent::Modality::text: return kText;
    case agent::Modality::image: return kImage;
    case agent::Modality::audio: return kAudio;
    case agent::Modality::video: return kVideo;
  }
  return kPad;
}

inline int tool_token(const std::string& name) {
  for (size_t i = 0; i < tool_words().size(); ++i)
    if (tool_words()[i] == name) return kToolBase + static_cast<int>(i);
  throw ConfigError("tool '" + name + "' has no token; plan datasets cover the default registry");
}

}  // namespace vocab

// The constant prompt standing in for textual instructions on caption data.
inline std::vector<int> caption_instruction() {
  return {vocab::kDescribe, vocab::kThe, vocab::kImage, vocab::kColon};
}

// ---------------------------------------------------------------------------
// Scene grammar and renderer
// ---------------------------------------------------------------------------

// A scene is one colored shape placed on a 3x3 position grid; 144 distinct
// scenes in total. The caption is a fixed template over the scene fields,
// so labels are a deterministic, injective function of the spec.
struct SceneSpec {
  int row = 0;    // 0..2
  int col = 0;    // 0..2
  int color = 0;  // 0..3
  int shape = 0;  // 0..3

  std::vector<int> caption() const {
    return {vocab::kA,  vocab::kColorBase + color, vocab::kShapeBase + shape,
            vocab::kAt, vocab::kRowBase + row,     vocab::kColBase + col};
  }

  json to_json() const {
    return {{"kind", "scene"}, {"row", row}, {"col", col}, {"color", color}, {"shape", shape}};
  }

  static SceneSpec from_json(const json& j) {
    SceneSpec s;
    s.row = j.at("row").get<int>();
    s.col = j.at("col").get<int>();
    s.color = j.at("color").get<int>();
    s.shape = j.at("shape").get<int>();
    return s;
  }
};

inline std::vector<SceneSpec> all_scenes() {
  std::vector<SceneSpec> out;
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 3; ++col)
      for (int color = 0; color < 4; ++color)
        for (int shape = 0; shape < 4; ++shape) out.push_back({row, col, color, shape});
  return out;
}

// Renders the scene as a [3 x h x w] block image: a flat background with the
// shape's pixel mask filled in the scene color inside the selected grid cell.
inline Tensor render_scene(const SceneSpec& spec, int h, int w) {
  static const double colors[4][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}};
  const double background = 0.1;
  std::vector<double> img(static_cast<size_t>(3) * h * w, background);
  const int cell_h = h / 3, cell_w = w / 3;
  const int y0 = spec.row * cell_h, x0 = spec.col * cell_w;
  const double cy = (cell_h - 1) / 2.0, cx = (cell_w - 1) / 2.0;
  const double r = std::min(cell_h, cell_w) / 2.0 - 1.0;
  for (int y = 0; y < cell_h; ++y) {
    for (int x = 0; x < cell_w; ++x) {
      const double dy = y - cy, dx = x - cx;
      bool inside = false;
      switch (spec.shape) {
        case 0:  // square
          inside = std::abs(dy) <= r && std::abs(dx) <= r;
          break;
        case 1:  // circle
          inside = dy * dy + dx * dx <= r * r;
          break;
        case 2:  // triangle, apex at the top of the cell
          inside = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5;
          break;
        case 3:  // cross
          inside = (std::abs(dx) <= r * 0.34 && std::abs(dy) <= r) ||
                   (std::abs(dy) <= r * 0.34 && std::abs(dx) <= r);
          break;
      }
      if (!inside) continue;
      for (int c = 0; c < 3; ++c)
        img[(static_cast<size_t>(c) * h + y0 + y) * w + x0 + x] = colors[spec.color][c];
    }
  }
  return Tensor::from({3, h, w}, std::move(img));
}

// ---------------------------------------------------------------------------
// Frozen-by-default visual encoder stand-in
// ---------------------------------------------------------------------------

// Non-overlapping patch embedding followed by one fixed mixing matrix. The
// mix matrix is orthogonalized so patch information survives into features.
struct ToyVisualEncoder {
  int patch_size = 2;
  Tensor embed;  // [(c_img * patch^2) x d_v]
  Tensor mix;    // [d_v x d_v]
};

inline ToyVisualEncoder init_encoder(int c_img, int patch_size, int d_v, CounterRng& rng) {
  ToyVisualEncoder enc;
  enc.patch_size = patch_size;
  const int patch_dim = c_img * patch_size * patch_size;
  {
    const double bound = 1.0 / std::sqrt(static_cast<double>(patch_dim));
    std::vector<double> data(static_cast<size_t>(patch_dim) * d_v);
    for (double& v : data) v = rng.uniform(-bound, bound);
    enc.embed = Tensor::param({patch_dim, d_v}, std::move(data));
  }
  {
    // Gram-Schmidt on a random square matrix.
    std::vector<double> m(static_cast<size_t>(d_v) * d_v);
    for (double& v : m) v = rng.uniform(-1.0, 1.0);
    for (int i = 0; i < d_v; ++i) {
      double* row = m.data() + static_cast<size_t>(i) * d_v;
      for (int j = 0; j < i; ++j) {
        const double* prev = m.data() + static_cast<size_t>(j) * d_v;
        double dot = 0.0;
        for (int k = 0; k < d_v; ++k) dot += row[k] * prev[k];
        for (int k = 0; k < d_v; ++k) row[k] -= dot * prev[k];
      }
      double norm = 0.0;
      for (int k = 0; k < d_v; ++k) norm += row[k] * row[k];
      norm = std::sqrt(norm);
      if (norm < 1e-9) norm = 1.0;
      for (int k = 0; k < d_v; ++k) row[k] /= norm;
    }
    enc.mix = Tensor::param({d_v, d_v}, std::move(m));
  }
  return enc;
}

// Flattens non-overlapping patches (channel-major within a patch), embeds and
// mixes them. Rows are ordered row-major over the patch grid; there is no
// class token.
inline Tensor encode_image(const Tensor& img, const ToyVisualEncoder& enc) {
  if (img.shape().size() != 3)
    throw DimensionError("encode_image: expected [C x H x W], got " + shape_str(img.shape()));
  const int c = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
  const int p = enc.patch_size;
  if (h % p != 0 || w % p != 0)
    throw ConfigError("encode_image: image " + shape_str(img.shape()) +
                      " not divisible by patch size " + std::to_string(p));
  const int gh = h / p, gw = w / p;
  const int patch_dim = c * p * p;
  std::vector<double> patches(static_cast<size_t>(gh) * gw * patch_dim);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      double* row = patches.data() + (static_cast<size_t>(gy) * gw + gx) * patch_dim;
      int k = 0;
      for (int ci = 0; ci < c; ++ci)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            row[k++] = img.data()[(static_cast<size_t>(ci) * h + gy * p + py) * w + gx * p + px];
    }
  Tensor flat = Tensor::from({gh * gw, patch_dim}, std::move(patches));
  return matmul(matmul(flat, enc.embed), enc.mix);
}

// ---------------------------------------------------------------------------
// Tiny decoder-only language model
// ---------------------------------------------------------------------------

struct LmConfig {
  int vocab = vocab::kVocabSize;
  int d_l = 64;
  int blocks = 2;
  int d_ff = 128;
};

struct DecoderBlock {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gamma, ln2_beta;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ToyCausalLM {
  LmConfig cfg;
  Tensor tok_embed;  // [V x d_l]
  std::vector<DecoderBlock> blocks;
  Tensor final_gamma, final_beta;
  Tensor head;  // [d_l x V]
};

inline ToyCausalLM init_lm(const LmConfig& cfg, CounterRng& rng) {
  auto weight = [&rng](Shape shape, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = rng.uniform(-bound, bound);
    return Tensor::param(std::move(shape), std::move(data));
  };
  auto ones = [](int d) { return Tensor::param({d}, std::vector<double>(d, 1.0)); };
  auto zeros_p = [](int d) { return Tensor::param({d}, std::vector<double>(d, 0.0)); };

  ToyCausalLM lm;
  lm.cfg = cfg;
  // Embedding rows are lookup targets, not summed weights: unit-scale init
  // keeps pooled caption embeddings distinguishable across scenes.
  {
    std::vector<double> data(static_cast<size_t>(cfg.vocab) * cfg.d_l);
    for (double& v : data) v = rng.uniform(-1.0, 1.0);
    lm.tok_embed = Tensor::param({cfg.vocab, cfg.d_l}, std::move(data));
  }
  for (int b = 0; b < cfg.blocks; ++b) {
    DecoderBlock blk;
    blk.ln1_gamma = ones(cfg.d_l);
    blk.ln1_beta = zeros_p(cfg.d_l);
    blk.wq = weight({cfg.d_l, cfg.d_l}, cfg.d_l);
    blk.wk = weight({cfg.d_l, cfg.d_l}, cfg.d_l);
    blk.wv = weight({cfg.d_l, cfg.d_l}, cfg.d_l);
    blk.wo = weight({cfg.d_l, cfg.d_l}, cfg.d_l);
    blk.ln2_gamma = ones(cfg.d_l);
    blk.ln2_beta = zeros_p(cfg.d_l);
    blk.mlp_w1 = weight({cfg.d_l, cfg.d_ff}, cfg.d_l);
    blk.mlp_b1 = zeros_p(cfg.d_ff);
    blk.mlp_w2 = weight({cfg.d_ff, cfg.d_l}, cfg.d_ff);
    blk.mlp_b2 = zeros_p(cfg.d_l);
    lm.blocks.push_back(std::move(blk));
  }
  lm.final_gamma = ones(cfg.d_l);
  lm.final_beta = zeros_p(cfg.d_l);
  lm.head = weight({cfg.d_l, cfg.vocab}, cfg.d_l);
  return lm;
}

// Embedding-table lookup; rows are constant across calls.
inline Tensor lm_embed(const ToyCausalLM& lm, const std::vector<int>& tokens) {
  return embed_rows(lm.tok_embed, tokens);
}

namespace detail {

inline Tensor causal_mask(int s) {
  std::vector<double> m(static_cast<size_t>(s) * s, 0.0);
  for (int i = 0; i < s; ++i)
    for (int j = i + 1; j < s; ++j) m[static_cast<size_t>(i) * s + j] = -1e9;
  return Tensor::from({s, s}, std::move(m));
}

inline Tensor decoder_block_forward(const Tensor& x, const DecoderBlock& blk) {
  const int d = x.shape()[1];
  Tensor normed = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
  Tensor q = matmul(normed, blk.wq);
  Tensor k = matmul(normed, blk.wk);
  Tensor v = matmul(normed, blk.wv);
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor attn = softmax(add(scores, causal_mask(x.shape()[0])));
  Tensor h = add(x, matmul(matmul(attn, v), blk.wo));
  Tensor normed2 = layer_norm(h, blk.ln2_gamma, blk.ln2_beta);
  Tensor mlp = add_rowvec(
      matmul(gelu(add_rowvec(matmul(normed2, blk.mlp_w1), blk.mlp_b1)), blk.mlp_w2), blk.mlp_b2);
  return add(h, mlp);
}

// Hidden states for an embedded sequence (pre-LN blocks, final norm).
inline Tensor lm_hidden(const ToyCausalLM& lm, const Tensor& x) {
  Tensor h = x;
  for (const DecoderBlock& blk : lm.blocks) h = decoder_block_forward(h, blk);
  return layer_norm(h, lm.final_gamma, lm.final_beta);
}

}  // namespace detail

// Next-token logits for each of the L text positions, conditioned on the
// embedded prefix (visual tokens + instruction) and the earlier text tokens.
// The logits for text position i come from the hidden state one position to
// its left, so the mask is causal within text while the prefix is visible
// everywhere.
inline Tensor lm_forward(const ToyCausalLM& lm, const Tensor& prefix,
                         const std::vector<int>& text) {
  if (prefix.shape().size() != 2 || prefix.shape()[1] != lm.cfg.d_l)
    throw DimensionError("lm_forward: prefix " + shape_str(prefix.shape()) + " must be [P x " +
                         std::to_string(lm.cfg.d_l) + "]");
  const int p = prefix.shape()[0];
  const int l = static_cast<int>(text.size());
  if (p < 1) throw ContractError("lm_forward: empty prefix");
  if (l < 1) throw ContractError("lm_forward: empty text");
  Tensor x = concat_rows({prefix, lm_embed(lm, text)});
  Tensor h = detail::lm_hidden(lm, x);
  Tensor hs = slice_rows(h, p - 1, p + l - 1);
  return matmul(hs, lm.head);
}

// Greedy decoding for the demo path; sampling is out of scope.
inline std::vector<int> greedy_generate(const ToyCausalLM& lm, const Tensor& prefix, int max_len,
                                        int stop_token) {
  std::vector<int> out;
  for (int i = 0; i < max_len; ++i) {
    Tensor x = out.empty() ? prefix : concat_rows({prefix, lm_embed(lm, out)});
    Tensor h = detail::lm_hidden(lm, x);
    Tensor logits = matmul(slice_rows(h, x.shape()[0] - 1, x.shape()[0]), lm.head);
    int best = 0;
    for (int v = 1; v < lm.cfg.vocab; ++v)
      if (logits(0, v) > logits(0, best)) best = v;
    out.push_back(best);
    if (best == stop_token) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic paired data
// ---------------------------------------------------------------------------

struct PairedSample {
  json spec;     // {"kind":"scene",...} or {"kind":"plan",...}
  Tensor image;  // [3 x H x W]
  std::vector<int> instruction;
  std::vector<int> caption;

  bool is_plan() const { return spec.value("kind", "scene") == "plan"; }
};

inline PairedSample make_scene_sample(const SceneSpec& scene, int h, int w) {
  PairedSample s;
  s.spec = scene.to_json();
  s.image = render_scene(scene, h, w);
  s.instruction = caption_instruction();
  s.caption = scene.caption();
  return s;
}

// Deterministic dataset: same (n, seed, geometry) gives byte-identical
// samples.
inline std::vector<PairedSample> gen_dataset(int n, uint64_t seed, int h, int w) {
  if (n < 1) throw ContractError("gen_dataset: n must be >= 1");
  CounterRng rng(derive_seed(seed, "dataset"));
  std::vector<PairedSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    SceneSpec scene;
    scene.row = static_cast<int>(rng.below(3));
    scene.col = static_cast<int>(rng.below(3));
    scene.color = static_cast<int>(rng.below(4));
    scene.shape = static_cast<int>(rng.below(4));
    out.push_back(make_scene_sample(scene, h, w));
  }
  return out;
}

// Tool-plan samples for stage 3: the instruction encodes a modality request
// and the caption linearizes the symbolic planner's chain, so the planner
// doubles as the label generator.
inline std::vector<int> plan_caption(const agent::TaskPlan& plan) {
  std::vector<int> out{vocab::kPlan};
  for (size_t i = 0; i < plan.steps.size(); ++i) {
    if (i) out.push_back(vocab::kThen);
    out.push_back(vocab::tool_token(plan.steps[i].tool));
  }
  out.push_back(vocab::kEnd);
  return out;
}

inline std::vector<PairedSample> gen_plan_dataset(int n, uint64_t seed,
                                                  const agent::ToolRegistry& registry, int h,
                                                  int w) {
  if (n < 1) throw ContractError("gen_plan_dataset: n must be >= 1");
  // Enumerate solvable single-modality requests in canonical order.
  std::vector<std::pair<agent::Modality, agent::Modality>> requests;
  for (agent::Modality have : agent::kAllModalities)
    for (agent::Modality want : agent::kAllModalities) {
      if (have == want) continue;
      agent::Request req;
      req.have = {have};
      req.want = {want};
      try {
        agent::plan(req, registry);
        requests.emplace_back(have, want);
      } catch (const agent::NoRouteError&) {
      }
    }
  if (requests.empty()) throw ConfigError("gen_plan_dataset: registry has no solvable requests");

  CounterRng rng(derive_seed(seed, "plan-dataset"));
  std::vector<PairedSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const auto [have, want] = requests[rng.below(requests.size())];
    agent::Request req;
    req.have = {have};
    req.want = {want};
    agent::TaskPlan plan = agent::plan(req, registry);

    SceneSpec scene;
    scene.row = static_cast<int>(rng.below(3));
    scene.col = static_cast<int>(rng.below(3));
    scene.color = static_cast<int>(rng.below(4));
    scene.shape = static_cast<int>(rng.below(4));

    PairedSample s;
    s.spec = {{"kind", "plan"},
              {"have", json::array({agent::modality_name(have)})},
              {"want", json::array({agent::modality_name(want)})}};
    s.image = render_scene(scene, h, w);
    s.instruction = {vocab::kMake, vocab::modality_token(want), vocab::kFrom,
                     vocab::modality_token(have)};
    s.caption = plan_caption(plan);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Newline-delimited JSON persistence
// ---------------------------------------------------------------------------

inline std::string sample_to_ndjson_line(const PairedSample& s) {
  json rec;
  rec["scene_spec"] = s.spec;
  rec["image_b64"] =
      base64_encode(s.image.data().data(), s.image.data().size() * sizeof(double));
  rec["image_shape"] = s.image.shape();
  rec["instruction"] = s.instruction;
  rec["caption"] = s.caption;
  return rec.dump();
}

inline std::string serialize_dataset(const std::vector<PairedSample>& samples) {
  std::string out;
  for (const PairedSample& s : samples) {
    out += sample_to_ndjson_line(s);
    out += '\n';
  }
  return out;
}

inline PairedSample sample_from_ndjson_line(const std::string& line) {
  json rec = json::parse(line);
  PairedSample s;
  s.spec = rec.at("scene_spec");
  const Shape shape = rec.at("image_shape").get<Shape>();
  const std::vector<unsigned char> raw = base64_decode(rec.at("image_b64").get<std::string>());
  if (raw.size() != shape_numel(shape) * sizeof(double))
    throw IoError("dataset record: image bytes do not match image_shape");
  std::vector<double> img(shape_numel(shape));
  std::memcpy(img.data(), raw.data(), raw.size());
  s.image = Tensor::from(shape, std::move(img));
  s.instruction = rec.at("instruction").get<std::vector<int>>();
  s.caption = rec.at("caption").get<std::vector<int>>();
  return s;
}

inline void save_dataset(const std::string& path, const std::vector<PairedSample>& samples) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write dataset to '" + path + "'");
  f << serialize_dataset(samples);
  if (!f) throw IoError("short write to '" + path + "'");
}

inline std::vector<PairedSample> load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read dataset from '" + path + "'");
  std::vector<PairedSample> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_ndjson_line(line));
    } catch (const json::exception& e) {
      throw IoError("dataset '" + path + "' line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw IoError("dataset '" + path + "' contains no samples");
  return out;
}

inline uint64_t dataset_hash(const std::vector<PairedSample>& samples) {
  return fnv1a64(serialize_dataset(samples));
}

}  // namespace mage
