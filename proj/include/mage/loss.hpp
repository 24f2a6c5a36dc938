#pragma once

#include <vector>

#include "mage/errors.hpp"
#include "mage/pipeline.hpp"
#include "mage/tensor.hpp"
#include "mage/toy_models.hpp"

namespace mage {

// Autoregressive generation loss over caption tokens: mean over positions of
// -log p(y_i | y_<i, visual prefix, instruction).
inline Tensor itg_loss(const Tensor& logits, const std::vector<int>& caption) {
  if (caption.empty()) throw ContractError("itg_loss: empty caption");
  return cross_entropy(logits, caption);
}

// Mean over sequence positions; reduces a token sequence to one embedding
// vector for the distance loss.
inline Tensor pool(const Tensor& seq) {
  if (seq.shape().size() != 2) throw ContractError("pool: expected [K x D]");
  if (seq.shape()[0] < 1) throw ContractError("pool: empty sequence");
  return mean_rows(seq);
}

// Batch-mean squared distance between pooled projector outputs and pooled
// text embeddings.
inline Tensor itdm_loss(const std::vector<Tensor>& ian_out, const std::vector<Tensor>& text_emb) {
  if (ian_out.size() != text_emb.size())
    throw ContractError("itdm_loss: batch sizes differ: " + std::to_string(ian_out.size()) +
                        " vs " + std::to_string(text_emb.size()));
  if (ian_out.empty()) throw ContractError("itdm_loss: empty batch");
  const int d = ian_out[0].shape().back();
  std::vector<Tensor> a_rows, b_rows;
  a_rows.reserve(ian_out.size());
  b_rows.reserve(ian_out.size());
  for (size_t i = 0; i < ian_out.size(); ++i) {
    a_rows.push_back(reshape(pool(ian_out[i]), {1, d}));
    b_rows.push_back(reshape(pool(text_emb[i]), {1, d}));
  }
  return mse(concat_rows(a_rows), concat_rows(b_rows));
}

struct LossBreakdown {
  double itg = 0.0;
  double itdm = 0.0;
  double total = 0.0;
  int batch_size = 0;
  int seq_len = 0;
  Tensor total_tensor;  // backward-able; equals itg + lambda * itdm
};

// One shared forward pass per sample: the projector output feeds both the
// generation loss and the distance loss. With lambda == 0 the distance term
// is still measured but stays off the gradient graph.
inline LossBreakdown combined_loss(Pipeline& model, const std::vector<PairedSample>& batch,
                                   double lambda_itdm = 1.0) {
  if (batch.empty()) throw ContractError("combined_loss: empty batch");
  std::vector<Tensor> projected, text_embs;
  Tensor itg_sum;
  int seq_len = 0;
  for (const PairedSample& sample : batch) {
    Tensor features = encode_image(sample.image, model.encoder);
    IanActivations act = project_tokens(model, sample.image, features);
    Tensor prefix = concat_rows({act.tokens, lm_embed(model.lm, sample.instruction)});
    Tensor logits = lm_forward(model.lm, prefix, sample.caption);
    Tensor itg = itg_loss(logits, sample.caption);
    itg_sum = itg_sum.defined() ? add(itg_sum, itg) : itg;
    projected.push_back(act.tokens);
    text_embs.push_back(lm_embed(model.lm, sample.caption));
    seq_len = std::max(seq_len, static_cast<int>(sample.caption.size()));
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Tensor itg = scale(itg_sum, inv_b);
  Tensor itdm = itdm_loss(projected, text_embs);

  LossBreakdown out;
  out.itg = itg.item();
  out.itdm = itdm.item();
  out.batch_size = static_cast<int>(batch.size());
  out.seq_len = seq_len;
  out.total_tensor = lambda_itdm == 0.0 ? itg : add(itg, scale(itdm, lambda_itdm));
  out.total = out.total_tensor.item();
  return out;
}

}  // namespace mage
