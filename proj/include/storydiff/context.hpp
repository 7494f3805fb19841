#pragma once

#include "storydiff/encoders.hpp"

namespace storydiff {

// One prior frame as seen by the conditioning path: its joint text-image
// embedding (attention key/value), its prompt embedding (similarity gating)
// and the image itself (guidance anchor candidate).
struct HistoryEntry {
    PairEmbedding pair_embedding;
    TextEmbedding prompt_embedding;
    ImageU8 image;
    int frame_index = -1;
};

// Condition fed to the denoiser: [v_i tokens; updated history vectors],
// concatenated along the sequence axis.
struct ConditionBundle {
    Tensor current_tokens;                // (32, d)
    std::vector<Tensor> updated_history;  // n_history vectors of (d)
    Tensor condition;                     // (32 + n_history, d)
    bool null_flag = false;

    int n_history() const { return int(updated_history.size()); }
};

struct AnchorSelection {
    int selected_index = -1;  // index into the history list, -1 = none
    double best_score = -2.0;
    double threshold = 0.0;

    bool fired() const { return selected_index >= 0; }
};

// Highest prompt similarity wins; ties break toward the most recent frame.
// A selection exists iff the best score reaches tau.
AnchorSelection select_anchor(const TextEmbedding& v, const std::vector<HistoryEntry>& history,
                              double tau);

// ---------------------------------------------------------------------------
// Adaptive context attention. Single-query multi-head attention: the pooled
// prompt vector queries the history pair-embeddings; the attended summary is
// added back onto every history vector (residual), so each updated vector
// h_hat_j = h_j + A carries both its own content and the relevance-weighted
// mixture. Trainable jointly with the denoiser (float); the learned null
// condition lives here too.
// ---------------------------------------------------------------------------

class AdaptiveContext {
  public:
    // Registers parameters in the caller's store under "context.*".
    void init(ParamStore& ps, int d_model, int heads, bool residual, Rng& rng);

    int d_model() const { return d_model_; }
    int heads() const { return heads_; }
    bool residual() const { return residual_; }

    bool no_attention = false;  // ablation: h_hat_j = h_j, attention skipped

    // Batched graph forward used by training and batched sampling.
    // v_pooled (B,d), h_pad (B,Hmax,d), hist_mask B*Hmax (0 = pad).
    // Returns updated h_pad of the same shape.
    VarT<float> attend_batch(Tape& tp, VarT<float> v_pooled, VarT<float> h_pad,
                             const std::vector<float>& hist_mask,
                             std::shared_ptr<std::vector<float>>* probs_out = nullptr) const;

    // Single-sample convenience forms of the conditioning operations.
    std::vector<Tensor> attend_history(const TextEmbedding& v,
                                       const std::vector<HistoryEntry>& history,
                                       std::shared_ptr<std::vector<float>>* probs_out = nullptr) const;
    ConditionBundle build_condition(const TextEmbedding& v,
                                    const std::vector<Tensor>& updated) const;
    ConditionBundle null_condition() const;

    // Direct access for tests that pin identity projections.
    LinearT<float>& wq() { return wq_; }
    LinearT<float>& wk() { return wk_; }
    LinearT<float>& wv() { return wv_; }
    LinearT<float>& wo() { return wo_; }
    ParamT<float>& null_tokens() { return *null_tokens_; }

  private:
    int d_model_ = 0, heads_ = 4;
    bool residual_ = true;
    LinearT<float> wq_, wk_, wv_, wo_;
    ParamT<float>* null_tokens_ = nullptr;
};

// float cast helpers at the encoder (double) -> conditioning (float) boundary
Tensor to_float_tokens(const TextEmbedding& e);            // (32, d)
Tensor to_float_vector(const TensorD& v);                  // (d)

}  // namespace storydiff
