#pragma once

#include "storydiff/nn.hpp"
#include "storydiff/story.hpp"

namespace storydiff {

constexpr int kMaxTokens = 32;

// Contextual per-token vectors (fixed 32 rows after right-padding) plus the
// unit-norm pooled vector (mean over the real tokens, then normalized).
struct TextEmbedding {
    TensorD tokens;  // (kMaxTokens, d_model)
    TensorD pooled;  // (d_model)
    int n_tokens = 0;
};

// Joint text-image embedding for one history frame.
struct PairEmbedding {
    TensorD vector;  // (d_model), unit norm
};

double text_similarity(const TextEmbedding& a, const TextEmbedding& b);

// ---------------------------------------------------------------------------
// The three frozen-at-diffusion-time encoders, sharing one parameter store:
//  - text tower: learned token+position embeddings, 2 bidirectional
//    self-attention blocks
//  - image tower f: 4 strided conv stages -> pooled unit vector,
//    differentiable in its input (sampling guidance takes gradients through it)
//  - pair fusion: projection of [pooled text; image embedding] -> unit vector
// Everything runs in double so downstream gradient checks are exact.
// ---------------------------------------------------------------------------

class Encoders {
  public:
    Encoders(int d_model, uint64_t init_seed);

    int d_model() const { return d_model_; }

    TextEmbedding encode_text(const std::vector<int>& token_ids) const;
    TextEmbedding encode_text(const std::string& prompt) const;

    PairEmbedding encode_pair(const std::vector<int>& token_ids, const ImageU8& image) const;
    PairEmbedding encode_pair(const std::string& prompt, const ImageU8& image) const;

    // f(image): forward-only convenience
    TensorD image_embedding(const TensorD& chw) const;

    // graph-building forwards (shared by training, eval and guidance)
    VarT<double> image_tower_fwd(TapeT<double>& tp, VarT<double> imgs_b3hw) const;  // -> (B,d) unit rows
    VarT<double> text_tower_fwd(TapeT<double>& tp, const std::vector<std::vector<int>>& batch,
                                std::vector<double>* token_mask_out = nullptr) const;  // -> (B,32,d)
    VarT<double> pooled_from_tokens(TapeT<double>& tp, VarT<double> tokens,
                                    const std::vector<double>& token_mask) const;  // -> (B,d) unit
    VarT<double> pair_fuse(TapeT<double>& tp, VarT<double> text_pooled,
                           VarT<double> image_emb) const;  // -> (B,d) unit rows

    double logit_scale() const;   // exp(log temperature), clamped
    ParamStoreT<double>& params() { return params_; }
    const ParamStoreT<double>& params() const { return params_; }
    uint64_t weights_hash() const { return params_.weights_hash(); }

  private:
    int d_model_;
    ParamStoreT<double> params_;

    ParamT<double>* tok_embed_ = nullptr;  // (V, d)
    ParamT<double>* pos_embed_ = nullptr;  // (32, d)
    struct Block {
        LayerNormT<double> ln1, ln2;
        LinearT<double> wq, wk, wv, wo, mlp1, mlp2;
    };
    std::vector<Block> blocks_;
    LayerNormT<double> final_ln_;

    std::vector<Conv2dT<double>> conv_;
    std::vector<GroupNormT<double>> conv_gn_;
    LinearT<double> img_proj_;
    LinearT<double> pair_proj_;
    ParamT<double>* log_scale_ = nullptr;
};

// ---------------------------------------------------------------------------
// contrastive training
// ---------------------------------------------------------------------------

struct ContrastiveConfig {
    int iters = 600;
    int batch = 64;
    double lr = 1e-3;
    uint64_t seed = 1;
    int log_every = 100;
};

struct ContrastiveStats {
    double final_loss = 0;
    double val_retrieval_top1 = 0;  // text -> image, in-batch candidates
    int iters = 0;
};

// One training step on explicit (tokens, image) pairs; returns the loss.
// Exposed for the degenerate-batch and loss-shape tests.
double contrastive_step(Encoders& enc, AdamT<double>& opt,
                        const std::vector<std::vector<int>>& tokens,
                        const std::vector<TensorD>& images);

ContrastiveStats train_contrastive(Encoders& enc, const std::vector<StoryRecord>& train_stories,
                                   const std::vector<StoryRecord>& valid_stories,
                                   const ContrastiveConfig& cfg);

// top-1 text->image retrieval accuracy over in-batch candidates
double retrieval_top1(const Encoders& enc, const std::vector<StoryRecord>& stories, int batch,
                      uint64_t seed, int n_batches = 4);

}  // namespace storydiff
