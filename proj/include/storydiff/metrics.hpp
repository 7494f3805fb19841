#pragma once

#include "storydiff/sampler.hpp"

namespace storydiff {

// ---------------------------------------------------------------------------
// Multi-label character classifier: conv backbone -> 64-d feature vector,
// sigmoid head over the roster. Backbone features double as the FID /
// scene-consistency feature space. Double precision (cheap at this size).
// ---------------------------------------------------------------------------

constexpr int kFeatDim = 64;

class CharacterClassifier {
  public:
    CharacterClassifier(int n_characters, uint64_t init_seed);

    int n_characters() const { return n_chars_; }

    // (B,3,H,W) -> features (B,64); logits (B,n_characters)
    VarT<double> backbone_fwd(TapeT<double>& tp, VarT<double> imgs) const;
    VarT<double> head_fwd(TapeT<double>& tp, VarT<double> features) const;

    TensorD features(const std::vector<ImageU8>& frames) const;     // (N,64)
    std::vector<std::set<int>> predict(const std::vector<ImageU8>& frames) const;

    ParamStoreT<double>& params() { return params_; }
    uint64_t weights_hash() const { return params_.weights_hash(); }

  private:
    int n_chars_;
    ParamStoreT<double> params_;
    std::vector<Conv2dT<double>> conv_;
    std::vector<GroupNormT<double>> gn_;
    LinearT<double> feat_proj_;
    LinearT<double> head_;
};

struct ClassifierTrainConfig {
    int iters = 500;
    int batch = 64;
    double lr = 1e-3;
    uint64_t seed = 1;
    int log_every = 100;
};

struct ClassifierTrainStats {
    double final_loss = 0;
    double val_micro_f1 = 0;
    int iters = 0;
};

ClassifierTrainStats train_classifier(CharacterClassifier& clf,
                                      const std::vector<StoryRecord>& train_stories,
                                      const std::vector<StoryRecord>& valid_stories,
                                      const ClassifierTrainConfig& cfg);

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

struct MetricReport {
    double fid = 0;
    double char_f1 = 0;
    double frame_acc = 0;
    double scene_consistency = 0;  // diagnostic, not part of the reference metric set
    bool scene_consistency_defined = false;
    double fid_floor = 0;  // split-half FID of the real set, for calibration
    int n_stories = 0;
};

// Frechet distance between Gaussian fits of classifier-backbone features.
// Symmetric matrix square root by eigendecomposition with 1e-6 jitter; tiny
// negative eigenvalues from roundoff clamp to zero.
double fid_from_features(const TensorD& feats_a, const TensorD& feats_b);
double fid(const std::vector<ImageU8>& real_frames, const std::vector<ImageU8>& generated_frames,
           const CharacterClassifier& clf);

// split-half FID over the real set (deterministic split by index parity)
double fid_floor(const std::vector<ImageU8>& real_frames, const CharacterClassifier& clf);

// micro-averaged F1 over per-frame predicted vs gold character sets
double micro_f1(const std::vector<std::set<int>>& predicted,
                const std::vector<std::set<int>>& gold);

// fraction of frames whose predicted set matches gold exactly
double exact_match_fraction(const std::vector<std::set<int>>& predicted,
                            const std::vector<std::set<int>>& gold);

double character_f1(const std::vector<StoryGenerationResult>& generated,
                    const std::vector<StoryRecord>& gold, const CharacterClassifier& clf);
double frame_accuracy(const std::vector<StoryGenerationResult>& generated,
                      const std::vector<StoryRecord>& gold, const CharacterClassifier& clf);

// Mean pairwise cosine similarity (rescaled to [0,1]) of backbone features of
// generated frames whose gold frames share a scene; absent when the story set
// has no repeated-scene pair.
struct SceneConsistency {
    double value = 0;
    bool defined = false;
    int64_t n_pairs = 0;
};
SceneConsistency scene_consistency(const std::vector<StoryGenerationResult>& generated,
                                   const std::vector<StoryRecord>& gold,
                                   const CharacterClassifier& clf);

}  // namespace storydiff
