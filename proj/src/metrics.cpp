#include "storydiff/metrics.hpp"

#include <Eigen/Dense>

namespace storydiff {

using namespace ops;

CharacterClassifier::CharacterClassifier(int n_characters, uint64_t init_seed)
    : n_chars_(n_characters) {
    if (n_characters < 1) throw ValidationError("classifier: need at least one character");
    Rng rng(init_seed);
    const int chans[4] = {3, 24, 48, 96};
    conv_.resize(3);
    gn_.resize(3);
    for (int i = 0; i < 3; ++i) {
        conv_[i].init(params_, "clf.conv" + std::to_string(i), chans[i], chans[i + 1], 3, 2, 1,
                      rng);
        gn_[i].init(params_, "clf.gn" + std::to_string(i), chans[i + 1], 8);
    }
    feat_proj_.init(params_, "clf.feat", 96, kFeatDim, rng);
    head_.init(params_, "clf.head", kFeatDim, n_characters, rng);
}

VarT<double> CharacterClassifier::backbone_fwd(TapeT<double>& tp, VarT<double> x) const {
    for (size_t i = 0; i < conv_.size(); ++i)
        x = silu(gn_[i].fwd(tp, conv_[i].fwd(tp, x)));
    return feat_proj_.fwd(tp, global_mean_hw(x));  // (B,64)
}

VarT<double> CharacterClassifier::head_fwd(TapeT<double>& tp, VarT<double> features) const {
    return head_.fwd(tp, features);
}

namespace {

TensorD stack_images(const std::vector<ImageU8>& frames, size_t from, size_t count) {
    TensorD out({int64_t(count), 3, kFrameSize, kFrameSize});
    for (size_t i = 0; i < count; ++i) {
        TensorD t = image_to_tensor<double>(frames[from + i]);
        std::memcpy(out.data() + int64_t(i) * t.numel(), t.data(),
                    size_t(t.numel()) * sizeof(double));
    }
    return out;
}

}  // namespace

TensorD CharacterClassifier::features(const std::vector<ImageU8>& frames) const {
    TensorD out({int64_t(frames.size()), kFeatDim});
    const size_t chunk = 64;
    for (size_t from = 0; from < frames.size(); from += chunk) {
        size_t n = std::min(chunk, frames.size() - from);
        GraphT<double> g;
        TapeT<double> tp{&g, false};
        VarT<double> f = backbone_fwd(tp, g.input(stack_images(frames, from, n), false));
        std::memcpy(out.data() + int64_t(from) * kFeatDim, f.val().data(),
                    size_t(n) * kFeatDim * sizeof(double));
    }
    return out;
}

std::vector<std::set<int>> CharacterClassifier::predict(
    const std::vector<ImageU8>& frames) const {
    std::vector<std::set<int>> out(frames.size());
    const size_t chunk = 64;
    for (size_t from = 0; from < frames.size(); from += chunk) {
        size_t n = std::min(chunk, frames.size() - from);
        GraphT<double> g;
        TapeT<double> tp{&g, false};
        VarT<double> f = backbone_fwd(tp, g.input(stack_images(frames, from, n), false));
        VarT<double> logits = head_fwd(tp, f);
        for (size_t i = 0; i < n; ++i)
            for (int c = 0; c < n_chars_; ++c)
                if (logits.val()[int64_t(i) * n_chars_ + c] > 0.0)  // sigmoid > 0.5
                    out[from + i].insert(c);
    }
    return out;
}

ClassifierTrainStats train_classifier(CharacterClassifier& clf,
                                      const std::vector<StoryRecord>& train_stories,
                                      const std::vector<StoryRecord>& valid_stories,
                                      const ClassifierTrainConfig& cfg) {
    std::vector<const Frame*> frames;
    for (const auto& st : train_stories)
        for (const auto& fr : st.frames) frames.push_back(&fr);
    if (frames.empty()) throw ValidationError("train_classifier: empty train split");

    Rng rng(cfg.seed);
    AdamT<double> opt;
    opt.lr = cfg.lr;
    ClassifierTrainStats stats;

    for (int it = 0; it < cfg.iters; ++it) {
        GraphT<double> g;
        TapeT<double> tp{&g, true};
        TensorD imgs({cfg.batch, 3, kFrameSize, kFrameSize});
        TensorD targets({cfg.batch, clf.n_characters()});
        for (int b = 0; b < cfg.batch; ++b) {
            const Frame* fr = frames[rng.below(frames.size())];
            TensorD t = image_to_tensor<double>(fr->image);
            std::memcpy(imgs.data() + int64_t(b) * t.numel(), t.data(),
                        size_t(t.numel()) * sizeof(double));
            for (int c : fr->characters) targets.data()[int64_t(b) * clf.n_characters() + c] = 1.0;
        }
        VarT<double> logits = clf.head_fwd(tp, clf.backbone_fwd(tp, g.input(imgs, false)));
        VarT<double> loss = bce_logits(logits, targets);
        stats.final_loss = loss.val()[0];
        if (!std::isfinite(stats.final_loss))
            throw NumericError("classifier loss diverged at iter " + std::to_string(it));
        g.backward(loss);
        opt.step(g, tp.bound);
        ++stats.iters;
        if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "[classifier] iter %d loss %.5f\n", it + 1, stats.final_loss);
    }

    // validation micro-F1 on clean frames
    const auto& val = valid_stories.empty() ? train_stories : valid_stories;
    std::vector<ImageU8> imgs;
    std::vector<std::set<int>> gold;
    for (const auto& st : val)
        for (const auto& fr : st.frames) {
            imgs.push_back(fr.image);
            gold.push_back(fr.characters);
        }
    stats.val_micro_f1 = micro_f1(clf.predict(imgs), gold);
    return stats;
}

// ---------------------------------------------------------------------------
// FID
// ---------------------------------------------------------------------------

double fid_from_features(const TensorD& fa, const TensorD& fb) {
    const int64_t d = kFeatDim;
    if (fa.dim(1) != d || fb.dim(1) != d) throw ValidationError("fid: feature width");
    int64_t na = fa.dim(0), nb = fb.dim(0);
    if (na < 2 * d || nb < 2 * d)
        throw ValidationError("fid: need at least " + std::to_string(2 * d) +
                              " frames per set, got " + std::to_string(na) + " and " +
                              std::to_string(nb));

    using Mat = Eigen::MatrixXd;
    using Vec = Eigen::VectorXd;
    auto moments = [d](const TensorD& f, Vec& mu, Mat& cov) {
        int64_t n = f.dim(0);
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
            X(f.data(), n, d);
        mu = X.colwise().mean();
        Mat centered = X.rowwise() - mu.transpose();
        cov = centered.transpose() * centered / double(n - 1);
        cov.diagonal().array() += 1e-6;  // jitter
    };
    Vec mu_a, mu_b;
    Mat cov_a, cov_b;
    moments(fa, mu_a, cov_a);
    moments(fb, mu_b, cov_b);

    // tr sqrt(cov_a cov_b) = tr sqrt(S cov_b S) with S = sqrt(cov_a)
    Eigen::SelfAdjointEigenSolver<Mat> es_a(cov_a);
    if (es_a.info() != Eigen::Success) throw NumericError("fid: eigendecomposition failed");
    Vec ev = es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Mat sqrt_a = es_a.eigenvectors() * ev.asDiagonal() * es_a.eigenvectors().transpose();
    Mat inner = sqrt_a * cov_b * sqrt_a;
    inner = 0.5 * (inner + inner.transpose());  // symmetrize roundoff
    Eigen::SelfAdjointEigenSolver<Mat> es_i(inner);
    if (es_i.info() != Eigen::Success) throw NumericError("fid: eigendecomposition failed");
    double tr_sqrt = es_i.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double val = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if (!std::isfinite(val)) throw NumericError("fid: non-finite result");
    if (val < 0) {
        if (val < -1e-3) std::fprintf(stderr, "[fid] clamping negative value %.3g to 0\n", val);
        val = 0;
    }
    return val;
}

double fid(const std::vector<ImageU8>& real_frames, const std::vector<ImageU8>& generated_frames,
           const CharacterClassifier& clf) {
    return fid_from_features(clf.features(real_frames), clf.features(generated_frames));
}

double fid_floor(const std::vector<ImageU8>& real_frames, const CharacterClassifier& clf) {
    std::vector<ImageU8> a, b;
    for (size_t i = 0; i < real_frames.size(); ++i)
        (i % 2 == 0 ? a : b).push_back(real_frames[i]);
    return fid(a, b, clf);
}

// ---------------------------------------------------------------------------
// character metrics
// ---------------------------------------------------------------------------

double micro_f1(const std::vector<std::set<int>>& predicted,
                const std::vector<std::set<int>>& gold) {
    if (predicted.size() != gold.size()) throw ValidationError("micro_f1: misaligned frame sets");
    int64_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < predicted.size(); ++i) {
        for (int c : predicted[i]) (gold[i].count(c) ? tp : fp) += 1;
        for (int c : gold[i]) fn += !predicted[i].count(c);
    }
    if (tp == 0) return 0.0;
    double precision = double(tp) / double(tp + fp);
    double recall = double(tp) / double(tp + fn);
    return 2.0 * precision * recall / (precision + recall);
}

double exact_match_fraction(const std::vector<std::set<int>>& predicted,
                            const std::vector<std::set<int>>& gold) {
    if (predicted.size() != gold.size())
        throw ValidationError("frame_accuracy: misaligned frame sets");
    if (predicted.empty()) return 0.0;
    int64_t exact = 0;
    for (size_t i = 0; i < predicted.size(); ++i) exact += predicted[i] == gold[i];
    return double(exact) / double(predicted.size());
}

namespace {

void collect_aligned(const std::vector<StoryGenerationResult>& generated,
                     const std::vector<StoryRecord>& gold, std::vector<ImageU8>& frames,
                     std::vector<std::set<int>>& labels) {
    if (generated.size() != gold.size())
        throw ValidationError("metrics: story sets have different sizes");
    for (size_t s = 0; s < generated.size(); ++s) {
        if (generated[s].frames.size() != gold[s].frames.size())
            throw ValidationError("metrics: frame count mismatch in story " +
                                  gold[s].story_id);
        for (size_t f = 0; f < generated[s].frames.size(); ++f) {
            // pass-through ground-truth frames (continuation frame 0) are not scored
            if (generated[s].logs.size() > f && generated[s].logs[f].given) continue;
            frames.push_back(generated[s].frames[f]);
            labels.push_back(gold[s].frames[f].characters);
        }
    }
}

}  // namespace

double character_f1(const std::vector<StoryGenerationResult>& generated,
                    const std::vector<StoryRecord>& gold, const CharacterClassifier& clf) {
    std::vector<ImageU8> frames;
    std::vector<std::set<int>> labels;
    collect_aligned(generated, gold, frames, labels);
    return micro_f1(clf.predict(frames), labels);
}

double frame_accuracy(const std::vector<StoryGenerationResult>& generated,
                      const std::vector<StoryRecord>& gold, const CharacterClassifier& clf) {
    std::vector<ImageU8> frames;
    std::vector<std::set<int>> labels;
    collect_aligned(generated, gold, frames, labels);
    return exact_match_fraction(clf.predict(frames), labels);
}

SceneConsistency scene_consistency(const std::vector<StoryGenerationResult>& generated,
                                   const std::vector<StoryRecord>& gold,
                                   const CharacterClassifier& clf) {
    if (generated.size() != gold.size())
        throw ValidationError("scene_consistency: story sets have different sizes");
    SceneConsistency out;
    double acc = 0;
    for (size_t s = 0; s < generated.size(); ++s) {
        const auto& frames = generated[s].frames;
        TensorD feats = clf.features(frames);
        for (size_t i = 0; i < frames.size(); ++i)
            for (size_t j = i + 1; j < frames.size(); ++j) {
                if (gold[s].frames[i].scene_id != gold[s].frames[j].scene_id) continue;
                double dot = 0, ni = 0, nj = 0;
                for (int64_t k = 0; k < kFeatDim; ++k) {
                    double a = feats[int64_t(i) * kFeatDim + k];
                    double b = feats[int64_t(j) * kFeatDim + k];
                    dot += a * b;
                    ni += a * a;
                    nj += b * b;
                }
                double cos = dot / std::max(std::sqrt(ni) * std::sqrt(nj), 1e-12);
                acc += (cos + 1.0) / 2.0;
                ++out.n_pairs;
            }
    }
    if (out.n_pairs > 0) {
        out.value = acc / double(out.n_pairs);
        out.defined = true;
    }
    return out;
}

}  // namespace storydiff
