#pragma once

// PENet predictor: a projection + GRU encoder over a feature window with a
// linear head emitting per-class positive/negative evidence, trained with the
// Beta loss (the Bayes risk of binary cross-entropy under the predicted Beta).

#include "penet/annotations.h"
#include "penet/frontend.h"
#include "penet/sl_core.h"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace penet::model {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

/// Per-class binary targets, K x B (classes x windows).
using LabelMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

struct PENetConfig {
    int num_classes = 4;
    int mel_bins = frontend::kMelBins;
    int hidden = 32;
    int context = 3;   // m: backward segments
    int forward = 0;   // n: forward segments
    double learning_rate = 1e-3;
    int epochs = 4;
    int batch_size = 64;
    std::uint64_t seed = 0;
    /// Windows drawn per epoch; 0 uses every window of every clip.
    int windows_per_epoch = 0;
    std::vector<std::string> class_names;

    void validate() const;
    int window_segments() const { return context + forward + 1; }
    int window_frames() const { return window_segments() * frontend::kSegmentFrames; }
};

enum TensorId : int {
    kProjWeight,    // H x mel_bins
    kProjBias,      // H x 1
    kGruInput,      // 3H x H   (reset | update | candidate)
    kGruRecurrent,  // 3H x H
    kGruBias,       // 3H x 1
    kHeadWeight,    // 2K x H   (positive evidence rows first)
    kHeadBias,      // 2K x 1
    kNumTensors
};

inline constexpr std::array<std::string_view, kNumTensors> kTensorNames = {
    "proj.weight", "proj.bias", "gru.input", "gru.recurrent", "gru.bias", "head.weight", "head.bias"};

/// The trainable tensors, indexable by TensorId.
template <class T>
struct Network {
    std::array<Mat<T>, kNumTensors> tensors;

    Mat<T>& operator[](TensorId id) { return tensors[id]; }
    const Mat<T>& operator[](TensorId id) const { return tensors[id]; }

    int hidden() const { return static_cast<int>(tensors[kProjWeight].rows()); }
    int mel_bins() const { return static_cast<int>(tensors[kProjWeight].cols()); }
    int num_classes() const { return static_cast<int>(tensors[kHeadBias].rows() / 2); }

    static Network zeros(int mel_bins, int hidden, int num_classes);

    template <class U>
    Network<U> cast() const {
        Network<U> out;
        for (int i = 0; i < kNumTensors; ++i) {
            out.tensors[i] = tensors[i].template cast<U>();
        }
        return out;
    }
};

/// Per-bin standardisation applied to raw log-mel input.
struct FeatureNorm {
    Eigen::VectorXf mean;
    Eigen::VectorXf stddev;

    static FeatureNorm identity(int mel_bins);
};

struct PENetParams {
    Network<float> net;
    FeatureNorm norm;

    int num_classes() const { return net.num_classes(); }
    int hidden() const { return net.hidden(); }
    int mel_bins() const { return net.mel_bins(); }

    static PENetParams zeros(int mel_bins, int hidden, int num_classes);
    /// Glorot-uniform weights, zero biases, small positive head bias.
    static PENetParams initialise(const PENetConfig& cfg);
    bool all_finite() const;
};

/// Normalised windows packed for batched evaluation: x is mel_bins x
/// (steps * batch) with column s * batch + b holding frame s of window b.
template <class T>
struct BatchInput {
    Mat<T> x;
    int steps = 0;
    int batch = 0;
};

/// alpha and beta, each K x B.
template <class T>
struct EvidenceBatch {
    Mat<T> alpha;
    Mat<T> beta;

    sl::BetaEvidence at(int k, int b) const {
        return {static_cast<double>(alpha(k, b)), static_cast<double>(beta(k, b))};
    }
};

template <class T>
BatchInput<T> pack_windows(const FeatureNorm& norm, std::span<const frontend::FrameMatrix* const> windows);

template <class T>
EvidenceBatch<T> evaluate(const Network<T>& net, const BatchInput<T>& input);

/// Gradients of the summed Beta loss w.r.t. every tensor; the loss value is
/// written to *loss when non-null.
template <class T>
Network<T> backprop(const Network<T>& net, const BatchInput<T>& input, const LabelMatrix& labels,
                    double* loss = nullptr);

/// Single-window inference. Throws ShapeError unless the window holds
/// (m + n + 1) * 4 frames of mel_bins columns.
std::vector<sl::BetaEvidence> forward(const PENetParams& params, const frontend::FeatureWindow& window);

EvidenceBatch<float> forward_batch(const PENetParams& params, std::span<const frontend::FeatureWindow> windows);

Network<float> backprop(const PENetParams& params, const frontend::FeatureWindow& window,
                        std::span<const std::uint8_t> labels, double* loss = nullptr);

// ---- Beta loss --------------------------------------------------------------

/// y (psi(a+b) - psi(a)) + (1-y) (psi(a+b) - psi(b)).
double beta_loss_term(const sl::BetaEvidence& ev, int label);

struct EvidenceGradient {
    double d_alpha = 0.0;
    double d_beta = 0.0;
};

/// Analytic derivative of beta_loss_term via trigamma.
EvidenceGradient beta_loss_term_grad(const sl::BetaEvidence& ev, int label);

/// Sum of per-term losses over the K x B batch. Throws DomainError on
/// alpha or beta < 1 and ShapeError on a label shape mismatch.
template <class T>
double beta_loss(const EvidenceBatch<T>& out, const LabelMatrix& labels);

/// d loss / d alpha and d loss / d beta, each K x B.
template <class T>
EvidenceBatch<double> beta_loss_grad(const EvidenceBatch<T>& out, const LabelMatrix& labels);

// ---- labels -----------------------------------------------------------------

/// K x num_segments; segment s is positive for class k iff at least half of
/// its span overlaps an event of class k.
LabelMatrix rasterize_labels(std::span<const EventAnnotation> events, int num_segments, int num_classes,
                             double segment_seconds = frontend::kSegmentSeconds);

// ---- training ---------------------------------------------------------------

struct TrainingClip {
    std::string id;
    std::vector<frontend::Segment> segments;
    LabelMatrix labels;  // K x segments.size()
};

TrainingClip make_training_clip(std::string id, const frontend::MelFrames& frames,
                                std::span<const EventAnnotation> events, int num_classes);

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
class AdamOptimizer {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEpsilon = 1e-8;

    AdamOptimizer() = default;
    AdamOptimizer(const Network<float>& shape, double learning_rate);

    void step(Network<float>& params, const Network<float>& grads);

    double learning_rate() const { return learning_rate_; }
    void set_learning_rate(double lr) { learning_rate_ = lr; }
    long long steps_taken() const { return t_; }

    Network<float>& first_moment() { return m_; }
    Network<float>& second_moment() { return v_; }
    const Network<float>& first_moment() const { return m_; }
    const Network<float>& second_moment() const { return v_; }
    void set_steps_taken(long long t) { t_ = t; }

private:
    double learning_rate_ = 1e-3;
    long long t_ = 0;
    Network<float> m_;
    Network<float> v_;
};

struct TrainState {
    PENetConfig config;
    PENetParams params;
    AdamOptimizer optimizer;
    int epochs_completed = 0;
    std::vector<double> loss_trace;  // mean loss per window, one entry per epoch
};

struct TrainOptions {
    /// Called after every epoch with (epoch index from 1, mean loss).
    std::function<void(int, double)> on_epoch;
};

/// Fresh state: initialised weights, feature statistics from `clips`.
TrainState init_training(const PENetConfig& cfg, std::span<const TrainingClip> clips);

/// Runs epochs until state.epochs_completed == state.config.epochs. Throws
/// DivergenceError if an epoch loss is non-finite. Deterministic per seed;
/// the shuffle of epoch e depends only on (seed, e) so resumed runs match.
void train(TrainState& state, std::span<const TrainingClip> clips, const TrainOptions& options = {});

/// Convenience: init_training + train.
TrainState train(const PENetConfig& cfg, std::span<const TrainingClip> clips, const TrainOptions& options = {});

/// Mean Beta loss per window over every window of `clips`.
double mean_loss(const PENetParams& params, const PENetConfig& cfg, std::span<const TrainingClip> clips);

/// Feature mean / stddev per mel bin over every frame of every clip.
FeatureNorm compute_feature_norm(std::span<const TrainingClip> clips, int mel_bins);

// ---- checkpoints ------------------------------------------------------------

/// "PENET1", u32 config length + JSON config, u32 tensor count, then per
/// tensor: u32 name length, name, u32 rank, u32 dims, float32 LE row-major.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);

/// Rejects a bad magic, malformed data, or tensors whose shape disagrees with
/// the stored config.
TrainState load_checkpoint(const std::filesystem::path& path);

} // namespace penet::model
