#pragma once

// Online detection: segments arrive one at a time, backtrack windows
// [t - m, t + n] are assembled once segment t + n is available, and a
// decision rule turns each class's Beta evidence into a binary decision.

#include "penet/frontend.h"
#include "penet/model.h"
#include "penet/sl_core.h"

#include <Eigen/Core>

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace penet::stream {

enum class RuleKind { vacuity, probability, entropy };

std::string to_string(RuleKind kind);
RuleKind parse_rule_kind(const std::string& name);

/// A decision variant with one global threshold and optional per-class
/// overrides.
struct DecisionRule {
    RuleKind kind = RuleKind::vacuity;
    double threshold = 0.9;
    std::map<int, double> per_class;

    static DecisionRule vacuity(double v = 0.9) { return {RuleKind::vacuity, v, {}}; }
    static DecisionRule probability(double tau = 0.5) { return {RuleKind::probability, tau, {}}; }
    static DecisionRule entropy(double h_max = 0.9) { return {RuleKind::entropy, h_max, {}}; }

    double threshold_for(int k) const;
    /// V in (0, 1], tau in (0, 1), H_max in (0, 1]; throws ConfigError.
    void validate() const;
};

/// 1 iff b > d and u < V.
int decide_vacuity(const sl::BetaEvidence& ev, double v, double base_rate = sl::kDefaultBaseRate);

/// 1 iff the projected probability exceeds tau.
int decide_probability(const sl::BetaEvidence& ev, double tau, double base_rate = sl::kDefaultBaseRate);

/// Binary entropy of p in bits (natural entropy divided by ln 2).
double normalized_entropy(double p);

/// 1 iff p > 0.5 and normalized_entropy(p) < H_max.
int decide_entropy(const sl::BetaEvidence& ev, double h_max, double base_rate = sl::kDefaultBaseRate);

int decide(const DecisionRule& rule, int k, const sl::BetaEvidence& ev, double base_rate = sl::kDefaultBaseRate);

struct ClassDecision {
    int decision = 0;
    sl::BetaEvidence evidence;
    sl::BinomialOpinion opinion;
    double probability = 0.5;
};

struct SegmentDecision {
    int segment = 0;              // t
    double segment_start = 0.0;   // t * 0.064 s
    double available_time = 0.0;  // (t + n + 1) * 0.064 s
    std::vector<ClassDecision> classes;
};

struct DetectorConfig {
    int context = 3;  // m
    int forward = 0;  // n
    DecisionRule rule;
    double base_rate = sl::kDefaultBaseRate;

    void validate() const;
};

/// One audio stream's online state. Single-threaded; params are shared
/// read-only between detectors.
class Detector {
public:
    Detector(std::shared_ptr<const model::PENetParams> params, DetectorConfig config);

    /// Pushes the next 4 x mel_bins segment. Returns the decision for segment
    /// t = arrived - n once it is decidable, nothing while warming up.
    std::optional<SegmentDecision> step(const frontend::FrameMatrix& segment);

    /// Ends the stream: decides the last n segments, padding their windows on
    /// the right by repeating the final segment. The detector must be reset
    /// before it accepts new segments.
    std::vector<SegmentDecision> finish();

    void reset();

    int segments_received() const { return received_; }
    const DetectorConfig& config() const { return config_; }

    /// Start time of the current positive run of class k, if one is open.
    std::optional<double> episode_start(int k) const;

    /// Mean wall time of decision-producing steps (window build, forward and
    /// rule), in seconds.
    double mean_step_seconds() const;

private:
    SegmentDecision decide_at(int t);

    std::shared_ptr<const model::PENetParams> params_;
    DetectorConfig config_;
    std::deque<frontend::FrameMatrix> buffer_;
    int received_ = 0;
    std::vector<std::optional<double>> latch_;
    double step_seconds_total_ = 0.0;
    long long decided_steps_ = 0;
    bool finished_ = false;
};

/// K x T evidence for every segment of a clip, computed offline in batches
/// over the same windows the Detector builds (including the right-padded
/// windows it produces in finish()).
struct EvidenceTrack {
    Eigen::MatrixXd alpha;
    Eigen::MatrixXd beta;
    int forward = 0;

    int num_classes() const { return static_cast<int>(alpha.rows()); }
    int decided_segments() const { return static_cast<int>(alpha.cols()); }
};

EvidenceTrack compute_evidence(const model::PENetParams& params, const std::vector<frontend::Segment>& segments,
                               int context, int forward);

/// Applies `rule` to a track: K x decided_segments binary decisions.
Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> apply_rule(const EvidenceTrack& track,
                                                                       const DecisionRule& rule,
                                                                       double base_rate = sl::kDefaultBaseRate);

/// Same decisions as feeding `segments` through a Detector, produced offline.
std::vector<SegmentDecision> detect_offline(const model::PENetParams& params,
                                            const std::vector<frontend::Segment>& segments,
                                            const DetectorConfig& config);

// ---- detection log ----------------------------------------------------------

/// Column order of the CSV detection log.
inline constexpr const char* kDetectionLogHeader =
    "stream_id,segment_index,class,decision,belief,disbelief,vacuity,probability";

void write_detection_log_header(std::ostream& out);
/// One row per class.
void write_detection_rows(std::ostream& out, const std::string& stream_id, const SegmentDecision& decision);

struct DetectionLogRow {
    std::string stream_id;
    int segment = 0;
    int label = 0;
    int decision = 0;
    double belief = 0.0;
    double disbelief = 0.0;
    double vacuity = 0.0;
    double probability = 0.0;
};

std::vector<DetectionLogRow> read_detection_log(std::istream& in);

} // namespace penet::stream
