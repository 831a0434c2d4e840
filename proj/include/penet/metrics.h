#pragma once

// Early-detection scoring: event matching with an early tolerance, detection
// delay, event-level F1, and the vacuity / backtrack sweep drivers.

#include "penet/annotations.h"
#include "penet/frontend.h"
#include "penet/model.h"
#include "penet/stream.h"

#include <Eigen/Core>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace penet::metrics {

inline constexpr double kDefaultTolerance = -0.25;

/// Binary decisions of one clip on its timeline. Column t covers the segment
/// starting at t * segment_seconds and becomes available `latency` seconds
/// later (n * 0.064 s for n forward steps). Event windows are tested against
/// segment start times; the latency is added to the first-prediction time
/// that enters the delay.
struct DecisionStream {
    std::string clip_id;
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> decisions;  // K x T
    double segment_seconds = frontend::kSegmentSeconds;
    double latency = 0.0;
    /// Length of the annotated timeline; annotations must start before it.
    double clip_seconds = 0.0;

    int num_classes() const { return static_cast<int>(decisions.rows()); }
    int num_segments() const { return static_cast<int>(decisions.cols()); }
    double time_of(int t) const { return t * segment_seconds; }
    double available_at(int t) const { return time_of(t) + latency; }
};

enum class Status { TP, FP, FN };
std::string to_string(Status s);

struct DetectionRecord {
    std::string clip_id;
    int label = 0;
    Status status = Status::FN;
    /// First prediction time d_p (TP, FP); absent for FN.
    std::optional<double> first_prediction;
    /// Index into the annotation span: the matched event for TP/FN, the event
    /// an early run spilled into for FP (if any).
    std::optional<int> annotation;
    /// Present iff status == TP.
    std::optional<double> delay;
};

struct MatchOptions {
    double tolerance = kDefaultTolerance;  // L <= 0
    /// Literal reading: d_p must fall inside [onset, offset].
    bool strict_onset = false;
};

/// max(d_p - d_t, 0).
double detection_delay(double first_prediction, double onset);

/// One record per annotation (TP or FN) plus one FP record per positive run
/// that starts outside every tolerance window [onset + L, offset] of its
/// class. A run that starts inside a window is that event's TP if it is the
/// first run reaching the window; later runs inside windows are absorbed.
/// An event whose first overlapping run started before onset + L is FN, and
/// that run is counted as FP.
/// Throws ConfigError for L > 0, ShapeError on a timeline mismatch.
std::vector<DetectionRecord> match_events(const DecisionStream& stream, std::span<const EventAnnotation> events,
                                          const MatchOptions& options = {});

struct Score {
    int tp = 0;
    int fp = 0;
    int fn = 0;
    /// 2TP / (2TP + FP + FN); absent when TP + FP + FN = 0.
    std::optional<double> f1;
    /// Mean delay over TPs; absent without TPs.
    std::optional<double> mean_delay;
};

/// Micro-averaged over classes and clips.
Score early_f1(std::span<const DetectionRecord> records);

// ---- pipeline ---------------------------------------------------------------

struct EvalClip {
    std::string id;
    std::vector<frontend::Segment> segments;
    std::vector<EventAnnotation> events;
    double clip_seconds = 10.0;
};

/// Builds a stream from a K x decided matrix; segments beyond the decided
/// columns stay negative.
DecisionStream make_stream(const std::string& clip_id,
                           const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>& decided,
                           int total_segments, int forward, double clip_seconds);

/// Decisions per rule over precomputed evidence, scored against each clip.
Score score_tracks(std::span<const EvalClip> clips, std::span<const stream::EvidenceTrack> tracks,
                   const stream::DecisionRule& rule, const MatchOptions& options,
                   std::vector<DetectionRecord>* records = nullptr);

struct SweepRow {
    double parameter = 0.0;
    Score score;
};

struct SweepTable {
    std::string parameter_name;
    std::vector<SweepRow> rows;
    /// Backtrack sweep evaluated one model at every n instead of one model per n.
    bool shared_model = false;
    std::string monotonicity;  // human-readable trend report
};

/// Vacuity gate at each V of `grid` on one trained model.
SweepTable sweep_vacuity(const model::PENetParams& params, std::span<const EvalClip> clips, int context, int forward,
                         std::span<const double> grid, const MatchOptions& options = {});

struct BacktrackModel {
    int forward = 0;
    const model::PENetParams* params = nullptr;
};

/// (n, delay, F1) rows, one per model of the family; each model is run at its
/// own forward step count.
SweepTable sweep_backtrack(std::span<const BacktrackModel> family, std::span<const EvalClip> clips, int context,
                           const stream::DecisionRule& rule, const MatchOptions& options = {});

/// One shared model evaluated at every n of `grid`; flagged in the table.
SweepTable sweep_backtrack_shared(const model::PENetParams& params, std::span<const EvalClip> clips, int context,
                                  std::span<const int> grid, const stream::DecisionRule& rule,
                                  const MatchOptions& options = {});

/// Counts delay inversions against the expected direction (non-increasing in
/// V for the vacuity sweep, increasing in n for backtrack).
struct Monotonicity {
    int inversions = 0;
    double largest_inversion = 0.0;
};
Monotonicity delay_monotonicity(const SweepTable& table, bool expect_increasing);

/// CSV: parameter,delay,f1,tp,fp,fn (empty cells for undefined values).
void write_sweep_csv(std::ostream& out, const SweepTable& table);
std::string summarize(const SweepTable& table);

} // namespace penet::metrics
