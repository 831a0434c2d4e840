#include "penet/metrics.h"

#include "penet/errors.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace penet::metrics {
namespace {

constexpr double kTimeEps = 1e-9;

struct Run {
    int start = 0;
    int end = 0;  // inclusive
    bool used = false;
    std::optional<int> early_for;
};

std::vector<Run> positive_runs(const DecisionStream& stream, int k) {
    std::vector<Run> runs;
    const int count = stream.num_segments();
    int t = 0;
    while (t < count) {
        if (!stream.decisions(k, t)) {
            ++t;
            continue;
        }
        Run r;
        r.start = t;
        while (t + 1 < count && stream.decisions(k, t + 1)) {
            ++t;
        }
        r.end = t;
        runs.push_back(r);
        ++t;
    }
    return runs;
}

void check_timeline(const DecisionStream& stream, std::span<const EventAnnotation> events) {
    const double coverage =
        stream.clip_seconds > 0.0 ? stream.clip_seconds : (stream.num_segments() + 1) * stream.segment_seconds;
    for (const auto& ev : events) {
        if (ev.label < 0 || ev.label >= stream.num_classes()) {
            throw ShapeError("annotation class " + std::to_string(ev.label) + " outside the " +
                             std::to_string(stream.num_classes()) + "-class decision stream");
        }
        if (!ev.clip_id.empty() && !stream.clip_id.empty() && ev.clip_id != stream.clip_id) {
            throw ShapeError("annotation for clip '" + ev.clip_id + "' matched against stream '" + stream.clip_id +
                             "'");
        }
        if (ev.onset >= coverage || !(ev.onset < ev.offset)) {
            throw ShapeError("annotation [" + std::to_string(ev.onset) + ", " + std::to_string(ev.offset) +
                             "] does not fit the " + std::to_string(coverage) + " s decision timeline");
        }
    }
}

} // namespace

std::string to_string(Status s) {
    switch (s) {
    case Status::TP:
        return "TP";
    case Status::FP:
        return "FP";
    case Status::FN:
        return "FN";
    }
    return "?";
}

double detection_delay(double first_prediction, double onset) {
    return std::max(first_prediction - onset, 0.0);
}

std::vector<DetectionRecord> match_events(const DecisionStream& stream, std::span<const EventAnnotation> events,
                                          const MatchOptions& options) {
    if (options.tolerance > 0.0) {
        throw ConfigError("early tolerance L must be <= 0");
    }
    check_timeline(stream, events);
    const double lead = options.strict_onset ? 0.0 : options.tolerance;

    std::vector<DetectionRecord> records(events.size());
    for (std::size_t i = 0; i < events.size(); ++i) {
        records[i].clip_id = events[i].clip_id.empty() ? stream.clip_id : events[i].clip_id;
        records[i].label = events[i].label;
        records[i].status = Status::FN;
        records[i].annotation = static_cast<int>(i);
    }

    std::vector<DetectionRecord> false_positives;
    for (int k = 0; k < stream.num_classes(); ++k) {
        std::vector<int> order;
        for (std::size_t i = 0; i < events.size(); ++i) {
            if (events[i].label == k) {
                order.push_back(static_cast<int>(i));
            }
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return events[a].onset < events[b].onset; });
        std::vector<Run> runs = positive_runs(stream, k);

        for (int i : order) {
            const double lo = events[i].onset + lead;
            const double hi = events[i].offset;
            auto it = std::find_if(runs.begin(), runs.end(), [&](const Run& r) {
                return stream.time_of(r.start) <= hi + kTimeEps && stream.time_of(r.end) >= lo - kTimeEps;
            });
            if (it == runs.end()) {
                continue;
            }
            if (stream.time_of(it->start) >= lo - kTimeEps) {
                const double d_p = stream.available_at(it->start);
                records[i].status = Status::TP;
                records[i].first_prediction = d_p;
                records[i].delay = detection_delay(d_p, events[i].onset);
                it->used = true;
            } else if (!it->early_for) {
                it->early_for = i;
            }
        }

        for (const Run& r : runs) {
            if (r.used) {
                continue;
            }
            const double start = stream.time_of(r.start);
            const bool inside_window = std::any_of(order.begin(), order.end(), [&](int i) {
                return start >= events[i].onset + lead - kTimeEps && start <= events[i].offset + kTimeEps;
            });
            if (inside_window) {
                continue;
            }
            DetectionRecord fp;
            fp.clip_id = stream.clip_id;
            fp.label = k;
            fp.status = Status::FP;
            fp.first_prediction = stream.available_at(r.start);
            fp.annotation = r.early_for;
            false_positives.push_back(std::move(fp));
        }
    }
    records.insert(records.end(), false_positives.begin(), false_positives.end());
    return records;
}

Score early_f1(std::span<const DetectionRecord> records) {
    Score s;
    double delay_sum = 0.0;
    for (const auto& r : records) {
        switch (r.status) {
        case Status::TP:
            ++s.tp;
            delay_sum += r.delay.value_or(0.0);
            break;
        case Status::FP:
            ++s.fp;
            break;
        case Status::FN:
            ++s.fn;
            break;
        }
    }
    const int denom = 2 * s.tp + s.fp + s.fn;
    if (denom > 0) {
        s.f1 = 2.0 * s.tp / denom;
    }
    if (s.tp > 0) {
        s.mean_delay = delay_sum / s.tp;
    }
    return s;
}

// ---- pipeline ---------------------------------------------------------------

DecisionStream make_stream(const std::string& clip_id,
                           const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>& decided,
                           int total_segments, int forward, double clip_seconds) {
    if (decided.cols() > total_segments) {
        throw ShapeError("more decided segments than segments in the clip");
    }
    DecisionStream s;
    s.clip_id = clip_id;
    s.decisions = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(decided.rows(), total_segments);
    s.decisions.leftCols(decided.cols()) = decided;
    s.latency = forward * frontend::kSegmentSeconds;
    s.clip_seconds = clip_seconds;
    return s;
}

Score score_tracks(std::span<const EvalClip> clips, std::span<const stream::EvidenceTrack> tracks,
                   const stream::DecisionRule& rule, const MatchOptions& options,
                   std::vector<DetectionRecord>* records) {
    if (clips.size() != tracks.size()) {
        throw ShapeError("one evidence track per clip is required");
    }
    std::vector<DetectionRecord> all;
    for (std::size_t c = 0; c < clips.size(); ++c) {
        const auto decided = stream::apply_rule(tracks[c], rule);
        const DecisionStream s = make_stream(clips[c].id, decided, static_cast<int>(clips[c].segments.size()),
                                             tracks[c].forward, clips[c].clip_seconds);
        const auto recs = match_events(s, clips[c].events, options);
        all.insert(all.end(), recs.begin(), recs.end());
    }
    const Score score = early_f1(all);
    if (records) {
        *records = std::move(all);
    }
    return score;
}

namespace {

std::vector<stream::EvidenceTrack> tracks_for(const model::PENetParams& params, std::span<const EvalClip> clips,
                                              int context, int forward) {
    std::vector<stream::EvidenceTrack> tracks;
    tracks.reserve(clips.size());
    for (const auto& clip : clips) {
        tracks.push_back(stream::compute_evidence(params, clip.segments, context, forward));
    }
    return tracks;
}

void finish_report(SweepTable& table, bool expect_increasing) {
    const Monotonicity mono = delay_monotonicity(table, expect_increasing);
    std::ostringstream report;
    report << "delay " << (expect_increasing ? "increasing" : "non-increasing") << " in " << table.parameter_name
           << ": " << (mono.inversions == 0 ? "yes" : "no") << " (" << mono.inversions << " inversion(s)";
    if (mono.inversions > 0) {
        report << ", largest " << mono.largest_inversion << " s";
    }
    report << ")";
    table.monotonicity = report.str();
}

} // namespace

SweepTable sweep_vacuity(const model::PENetParams& params, std::span<const EvalClip> clips, int context, int forward,
                         std::span<const double> grid, const MatchOptions& options) {
    SweepTable table;
    table.parameter_name = "vacuity";
    const auto tracks = tracks_for(params, clips, context, forward);
    for (double v : grid) {
        const stream::DecisionRule rule = stream::DecisionRule::vacuity(v);
        rule.validate();
        table.rows.push_back({v, score_tracks(clips, tracks, rule, options)});
    }
    finish_report(table, false);
    return table;
}

SweepTable sweep_backtrack(std::span<const BacktrackModel> family, std::span<const EvalClip> clips, int context,
                           const stream::DecisionRule& rule, const MatchOptions& options) {
    rule.validate();
    SweepTable table;
    table.parameter_name = "backtrack";
    for (const auto& member : family) {
        if (!member.params) {
            throw ConfigError("backtrack family member without parameters");
        }
        const auto tracks = tracks_for(*member.params, clips, context, member.forward);
        table.rows.push_back({static_cast<double>(member.forward), score_tracks(clips, tracks, rule, options)});
    }
    finish_report(table, true);
    return table;
}

SweepTable sweep_backtrack_shared(const model::PENetParams& params, std::span<const EvalClip> clips, int context,
                                  std::span<const int> grid, const stream::DecisionRule& rule,
                                  const MatchOptions& options) {
    std::vector<BacktrackModel> family;
    for (int n : grid) {
        family.push_back({n, &params});
    }
    SweepTable table = sweep_backtrack(family, clips, context, rule, options);
    table.shared_model = true;
    return table;
}

Monotonicity delay_monotonicity(const SweepTable& table, bool expect_increasing) {
    Monotonicity mono;
    std::optional<double> previous;
    for (const auto& row : table.rows) {
        if (!row.score.mean_delay) {
            continue;
        }
        const double d = *row.score.mean_delay;
        if (previous) {
            const double wrong_way = expect_increasing ? (*previous - d) : (d - *previous);
            if (expect_increasing ? wrong_way >= 0.0 : wrong_way > 0.0) {
                ++mono.inversions;
                mono.largest_inversion = std::max(mono.largest_inversion, wrong_way);
            }
        }
        previous = d;
    }
    return mono;
}

void write_sweep_csv(std::ostream& out, const SweepTable& table) {
    out << "parameter,delay,f1,tp,fp,fn\n";
    char buf[64];
    for (const auto& row : table.rows) {
        std::snprintf(buf, sizeof(buf), "%g", row.parameter);
        out << buf << ',';
        if (row.score.mean_delay) {
            std::snprintf(buf, sizeof(buf), "%.6f", *row.score.mean_delay);
            out << buf;
        }
        out << ',';
        if (row.score.f1) {
            std::snprintf(buf, sizeof(buf), "%.6f", *row.score.f1);
            out << buf;
        }
        out << ',' << row.score.tp << ',' << row.score.fp << ',' << row.score.fn << '\n';
    }
}

std::string summarize(const SweepTable& table) {
    std::ostringstream out;
    out << table.parameter_name << " sweep" << (table.shared_model ? " (shared model across n)" : "") << '\n';
    char buf[128];
    for (const auto& row : table.rows) {
        std::snprintf(buf, sizeof(buf), "  %-8g delay=%s  F1=%s  TP=%d FP=%d FN=%d\n", row.parameter,
                      row.score.mean_delay ? std::to_string(*row.score.mean_delay).c_str() : "n/a",
                      row.score.f1 ? std::to_string(*row.score.f1).c_str() : "n/a", row.score.tp, row.score.fp,
                      row.score.fn);
        out << buf;
    }
    out << "  " << table.monotonicity << '\n';
    return out.str();
}

} // namespace penet::metrics
