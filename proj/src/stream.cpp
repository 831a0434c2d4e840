#include "penet/stream.h"

#include "penet/errors.h"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

namespace penet::stream {
namespace {

SegmentDecision make_decision(int t, int forward, int received, const std::vector<sl::BetaEvidence>& evidence,
                              const DecisionRule& rule, double base_rate) {
    SegmentDecision out;
    out.segment = t;
    out.segment_start = t * frontend::kSegmentSeconds;
    out.available_time = std::min(t + forward + 1, received) * frontend::kSegmentSeconds;
    out.classes.reserve(evidence.size());
    for (int k = 0; k < static_cast<int>(evidence.size()); ++k) {
        ClassDecision cd;
        cd.evidence = evidence[k];
        cd.opinion = sl::opinion_from_evidence(evidence[k], base_rate);
        cd.probability = sl::expected_probability(cd.opinion);
        cd.decision = decide(rule, k, evidence[k], base_rate);
        out.classes.push_back(cd);
    }
    return out;
}

} // namespace

std::string to_string(RuleKind kind) {
    switch (kind) {
    case RuleKind::vacuity:
        return "vacuity";
    case RuleKind::probability:
        return "probability";
    case RuleKind::entropy:
        return "entropy";
    }
    return "unknown";
}

RuleKind parse_rule_kind(const std::string& name) {
    if (name == "vacuity") {
        return RuleKind::vacuity;
    }
    if (name == "probability") {
        return RuleKind::probability;
    }
    if (name == "entropy") {
        return RuleKind::entropy;
    }
    throw ConfigError("unknown decision rule '" + name + "' (expected vacuity, probability or entropy)");
}

double DecisionRule::threshold_for(int k) const {
    const auto it = per_class.find(k);
    return it == per_class.end() ? threshold : it->second;
}

void DecisionRule::validate() const {
    auto check = [this](double x) {
        switch (kind) {
        case RuleKind::vacuity:
            if (!(x > 0.0 && x <= 1.0)) {
                throw ConfigError("vacuity threshold must lie in (0, 1]");
            }
            break;
        case RuleKind::probability:
            if (!(x > 0.0 && x < 1.0)) {
                throw ConfigError("probability threshold must lie in (0, 1)");
            }
            break;
        case RuleKind::entropy:
            if (!(x > 0.0 && x <= 1.0)) {
                throw ConfigError("entropy threshold must lie in (0, 1]");
            }
            break;
        }
    };
    check(threshold);
    for (const auto& [k, x] : per_class) {
        if (k < 0) {
            throw ConfigError("per-class threshold override has a negative class index");
        }
        check(x);
    }
}

int decide_vacuity(const sl::BetaEvidence& ev, double v, double base_rate) {
    const sl::BinomialOpinion op = sl::opinion_from_evidence(ev, base_rate);
    return (op.belief > op.disbelief && op.vacuity < v) ? 1 : 0;
}

int decide_probability(const sl::BetaEvidence& ev, double tau, double base_rate) {
    return sl::expected_probability(ev, base_rate) > tau ? 1 : 0;
}

double normalized_entropy(double p) {
    auto plogp = [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; };
    return -(plogp(p) + plogp(1.0 - p)) / std::numbers::ln2;
}

int decide_entropy(const sl::BetaEvidence& ev, double h_max, double base_rate) {
    const double p = sl::expected_probability(ev, base_rate);
    return (p > 0.5 && normalized_entropy(p) < h_max) ? 1 : 0;
}

int decide(const DecisionRule& rule, int k, const sl::BetaEvidence& ev, double base_rate) {
    const double x = rule.threshold_for(k);
    switch (rule.kind) {
    case RuleKind::vacuity:
        return decide_vacuity(ev, x, base_rate);
    case RuleKind::probability:
        return decide_probability(ev, x, base_rate);
    case RuleKind::entropy:
        return decide_entropy(ev, x, base_rate);
    }
    return 0;
}

void DetectorConfig::validate() const {
    if (context < 0 || forward < 0) {
        throw ConfigError("context (m) and forward (n) must be >= 0");
    }
    if (!(base_rate >= 0.0 && base_rate <= 1.0)) {
        throw ConfigError("base rate must lie in [0, 1]");
    }
    rule.validate();
}

// ---- Detector ---------------------------------------------------------------

Detector::Detector(std::shared_ptr<const model::PENetParams> params, DetectorConfig config)
    : params_(std::move(params)), config_(std::move(config)) {
    if (!params_) {
        throw ConfigError("detector needs model parameters");
    }
    config_.validate();
    latch_.assign(params_->num_classes(), std::nullopt);
}

void Detector::reset() {
    buffer_.clear();
    received_ = 0;
    finished_ = false;
    latch_.assign(params_->num_classes(), std::nullopt);
    step_seconds_total_ = 0.0;
    decided_steps_ = 0;
}

std::optional<SegmentDecision> Detector::step(const frontend::FrameMatrix& segment) {
    if (finished_) {
        throw ConfigError("detector stream already finished; call reset() first");
    }
    if (segment.rows() != frontend::kSegmentFrames || segment.cols() != params_->mel_bins()) {
        throw ShapeError("segment must be " + std::to_string(frontend::kSegmentFrames) + "x" +
                         std::to_string(params_->mel_bins()));
    }
    const auto started = std::chrono::steady_clock::now();
    buffer_.push_back(segment);
    if (static_cast<int>(buffer_.size()) > config_.context + config_.forward + 1) {
        buffer_.pop_front();
    }
    ++received_;
    const int t = received_ - 1 - config_.forward;
    if (t < 0) {
        return std::nullopt;
    }
    SegmentDecision out = decide_at(t);
    step_seconds_total_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    ++decided_steps_;
    return out;
}

std::vector<SegmentDecision> Detector::finish() {
    std::vector<SegmentDecision> out;
    if (finished_) {
        return out;
    }
    finished_ = true;
    for (int t = std::max(0, received_ - config_.forward); t < received_; ++t) {
        out.push_back(decide_at(t));
    }
    return out;
}

SegmentDecision Detector::decide_at(int t) {
    const int m = config_.context;
    const int n = config_.forward;
    const int first_index = received_ - static_cast<int>(buffer_.size());
    frontend::FeatureWindow window;
    window.frames.resize((m + n + 1) * frontend::kSegmentFrames, params_->mel_bins());
    window.center = t;
    window.m = m;
    window.n = n;
    window.start_time = t * frontend::kSegmentSeconds;
    for (int i = 0; i < m + n + 1; ++i) {
        const int idx = std::clamp(t - m + i, 0, received_ - 1);
        window.frames.middleRows(i * frontend::kSegmentFrames, frontend::kSegmentFrames) =
            buffer_[idx - first_index];
    }

    SegmentDecision out =
        make_decision(t, n, received_, model::forward(*params_, window), config_.rule, config_.base_rate);
    for (int k = 0; k < static_cast<int>(out.classes.size()); ++k) {
        if (out.classes[k].decision) {
            if (!latch_[k]) {
                latch_[k] = out.segment_start;
            }
        } else {
            latch_[k].reset();
        }
    }
    return out;
}

std::optional<double> Detector::episode_start(int k) const {
    if (k < 0 || k >= static_cast<int>(latch_.size())) {
        return std::nullopt;
    }
    return latch_[k];
}

double Detector::mean_step_seconds() const {
    return decided_steps_ == 0 ? 0.0 : step_seconds_total_ / static_cast<double>(decided_steps_);
}

// ---- offline ----------------------------------------------------------------

EvidenceTrack compute_evidence(const model::PENetParams& params, const std::vector<frontend::Segment>& segments,
                               int context, int forward) {
    EvidenceTrack track;
    track.forward = forward;
    const int k = params.num_classes();
    const int decided = static_cast<int>(segments.size());
    track.alpha.resize(k, decided);
    track.beta.resize(k, decided);
    constexpr int kChunk = 64;
    std::vector<frontend::FeatureWindow> windows;
    for (int start = 0; start < decided; start += kChunk) {
        const int count = std::min(kChunk, decided - start);
        windows.clear();
        for (int t = start; t < start + count; ++t) {
            windows.push_back(frontend::make_window(segments, t, context, forward));
        }
        const model::EvidenceBatch<float> ev = model::forward_batch(params, windows);
        track.alpha.middleCols(start, count) = ev.alpha.cast<double>();
        track.beta.middleCols(start, count) = ev.beta.cast<double>();
    }
    return track;
}

Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> apply_rule(const EvidenceTrack& track,
                                                                       const DecisionRule& rule, double base_rate) {
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> out(track.alpha.rows(), track.alpha.cols());
    for (Eigen::Index t = 0; t < track.alpha.cols(); ++t) {
        for (Eigen::Index k = 0; k < track.alpha.rows(); ++k) {
            out(k, t) = static_cast<std::uint8_t>(
                decide(rule, static_cast<int>(k), {track.alpha(k, t), track.beta(k, t)}, base_rate));
        }
    }
    return out;
}

std::vector<SegmentDecision> detect_offline(const model::PENetParams& params,
                                            const std::vector<frontend::Segment>& segments,
                                            const DetectorConfig& config) {
    config.validate();
    std::vector<SegmentDecision> out;
    const int decided = static_cast<int>(segments.size());
    for (int t = 0; t < decided; ++t) {
        const frontend::FeatureWindow w = frontend::make_window(segments, t, config.context, config.forward);
        out.push_back(
            make_decision(t, config.forward, decided, model::forward(params, w), config.rule, config.base_rate));
    }
    return out;
}

// ---- detection log ----------------------------------------------------------

void write_detection_log_header(std::ostream& out) {
    out << kDetectionLogHeader << '\n';
}

void write_detection_rows(std::ostream& out, const std::string& stream_id, const SegmentDecision& decision) {
    char buf[160];
    for (int k = 0; k < static_cast<int>(decision.classes.size()); ++k) {
        const ClassDecision& c = decision.classes[k];
        std::snprintf(buf, sizeof(buf), ",%d,%d,%d,%.6f,%.6f,%.6f,%.6f\n", decision.segment, k, c.decision,
                      c.opinion.belief, c.opinion.disbelief, c.opinion.vacuity, c.probability);
        out << stream_id << buf;
    }
}

std::vector<DetectionLogRow> read_detection_log(std::istream& in) {
    std::vector<DetectionLogRow> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        if (line_no == 1) {
            if (line != kDetectionLogHeader) {
                throw IoError("detection log header mismatch; expected '" + std::string(kDetectionLogHeader) + "'");
            }
            continue;
        }
        std::istringstream fields(line);
        std::string cell[8];
        for (int i = 0; i < 8; ++i) {
            if (!std::getline(fields, cell[i], ',')) {
                throw IoError("detection log line " + std::to_string(line_no) + ": expected 8 columns");
            }
        }
        try {
            DetectionLogRow r;
            r.stream_id = cell[0];
            r.segment = std::stoi(cell[1]);
            r.label = std::stoi(cell[2]);
            r.decision = std::stoi(cell[3]);
            r.belief = std::stod(cell[4]);
            r.disbelief = std::stod(cell[5]);
            r.vacuity = std::stod(cell[6]);
            r.probability = std::stod(cell[7]);
            rows.push_back(std::move(r));
        } catch (const std::exception&) {
            throw IoError("detection log line " + std::to_string(line_no) + ": malformed number");
        }
    }
    return rows;
}

} // namespace penet::stream
