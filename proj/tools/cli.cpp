#include "cli.h"

#include "penet/dataset.h"
#include "penet/errors.h"
#include "penet/metrics.h"
#include "penet/model.h"
#include "penet/random.h"
#include "penet/serialize.h"
#include "penet/stream.h"
#include "penet/synthgen.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace penet::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- logging ----------------------------------------------------------------

enum class Verbosity { quiet, info, debug };

Verbosity verbosity_from_env() {
    const char* raw = std::getenv("PENET_LOG");
    if (!raw) {
        return Verbosity::info;
    }
    const std::string v = raw;
    if (v == "quiet" || v == "0" || v == "error") {
        return Verbosity::quiet;
    }
    if (v == "debug" || v == "2") {
        return Verbosity::debug;
    }
    return Verbosity::info;
}

class Log {
public:
    Log(std::ostream& err, Verbosity level) : err_(err), level_(level) {}
    void info(const std::string& msg) const {
        if (level_ != Verbosity::quiet) {
            err_ << "[penet] " << msg << '\n';
        }
    }
    void debug(const std::string& msg) const {
        if (level_ == Verbosity::debug) {
            err_ << "[penet:debug] " << msg << '\n';
        }
    }

private:
    std::ostream& err_;
    Verbosity level_;
};

// ---- configuration ----------------------------------------------------------

struct CommonOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
};

json load_config_file(const std::string& path) {
    if (path.empty()) {
        return json::object();
    }
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path);
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError("config file " + path + " must hold a JSON object");
    }
    return j;
}

json section(const json& file, const char* name) {
    if (!file.contains(name)) {
        return json::object();
    }
    const json& s = file.at(name);
    if (!s.is_object()) {
        throw ConfigError(std::string("config section '") + name + "' must be an object");
    }
    return s;
}

// Wraps JSON type errors from a section so they surface as configuration errors.
template <class T>
void overlay(const json& file, const char* name, T& target) {
    try {
        section(file, name).get_to(target);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config section '") + name + "': " + e.what());
    }
}

std::uint64_t top_level_seed(const CommonOptions& common, const json& file) {
    if (common.seed) {
        return *common.seed;
    }
    if (file.contains("seed")) {
        try {
            return file.at("seed").get<std::uint64_t>();
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config key 'seed': ") + e.what());
        }
    }
    return 0;
}

template <class T>
void apply(const std::optional<T>& flag, T& field) {
    if (flag) {
        field = *flag;
    }
}

struct RuleSettings {
    std::string rule = "vacuity";
    std::optional<double> threshold;
    std::map<int, double> per_class;
    double base_rate = sl::kDefaultBaseRate;

    stream::DecisionRule build() const {
        stream::DecisionRule r;
        r.kind = stream::parse_rule_kind(rule);
        r.threshold = threshold.value_or(r.kind == stream::RuleKind::probability ? 0.5 : 0.9);
        r.per_class = per_class;
        r.validate();
        if (!(base_rate >= 0.0 && base_rate <= 1.0)) {
            throw ConfigError("base_rate must lie in [0, 1]");
        }
        return r;
    }
};

void read_rule_section(const json& file, const char* name, RuleSettings& s) {
    const json sec = section(file, name);
    try {
        if (sec.contains("rule")) {
            sec.at("rule").get_to(s.rule);
        }
        if (sec.contains("threshold")) {
            s.threshold = sec.at("threshold").get<double>();
        }
        if (sec.contains("base_rate")) {
            sec.at("base_rate").get_to(s.base_rate);
        }
        if (sec.contains("per_class")) {
            for (const auto& [key, value] : sec.at("per_class").items()) {
                std::size_t used = 0;
                int k = -1;
                try {
                    k = std::stoi(key, &used);
                } catch (const std::exception&) {
                    used = 0;
                }
                if (used != key.size() || k < 0) {
                    throw ConfigError(std::string("config section '") + name +
                                      "': per_class keys must be class indices, got '" + key + "'");
                }
                s.per_class[k] = value.get<double>();
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config section '") + name + "': " + e.what());
    }
}

json rule_to_json(const stream::DecisionRule& rule, double base_rate) {
    json per_class = json::object();
    for (const auto& [k, v] : rule.per_class) {
        per_class[std::to_string(k)] = v;
    }
    return {{"rule", stream::to_string(rule.kind)},
            {"threshold", rule.threshold},
            {"per_class", per_class},
            {"base_rate", base_rate}};
}

struct MatchSettings {
    double tolerance = metrics::kDefaultTolerance;
    bool strict_onset = false;
};

void read_match_section(const json& file, MatchSettings& s) {
    const json sec = section(file, "eval");
    try {
        if (sec.contains("tolerance")) {
            sec.at("tolerance").get_to(s.tolerance);
        }
        if (sec.contains("strict_onset")) {
            sec.at("strict_onset").get_to(s.strict_onset);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config section 'eval': ") + e.what());
    }
}

metrics::MatchOptions build_match(const MatchSettings& s) {
    if (s.tolerance > 0.0) {
        throw ConfigError("tolerance L must be <= 0 (an early-detection allowance)");
    }
    return {s.tolerance, s.strict_onset};
}

// ---- outputs ----------------------------------------------------------------

constexpr const char* kFailedMarker = ".failed";

class OutputDir {
public:
    explicit OutputDir(fs::path dir) : dir_(std::move(dir)) {}

    void open() {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec || !fs::is_directory(dir_)) {
            throw ConfigError("cannot create output directory " + dir_.string());
        }
        fs::remove(dir_ / kFailedMarker, ec);
        opened_ = true;
    }
    bool opened() const { return opened_; }
    const fs::path& path() const { return dir_; }
    fs::path operator/(const std::string& name) const { return dir_ / name; }

    void mark_failed(const std::string& message) const {
        if (!opened_) {
            return;
        }
        std::ofstream marker(dir_ / kFailedMarker);
        marker << message << '\n';
    }

private:
    fs::path dir_;
    bool opened_ = false;
};

// Writes through a temporary sibling and renames, so readers never see a
// truncated file.
void write_atomic(const fs::path& path, const std::function<void(const fs::path&)>& writer) {
    const fs::path tmp = path.string() + ".tmp";
    try {
        writer(tmp);
    } catch (...) {
        std::error_code ec;
        fs::remove(tmp, ec);
        throw;
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    write_atomic(path, [&](const fs::path& tmp) {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw IoError("cannot write " + tmp.string());
        }
        out << text;
        if (!out) {
            throw IoError("write failed for " + tmp.string());
        }
    });
}

void echo_config(const OutputDir& out, const json& echo) {
    write_text(out / "run_config.json", echo.dump(2) + "\n");
}

std::string format_double(const char* fmt, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), fmt, v);
    return buf;
}

json optional_number(const std::optional<double>& v) {
    return v ? json(*v) : json(nullptr);
}

// ---- corpus -----------------------------------------------------------------

synth::CorpusIndex open_corpus(const std::string& dir) {
    if (dir.empty()) {
        throw ConfigError("--corpus is required");
    }
    if (!fs::is_directory(dir)) {
        throw ConfigError("corpus directory not found: " + dir);
    }
    if (!fs::is_regular_file(fs::path(dir) / "manifest.csv")) {
        throw ConfigError("corpus directory has no manifest.csv: " + dir);
    }
    synth::CorpusIndex corpus = synth::read_corpus(dir);
    return corpus;
}

dataset::ClipRange range_from(const std::string& text) {
    return text.empty() ? dataset::ClipRange{} : dataset::parse_range(text);
}

// ---- commands -----------------------------------------------------------------

struct Context {
    std::ostream& out;
    const Log& log;
};

struct GenFlags {
    std::optional<int> clips, classes, min_events, max_events, polyphony;
    std::optional<double> clip_seconds, min_duration, max_duration, snr_min, snr_max;
};

void cmd_gen(const Context& ctx, const CommonOptions& common, const GenFlags& flags) {
    const json file = load_config_file(common.config_path);
    const std::uint64_t seed = top_level_seed(common, file);
    synth::SynthConfig cfg;
    overlay(file, "synth", cfg);
    apply(flags.clips, cfg.clips);
    apply(flags.classes, cfg.num_classes);
    apply(flags.min_events, cfg.min_events);
    apply(flags.max_events, cfg.max_events);
    apply(flags.polyphony, cfg.polyphony_max);
    apply(flags.clip_seconds, cfg.clip_seconds);
    apply(flags.min_duration, cfg.min_duration);
    apply(flags.max_duration, cfg.max_duration);
    apply(flags.snr_min, cfg.min_snr_db);
    apply(flags.snr_max, cfg.max_snr_db);
    cfg.seed = derive_seed(seed, "gen");
    cfg.validate();

    OutputDir out(common.out_dir);
    out.open();
    try {
        echo_config(out, {{"command", "gen"}, {"seed", seed}, {"synth", cfg}});
        ctx.log.info("generating " + std::to_string(cfg.clips) + " clips");
        const auto clips = synth::generate_corpus(cfg);
        synth::write_corpus(out.path(), cfg, clips);

        std::vector<int> per_class(cfg.num_classes, 0);
        int events = 0;
        for (const auto& c : clips) {
            for (const auto& ev : c.events) {
                ++per_class[ev.label];
                ++events;
            }
        }
        ctx.out << "wrote " << clips.size() << " clips with " << events << " events to " << out.path().string()
                << '\n';
        const auto names = synth::class_names(cfg.num_classes);
        for (int k = 0; k < cfg.num_classes; ++k) {
            ctx.out << "  " << names[k] << ": " << per_class[k] << " events\n";
        }
    } catch (const std::exception& e) {
        out.mark_failed(e.what());
        throw;
    }
}

struct TrainFlags {
    std::string corpus;
    std::string range;
    std::string resume;
    std::optional<int> epochs, batch_size, hidden, context, forward, windows_per_epoch;
    std::optional<double> learning_rate;
};

void cmd_train(const Context& ctx, const CommonOptions& common, const TrainFlags& flags) {
    const json file = load_config_file(common.config_path);
    const std::uint64_t seed = top_level_seed(common, file);
    model::PENetConfig cfg;
    overlay(file, "model", cfg);
    apply(flags.epochs, cfg.epochs);
    apply(flags.batch_size, cfg.batch_size);
    apply(flags.hidden, cfg.hidden);
    apply(flags.context, cfg.context);
    apply(flags.forward, cfg.forward);
    apply(flags.windows_per_epoch, cfg.windows_per_epoch);
    apply(flags.learning_rate, cfg.learning_rate);
    cfg.seed = derive_seed(seed, "train");

    const synth::CorpusIndex corpus = open_corpus(flags.corpus);
    const dataset::ClipRange range = range_from(flags.range);
    dataset::check_corpus_files(corpus, range);
    cfg.class_names = corpus.class_names;
    cfg.num_classes = static_cast<int>(corpus.class_names.size());
    cfg.validate();
    if (!flags.resume.empty() && !fs::is_regular_file(flags.resume)) {
        throw ConfigError("checkpoint to resume from not found: " + flags.resume);
    }

    OutputDir out(common.out_dir);
    out.open();
    try {
        model::TrainState state;
        if (!flags.resume.empty()) {
            state = model::load_checkpoint(flags.resume);
            const model::PENetConfig& old = state.config;
            if (old.num_classes != cfg.num_classes || old.mel_bins != cfg.mel_bins || old.hidden != cfg.hidden ||
                old.context != cfg.context || old.forward != cfg.forward) {
                throw ConfigError("checkpoint " + flags.resume +
                                  " was trained with a different architecture or window than requested");
            }
            state.config.epochs = cfg.epochs;
            state.config.learning_rate = cfg.learning_rate;
            state.config.batch_size = cfg.batch_size;
            state.config.windows_per_epoch = cfg.windows_per_epoch;
            ctx.log.info("resuming from " + flags.resume + " after epoch " +
                         std::to_string(state.epochs_completed));
        }
        const model::PENetConfig& effective = flags.resume.empty() ? cfg : state.config;
        echo_config(out, {{"command", "train"},
                          {"seed", seed},
                          {"corpus", flags.corpus},
                          {"range", flags.range},
                          {"resume", flags.resume},
                          {"model", effective}});

        ctx.log.info("loading features from " + flags.corpus);
        const auto features = dataset::load_features(corpus, range);
        const auto clips = dataset::training_clips(features, cfg.num_classes);
        if (flags.resume.empty()) {
            state = model::init_training(cfg, clips);
        }
        model::TrainOptions opts;
        opts.on_epoch = [&](int epoch, double loss) {
            ctx.log.info("epoch " + std::to_string(epoch) + " loss " + format_double("%.6f", loss));
        };
        model::train(state, clips, opts);

        write_atomic(out / "model.ckpt", [&](const fs::path& tmp) { model::save_checkpoint(tmp, state); });
        std::ostringstream trace;
        trace << "epoch,loss\n";
        for (std::size_t i = 0; i < state.loss_trace.size(); ++i) {
            trace << (i + 1) << ',' << format_double("%.17g", state.loss_trace[i]) << '\n';
        }
        write_text(out / "loss_trace.csv", trace.str());
        ctx.out << "trained " << state.epochs_completed << " epochs on " << clips.size() << " clips; final loss "
                << (state.loss_trace.empty() ? std::string("n/a") : format_double("%.6f", state.loss_trace.back()))
                << "\ncheckpoint: " << (out / "model.ckpt").string() << '\n';
    } catch (const std::exception& e) {
        out.mark_failed(e.what());
        throw;
    }
}

model::TrainState open_checkpoint(const std::string& path) {
    if (path.empty()) {
        throw ConfigError("--checkpoint is required");
    }
    if (!fs::is_regular_file(path)) {
        throw ConfigError("checkpoint not found: " + path);
    }
    return model::load_checkpoint(path);
}

void check_classes(const model::PENetConfig& cfg, const synth::CorpusIndex& corpus, const std::string& ckpt) {
    if (cfg.num_classes != static_cast<int>(corpus.class_names.size()) ||
        (!cfg.class_names.empty() && cfg.class_names != corpus.class_names)) {
        throw ShapeError("checkpoint " + ckpt + " was trained on different classes than corpus " +
                         corpus.root.string());
    }
}

struct DetectFlags {
    std::string checkpoint;
    std::string corpus;
    std::string range;
    std::optional<std::string> rule;
    std::optional<double> threshold, base_rate;
    std::optional<int> context, forward;
};

void cmd_detect(const Context& ctx, const CommonOptions& common, const DetectFlags& flags) {
    const json file = load_config_file(common.config_path);
    const std::uint64_t seed = top_level_seed(common, file);
    RuleSettings rs;
    read_rule_section(file, "detect", rs);
    apply(flags.rule, rs.rule);
    if (flags.rule && !flags.threshold) {
        rs.threshold.reset();
    }
    if (flags.threshold) {
        rs.threshold = flags.threshold;
    }
    apply(flags.base_rate, rs.base_rate);
    const stream::DecisionRule rule = rs.build();

    const synth::CorpusIndex corpus = open_corpus(flags.corpus);
    const dataset::ClipRange range = range_from(flags.range);
    dataset::check_corpus_files(corpus, range);
    const model::TrainState state = open_checkpoint(flags.checkpoint);
    check_classes(state.config, corpus, flags.checkpoint);

    stream::DetectorConfig dcfg;
    dcfg.context = flags.context.value_or(state.config.context);
    dcfg.forward = flags.forward.value_or(state.config.forward);
    dcfg.rule = rule;
    dcfg.base_rate = rs.base_rate;
    dcfg.validate();
    if (dcfg.forward != state.config.forward || dcfg.context != state.config.context) {
        ctx.log.info("note: detecting with m=" + std::to_string(dcfg.context) + ", n=" + std::to_string(dcfg.forward) +
                     " on a model trained with m=" + std::to_string(state.config.context) +
                     ", n=" + std::to_string(state.config.forward));
    }

    OutputDir out(common.out_dir);
    out.open();
    try {
        echo_config(out, {{"command", "detect"},
                          {"seed", seed},
                          {"checkpoint", flags.checkpoint},
                          {"corpus", flags.corpus},
                          {"range", flags.range},
                          {"detect",
                           {{"context", dcfg.context},
                            {"forward", dcfg.forward},
                            {"decision", rule_to_json(rule, dcfg.base_rate)}}}});
        const auto features = dataset::load_features(corpus, range);
        auto params = std::make_shared<const model::PENetParams>(state.params);
        stream::Detector detector(params, dcfg);

        double step_seconds = 0.0;
        long long steps = 0;
        long long rows = 0;
        write_atomic(out / "detections.csv", [&](const fs::path& tmp) {
            std::ofstream log(tmp, std::ios::binary);
            if (!log) {
                throw IoError("cannot write " + tmp.string());
            }
            stream::write_detection_log_header(log);
            for (const auto& clip : features) {
                detector.reset();
                for (const auto& seg : clip.segments) {
                    if (const auto decision = detector.step(seg.frames)) {
                        stream::write_detection_rows(log, clip.id, *decision);
                        rows += static_cast<long long>(decision->classes.size());
                    }
                }
                const long long decided = static_cast<long long>(clip.segments.size()) - dcfg.forward;
                step_seconds += detector.mean_step_seconds() * static_cast<double>(std::max(0LL, decided));
                steps += std::max(0LL, decided);
                for (const auto& decision : detector.finish()) {
                    stream::write_detection_rows(log, clip.id, decision);
                    rows += static_cast<long long>(decision.classes.size());
                }
            }
            if (!log) {
                throw IoError("write failed for " + tmp.string());
            }
        });

        const double mean_ms = steps > 0 ? 1000.0 * step_seconds / static_cast<double>(steps) : 0.0;
        const double budget_ms = 1000.0 * frontend::kSegmentSeconds;
        const json summary = {{"clips", features.size()},
                              {"rows", rows},
                              {"mean_step_ms", mean_ms},
                              {"budget_ms", budget_ms},
                              {"real_time", mean_ms < budget_ms}};
        write_text(out / "detect_summary.json", summary.dump(2) + "\n");
        ctx.out << "wrote " << rows << " detection rows for " << features.size() << " clips to "
                << (out / "detections.csv").string() << '\n'
                << "mean per-segment latency: " << format_double("%.3f", mean_ms) << " ms (budget "
                << format_double("%.0f", budget_ms) << " ms, " << (mean_ms < budget_ms ? "real time" : "too slow")
                << ")\n";
    } catch (const std::exception& e) {
        out.mark_failed(e.what());
        throw;
    }
}

struct EvalFlags {
    std::string detections;
    std::string corpus;
    std::string range;
    std::optional<int> forward;
    std::optional<double> tolerance;
    bool strict_onset = false;
};

int forward_from_echo(const fs::path& detections) {
    const fs::path echo = detections.parent_path() / "run_config.json";
    if (!fs::is_regular_file(echo)) {
        throw ConfigError("forward step count n unknown: pass --forward or keep run_config.json next to " +
                          detections.string());
    }
    try {
        std::ifstream in(echo);
        return json::parse(in).at("detect").at("forward").get<int>();
    } catch (const json::exception& e) {
        throw ConfigError("cannot read n from " + echo.string() + ": " + e.what());
    }
}

void cmd_eval(const Context& ctx, const CommonOptions& common, const EvalFlags& flags) {
    const json file = load_config_file(common.config_path);
    const std::uint64_t seed = top_level_seed(common, file);
    MatchSettings ms;
    read_match_section(file, ms);
    apply(flags.tolerance, ms.tolerance);
    if (flags.strict_onset) {
        ms.strict_onset = true;
    }
    const metrics::MatchOptions match = build_match(ms);
    if (flags.detections.empty() || !fs::is_regular_file(flags.detections)) {
        throw ConfigError("detection log not found: " + flags.detections);
    }
    const int forward = flags.forward ? *flags.forward : forward_from_echo(flags.detections);
    if (forward < 0) {
        throw ConfigError("forward step count n must be >= 0");
    }
    const synth::CorpusIndex corpus = open_corpus(flags.corpus);
    const dataset::ClipRange range = range_from(flags.range);

    OutputDir out(common.out_dir);
    out.open();
    try {
        echo_config(out, {{"command", "eval"},
                          {"seed", seed},
                          {"detections", flags.detections},
                          {"corpus", flags.corpus},
                          {"range", flags.range},
                          {"eval",
                           {{"tolerance", ms.tolerance},
                            {"strict_onset", ms.strict_onset},
                            {"forward", forward}}}});

        std::ifstream in(flags.detections);
        const auto rows = stream::read_detection_log(in);
        const int num_classes = static_cast<int>(corpus.class_names.size());

        std::map<std::string, int> last_segment;
        for (const auto& r : rows) {
            if (r.label < 0 || r.label >= num_classes) {
                throw ShapeError("detection log class " + std::to_string(r.label) + " outside the corpus's " +
                                 std::to_string(num_classes) + " classes");
            }
            if (r.segment < 0) {
                throw ShapeError("detection log has a negative segment index");
            }
            auto& last = last_segment[r.stream_id];
            last = std::max(last, r.segment);
        }

        const int count = static_cast<int>(corpus.manifest.size());
        const int begin = std::min(range.begin, count);
        const int end = range.end < 0 ? count : std::min(range.end, count);
        std::map<std::string, const synth::ManifestEntry*> in_range;
        for (int i = begin; i < end; ++i) {
            in_range[corpus.manifest[i].clip_id] = &corpus.manifest[i];
        }
        for (const auto& [id, last] : last_segment) {
            if (!in_range.count(id)) {
                throw ShapeError("detection log stream '" + id + "' is not a clip of the evaluated corpus range");
            }
        }

        std::map<std::string, metrics::DecisionStream> streams;
        for (const auto& [id, entry] : in_range) {
            const auto it = last_segment.find(id);
            if (it == last_segment.end()) {
                throw ShapeError("clip '" + id + "' has no rows in the detection log");
            }
            metrics::DecisionStream s;
            s.clip_id = id;
            s.decisions =
                Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(num_classes, it->second + 1);
            s.latency = forward * frontend::kSegmentSeconds;
            s.clip_seconds = entry->duration;
            streams.emplace(id, std::move(s));
        }
        for (const auto& r : rows) {
            streams.at(r.stream_id).decisions(r.label, r.segment) = r.decision ? 1 : 0;
        }

        const auto grouped = group_by_clip(corpus.annotations);
        std::vector<metrics::DetectionRecord> records;
        for (const auto& [id, s] : streams) {
            const auto g = grouped.find(id);
            const std::vector<EventAnnotation> none;
            const auto& events = g == grouped.end() ? none : g->second;
            const auto recs = metrics::match_events(s, events, match);
            records.insert(records.end(), recs.begin(), recs.end());
        }
        const metrics::Score score = metrics::early_f1(records);

        std::ostringstream csv;
        csv << "clip_id,class,status,first_prediction,delay\n";
        for (const auto& r : records) {
            csv << r.clip_id << ',' << r.label << ',' << metrics::to_string(r.status) << ',';
            if (r.first_prediction) {
                csv << format_double("%.6f", *r.first_prediction);
            }
            csv << ',';
            if (r.delay) {
                csv << format_double("%.6f", *r.delay);
            }
            csv << '\n';
        }
        write_text(out / "records.csv", csv.str());
        const json summary = {{"tp", score.tp},
                              {"fp", score.fp},
                              {"fn", score.fn},
                              {"f1", optional_number(score.f1)},
                              {"mean_delay", optional_number(score.mean_delay)},
                              {"forward", forward},
                              {"tolerance", ms.tolerance},
                              {"strict_onset", ms.strict_onset}};
        write_text(out / "score.json", summary.dump(2) + "\n");
        ctx.out << "TP=" << score.tp << " FP=" << score.fp << " FN=" << score.fn
                << " F1=" << (score.f1 ? format_double("%.4f", *score.f1) : std::string("n/a"))
                << " mean delay=" << (score.mean_delay ? format_double("%.4f", *score.mean_delay) + " s" : "n/a")
                << '\n';
    } catch (const std::exception& e) {
        out.mark_failed(e.what());
        throw;
    }
}

struct SweepFlags {
    std::string param;
    std::string corpus;
    std::string range;
    std::vector<std::string> checkpoints;
    std::string grid;
    bool shared = false;
    std::optional<std::string> rule;
    std::optional<double> threshold;
    std::optional<int> context;
    std::optional<double> tolerance;
    bool strict_onset = false;
};

std::vector<double> parse_grid(const std::string& text) {
    std::vector<double> grid;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(cell, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != cell.size()) {
            throw ConfigError("grid value '" + cell + "' is not a number");
        }
        grid.push_back(v);
    }
    if (grid.empty()) {
        throw ConfigError("grid must list at least one value");
    }
    return grid;
}

void cmd_sweep(const Context& ctx, const CommonOptions& common, const SweepFlags& flags) {
    const json file = load_config_file(common.config_path);
    const std::uint64_t seed = top_level_seed(common, file);
    MatchSettings ms;
    read_match_section(file, ms);
    apply(flags.tolerance, ms.tolerance);
    if (flags.strict_onset) {
        ms.strict_onset = true;
    }
    const metrics::MatchOptions match = build_match(ms);
    RuleSettings rs;
    read_rule_section(file, "sweep", rs);
    apply(flags.rule, rs.rule);
    if (flags.rule && !flags.threshold) {
        rs.threshold.reset();
    }
    if (flags.threshold) {
        rs.threshold = flags.threshold;
    }
    const stream::DecisionRule rule = rs.build();

    const bool vacuity = flags.param == "vacuity";
    std::vector<double> grid;
    if (!flags.grid.empty()) {
        grid = parse_grid(flags.grid);
    } else if (vacuity) {
        grid = {0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    } else if (flags.shared) {
        grid = {0, 2, 4, 6};
    }
    if (vacuity) {
        if (flags.checkpoints.size() != 1) {
            throw ConfigError("a vacuity sweep needs exactly one --checkpoint");
        }
        for (double v : grid) {
            stream::DecisionRule::vacuity(v).validate();
        }
    } else {
        if (flags.shared ? flags.checkpoints.size() != 1 : flags.checkpoints.empty()) {
            throw ConfigError(flags.shared ? "a shared backtrack sweep needs exactly one --checkpoint"
                                           : "a backtrack sweep needs one --checkpoint per n");
        }
        if (!flags.shared && !flags.grid.empty()) {
            throw ConfigError("--grid applies to --shared backtrack sweeps; otherwise n comes from each checkpoint");
        }
        for (double n : grid) {
            if (n < 0 || n != static_cast<int>(n)) {
                throw ConfigError("backtrack grid values must be non-negative integers");
            }
        }
    }

    const synth::CorpusIndex corpus = open_corpus(flags.corpus);
    const dataset::ClipRange range = range_from(flags.range);
    dataset::check_corpus_files(corpus, range);
    std::vector<model::TrainState> states;
    for (const auto& path : flags.checkpoints) {
        states.push_back(open_checkpoint(path));
        check_classes(states.back().config, corpus, path);
    }

    OutputDir out(common.out_dir);
    out.open();
    try {
        json ckpts = json::array();
        for (std::size_t i = 0; i < states.size(); ++i) {
            ckpts.push_back({{"path", flags.checkpoints[i]}, {"forward", states[i].config.forward}});
        }
        echo_config(out, {{"command", "sweep"},
                          {"seed", seed},
                          {"param", flags.param},
                          {"corpus", flags.corpus},
                          {"range", flags.range},
                          {"checkpoints", ckpts},
                          {"grid", grid},
                          {"shared", flags.shared},
                          {"decision", rule_to_json(rule, rs.base_rate)},
                          {"eval", {{"tolerance", ms.tolerance}, {"strict_onset", ms.strict_onset}}}});

        const auto features = dataset::load_features(corpus, range);
        const auto clips = dataset::eval_clips(features);
        metrics::SweepTable table;
        if (vacuity) {
            const model::PENetConfig& cfg = states.front().config;
            table = metrics::sweep_vacuity(states.front().params, clips, flags.context.value_or(cfg.context),
                                           cfg.forward, grid, match);
        } else if (flags.shared) {
            std::vector<int> ns;
            for (double n : grid) {
                ns.push_back(static_cast<int>(n));
            }
            table = metrics::sweep_backtrack_shared(states.front().params, clips,
                                                    flags.context.value_or(states.front().config.context), ns, rule,
                                                    match);
        } else {
            std::vector<metrics::BacktrackModel> family;
            for (const auto& s : states) {
                family.push_back({s.config.forward, &s.params});
            }
            std::stable_sort(family.begin(), family.end(),
                             [](const auto& a, const auto& b) { return a.forward < b.forward; });
            table = metrics::sweep_backtrack(family, clips, flags.context.value_or(states.front().config.context),
                                             rule, match);
        }
        std::ostringstream csv;
        metrics::write_sweep_csv(csv, table);
        write_text(out / ("sweep_" + flags.param + ".csv"), csv.str());
        const std::string summary = metrics::summarize(table);
        write_text(out / ("sweep_" + flags.param + ".txt"), summary);
        ctx.out << summary;
    } catch (const std::exception& e) {
        out.mark_failed(e.what());
        throw;
    }
}

void add_common(CLI::App* cmd, CommonOptions& common) {
    cmd->add_option("--config", common.config_path, "JSON config file (flags override file values)");
    cmd->add_option("--seed", common.seed, "Top-level seed; gen and train derive named sub-streams from it");
    cmd->add_option("--out", common.out_dir, "Output directory")->required();
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    const Log log(err, verbosity_from_env());
    CLI::App app{"Evidential sound event early detection"};
    app.require_subcommand(1);

    CommonOptions common;
    GenFlags gen;
    TrainFlags train;
    DetectFlags detect;
    EvalFlags eval;
    SweepFlags sweep;

    auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic corpus");
    add_common(gen_cmd, common);
    gen_cmd->add_option("--clips", gen.clips, "Number of clips");
    gen_cmd->add_option("--classes", gen.classes, "Number of classes");
    gen_cmd->add_option("--clip-seconds", gen.clip_seconds, "Clip length in seconds");
    gen_cmd->add_option("--min-events", gen.min_events, "Fewest events per clip");
    gen_cmd->add_option("--max-events", gen.max_events, "Most events per clip");
    gen_cmd->add_option("--min-duration", gen.min_duration, "Shortest event in seconds");
    gen_cmd->add_option("--max-duration", gen.max_duration, "Longest event in seconds");
    gen_cmd->add_option("--snr-min", gen.snr_min, "Lowest event SNR in dB");
    gen_cmd->add_option("--snr-max", gen.snr_max, "Highest event SNR in dB");
    gen_cmd->add_option("--polyphony", gen.polyphony, "Most simultaneous events");

    auto* train_cmd = app.add_subcommand("train", "Train a model on a corpus");
    add_common(train_cmd, common);
    train_cmd->add_option("--corpus", train.corpus, "Corpus directory")->required();
    train_cmd->add_option("--range", train.range, "Clip range A:B in manifest order");
    train_cmd->add_option("--resume", train.resume, "Checkpoint to continue training from");
    train_cmd->add_option("--epochs", train.epochs, "Total epochs");
    train_cmd->add_option("--batch-size", train.batch_size, "Windows per mini-batch");
    train_cmd->add_option("--hidden", train.hidden, "Recurrent hidden size");
    train_cmd->add_option("--context", train.context, "Backward context m in segments");
    train_cmd->add_option("--forward", train.forward, "Forward steps n in segments");
    train_cmd->add_option("--windows-per-epoch", train.windows_per_epoch, "Windows drawn per epoch (0 = all)");
    train_cmd->add_option("--lr", train.learning_rate, "Adam learning rate");

    auto* detect_cmd = app.add_subcommand("detect", "Stream a corpus through a trained detector");
    add_common(detect_cmd, common);
    detect_cmd->add_option("--checkpoint", detect.checkpoint, "Trained model")->required();
    detect_cmd->add_option("--corpus", detect.corpus, "Corpus directory")->required();
    detect_cmd->add_option("--range", detect.range, "Clip range A:B in manifest order");
    detect_cmd->add_option("--rule", detect.rule, "vacuity, probability or entropy");
    detect_cmd->add_option("--threshold", detect.threshold, "V, tau or H_max");
    detect_cmd->add_option("--base-rate", detect.base_rate, "Base rate a");
    detect_cmd->add_option("--context", detect.context, "Backward context m (default: from checkpoint)");
    detect_cmd->add_option("--forward", detect.forward, "Forward steps n (default: from checkpoint)");

    auto* eval_cmd = app.add_subcommand("eval", "Score a detection log against strong labels");
    add_common(eval_cmd, common);
    eval_cmd->add_option("--detections", eval.detections, "Detection log CSV")->required();
    eval_cmd->add_option("--corpus", eval.corpus, "Corpus directory with annotations")->required();
    eval_cmd->add_option("--range", eval.range, "Clip range A:B in manifest order");
    eval_cmd->add_option("--forward", eval.forward, "Forward steps n (default: from the detect run's config)");
    eval_cmd->add_option("--tolerance", eval.tolerance, "Early tolerance L in seconds (<= 0)");
    eval_cmd->add_flag("--strict-onset", eval.strict_onset, "Require the first prediction inside [onset, offset]");

    auto* sweep_cmd = app.add_subcommand("sweep", "Vacuity-threshold or backtrack sweep");
    add_common(sweep_cmd, common);
    sweep_cmd->add_option("--param", sweep.param, "vacuity or backtrack")
        ->required()
        ->check(CLI::IsMember({"vacuity", "backtrack"}));
    sweep_cmd->add_option("--corpus", sweep.corpus, "Corpus directory")->required();
    sweep_cmd->add_option("--range", sweep.range, "Clip range A:B in manifest order");
    sweep_cmd->add_option("--checkpoint", sweep.checkpoints, "Model(s); one per n for backtrack")->required();
    sweep_cmd->add_option("--grid", sweep.grid, "Comma-separated V values, or n values with --shared");
    sweep_cmd->add_flag("--shared", sweep.shared, "Backtrack: evaluate one model at every n of the grid");
    sweep_cmd->add_option("--rule", sweep.rule, "Backtrack decision rule");
    sweep_cmd->add_option("--threshold", sweep.threshold, "Backtrack rule threshold");
    sweep_cmd->add_option("--context", sweep.context, "Backward context m (default: from checkpoint)");
    sweep_cmd->add_option("--tolerance", sweep.tolerance, "Early tolerance L in seconds (<= 0)");
    sweep_cmd->add_flag("--strict-onset", sweep.strict_onset, "Require the first prediction inside [onset, offset]");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    const Context ctx{out, log};
    try {
        if (*gen_cmd) {
            cmd_gen(ctx, common, gen);
        } else if (*train_cmd) {
            cmd_train(ctx, common, train);
        } else if (*detect_cmd) {
            cmd_detect(ctx, common, detect);
        } else if (*eval_cmd) {
            cmd_eval(ctx, common, eval);
        } else if (*sweep_cmd) {
            cmd_sweep(ctx, common, sweep);
        }
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

} // namespace penet::cli
