#include "penet/synthgen.h"

#include "penet/errors.h"
#include "penet/random.h"
#include "penet/serialize.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace penet::synth {
namespace {

constexpr std::array<double, 5> kFundamentals = {220.0, 350.0, 560.0, 890.0, 1420.0};
constexpr std::array<std::pair<double, double>, 5> kNoiseBands = {
    {{3100.0, 3700.0}, {4500.0, 5100.0}, {5400.0, 6000.0}, {6300.0, 6900.0}, {7100.0, 7700.0}}};
constexpr double kFadeSeconds = 0.01;

double round_ms(double seconds) {
    return std::round(seconds * 1000.0) / 1000.0;
}

double rms(const std::vector<double>& x) {
    if (x.empty()) {
        return 0.0;
    }
    double acc = 0.0;
    for (double v : x) {
        acc += v * v;
    }
    return std::sqrt(acc / static_cast<double>(x.size()));
}

// Paul Kellet's refined pink-noise filter over white Gaussian noise.
std::vector<double> pink_noise(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> white(0.0, 1.0);
    std::vector<double> out(n);
    double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = white(rng);
        b0 = 0.99886 * b0 + w * 0.0555179;
        b1 = 0.99332 * b1 + w * 0.0750759;
        b2 = 0.96900 * b2 + w * 0.1538520;
        b3 = 0.86650 * b3 + w * 0.3104856;
        b4 = 0.55000 * b4 + w * 0.5329522;
        b5 = -0.7616 * b5 - w * 0.0168980;
        out[i] = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
        b6 = w * 0.115926;
    }
    return out;
}

std::vector<double> event_source(const ClassSignature& sig, std::size_t n, double rate, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::vector<double> out(n, 0.0);
    auto add_sine = [&](double freq, double amp) {
        const double ph = phase(rng);
        const double w = 2.0 * std::numbers::pi * freq / rate;
        for (std::size_t i = 0; i < n; ++i) {
            out[i] += amp * std::sin(w * static_cast<double>(i) + ph);
        }
    };
    if (sig.kind == SignatureKind::harmonic) {
        for (int h = 1; h <= sig.partials; ++h) {
            add_sine(sig.fundamental * h, 1.0 / h);
        }
    } else {
        // dense random-phase partials every 10 Hz across the band
        for (double f = sig.band_lo; f <= sig.band_hi; f += 10.0) {
            add_sine(f, 1.0);
        }
    }
    const auto fade = static_cast<std::size_t>(kFadeSeconds * rate);
    for (std::size_t i = 0; i < n; ++i) {
        double g = 1.0;
        if (i < fade) {
            g = 0.5 - 0.5 * std::cos(std::numbers::pi * i / fade);
        } else if (n - 1 - i < fade) {
            g = 0.5 - 0.5 * std::cos(std::numbers::pi * (n - 1 - i) / fade);
        }
        out[i] *= g;
    }
    return out;
}

bool fits(const std::vector<EventAnnotation>& placed, const EventAnnotation& cand, const SynthConfig& cfg) {
    for (const auto& ev : placed) {
        if (ev.label == cand.label && cand.onset < ev.offset + cfg.same_class_gap &&
            ev.onset < cand.offset + cfg.same_class_gap) {
            return false;
        }
    }
    // Polyphony is maximal at some event onset inside the candidate's span.
    std::vector<double> probes = {cand.onset};
    for (const auto& ev : placed) {
        if (ev.onset > cand.onset && ev.onset < cand.offset) {
            probes.push_back(ev.onset);
        }
    }
    for (double t : probes) {
        int active = 1;
        for (const auto& ev : placed) {
            if (ev.onset <= t && t < ev.offset) {
                ++active;
            }
        }
        if (active > cfg.polyphony_max) {
            return false;
        }
    }
    return true;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    const auto b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

} // namespace

void to_json(nlohmann::json& j, const SynthConfig& cfg) {
    j = nlohmann::json{{"num_classes", cfg.num_classes},     {"clips", cfg.clips},
                       {"clip_seconds", cfg.clip_seconds},   {"min_events", cfg.min_events},
                       {"max_events", cfg.max_events},       {"min_duration", cfg.min_duration},
                       {"max_duration", cfg.max_duration},   {"min_snr_db", cfg.min_snr_db},
                       {"max_snr_db", cfg.max_snr_db},       {"polyphony_max", cfg.polyphony_max},
                       {"same_class_gap", cfg.same_class_gap}, {"background_rms", cfg.background_rms},
                       {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& cfg) {
    auto get = [&j](const char* key, auto& field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    get("num_classes", cfg.num_classes);
    get("clips", cfg.clips);
    get("clip_seconds", cfg.clip_seconds);
    get("min_events", cfg.min_events);
    get("max_events", cfg.max_events);
    get("min_duration", cfg.min_duration);
    get("max_duration", cfg.max_duration);
    get("min_snr_db", cfg.min_snr_db);
    get("max_snr_db", cfg.max_snr_db);
    get("polyphony_max", cfg.polyphony_max);
    get("same_class_gap", cfg.same_class_gap);
    get("background_rms", cfg.background_rms);
    get("seed", cfg.seed);
}

void SynthConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("infeasible generator config: " + field + " " + why);
    };
    if (num_classes < 1 || num_classes > kMaxClasses) {
        fail("num_classes", "must be in [1, " + std::to_string(kMaxClasses) + "]");
    }
    if (clips < 0) {
        fail("clips", "must be >= 0");
    }
    if (!(clip_seconds > 0.0)) {
        fail("clip_seconds", "must be > 0");
    }
    if (min_events < 0 || max_events < min_events) {
        fail("min_events/max_events", "must satisfy 0 <= min_events <= max_events");
    }
    if (!(min_duration > 0.0) || max_duration < min_duration) {
        fail("min_duration/max_duration", "must satisfy 0 < min_duration <= max_duration");
    }
    if (max_duration > clip_seconds) {
        fail("max_duration", "exceeds clip_seconds");
    }
    if (max_snr_db < min_snr_db) {
        fail("max_snr_db", "must be >= min_snr_db");
    }
    if (polyphony_max < 1) {
        fail("polyphony_max", "must be >= 1");
    }
    if (same_class_gap < 0.0) {
        fail("same_class_gap", "must be >= 0");
    }
    if (!(background_rms > 0.0)) {
        fail("background_rms", "must be > 0");
    }
    const int lanes = std::min(polyphony_max, num_classes);
    if (min_events * (min_duration + same_class_gap) > clip_seconds * lanes) {
        fail("min_events", "cannot fit " + std::to_string(min_events) + " events of at least " +
                               std::to_string(min_duration) + " s in a " + std::to_string(clip_seconds) + " s clip");
    }
}

std::pair<double, double> ClassSignature::signature_band() const {
    if (kind == SignatureKind::harmonic) {
        return {fundamental * 0.95, fundamental * 1.05};
    }
    return {band_lo, band_hi};
}

ClassSignature signature(int k) {
    if (k < 0 || k >= kMaxClasses) {
        throw ConfigError("class index out of range");
    }
    ClassSignature sig;
    const int j = k / 2;
    if (k % 2 == 0) {
        sig.kind = SignatureKind::harmonic;
        sig.fundamental = kFundamentals[j];
        sig.partials = 3;
    } else {
        sig.kind = SignatureKind::noise_band;
        sig.band_lo = kNoiseBands[j].first;
        sig.band_hi = kNoiseBands[j].second;
    }
    return sig;
}

std::string class_name(int k) {
    const ClassSignature sig = signature(k);
    return (sig.kind == SignatureKind::harmonic ? "harmonic_" : "burst_") + std::to_string(k / 2);
}

std::vector<std::string> class_names(int num_classes) {
    std::vector<std::string> names;
    for (int k = 0; k < num_classes; ++k) {
        names.push_back(class_name(k));
    }
    return names;
}

std::string clip_id(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip_%04d", index);
    return buf;
}

SynthClip generate_clip(const SynthConfig& cfg, int index) {
    cfg.validate();
    std::mt19937_64 rng(derive_seed(cfg.seed, "gen", static_cast<std::uint64_t>(index)));
    const double rate = frontend::kSampleRate;
    const auto n = static_cast<std::size_t>(std::llround(cfg.clip_seconds * rate));

    SynthClip clip;
    clip.id = clip_id(index);
    clip.audio.sample_rate = rate;

    std::uniform_int_distribution<int> event_count(cfg.min_events, cfg.max_events);
    std::uniform_int_distribution<int> class_dist(0, cfg.num_classes - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int wanted = event_count(rng);
    for (int e = 0; e < wanted; ++e) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            EventAnnotation ev;
            ev.clip_id = clip.id;
            ev.label = class_dist(rng);
            const double dur = round_ms(cfg.min_duration + (cfg.max_duration - cfg.min_duration) * unit(rng));
            ev.onset = round_ms((cfg.clip_seconds - dur) * unit(rng));
            ev.offset = round_ms(ev.onset + dur);
            if (ev.offset > cfg.clip_seconds || ev.offset <= ev.onset) {
                continue;
            }
            if (fits(clip.events, ev, cfg)) {
                clip.events.push_back(ev);
                placed = true;
            }
        }
        if (placed || e >= cfg.min_events) {
            continue;
        }
        // Required event: fall back to the earliest slot that fits a
        // shortest-duration event of any class.
        const double dur = round_ms(cfg.min_duration);
        const int first_class = class_dist(rng);
        for (double onset = 0.0; !placed && onset + dur <= cfg.clip_seconds + 1e-9; onset = round_ms(onset + 0.001)) {
            for (int c = 0; c < cfg.num_classes && !placed; ++c) {
                EventAnnotation ev{clip.id, (first_class + c) % cfg.num_classes, onset, round_ms(onset + dur)};
                if (ev.offset <= cfg.clip_seconds && fits(clip.events, ev, cfg)) {
                    clip.events.push_back(ev);
                    placed = true;
                }
            }
        }
        if (!placed) {
            throw ConfigError("infeasible generator config: min_events " + std::to_string(cfg.min_events) +
                              " events could not be placed in " + clip.id + " under polyphony_max and " +
                              "same_class_gap");
        }
    }
    std::sort(clip.events.begin(), clip.events.end(), [](const auto& a, const auto& b) {
        return a.onset < b.onset || (a.onset == b.onset && a.label < b.label);
    });

    std::vector<double> mix = pink_noise(n, rng);
    const double bg_scale = cfg.background_rms / std::max(rms(mix), 1e-12);
    for (double& v : mix) {
        v *= bg_scale;
    }
    std::uniform_real_distribution<double> snr(cfg.min_snr_db, cfg.max_snr_db);
    for (const auto& ev : clip.events) {
        const auto start = static_cast<std::size_t>(std::llround(ev.onset * rate));
        const auto stop = std::min(n, static_cast<std::size_t>(std::llround(ev.offset * rate)));
        std::vector<double> src = event_source(signature(ev.label), stop - start, rate, rng);
        const double target = cfg.background_rms * std::pow(10.0, snr(rng) / 20.0);
        const double gain = target / std::max(rms(src), 1e-12);
        for (std::size_t i = 0; i < src.size(); ++i) {
            mix[start + i] += gain * src[i];
        }
    }
    double peak = 0.0;
    for (double v : mix) {
        peak = std::max(peak, std::abs(v));
    }
    if (peak > 0.99) {
        for (double& v : mix) {
            v *= 0.99 / peak;
        }
    }
    clip.audio.samples = std::move(mix);
    return clip;
}

std::vector<SynthClip> generate_corpus(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<SynthClip> clips;
    clips.reserve(cfg.clips);
    for (int i = 0; i < cfg.clips; ++i) {
        clips.push_back(generate_clip(cfg, i));
    }
    return clips;
}

// ---- on-disk corpus ---------------------------------------------------------

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot create manifest " + path.string());
    }
    out << "clip_id,path,duration\n";
    char buf[32];
    for (const auto& e : entries) {
        std::snprintf(buf, sizeof(buf), "%.6f", e.duration);
        out << e.clip_id << ',' << e.path << ',' << buf << '\n';
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open manifest " + path.string());
    }
    std::vector<ManifestEntry> entries;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty() || (line_no == 1 && line.rfind("clip_id", 0) == 0)) {
            continue;
        }
        std::istringstream fields(line);
        ManifestEntry e;
        std::string duration;
        if (!std::getline(fields, e.clip_id, ',') || !std::getline(fields, e.path, ',') ||
            !std::getline(fields, duration, ',')) {
            throw IoError(path.string() + ":" + std::to_string(line_no) + ": expected clip_id,path,duration");
        }
        try {
            e.duration = std::stod(duration);
        } catch (const std::exception&) {
            throw IoError(path.string() + ":" + std::to_string(line_no) + ": malformed duration");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

void write_corpus(const std::filesystem::path& dir, const SynthConfig& cfg, const std::vector<SynthClip>& clips) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "audio", ec);
    if (ec) {
        throw IoError("cannot create corpus directory " + (dir / "audio").string() + ": " + ec.message());
    }
    std::vector<ManifestEntry> manifest;
    std::vector<EventAnnotation> events;
    for (const auto& clip : clips) {
        const std::string rel = "audio/" + clip.id + ".wav";
        frontend::write_wav(dir / rel, clip.audio);
        manifest.push_back({clip.id, rel, clip.audio.duration()});
        events.insert(events.end(), clip.events.begin(), clip.events.end());
    }
    const auto names = class_names(cfg.num_classes);
    write_annotations(dir / "annotations.tsv", events, names);
    write_manifest(dir / "manifest.csv", manifest);

    nlohmann::json config;
    config["generator"] = cfg;
    config["class_names"] = names;
    std::ofstream out(dir / "config.json", std::ios::trunc);
    if (!out) {
        throw IoError("cannot create " + (dir / "config.json").string());
    }
    out << config.dump(2) << '\n';
}

CorpusIndex read_corpus(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw IoError("corpus directory not found: " + dir.string());
    }
    CorpusIndex index;
    index.root = dir;
    std::ifstream in(dir / "config.json");
    if (!in) {
        throw IoError("corpus has no config.json: " + dir.string());
    }
    try {
        const nlohmann::json config = nlohmann::json::parse(in);
        config.at("class_names").get_to(index.class_names);
    } catch (const nlohmann::json::exception& e) {
        throw IoError((dir / "config.json").string() + ": " + e.what());
    }
    index.manifest = read_manifest(dir / "manifest.csv");
    index.annotations = read_annotations(dir / "annotations.tsv", index.class_names);
    return index;
}

} // namespace penet::synth
