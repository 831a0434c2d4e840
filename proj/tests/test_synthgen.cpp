#include "penet/errors.h"
#include "penet/model.h"
#include "penet/synthgen.h"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

using namespace penet;
using namespace penet::synth;
namespace fs = std::filesystem;

namespace {

constexpr double kNatToDb = 10.0 / 2.302585092994046;

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "penet_synth_tests" / name;
    fs::remove_all(dir);
    return dir;
}

/// Mel bins whose peak frequency lies in `band`; the nearest bin if none does.
std::vector<int> band_bins(std::pair<double, double> band) {
    const auto& fb = frontend::mel_filterbank();
    std::vector<int> bins;
    int nearest = 0;
    double nearest_gap = 1e18;
    const double mid = 0.5 * (band.first + band.second);
    for (int m = 0; m < frontend::kMelBins; ++m) {
        Eigen::Index peak = 0;
        fb.row(m).maxCoeff(&peak);
        const double hz = static_cast<double>(peak) * frontend::kSampleRate / frontend::kFftSize;
        if (hz >= band.first && hz <= band.second) {
            bins.push_back(m);
        }
        if (std::abs(hz - mid) < nearest_gap) {
            nearest_gap = std::abs(hz - mid);
            nearest = m;
        }
    }
    if (bins.empty()) {
        bins.push_back(nearest);
    }
    return bins;
}

/// Per-segment log band energy of class k.
std::vector<double> band_track(const frontend::MelFrames& mel, int k) {
    const std::vector<int> bins = band_bins(signature(k).signature_band());
    const int segments = mel.num_frames() / frontend::kSegmentFrames;
    std::vector<double> out(static_cast<std::size_t>(segments), 0.0);
    for (int s = 0; s < segments; ++s) {
        double acc = 0.0;
        for (int f = 0; f < frontend::kSegmentFrames; ++f) {
            for (int b : bins) {
                acc += mel.frames(s * frontend::kSegmentFrames + f, b);
            }
        }
        out[static_cast<std::size_t>(s)] = acc / (frontend::kSegmentFrames * bins.size());
    }
    return out;
}

double median(std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
    return v[v.size() / 2];
}

} // namespace

TEST_CASE("config validation names the offending field") {
    SynthConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    const auto message = [](const SynthConfig& c) {
        try {
            c.validate();
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    cfg.polyphony_max = 0;
    CHECK(message(cfg).find("polyphony_max") != std::string::npos);
    cfg = {};
    cfg.min_events = 5;
    cfg.max_events = 2;
    CHECK(message(cfg).find("min_events") != std::string::npos);
    cfg = {};
    cfg.max_duration = 20.0;
    CHECK(message(cfg).find("max_duration") != std::string::npos);
    cfg = {};
    cfg.min_events = 40;
    cfg.max_events = 40;
    cfg.min_duration = 1.0;
    CHECK(message(cfg).find("min_events") != std::string::npos);
    cfg = {};
    cfg.num_classes = 11;
    CHECK(message(cfg).find("num_classes") != std::string::npos);
}

TEST_CASE("class signatures are distinct") {
    CHECK(class_names(4) == std::vector<std::string>{"harmonic_0", "burst_0", "harmonic_1", "burst_1"});
    for (int a = 0; a < kMaxClasses; ++a) {
        for (int b = a + 1; b < kMaxClasses; ++b) {
            const auto ba = signature(a).signature_band();
            const auto bb = signature(b).signature_band();
            CHECK((ba.second < bb.first || bb.second < ba.first));
        }
    }
    CHECK_THROWS_AS(signature(kMaxClasses), ConfigError);
}

TEST_CASE("generation is deterministic and per-clip independent") {
    SynthConfig cfg;
    cfg.clips = 6;
    cfg.seed = 42;
    const auto a = generate_corpus(cfg);
    const auto b = generate_corpus(cfg);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == clip_id(static_cast<int>(i)));
        CHECK(a[i].audio.samples == b[i].audio.samples);
        CHECK(a[i].events.size() == b[i].events.size());
    }
    const SynthClip lone = generate_clip(cfg, 4);
    CHECK(lone.audio.samples == a[4].audio.samples);

    cfg.seed = 43;
    CHECK(generate_clip(cfg, 0).audio.samples != a[0].audio.samples);
}

TEST_CASE("corpus files are byte-identical across runs") {
    SynthConfig cfg;
    cfg.clips = 3;
    cfg.seed = 7;
    const fs::path d1 = fresh_dir("a");
    const fs::path d2 = fresh_dir("b");
    write_corpus(d1, cfg, generate_corpus(cfg));
    write_corpus(d2, cfg, generate_corpus(cfg));
    for (const char* f : {"manifest.csv", "annotations.tsv", "config.json", "audio/clip_0002.wav"}) {
        CAPTURE(f);
        CHECK(slurp(d1 / f) == slurp(d2 / f));
    }
    const CorpusIndex idx = read_corpus(d1);
    CHECK(idx.manifest.size() == 3);
    CHECK(idx.manifest[1].clip_id == "clip_0001");
    CHECK(idx.manifest[1].duration == doctest::Approx(10.0));
    CHECK(idx.class_names == class_names(4));
    const auto back = frontend::read_wav(d1 / idx.manifest[1].path);
    CHECK(back.samples.size() == 160000);
    CHECK_THROWS_AS(read_corpus(fresh_dir("missing")), IoError);
}

TEST_CASE("zero events gives pure background") {
    SynthConfig cfg;
    cfg.min_events = 0;
    cfg.max_events = 0;
    const SynthClip clip = generate_clip(cfg, 0);
    CHECK(clip.events.empty());
    REQUIRE(clip.audio.samples.size() == 160000);
    double acc = 0.0;
    for (double v : clip.audio.samples) {
        acc += v * v;
    }
    CHECK(std::sqrt(acc / 160000.0) == doctest::Approx(cfg.background_rms).epsilon(1e-6));
}

TEST_CASE("annotations are valid and respect polyphony") {
    SynthConfig cfg;
    cfg.clips = 150;
    cfg.max_events = 6;
    cfg.seed = 3;
    for (int i = 0; i < cfg.clips; ++i) {
        const SynthClip clip = generate_clip(cfg, i);
        REQUIRE(static_cast<int>(clip.events.size()) >= cfg.min_events);
        REQUIRE(static_cast<int>(clip.events.size()) <= cfg.max_events);
        for (const auto& ev : clip.events) {
            CHECK(ev.onset >= 0.0);
            CHECK(ev.onset < ev.offset);
            CHECK(ev.offset <= cfg.clip_seconds);
            CHECK(ev.offset - ev.onset >= cfg.min_duration - 1e-9);
            int active = 0;
            for (const auto& other : clip.events) {
                active += other.onset <= ev.onset && ev.onset < other.offset;
                if (&other != &ev && other.label == ev.label) {
                    CHECK((other.offset + cfg.same_class_gap <= ev.onset + 1e-9 ||
                           ev.offset + cfg.same_class_gap <= other.onset + 1e-9));
                }
            }
            CHECK(active <= cfg.polyphony_max);
        }
    }
}

TEST_CASE("tight configs either place every required event or fail cleanly") {
    SynthConfig cfg;
    cfg.clip_seconds = 2.0;
    cfg.num_classes = 1;
    cfg.min_events = 3;
    cfg.max_events = 3;
    cfg.min_duration = 0.3;
    cfg.max_duration = 0.3;
    cfg.same_class_gap = 0.25;
    int placed = 0;
    for (int i = 0; i < 20; ++i) {
        try {
            const SynthClip clip = generate_clip(cfg, i);
            CHECK(clip.events.size() == 3);
            ++placed;
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("min_events") != std::string::npos);
            CHECK_THROWS_AS(generate_clip(cfg, i), ConfigError);
        }
    }
    CHECK(placed > 0);
}

TEST_CASE("class band energy stands out at 10 dB SNR") {
    SynthConfig cfg;
    cfg.min_snr_db = 10.0;
    cfg.max_snr_db = 10.0;
    cfg.seed = 11;
    int checked = 0;
    for (int i = 0; i < 8; ++i) {
        const SynthClip clip = generate_clip(cfg, i);
        const frontend::MelFrames mel = frontend::log_mel(clip.audio);
        for (const auto& ev : clip.events) {
            const std::vector<int> bins = band_bins(signature(ev.label).signature_band());
            double in_sum = 0.0;
            double bg_sum = 0.0;
            int in_n = 0;
            int bg_n = 0;
            for (int f = 0; f < mel.num_frames(); ++f) {
                const double t = f * frontend::kFrameSeconds;
                double e = 0.0;
                for (int b : bins) {
                    e += mel.frames(f, b);
                }
                e /= static_cast<double>(bins.size());
                if (t >= ev.onset + 0.07 && t <= ev.offset - 0.07) {
                    in_sum += e;
                    ++in_n;
                }
                const bool quiet = std::none_of(clip.events.begin(), clip.events.end(), [&](const auto& o) {
                    return t > o.onset - 0.15 && t < o.offset + 0.15;
                });
                if (quiet) {
                    bg_sum += e;
                    ++bg_n;
                }
            }
            if (in_n == 0 || bg_n == 0) {
                continue;
            }
            const double gain_db = (in_sum / in_n - bg_sum / bg_n) * kNatToDb;
            CAPTURE(clip.id);
            CAPTURE(ev.label);
            CHECK(gain_db >= 6.0);
            ++checked;
        }
    }
    CHECK(checked >= 8);
}

TEST_CASE("a band-energy classifier separates classes at the default SNR") {
    SynthConfig cfg;
    cfg.seed = 5;
    const int clips = 30;
    // Balanced accuracy over (segment, class) pairs: positives are rare, so
    // plain accuracy would be dominated by silence.
    long tp = 0, fn = 0, tn = 0, fp = 0;
    for (int i = 0; i < clips; ++i) {
        const SynthClip clip = generate_clip(cfg, i);
        const frontend::MelFrames mel = frontend::log_mel(clip.audio);
        const int segments = mel.num_frames() / frontend::kSegmentFrames;
        const model::LabelMatrix y = model::rasterize_labels(clip.events, segments, cfg.num_classes);
        for (int k = 0; k < cfg.num_classes; ++k) {
            const std::vector<double> track = band_track(mel, k);
            const double floor = median(track);
            for (int s = 0; s < segments; ++s) {
                const bool predicted = (track[static_cast<std::size_t>(s)] - floor) * kNatToDb > 3.0;
                if (y(k, s)) {
                    (predicted ? tp : fn)++;
                } else {
                    (predicted ? fp : tn)++;
                }
            }
        }
    }
    const double tpr = static_cast<double>(tp) / static_cast<double>(tp + fn);
    const double tnr = static_cast<double>(tn) / static_cast<double>(tn + fp);
    MESSAGE("band classifier TPR " << tpr << " TNR " << tnr);
    CHECK(0.5 * (tpr + tnr) > 0.9);
}
