#pragma once

// Deterministic polyphonic corpus generator with strong labels. Even classes
// are harmonic combs, odd classes band-limited noise bursts, all mixed over a
// pink-noise background.

#include "penet/annotations.h"
#include "penet/frontend.h"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace penet::synth {

inline constexpr int kMaxClasses = 10;

struct SynthConfig {
    int num_classes = 4;
    int clips = 200;
    double clip_seconds = 10.0;
    int min_events = 1;
    int max_events = 4;
    double min_duration = 0.25;
    double max_duration = 2.0;
    double min_snr_db = -16.0;
    double max_snr_db = -4.0;
    int polyphony_max = 2;
    /// Minimum silence between two events of the same class.
    double same_class_gap = 0.25;
    double background_rms = 0.05;
    std::uint64_t seed = 0;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

enum class SignatureKind { harmonic, noise_band };

struct ClassSignature {
    SignatureKind kind = SignatureKind::harmonic;
    /// Fundamental for harmonic classes; band edges for noise classes.
    double fundamental = 0.0;
    double band_lo = 0.0;
    double band_hi = 0.0;
    int partials = 3;

    /// Frequency range carrying the class's dominant energy.
    std::pair<double, double> signature_band() const;
};

ClassSignature signature(int k);
std::string class_name(int k);
std::vector<std::string> class_names(int num_classes);

struct SynthClip {
    std::string id;
    frontend::AudioClip audio;
    std::vector<EventAnnotation> events;
};

/// Clip `index` depends only on (cfg, index).
SynthClip generate_clip(const SynthConfig& cfg, int index);
std::vector<SynthClip> generate_corpus(const SynthConfig& cfg);

std::string clip_id(int index);

// ---- on-disk corpus ---------------------------------------------------------

struct ManifestEntry {
    std::string clip_id;
    std::string path;  // relative to the corpus directory
    double duration = 0.0;
};

/// Writes audio/<id>.wav, annotations.tsv, manifest.csv (clip_id,path,duration)
/// and config.json under `dir`.
void write_corpus(const std::filesystem::path& dir, const SynthConfig& cfg, const std::vector<SynthClip>& clips);

struct CorpusIndex {
    std::filesystem::path root;
    std::vector<std::string> class_names;
    std::vector<ManifestEntry> manifest;
    std::vector<EventAnnotation> annotations;
};

/// Reads manifest.csv, annotations.tsv and the class list from config.json.
CorpusIndex read_corpus(const std::filesystem::path& dir);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

} // namespace penet::synth
