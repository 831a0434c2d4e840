#pragma once

// Audio front end: WAV I/O, resampling, STFT, log-mel projection and the
// slicing of mel frames into fixed-size streaming segments.

#include <Eigen/Core>

#include <complex>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace penet::frontend {

inline constexpr double kSampleRate = 16000.0;
inline constexpr int kFftSize = 2048;
inline constexpr int kHopSize = 256;
inline constexpr int kNumBins = kFftSize / 2 + 1;
inline constexpr int kMelBins = 128;
inline constexpr double kMelMaxHz = 8000.0;
inline constexpr double kLogFloor = 1e-10;
inline constexpr int kSegmentFrames = 4;
inline constexpr double kFrameSeconds = kHopSize / kSampleRate;             // 0.016 s
inline constexpr double kSegmentSeconds = kSegmentFrames * kFrameSeconds;  // 0.064 s

/// Row-major float matrix; one row per frame.
using FrameMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ComplexSpectrogram =
    Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RealSpectrogram = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct AudioClip {
    std::vector<double> samples;
    double sample_rate = kSampleRate;

    double duration() const { return samples.empty() ? 0.0 : samples.size() / sample_rate; }
};

struct MelFrames {
    FrameMatrix frames;  // num_frames x 128
    double frame_hop_seconds = kFrameSeconds;

    int num_frames() const { return static_cast<int>(frames.rows()); }
};

/// A non-overlapping block of kSegmentFrames mel frames.
struct Segment {
    FrameMatrix frames;  // 4 x 128
    int index = 0;
    double start_time = 0.0;
};

/// Model input: segments [t - m, t + n] stacked in time order.
struct FeatureWindow {
    FrameMatrix frames;  // (m + n + 1) * 4 x 128
    int center = 0;      // segment index t
    double start_time = 0.0;
    int m = 0;
    int n = 0;
};

// ---- audio I/O --------------------------------------------------------------

/// Reads 16-bit PCM or 32-bit IEEE float WAV; multi-channel input is
/// downmixed by averaging.
AudioClip read_wav(const std::filesystem::path& path);

/// Writes mono 16-bit PCM (samples clipped to [-1, 1]).
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

// ---- signal chain -----------------------------------------------------------

/// Band-limited windowed-sinc resampler; identity when the rates match.
/// Throws ConfigError for source rates below 8000 Hz.
AudioClip resample(const AudioClip& audio, double target_rate);

/// Periodic Hann window of length kFftSize.
std::vector<double> hann_window();

/// Hann-windowed STFT (2048 / 256) with reflect center-padding.
/// Returns num_frames x 1025 one-sided spectra; num_frames = 1 + len / 256.
ComplexSpectrogram stft(std::span<const double> samples);
ComplexSpectrogram stft(const AudioClip& audio);

RealSpectrogram magnitude(const ComplexSpectrogram& spec);

/// 128 x 1025 triangular mel filterbank over 0-8000 Hz at 16 kHz.
const RealSpectrogram& mel_filterbank();

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// log(filterbank * |X|^2 + 1e-10) per frame. Throws ShapeError unless the
/// spectrogram has 1025 columns.
MelFrames mel_project(const RealSpectrogram& magnitude_spec);

/// Full chain: resample to 16 kHz if needed, STFT, mel projection.
MelFrames log_mel(const AudioClip& audio);

/// Consecutive non-overlapping blocks of seg_frames frames; the remainder is
/// dropped.
std::vector<Segment> segment_stream(const MelFrames& frames, int seg_frames = kSegmentFrames);

/// Stacks segments [t - m, t + n]. Indices before the first segment repeat
/// segment 0 and indices past the end repeat the last segment.
FeatureWindow make_window(std::span<const Segment> segments, int t, int m, int n);

// ---- feature dumps ----------------------------------------------------------

/// 16-byte header ("MELF", rows, cols, dtype=1 for float32; all u32 LE)
/// followed by row-major little-endian float32 data.
void write_feature_file(const std::filesystem::path& path, const FrameMatrix& frames);
FrameMatrix read_feature_file(const std::filesystem::path& path);

} // namespace penet::frontend
