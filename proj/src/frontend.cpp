#include "penet/frontend.h"

#include "binary_io.h"
#include "penet/errors.h"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>

namespace penet::frontend {
namespace {

using detail::read_bytes;
using detail::read_le;
using detail::write_le;

// FFTW planning is not thread-safe; execution on fresh arrays is.
std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

struct FftwDeleter {
    void operator()(void* p) const { fftw_free(p); }
};

class RealFft {
public:
    explicit RealFft(int size)
        : size_(size),
          in_(static_cast<double*>(fftw_malloc(sizeof(double) * size))),
          out_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (size / 2 + 1)))) {
        std::lock_guard lock(fftw_planner_mutex());
        plan_ = fftw_plan_dft_r2c_1d(size, in_.get(), out_.get(), FFTW_ESTIMATE);
    }
    ~RealFft() {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(plan_);
    }
    RealFft(const RealFft&) = delete;
    RealFft& operator=(const RealFft&) = delete;

    double* input() { return in_.get(); }
    const fftw_complex* output() const { return out_.get(); }
    void execute() { fftw_execute(plan_); }
    int size() const { return size_; }

private:
    int size_;
    std::unique_ptr<double, FftwDeleter> in_;
    std::unique_ptr<fftw_complex, FftwDeleter> out_;
    fftw_plan plan_{};
};

// numpy-style "reflect" (edge sample not repeated), valid for any offset.
std::size_t reflect_index(long long j, std::size_t len) {
    if (len == 1) {
        return 0;
    }
    const long long period = 2 * static_cast<long long>(len - 1);
    j %= period;
    if (j < 0) {
        j += period;
    }
    if (j >= static_cast<long long>(len)) {
        j = period - j;
    }
    return static_cast<std::size_t>(j);
}

double sinc(double x) {
    if (std::abs(x) < 1e-12) {
        return 1.0;
    }
    const double px = std::numbers::pi * x;
    return std::sin(px) / px;
}

// Blackman window on [-1, 1].
double blackman(double x) {
    if (std::abs(x) >= 1.0) {
        return 0.0;
    }
    const double phase = std::numbers::pi * (x + 1.0);
    return 0.42 - 0.5 * std::cos(phase) + 0.08 * std::cos(2.0 * phase);
}

RealSpectrogram build_mel_filterbank() {
    const int num_points = kMelBins + 2;
    const double mel_lo = hz_to_mel(0.0);
    const double mel_hi = hz_to_mel(kMelMaxHz);
    std::vector<double> hz(num_points);
    for (int i = 0; i < num_points; ++i) {
        hz[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (num_points - 1));
    }
    RealSpectrogram bank = RealSpectrogram::Zero(kMelBins, kNumBins);
    for (int m = 0; m < kMelBins; ++m) {
        const double lo = hz[m];
        const double centre = hz[m + 1];
        const double hi = hz[m + 2];
        for (int k = 0; k < kNumBins; ++k) {
            const double f = k * kSampleRate / kFftSize;
            const double rise = (f - lo) / (centre - lo);
            const double fall = (hi - f) / (hi - centre);
            bank(m, k) = std::max(0.0, std::min(rise, fall));
        }
        if (bank.row(m).sum() <= 0.0) {
            throw ShapeError("mel filter " + std::to_string(m) + " covers no FFT bin");
        }
    }
    return bank;
}

} // namespace

// ---- audio I/O --------------------------------------------------------------

AudioClip read_wav(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open WAV file " + path.string());
    }
    try {
        if (read_bytes(in, 4, "RIFF tag") != "RIFF") {
            throw IoError("missing RIFF header");
        }
        read_le<std::uint32_t>(in, "RIFF size");
        if (read_bytes(in, 4, "WAVE tag") != "WAVE") {
            throw IoError("missing WAVE tag");
        }

        std::uint16_t format = 0;
        std::uint16_t channels = 0;
        std::uint32_t rate = 0;
        std::uint16_t bits = 0;
        bool have_fmt = false;

        while (true) {
            const std::string id = read_bytes(in, 4, "chunk id");
            const auto size = read_le<std::uint32_t>(in, "chunk size");
            if (id == "fmt ") {
                format = read_le<std::uint16_t>(in);
                channels = read_le<std::uint16_t>(in);
                rate = read_le<std::uint32_t>(in);
                read_le<std::uint32_t>(in);  // byte rate
                read_le<std::uint16_t>(in);  // block align
                bits = read_le<std::uint16_t>(in);
                std::uint32_t consumed = 16;
                if (format == 0xFFFE && size >= 40) {
                    read_le<std::uint16_t>(in);  // cb size
                    read_le<std::uint16_t>(in);  // valid bits
                    read_le<std::uint32_t>(in);  // channel mask
                    format = read_le<std::uint16_t>(in);  // first two bytes of the sub-format GUID
                    consumed += 10;
                }
                in.seekg(size - consumed + (size & 1), std::ios::cur);
                have_fmt = true;
            } else if (id == "data") {
                if (!have_fmt) {
                    throw IoError("data chunk before fmt chunk");
                }
                if (channels == 0) {
                    throw IoError("zero channels");
                }
                const bool pcm16 = format == 1 && bits == 16;
                const bool float32 = format == 3 && bits == 32;
                if (!pcm16 && !float32) {
                    throw IoError("unsupported WAV encoding (format " + std::to_string(format) +
                                  ", " + std::to_string(bits) + " bits)");
                }
                const std::size_t bytes_per_sample = bits / 8;
                const std::size_t frames = size / (bytes_per_sample * channels);
                const std::string raw = read_bytes(in, frames * bytes_per_sample * channels, "samples");
                AudioClip clip;
                clip.sample_rate = rate;
                clip.samples.resize(frames);
                const char* p = raw.data();
                for (std::size_t i = 0; i < frames; ++i) {
                    double acc = 0.0;
                    for (std::uint16_t c = 0; c < channels; ++c) {
                        if (pcm16) {
                            std::int16_t v;
                            std::memcpy(&v, p, 2);
                            acc += v / 32768.0;
                        } else {
                            float v;
                            std::memcpy(&v, p, 4);
                            acc += v;
                        }
                        p += bytes_per_sample;
                    }
                    clip.samples[i] = acc / channels;
                }
                return clip;
            } else {
                in.seekg(size + (size & 1), std::ios::cur);
            }
        }
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot create WAV file " + path.string());
    }
    const auto rate = static_cast<std::uint32_t>(std::lround(clip.sample_rate));
    const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
    out.write("RIFF", 4);
    write_le<std::uint32_t>(out, 36 + data_bytes);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    write_le<std::uint32_t>(out, 16);
    write_le<std::uint16_t>(out, 1);
    write_le<std::uint16_t>(out, 1);
    write_le<std::uint32_t>(out, rate);
    write_le<std::uint32_t>(out, rate * 2);
    write_le<std::uint16_t>(out, 2);
    write_le<std::uint16_t>(out, 16);
    out.write("data", 4);
    write_le<std::uint32_t>(out, data_bytes);
    for (double s : clip.samples) {
        const long q = std::lround(std::clamp(s, -1.0, 1.0) * 32768.0);
        write_le<std::int16_t>(out, static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L)));
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

// ---- signal chain -----------------------------------------------------------

AudioClip resample(const AudioClip& audio, double target_rate) {
    if (audio.sample_rate < 8000.0) {
        throw ConfigError("unsupported sample rate " + std::to_string(audio.sample_rate) +
                          " Hz (minimum 8000 Hz)");
    }
    if (!(target_rate > 0.0)) {
        throw ConfigError("target sample rate must be positive");
    }
    if (audio.sample_rate == target_rate) {
        return audio;
    }
    constexpr double kZeroCrossings = 32.0;
    const double ratio = target_rate / audio.sample_rate;
    const double scale = std::min(1.0, ratio);  // cutoff at the lower Nyquist
    const double half_width = kZeroCrossings / scale;
    const auto out_len = static_cast<std::size_t>(std::floor(audio.samples.size() * ratio));
    const auto in_len = static_cast<long long>(audio.samples.size());

    AudioClip out;
    out.sample_rate = target_rate;
    out.samples.resize(out_len);
    for (std::size_t i = 0; i < out_len; ++i) {
        const double t = i / ratio;
        const auto first = std::max<long long>(0, static_cast<long long>(std::ceil(t - half_width)));
        const auto last = std::min<long long>(in_len - 1, static_cast<long long>(std::floor(t + half_width)));
        double acc = 0.0;
        for (long long j = first; j <= last; ++j) {
            const double tau = t - static_cast<double>(j);
            acc += audio.samples[j] * scale * sinc(scale * tau) * blackman(tau / half_width);
        }
        out.samples[i] = acc;
    }
    return out;
}

std::vector<double> hann_window() {
    std::vector<double> w(kFftSize);
    for (int i = 0; i < kFftSize; ++i) {
        w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / kFftSize);
    }
    return w;
}

ComplexSpectrogram stft(std::span<const double> samples) {
    if (samples.empty()) {
        throw ShapeError("stft: empty input");
    }
    const std::size_t len = samples.size();
    const long long pad = kFftSize / 2;
    const int num_frames = 1 + static_cast<int>(len / kHopSize);
    const std::vector<double> window = hann_window();

    RealFft fft(kFftSize);
    ComplexSpectrogram spec(num_frames, kNumBins);
    for (int f = 0; f < num_frames; ++f) {
        const long long origin = static_cast<long long>(f) * kHopSize - pad;
        double* in = fft.input();
        for (int i = 0; i < kFftSize; ++i) {
            in[i] = samples[reflect_index(origin + i, len)] * window[i];
        }
        fft.execute();
        const fftw_complex* out = fft.output();
        for (int k = 0; k < kNumBins; ++k) {
            spec(f, k) = {out[k][0], out[k][1]};
        }
    }
    return spec;
}

ComplexSpectrogram stft(const AudioClip& audio) {
    if (audio.sample_rate != kSampleRate) {
        const AudioClip resampled = resample(audio, kSampleRate);
        return stft(std::span<const double>(resampled.samples));
    }
    return stft(std::span<const double>(audio.samples));
}

RealSpectrogram magnitude(const ComplexSpectrogram& spec) {
    return spec.cwiseAbs();
}

double hz_to_mel(double hz) {
    return 2595.0 * std::log10(1.0 + hz / 700.0);
}

double mel_to_hz(double mel) {
    return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

const RealSpectrogram& mel_filterbank() {
    static const RealSpectrogram bank = build_mel_filterbank();
    return bank;
}

MelFrames mel_project(const RealSpectrogram& magnitude_spec) {
    if (magnitude_spec.cols() != kNumBins) {
        throw ShapeError("mel_project: expected " + std::to_string(kNumBins) + " frequency bins, got " +
                         std::to_string(magnitude_spec.cols()));
    }
    const RealSpectrogram power = magnitude_spec.array().square().matrix();
    const RealSpectrogram mel = power * mel_filterbank().transpose();
    MelFrames out;
    out.frames = (mel.array() + kLogFloor).log().cast<float>().matrix();
    return out;
}

MelFrames log_mel(const AudioClip& audio) {
    return mel_project(magnitude(stft(audio)));
}

std::vector<Segment> segment_stream(const MelFrames& frames, int seg_frames) {
    if (seg_frames <= 0) {
        throw ShapeError("segment_stream: segment length must be positive");
    }
    const int count = frames.num_frames() / seg_frames;
    std::vector<Segment> segments;
    segments.reserve(count);
    for (int s = 0; s < count; ++s) {
        Segment seg;
        seg.frames = frames.frames.middleRows(static_cast<Eigen::Index>(s) * seg_frames, seg_frames);
        seg.index = s;
        seg.start_time = s * seg_frames * frames.frame_hop_seconds;
        segments.push_back(std::move(seg));
    }
    return segments;
}

FeatureWindow make_window(std::span<const Segment> segments, int t, int m, int n) {
    if (segments.empty()) {
        throw ShapeError("make_window: no segments");
    }
    if (m < 0 || n < 0) {
        throw ShapeError("make_window: context sizes must be non-negative");
    }
    const int count = static_cast<int>(segments.size());
    const auto rows = segments.front().frames.rows();
    const auto cols = segments.front().frames.cols();
    FeatureWindow w;
    w.frames.resize((m + n + 1) * rows, cols);
    w.center = t;
    w.m = m;
    w.n = n;
    for (int i = 0; i < m + n + 1; ++i) {
        const int idx = std::clamp(t - m + i, 0, count - 1);
        const Segment& seg = segments[idx];
        if (seg.frames.rows() != rows || seg.frames.cols() != cols) {
            throw ShapeError("make_window: inconsistent segment shapes");
        }
        w.frames.middleRows(i * rows, rows) = seg.frames;
    }
    w.start_time = segments[std::clamp(t, 0, count - 1)].start_time;
    return w;
}

// ---- feature dumps ----------------------------------------------------------

void write_feature_file(const std::filesystem::path& path, const FrameMatrix& frames) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot create feature file " + path.string());
    }
    out.write("MELF", 4);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(frames.rows()));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(frames.cols()));
    write_le<std::uint32_t>(out, 1);
    out.write(reinterpret_cast<const char*>(frames.data()),
              static_cast<std::streamsize>(sizeof(float) * frames.size()));
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

FrameMatrix read_feature_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open feature file " + path.string());
    }
    if (read_bytes(in, 4, "magic") != "MELF") {
        throw IoError(path.string() + ": not a feature dump (bad magic)");
    }
    const auto rows = read_le<std::uint32_t>(in, "rows");
    const auto cols = read_le<std::uint32_t>(in, "cols");
    const auto dtype = read_le<std::uint32_t>(in, "dtype");
    if (dtype != 1) {
        throw IoError(path.string() + ": unsupported dtype code " + std::to_string(dtype));
    }
    FrameMatrix frames(rows, cols);
    if (!in.read(reinterpret_cast<char*>(frames.data()),
                 static_cast<std::streamsize>(sizeof(float) * frames.size()))) {
        throw IoError(path.string() + ": truncated feature data");
    }
    return frames;
}

} // namespace penet::frontend
