#include "penet/dataset.h"

#include "penet/errors.h"

#include <algorithm>
#include <map>

namespace penet::dataset {

ClipFeatures featurize(const std::string& id, const frontend::AudioClip& audio, std::vector<EventAnnotation> events) {
    ClipFeatures out;
    out.id = id;
    out.segments = frontend::segment_stream(frontend::log_mel(audio));
    out.events = std::move(events);
    out.duration = audio.duration();
    return out;
}

ClipRange parse_range(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) {
        throw ConfigError("clip range '" + text + "' must look like A:B, A: or :B");
    }
    auto parse_end = [&](const std::string& part, int fallback) {
        if (part.empty()) {
            return fallback;
        }
        std::size_t used = 0;
        int value = 0;
        try {
            value = std::stoi(part, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != part.size() || value < 0) {
            throw ConfigError("clip range '" + text + "' has an invalid bound '" + part + "'");
        }
        return value;
    };
    ClipRange r;
    r.begin = parse_end(text.substr(0, colon), 0);
    r.end = parse_end(text.substr(colon + 1), -1);
    if (r.end >= 0 && r.end < r.begin) {
        throw ConfigError("clip range '" + text + "' ends before it begins");
    }
    return r;
}

namespace {

std::pair<int, int> resolve(const synth::CorpusIndex& corpus, ClipRange range) {
    const int count = static_cast<int>(corpus.manifest.size());
    const int begin = std::min(range.begin, count);
    const int end = range.end < 0 ? count : std::min(range.end, count);
    return {begin, end};
}

} // namespace

void check_corpus_files(const synth::CorpusIndex& corpus, ClipRange range) {
    const auto [begin, end] = resolve(corpus, range);
    for (int i = begin; i < end; ++i) {
        const auto path = corpus.root / corpus.manifest[i].path;
        if (!std::filesystem::is_regular_file(path)) {
            throw IoError("audio file listed in the manifest is missing: " + path.string());
        }
    }
}

std::vector<ClipFeatures> load_features(const synth::CorpusIndex& corpus, ClipRange range) {
    check_corpus_files(corpus, range);
    const auto grouped = group_by_clip(corpus.annotations);
    const auto [begin, end] = resolve(corpus, range);
    std::vector<ClipFeatures> out;
    out.reserve(static_cast<std::size_t>(std::max(0, end - begin)));
    for (int i = begin; i < end; ++i) {
        const auto& entry = corpus.manifest[i];
        const auto it = grouped.find(entry.clip_id);
        std::vector<EventAnnotation> events = it == grouped.end() ? std::vector<EventAnnotation>{} : it->second;
        out.push_back(featurize(entry.clip_id, frontend::read_wav(corpus.root / entry.path), std::move(events)));
    }
    return out;
}

std::vector<model::TrainingClip> training_clips(const std::vector<ClipFeatures>& clips, int num_classes) {
    std::vector<model::TrainingClip> out;
    out.reserve(clips.size());
    for (const auto& c : clips) {
        model::TrainingClip t;
        t.id = c.id;
        t.segments = c.segments;
        t.labels = model::rasterize_labels(c.events, static_cast<int>(c.segments.size()), num_classes,
                                           frontend::kSegmentSeconds);
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<metrics::EvalClip> eval_clips(const std::vector<ClipFeatures>& clips) {
    std::vector<metrics::EvalClip> out;
    out.reserve(clips.size());
    for (const auto& c : clips) {
        out.push_back({c.id, c.segments, c.events, c.duration});
    }
    return out;
}

} // namespace penet::dataset
