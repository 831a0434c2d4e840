#pragma once

// Corpus clips turned into model-ready features: log-mel segments plus the
// strong labels of each clip.

#include "penet/annotations.h"
#include "penet/frontend.h"
#include "penet/metrics.h"
#include "penet/model.h"
#include "penet/synthgen.h"

#include <filesystem>
#include <string>
#include <vector>

namespace penet::dataset {

struct ClipFeatures {
    std::string id;
    std::vector<frontend::Segment> segments;
    std::vector<EventAnnotation> events;
    double duration = 0.0;
};

ClipFeatures featurize(const std::string& id, const frontend::AudioClip& audio, std::vector<EventAnnotation> events);

/// Half-open range [begin, end) over manifest order; end < 0 means "to the end".
struct ClipRange {
    int begin = 0;
    int end = -1;
};

/// Parses "A:B", "A:" or ":B". Throws ConfigError on malformed input.
ClipRange parse_range(const std::string& text);

/// Checks that every manifest entry of `range` points at an existing file.
/// Throws IoError naming the first missing path.
void check_corpus_files(const synth::CorpusIndex& corpus, ClipRange range);

std::vector<ClipFeatures> load_features(const synth::CorpusIndex& corpus, ClipRange range);

std::vector<model::TrainingClip> training_clips(const std::vector<ClipFeatures>& clips, int num_classes);
std::vector<metrics::EvalClip> eval_clips(const std::vector<ClipFeatures>& clips);

} // namespace penet::dataset
