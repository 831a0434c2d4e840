#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace penet {

/// Strong label: one event of class `label` between onset and offset seconds.
struct EventAnnotation {
    std::string clip_id;
    int label = 0;
    double onset = 0.0;
    double offset = 0.0;
};

/// Reads DESED-style strong labels: a header line
/// `filename<TAB>onset<TAB>offset<TAB>event_label` followed by one event per
/// line. Class names are resolved against `class_names`; unknown names throw
/// ConfigError.
std::vector<EventAnnotation> read_annotations(const std::filesystem::path& path,
                                              const std::vector<std::string>& class_names);

void write_annotations(const std::filesystem::path& path, const std::vector<EventAnnotation>& events,
                       const std::vector<std::string>& class_names);

/// Groups annotations by clip id, preserving file order within a clip.
std::map<std::string, std::vector<EventAnnotation>> group_by_clip(const std::vector<EventAnnotation>& events);

} // namespace penet
