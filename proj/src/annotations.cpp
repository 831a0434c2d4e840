#include "penet/annotations.h"

#include "penet/errors.h"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace penet {

std::vector<EventAnnotation> read_annotations(const std::filesystem::path& path,
                                              const std::vector<std::string>& class_names) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open annotation file " + path.string());
    }
    std::vector<EventAnnotation> events;
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
        if (line_no == 1 && line.rfind("filename", 0) == 0) {
            continue;
        }
        std::istringstream fields(line);
        std::string clip, onset, offset, name;
        if (!std::getline(fields, clip, '\t') || !std::getline(fields, onset, '\t') ||
            !std::getline(fields, offset, '\t') || !std::getline(fields, name, '\t')) {
            throw IoError(path.string() + ":" + std::to_string(line_no) + ": expected 4 tab-separated fields");
        }
        const auto it = std::find(class_names.begin(), class_names.end(), name);
        if (it == class_names.end()) {
            throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": unknown class '" + name + "'");
        }
        EventAnnotation ev;
        ev.clip_id = clip;
        ev.label = static_cast<int>(it - class_names.begin());
        try {
            ev.onset = std::stod(onset);
            ev.offset = std::stod(offset);
        } catch (const std::exception&) {
            throw IoError(path.string() + ":" + std::to_string(line_no) + ": malformed timestamp");
        }
        if (!(ev.onset >= 0.0) || !(ev.onset < ev.offset)) {
            throw IoError(path.string() + ":" + std::to_string(line_no) + ": onset must be >= 0 and < offset");
        }
        events.push_back(std::move(ev));
    }
    return events;
}

void write_annotations(const std::filesystem::path& path, const std::vector<EventAnnotation>& events,
                       const std::vector<std::string>& class_names) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot create annotation file " + path.string());
    }
    out << "filename\tonset\toffset\tevent_label\n";
    out << std::fixed << std::setprecision(3);
    for (const auto& ev : events) {
        if (ev.label < 0 || ev.label >= static_cast<int>(class_names.size())) {
            throw ConfigError("annotation class index out of range");
        }
        out << ev.clip_id << '\t' << ev.onset << '\t' << ev.offset << '\t' << class_names[ev.label] << '\n';
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

std::map<std::string, std::vector<EventAnnotation>> group_by_clip(const std::vector<EventAnnotation>& events) {
    std::map<std::string, std::vector<EventAnnotation>> grouped;
    for (const auto& ev : events) {
        grouped[ev.clip_id].push_back(ev);
    }
    return grouped;
}

} // namespace penet
