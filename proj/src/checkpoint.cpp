#include "binary_io.h"
#include "penet/errors.h"
#include "penet/model.h"
#include "penet/serialize.h"

#include <fstream>
#include <map>
#include <string>

namespace penet::model {
namespace {

using detail::read_bytes;
using detail::read_le;
using detail::write_le;

constexpr char kMagic[] = "PENET1";
constexpr std::size_t kMagicLen = 6;

template <class Derived>
void write_tensor(std::ostream& out, const std::string& name, const Eigen::MatrixBase<Derived>& m) {
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    if (m.cols() == 1) {
        write_le<std::uint32_t>(out, 1);
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    } else {
        write_le<std::uint32_t>(out, 2);
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    }
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            write_le<float>(out, static_cast<float>(m(i, j)));
        }
    }
}

struct RawTensor {
    std::vector<std::uint32_t> dims;
    Mat<float> data;
};

RawTensor read_tensor(std::istream& in, std::string& name) {
    const auto name_len = read_le<std::uint32_t>(in, "tensor name length");
    if (name_len > 4096) {
        throw IoError("implausible tensor name length");
    }
    name = read_bytes(in, name_len, "tensor name");
    const auto rank = read_le<std::uint32_t>(in, "tensor rank");
    if (rank < 1 || rank > 2) {
        throw IoError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    }
    RawTensor t;
    for (std::uint32_t i = 0; i < rank; ++i) {
        t.dims.push_back(read_le<std::uint32_t>(in, "tensor dims"));
    }
    const std::uint32_t rows = t.dims[0];
    const std::uint32_t cols = rank == 2 ? t.dims[1] : 1;
    if (static_cast<std::uint64_t>(rows) * cols > (1ULL << 28)) {
        throw IoError("tensor '" + name + "' is implausibly large");
    }
    t.data.resize(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i) {
        for (std::uint32_t j = 0; j < cols; ++j) {
            t.data(i, j) = read_le<float>(in, "tensor data");
        }
    }
    return t;
}

void assign(std::map<std::string, RawTensor>& found, const std::string& name, Mat<float>& target, bool required) {
    const auto it = found.find(name);
    if (it == found.end()) {
        if (required) {
            throw IoError("checkpoint is missing tensor '" + name + "'");
        }
        return;
    }
    const Mat<float>& src = it->second.data;
    if (src.rows() != target.rows() || src.cols() != target.cols()) {
        throw ShapeError("checkpoint tensor '" + name + "' is " + std::to_string(src.rows()) + "x" +
                         std::to_string(src.cols()) + ", config implies " + std::to_string(target.rows()) + "x" +
                         std::to_string(target.cols()));
    }
    target = src;
    found.erase(it);
}

} // namespace

void to_json(nlohmann::json& j, const PENetConfig& cfg) {
    j = nlohmann::json{{"num_classes", cfg.num_classes},
                       {"mel_bins", cfg.mel_bins},
                       {"hidden", cfg.hidden},
                       {"context", cfg.context},
                       {"forward", cfg.forward},
                       {"learning_rate", cfg.learning_rate},
                       {"epochs", cfg.epochs},
                       {"batch_size", cfg.batch_size},
                       {"seed", cfg.seed},
                       {"windows_per_epoch", cfg.windows_per_epoch},
                       {"class_names", cfg.class_names}};
}

void from_json(const nlohmann::json& j, PENetConfig& cfg) {
    auto get = [&j](const char* key, auto& field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    get("num_classes", cfg.num_classes);
    get("mel_bins", cfg.mel_bins);
    get("hidden", cfg.hidden);
    get("context", cfg.context);
    get("forward", cfg.forward);
    get("learning_rate", cfg.learning_rate);
    get("epochs", cfg.epochs);
    get("batch_size", cfg.batch_size);
    get("seed", cfg.seed);
    get("windows_per_epoch", cfg.windows_per_epoch);
    get("class_names", cfg.class_names);
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
    nlohmann::json header;
    header["config"] = state.config;
    header["epochs_completed"] = state.epochs_completed;
    header["adam_steps"] = state.optimizer.steps_taken();
    header["loss_trace"] = state.loss_trace;
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot create checkpoint " + path.string());
    }
    out.write(kMagic, kMagicLen);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(header_text.size()));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

    const bool with_moments = state.optimizer.first_moment()[kProjWeight].size() > 0;
    const std::uint32_t count = kNumTensors + 2 + (with_moments ? 2 * kNumTensors : 0);
    write_le<std::uint32_t>(out, count);
    for (int i = 0; i < kNumTensors; ++i) {
        write_tensor(out, std::string(kTensorNames[i]), state.params.net.tensors[i]);
    }
    write_tensor(out, "norm.mean", state.params.norm.mean);
    write_tensor(out, "norm.stddev", state.params.norm.stddev);
    if (with_moments) {
        for (int i = 0; i < kNumTensors; ++i) {
            write_tensor(out, "adam.m." + std::string(kTensorNames[i]), state.optimizer.first_moment().tensors[i]);
        }
        for (int i = 0; i < kNumTensors; ++i) {
            write_tensor(out, "adam.v." + std::string(kTensorNames[i]), state.optimizer.second_moment().tensors[i]);
        }
    }
    if (!out) {
        throw IoError("failed writing checkpoint " + path.string());
    }
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint " + path.string());
    }
    if (read_bytes(in, kMagicLen, "magic") != std::string(kMagic, kMagicLen)) {
        throw IoError(path.string() + ": not a PENET1 checkpoint (bad magic)");
    }
    const auto header_len = read_le<std::uint32_t>(in, "config length");
    if (header_len > (1u << 24)) {
        throw IoError(path.string() + ": implausible config block length");
    }
    TrainState state;
    long long steps = 0;
    try {
        const nlohmann::json header = nlohmann::json::parse(read_bytes(in, header_len, "config block"));
        header.at("config").get_to(state.config);
        state.epochs_completed = header.value("epochs_completed", 0);
        state.loss_trace = header.value("loss_trace", std::vector<double>{});
        steps = header.value("adam_steps", 0LL);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": malformed config block: " + e.what());
    }
    state.config.validate();
    const PENetConfig& cfg = state.config;

    std::map<std::string, RawTensor> found;
    const auto count = read_le<std::uint32_t>(in, "tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name;
        RawTensor t = read_tensor(in, name);
        found.emplace(std::move(name), std::move(t));
    }

    state.params = PENetParams::zeros(cfg.mel_bins, cfg.hidden, cfg.num_classes);
    for (int i = 0; i < kNumTensors; ++i) {
        assign(found, std::string(kTensorNames[i]), state.params.net.tensors[i], true);
    }
    Mat<float> mean = state.params.norm.mean;
    Mat<float> stddev = state.params.norm.stddev;
    assign(found, "norm.mean", mean, true);
    assign(found, "norm.stddev", stddev, true);
    state.params.norm.mean = mean.col(0);
    state.params.norm.stddev = stddev.col(0);

    AdamOptimizer restored(state.params.net, cfg.learning_rate);
    for (int i = 0; i < kNumTensors; ++i) {
        assign(found, "adam.m." + std::string(kTensorNames[i]), restored.first_moment().tensors[i], false);
        assign(found, "adam.v." + std::string(kTensorNames[i]), restored.second_moment().tensors[i], false);
    }
    restored.set_steps_taken(steps);
    state.optimizer = std::move(restored);
    if (!found.empty()) {
        throw IoError(path.string() + ": unexpected tensor '" + found.begin()->first + "'");
    }
    if (!state.params.all_finite()) {
        throw IoError(path.string() + ": checkpoint contains non-finite values");
    }
    return state;
}

} // namespace penet::model
