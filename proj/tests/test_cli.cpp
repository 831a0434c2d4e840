#include "cli.h"

#include "penet/dataset.h"
#include "penet/model.h"
#include "penet/synthgen.h"

#include <nlohmann/json.hpp>
#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace penet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result penet_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "penet");
    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path root() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "penet_cli_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string p(const std::string& name) {
    return (root() / name).string();
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const fs::path& path) {
    std::ifstream in(path);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) {
        out.push_back(line);
    }
    return out;
}

std::vector<double> trace_column(const fs::path& path) {
    std::vector<double> out;
    const auto rows = lines(path);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        out.push_back(std::stod(rows[i].substr(rows[i].find(',') + 1)));
    }
    return out;
}

/// A six-clip corpus with clearly audible events, generated once.
const std::string& small_corpus() {
    static const std::string dir = [] {
        const std::string d = p("corpus");
        const Result r = penet_cli({"gen", "--out", d, "--clips", "6", "--snr-min", "0", "--snr-max", "6", "--seed", "3"});
        REQUIRE(r.code == 0);
        return d;
    }();
    return dir;
}

const std::string& tiny_checkpoint() {
    static const std::string ckpt = [] {
        const std::string out = p("tiny_model");
        const Result r = penet_cli({"train", "--corpus", small_corpus(), "--out", out, "--epochs", "2",
                                    "--windows-per-epoch", "256", "--hidden", "8"});
        REQUIRE(r.code == 0);
        return out + "/model.ckpt";
    }();
    return ckpt;
}

std::vector<int> band_bins(std::pair<double, double> band) {
    const auto& fb = frontend::mel_filterbank();
    std::vector<int> bins;
    for (int m = 0; m < frontend::kMelBins; ++m) {
        Eigen::Index peak = 0;
        fb.row(m).maxCoeff(&peak);
        const double hz = static_cast<double>(peak) * frontend::kSampleRate / frontend::kFftSize;
        if (hz >= band.first && hz <= band.second) {
            bins.push_back(m);
        }
    }
    return bins;
}

/// Hand-built model whose decision for segment t depends only on the first
/// frame of its window: hidden unit 0 acts as a clock that closes every
/// other unit's update gate after the first step. With m = 0 the first frame
/// belongs to segment t itself, so decisions do not change with n.
std::string first_frame_checkpoint() {
    const synth::CorpusIndex corpus = synth::read_corpus(small_corpus());
    const auto clips = dataset::training_clips(dataset::load_features(corpus, {}), 4);
    model::TrainState state;
    state.config.num_classes = 4;
    state.config.hidden = 5;
    state.config.context = 0;
    state.config.forward = 0;
    state.config.class_names = corpus.class_names;
    const int h = 5;
    state.params = model::PENetParams::zeros(frontend::kMelBins, h, 4);
    state.params.norm = model::compute_feature_norm(clips, frontend::kMelBins);
    auto& net = state.params.net;
    net[model::kGruBias](h + 0, 0) = 20.0f;
    net[model::kGruBias](2 * h + 0, 0) = 10.0f;
    for (int k = 0; k < 4; ++k) {
        const int unit = 1 + k;
        const auto bins = band_bins(synth::signature(k).signature_band());
        REQUIRE_FALSE(bins.empty());
        for (int b : bins) {
            net[model::kProjWeight](unit, b) = 1.0f / static_cast<float>(bins.size());
        }
        net[model::kProjBias](unit, 0) = -1.0f;
        net[model::kGruBias](h + unit, 0) = 20.0f;
        net[model::kGruRecurrent](h + unit, 0) = -40.0f;
        net[model::kGruInput](2 * h + unit, unit) = 5.0f;
        net[model::kHeadWeight](k, unit) = 20.0f;
        net[model::kHeadWeight](4 + k, unit) = -20.0f;
    }
    const std::string path = p("first_frame.ckpt");
    model::save_checkpoint(path, state);
    return path;
}

} // namespace

TEST_CASE("gen with defaults writes a 200-clip corpus") {
    const std::string out = p("gen_default");
    const Result r = penet_cli({"gen", "--out", out});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("wrote 200 clips") != std::string::npos);
    CHECK(lines(fs::path(out) / "manifest.csv").size() == 201);
    CHECK(fs::is_regular_file(fs::path(out) / "audio" / "clip_0199.wav"));
    const json echo = json::parse(slurp(fs::path(out) / "run_config.json"));
    CHECK(echo.at("command") == "gen");
    CHECK(echo.at("synth").at("clips") == 200);
    CHECK_FALSE(fs::exists(fs::path(out) / ".failed"));
}

TEST_CASE("gen is reproducible from its seed") {
    const Result a = penet_cli({"gen", "--out", p("gen_a"), "--clips", "4", "--seed", "9"});
    const Result b = penet_cli({"gen", "--out", p("gen_b"), "--clips", "4", "--seed", "9"});
    const Result c = penet_cli({"gen", "--out", p("gen_c"), "--clips", "4", "--seed", "10"});
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    REQUIRE(c.code == 0);
    const std::hash<std::string> hash;
    CHECK(hash(slurp(p("gen_a") + "/manifest.csv")) == hash(slurp(p("gen_b") + "/manifest.csv")));
    CHECK(slurp(p("gen_a") + "/annotations.tsv") == slurp(p("gen_b") + "/annotations.tsv"));
    CHECK(slurp(p("gen_a") + "/audio/clip_0003.wav") == slurp(p("gen_b") + "/audio/clip_0003.wav"));
    CHECK(slurp(p("gen_a") + "/audio/clip_0003.wav") != slurp(p("gen_c") + "/audio/clip_0003.wav"));
}

TEST_CASE("config file values sit between defaults and flags") {
    const std::string cfg = p("gen_config.json");
    std::ofstream(cfg) << R"({"seed": 4, "synth": {"clips": 3, "num_classes": 2}})";
    const Result file_only = penet_cli({"gen", "--config", cfg, "--out", p("gen_cfg1")});
    REQUIRE(file_only.code == 0);
    CHECK(lines(p("gen_cfg1") + "/manifest.csv").size() == 4);
    const Result flagged = penet_cli({"gen", "--config", cfg, "--out", p("gen_cfg2"), "--clips", "2"});
    REQUIRE(flagged.code == 0);
    CHECK(lines(p("gen_cfg2") + "/manifest.csv").size() == 3);
    const json echo = json::parse(slurp(p("gen_cfg2") + "/run_config.json"));
    CHECK(echo.at("seed") == 4);
    CHECK(echo.at("synth").at("num_classes") == 2);
}

TEST_CASE("infeasible generator settings exit with a config error") {
    const Result poly = penet_cli({"gen", "--out", p("gen_bad1"), "--polyphony", "0"});
    CHECK(poly.code == 1);
    CHECK(poly.err.find("polyphony_max") != std::string::npos);
    CHECK_FALSE(fs::exists(p("gen_bad1")));

    const Result events = penet_cli({"gen", "--out", p("gen_bad2"), "--min-events", "5", "--max-events", "2"});
    CHECK(events.code == 1);
    CHECK(events.err.find("min_events") != std::string::npos);
}

TEST_CASE("usage errors exit with code 1") {
    CHECK(penet_cli({}).code == 1);
    CHECK(penet_cli({"gen"}).code == 1);
    CHECK(penet_cli({"gen", "--out", p("x"), "--bogus"}).code == 1);
    CHECK(penet_cli({"sweep", "--param", "width", "--corpus", "c", "--checkpoint", "k", "--out", p("x")}).code == 1);
}

TEST_CASE("train on a tiny corpus") {
    const auto start = std::chrono::steady_clock::now();
    const std::string out = p("train_tiny");
    const Result r = penet_cli({"train", "--corpus", small_corpus(), "--range", "0:5", "--out", out, "--epochs", "2"});
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    REQUIRE(r.code == 0);
    CHECK(seconds < 60.0);
    CHECK(fs::is_regular_file(out + "/model.ckpt"));
    const auto trace = lines(out + "/loss_trace.csv");
    REQUIRE(trace.size() == 3);
    CHECK(trace[0] == "epoch,loss");
    const model::TrainState state = model::load_checkpoint(out + "/model.ckpt");
    CHECK(state.epochs_completed == 2);
    CHECK(state.config.class_names == synth::class_names(4));
}

TEST_CASE("resumed training continues the loss trace") {
    const std::vector<std::string> common = {"--corpus", small_corpus(), "--windows-per-epoch", "300", "--seed", "5"};
    auto with = [&](std::vector<std::string> extra) {
        std::vector<std::string> args = {"train"};
        args.insert(args.end(), common.begin(), common.end());
        args.insert(args.end(), extra.begin(), extra.end());
        return penet_cli(args);
    };
    REQUIRE(with({"--out", p("resume_a"), "--epochs", "2"}).code == 0);
    REQUIRE(with({"--out", p("resume_b"), "--epochs", "4", "--resume", p("resume_a") + "/model.ckpt"}).code == 0);
    REQUIRE(with({"--out", p("resume_full"), "--epochs", "4"}).code == 0);

    const auto resumed = trace_column(p("resume_b") + "/loss_trace.csv");
    const auto full = trace_column(p("resume_full") + "/loss_trace.csv");
    REQUIRE(resumed.size() == 4);
    CHECK(resumed == full);
    CHECK(resumed[2] <= 1.1 * resumed[1]);
}

TEST_CASE("a missing corpus is a clean config error") {
    const std::string out = p("train_missing");
    const Result r = penet_cli({"train", "--corpus", p("no_such_corpus"), "--out", out});
    CHECK(r.code == 1);
    CHECK(r.err.find("no_such_corpus") != std::string::npos);
    CHECK_FALSE(fs::exists(out + "/model.ckpt"));

    const Result d = penet_cli({"detect", "--corpus", small_corpus(), "--checkpoint", p("nope.ckpt"), "--out", out});
    CHECK(d.code == 1);
}

TEST_CASE("detect writes one row per clip, segment and class") {
    for (const char* n : {"0", "6"}) {
        const std::string out = p(std::string("detect_n") + n);
        const Result r = penet_cli({"detect", "--checkpoint", tiny_checkpoint(), "--corpus", small_corpus(), "--out",
                                    out, "--rule", "vacuity", "--threshold", "0.9", "--forward", n});
        REQUIRE(r.code == 0);
        CHECK(lines(out + "/detections.csv").size() == 1 + 6 * 156 * 4);
        const json summary = json::parse(slurp(out + "/detect_summary.json"));
        CHECK(summary.at("rows") == 6 * 156 * 4);
        CHECK(summary.at("real_time") == true);
        CHECK(summary.at("mean_step_ms").get<double>() < 64.0);
        CHECK(json::parse(slurp(out + "/run_config.json")).at("detect").at("forward") == std::stoi(n));
    }
    const Result base = penet_cli({"detect", "--checkpoint", tiny_checkpoint(), "--corpus", small_corpus(), "--out",
                                   p("detect_prob"), "--rule", "probability"});
    REQUIRE(base.code == 0);
    CHECK(lines(p("detect_prob") + "/detections.csv").size() == 1 + 6 * 156 * 4);

    const Result ev = penet_cli({"eval", "--detections", p("detect_n6") + "/detections.csv", "--corpus",
                                 small_corpus(), "--out", p("eval_n6")});
    REQUIRE(ev.code == 0);
    CHECK(json::parse(slurp(p("eval_n6") + "/score.json")).at("forward") == 6);
}

TEST_CASE("ground truth used as predictions scores F1 = 1") {
    const synth::CorpusIndex corpus = synth::read_corpus(small_corpus());
    const auto grouped = group_by_clip(corpus.annotations);
    const std::string log = p("truth_detections.csv");
    {
        std::ofstream out(log);
        out << stream::kDetectionLogHeader << '\n';
        for (const auto& entry : corpus.manifest) {
            const auto g = grouped.find(entry.clip_id);
            const std::vector<EventAnnotation> none;
            const model::LabelMatrix y =
                model::rasterize_labels(g == grouped.end() ? none : g->second, 156, 4);
            for (int t = 0; t < 156; ++t) {
                for (int k = 0; k < 4; ++k) {
                    out << entry.clip_id << ',' << t << ',' << k << ',' << int(y(k, t)) << ",0,0,1,0.5\n";
                }
            }
        }
    }
    const Result r = penet_cli({"eval", "--detections", log, "--corpus", small_corpus(), "--forward", "0", "--out",
                                p("eval_truth")});
    REQUIRE(r.code == 0);
    const json score = json::parse(slurp(p("eval_truth") + "/score.json"));
    CHECK(score.at("f1") == 1.0);
    CHECK(score.at("fp") == 0);
    CHECK(score.at("mean_delay").get<double>() <= 0.064);
    CHECK(lines(p("eval_truth") + "/records.csv").front() == "clip_id,class,status,first_prediction,delay");

    SUBCASE("a range that does not cover the log is a timeline mismatch") {
        const std::string out = p("eval_mismatch");
        const Result bad = penet_cli({"eval", "--detections", log, "--corpus", small_corpus(), "--forward", "0",
                                      "--range", "0:3", "--out", out});
        CHECK(bad.code == 2);
        CHECK(fs::exists(out + "/.failed"));
        CHECK_FALSE(fs::exists(out + "/score.json"));
    }
    SUBCASE("n is required when the detect config is absent") {
        const Result missing = penet_cli({"eval", "--detections", log, "--corpus", small_corpus(), "--out",
                                          p("eval_no_n")});
        CHECK(missing.code == 1);
    }
}

TEST_CASE("vacuity sweep writes one row per grid point") {
    const std::string out = p("sweep_v");
    const Result r = penet_cli({"sweep", "--param", "vacuity", "--corpus", small_corpus(), "--checkpoint",
                                tiny_checkpoint(), "--out", out});
    REQUIRE(r.code == 0);
    const auto rows = lines(out + "/sweep_vacuity.csv");
    REQUIRE(rows.size() == 7);
    CHECK(rows[0] == "parameter,delay,f1,tp,fp,fn");
    CHECK(rows[1].rfind("0.5,", 0) == 0);
    CHECK(rows[6].rfind("1,", 0) == 0);

    const Result custom = penet_cli({"sweep", "--param", "vacuity", "--corpus", small_corpus(), "--checkpoint",
                                     tiny_checkpoint(), "--grid", "0.3,0.9", "--out", p("sweep_v2")});
    REQUIRE(custom.code == 0);
    CHECK(lines(p("sweep_v2") + "/sweep_vacuity.csv").size() == 3);
}

TEST_CASE("backtrack sweep delay grows strictly with n") {
    const std::string ckpt = first_frame_checkpoint();
    const std::string out = p("sweep_bt");
    const Result r = penet_cli({"sweep", "--param", "backtrack", "--shared", "--grid", "0,2,4,6", "--corpus",
                                small_corpus(), "--checkpoint", ckpt, "--out", out});
    REQUIRE(r.code == 0);
    const auto rows = lines(out + "/sweep_backtrack.csv");
    REQUIRE(rows.size() == 5);
    std::vector<double> delay;
    std::vector<std::string> counts;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        std::stringstream ss(rows[i]);
        std::string n, d, f1, rest;
        std::getline(ss, n, ',');
        std::getline(ss, d, ',');
        std::getline(ss, f1, ',');
        std::getline(ss, rest);
        REQUIRE_FALSE(d.empty());
        delay.push_back(std::stod(d));
        counts.push_back(f1 + "," + rest);
    }
    for (std::size_t i = 1; i < delay.size(); ++i) {
        CHECK(delay[i] > delay[i - 1]);
        CHECK(counts[i] == counts[0]);
    }
    CHECK(slurp(out + "/sweep_backtrack.txt").find("shared model") != std::string::npos);

    const Result family = penet_cli({"sweep", "--param", "backtrack", "--corpus", small_corpus(), "--checkpoint",
                                     tiny_checkpoint(), "--out", p("sweep_bt_family")});
    REQUIRE(family.code == 0);
    CHECK(lines(p("sweep_bt_family") + "/sweep_backtrack.csv").size() == 2);
}
