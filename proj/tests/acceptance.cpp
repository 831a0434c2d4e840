// End-to-end acceptance run: prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include "cli.h"

#include "penet/dataset.h"
#include "penet/errors.h"
#include "penet/frontend.h"
#include "penet/metrics.h"
#include "penet/model.h"
#include "penet/random.h"
#include "penet/sl_core.h"
#include "penet/specfun.h"
#include "penet/stream.h"
#include "penet/synthgen.h"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace penet;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    std::printf("criterion %2d %-28s %s  %s\n", id, name.c_str(), pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    failures += pass ? 0 : 1;
}

void info(const std::string& text) {
    std::printf("  info: %s\n", text.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

std::string describe(const metrics::Score& s) {
    return "F1=" + (s.f1 ? fmt("%.4f", *s.f1) : std::string("n/a")) +
           " delay=" + (s.mean_delay ? fmt("%.4f", *s.mean_delay) : std::string("n/a")) + " TP=" +
           std::to_string(s.tp) + " FP=" + std::to_string(s.fp) + " FN=" + std::to_string(s.fn);
}

// ---- 1 ----------------------------------------------------------------------

void opinion_table() {
    const auto start = Clock::now();
    const struct {
        sl::BetaEvidence ev;
        double p;
    } rows[] = {{{1, 4}, 0.2}, {{4, 4}, 0.5}, {{200, 4}, 200.0 / 204.0}};
    double worst = 0.0;
    std::string detail = "p =";
    for (const auto& r : rows) {
        const double p = sl::expected_probability(sl::opinion_from_evidence(r.ev));
        worst = std::max(worst, std::abs(p - r.p));
        detail += " " + fmt("%.15g", p);
    }
    const double elapsed = seconds_since(start);
    report(1, "opinion table", worst <= 1e-12 && elapsed < 1.0,
           detail + ", max error " + fmt("%.2e", worst) + ", " + fmt("%.3f", elapsed) + " s");
}

// ---- 2 ----------------------------------------------------------------------

void loss_oracle() {
    const auto start = Clock::now();
    double worst = 0.0;
    for (double a : {1.5, 3.0, 20.0}) {
        for (double b : {1.5, 3.0, 20.0}) {
            for (int y : {0, 1}) {
                const auto integrand = [&](double p) {
                    const double bce = y ? -std::log(p) : -std::log1p(-p);
                    return bce * std::exp(sl::beta_log_pdf(p, {a, b}));
                };
                const double quad =
                    boost::math::quadrature::gauss_kronrod<double, 61>::integrate(integrand, 0.0, 1.0, 20, 1e-13);
                worst = std::max(worst, std::abs(quad - model::beta_loss_term({a, b}, y)));
            }
        }
    }
    const double elapsed = seconds_since(start);
    report(2, "loss vs quadrature", worst <= 1e-6 && elapsed < 10.0,
           "18 grid points, max |closed form - quadrature| " + fmt("%.2e", worst) + ", " + fmt("%.3f", elapsed) +
               " s");
}

// ---- 3 ----------------------------------------------------------------------

double rel(double a, double b, double floor) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

void gradient_checks() {
    const auto start = Clock::now();
    double worst_loss = 0.0;
    const double h = 1e-4;
    for (double a : {1.0 + 2 * h, 1.3, 2.0, 3.3, 7.5, 40.0}) {
        for (double b : {1.0 + 2 * h, 1.9, 4.0, 25.0}) {
            for (int y : {0, 1}) {
                const auto g = model::beta_loss_term_grad({a, b}, y);
                const double fa =
                    (model::beta_loss_term({a + h, b}, y) - model::beta_loss_term({a - h, b}, y)) / (2 * h);
                const double fb =
                    (model::beta_loss_term({a, b + h}, y) - model::beta_loss_term({a, b - h}, y)) / (2 * h);
                worst_loss = std::max({worst_loss, rel(g.d_alpha, fa, 1e-12), rel(g.d_beta, fb, 1e-12)});
            }
        }
    }

    // Full model, single precision analytic gradients against double
    // precision central differences.
    const int bins = 16, hidden = 4, classes = 2, steps = 8, batch = 3;
    std::mt19937_64 rng(derive_seed(0, "accept.grad"));
    std::normal_distribution<double> dist(0.0, 0.5);
    model::Network<double> net = model::Network<double>::zeros(bins, hidden, classes);
    for (auto& t : net.tensors) {
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            t.data()[i] = dist(rng);
        }
    }
    net[model::kHeadBias].array() += 1.5;
    model::BatchInput<double> in{model::Mat<double>(bins, steps * batch), steps, batch};
    for (Eigen::Index i = 0; i < in.x.size(); ++i) {
        in.x.data()[i] = 2.0 * dist(rng);
    }
    model::LabelMatrix y(classes, batch);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        y.data()[i] = static_cast<std::uint8_t>(rng() & 1U);
    }
    const model::Network<float> g = model::backprop(
        net.cast<float>(), model::BatchInput<float>{in.x.cast<float>(), steps, batch}, y);
    double worst_model = 0.0;
    int params = 0;
    for (int id = 0; id < model::kNumTensors; ++id) {
        for (Eigen::Index i = 0; i < net.tensors[id].size(); ++i) {
            auto plus = net;
            auto minus = net;
            plus.tensors[id].data()[i] += 1e-6;
            minus.tensors[id].data()[i] -= 1e-6;
            const double fd = (model::beta_loss(model::evaluate(plus, in), y) -
                               model::beta_loss(model::evaluate(minus, in), y)) /
                              2e-6;
            worst_model = std::max(worst_model, rel(g.tensors[id].data()[i], fd, 1e-3));
            ++params;
        }
    }
    const double elapsed = seconds_since(start);
    report(3, "gradient checks", worst_loss <= 1e-5 && worst_model <= 1e-3 && elapsed < 30.0,
           "loss grad max rel " + fmt("%.2e", worst_loss) + "; backprop (H=4, K=2, " + std::to_string(params) +
               " params) max rel " + fmt("%.2e", worst_model) + ", " + fmt("%.2f", elapsed) + " s");
}

// ---- 4 ----------------------------------------------------------------------

void shapes() {
    frontend::AudioClip clip;
    clip.samples.resize(160000);
    std::mt19937_64 rng(derive_seed(0, "accept.shape"));
    std::normal_distribution<double> dist(0.0, 0.1);
    for (double& s : clip.samples) {
        s = dist(rng);
    }
    const frontend::MelFrames mel = frontend::log_mel(clip);
    const auto segs = frontend::segment_stream(mel);
    bool seg_ok = segs.size() == 156;
    for (const auto& s : segs) {
        seg_ok = seg_ok && s.frames.rows() == 4 && s.frames.cols() == 128;
    }
    report(4, "shape fidelity", mel.frames.rows() == 626 && mel.frames.cols() == 128 && seg_ok,
           std::to_string(mel.frames.rows()) + "x" + std::to_string(mel.frames.cols()) + " frames, " +
               std::to_string(segs.size()) + " segments of 4x128");
}

// ---- 5-8 --------------------------------------------------------------------

struct Pipeline {
    std::vector<model::TrainingClip> train;
    std::vector<metrics::EvalClip> eval;
};

Pipeline build_corpus(std::uint64_t seed) {
    synth::SynthConfig sc;
    sc.clips = 200;
    sc.seed = derive_seed(seed, "gen");
    std::vector<dataset::ClipFeatures> features;
    for (const auto& clip : synth::generate_corpus(sc)) {
        features.push_back(dataset::featurize(clip.id, clip.audio, clip.events));
    }
    const std::vector<dataset::ClipFeatures> head(features.begin(), features.begin() + 150);
    const std::vector<dataset::ClipFeatures> tail(features.begin() + 150, features.end());
    return {dataset::training_clips(head, sc.num_classes), dataset::eval_clips(tail)};
}

std::vector<stream::EvidenceTrack> tracks_for(const model::PENetParams& params, const Pipeline& data, int m, int n) {
    std::vector<stream::EvidenceTrack> out;
    for (const auto& clip : data.eval) {
        out.push_back(stream::compute_evidence(params, clip.segments, m, n));
    }
    return out;
}

void trends() {
    const auto start = Clock::now();
    const std::uint64_t seed = 0;
    const Pipeline data = build_corpus(seed);
    info("corpus: 200 clips (150 train / 50 eval) ready after " + fmt("%.1f", seconds_since(start)) + " s");

    // Evidence model for the vacuity and baseline comparisons.
    model::PENetConfig evidence_cfg;
    evidence_cfg.epochs = 3;
    evidence_cfg.windows_per_epoch = 4000;
    evidence_cfg.seed = derive_seed(seed, "train");
    const model::TrainState evidence = model::train(evidence_cfg, data.train);

    const std::vector<double> grid = {0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    const metrics::SweepTable vac = metrics::sweep_vacuity(evidence.params, data.eval, 3, 0, grid);
    const double vac_elapsed = seconds_since(start);
    for (const auto& row : vac.rows) {
        info("V=" + fmt("%.1f", row.parameter) + "  " + describe(row.score));
    }
    const metrics::Monotonicity mono = metrics::delay_monotonicity(vac, false);
    double best_gated = -1.0;
    double best_v = 0.0;
    for (const auto& row : vac.rows) {
        if (row.parameter < 1.0 && row.score.f1.value_or(0.0) > best_gated) {
            best_gated = row.score.f1.value_or(0.0);
            best_v = row.parameter;
        }
    }
    const double ungated = vac.rows.back().score.f1.value_or(0.0);
    const bool delay_ok = mono.inversions == 0 || (mono.inversions == 1 && mono.largest_inversion <= 0.01);
    report(5, "vacuity sweep trend", delay_ok && best_gated > ungated && vac_elapsed < 900.0,
           std::to_string(mono.inversions) + " delay inversion(s)" +
               (mono.inversions ? " (largest " + fmt("%.4f", mono.largest_inversion) + " s)" : std::string()) +
               ", best F1 " + fmt("%.4f", best_gated) + " at V=" + fmt("%.1f", best_v) + " vs " +
               fmt("%.4f", ungated) + " at V=1.0, " + fmt("%.0f", vac_elapsed) + " s");

    const auto ev_tracks = tracks_for(evidence.params, data, 3, 0);
    const metrics::Score gated = metrics::score_tracks(data.eval, ev_tracks, stream::DecisionRule::vacuity(0.9), {});
    const metrics::Score baseline =
        metrics::score_tracks(data.eval, ev_tracks, stream::DecisionRule::probability(0.5), {});
    report(6, "vacuity vs probability", gated.f1.value_or(0) >= baseline.f1.value_or(0) && gated.fp < baseline.fp,
           "V=0.9 " + describe(gated) + " | tau=0.5 " + describe(baseline));

    // Backtrack family: one model per n, trained on the full schedule.
    std::vector<model::TrainState> family;
    for (int n : {0, 2, 4, 6}) {
        model::PENetConfig cfg;
        cfg.forward = n;
        cfg.seed = derive_seed(seed, "train");
        family.push_back(model::train(cfg, data.train));
        info("trained n=" + std::to_string(n) + " model (" + std::to_string(cfg.epochs) + " epochs), final loss " +
             fmt("%.4f", family.back().loss_trace.back()));
    }
    std::vector<metrics::BacktrackModel> members;
    for (const auto& st : family) {
        members.push_back({st.config.forward, &st.params});
    }
    const metrics::SweepTable bt =
        metrics::sweep_backtrack(members, data.eval, 3, stream::DecisionRule::vacuity(0.9));
    bool increasing = true;
    double smallest_step = 1e9;
    for (std::size_t i = 0; i < bt.rows.size(); ++i) {
        info("n=" + fmt("%.0f", bt.rows[i].parameter) + "  " + describe(bt.rows[i].score));
        if (i > 0) {
            const auto& a = bt.rows[i - 1].score.mean_delay;
            const auto& b = bt.rows[i].score.mean_delay;
            const double step = (a && b) ? *b - *a : -1.0;
            increasing = increasing && step > 0.0;
            smallest_step = std::min(smallest_step, step);
        }
    }
    const double f1_0 = bt.rows.front().score.f1.value_or(0.0);
    const double f1_6 = bt.rows.back().score.f1.value_or(0.0);
    report(7, "backtrack trend", f1_6 >= f1_0 && increasing && smallest_step >= 0.064,
           "F1(n=6)=" + fmt("%.4f", f1_6) + " vs F1(n=0)=" + fmt("%.4f", f1_0) + ", smallest delay step " +
               fmt("%.4f", smallest_step) + " s");

    // The converged n=0 model, for comparison with the short schedule above.
    const metrics::SweepTable converged = metrics::sweep_vacuity(family.front().params, data.eval, 3, 0, grid);
    std::string line = "vacuity sweep on the fully trained n=0 model:";
    for (const auto& row : converged.rows) {
        line += " V=" + fmt("%.1f", row.parameter) + " F1=" + fmt("%.4f", row.score.f1.value_or(0.0)) +
                " FP=" + std::to_string(row.score.fp);
    }
    info(line);

    // Real-time contract on the default model, streamed segment by segment.
    auto params = std::make_shared<const model::PENetParams>(family.front().params);
    stream::Detector det(params, {3, 0, stream::DecisionRule::vacuity(0.9), sl::kDefaultBaseRate});
    double total = 0.0;
    long long steps = 0;
    for (const auto& clip : data.eval) {
        det.reset();
        for (const auto& seg : clip.segments) {
            det.step(seg.frames);
        }
        total += det.mean_step_seconds() * static_cast<double>(clip.segments.size());
        steps += static_cast<long long>(clip.segments.size());
    }
    const double mean_ms = 1000.0 * total / static_cast<double>(steps);
    report(8, "real-time inference", mean_ms < 64.0,
           fmt("%.3f", mean_ms) + " ms per segment over " + std::to_string(steps) + " segments (budget 64 ms)");
}

// ---- 9 ----------------------------------------------------------------------

void metric_timelines() {
    bool ok = true;
    std::string detail;
    auto expect = [&](bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            detail += " mismatch: " + what + ";";
        }
    };
    auto timeline = [](double latency) {
        metrics::DecisionStream s;
        s.clip_id = "hand";
        s.decisions = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(2, 50);
        s.segment_seconds = 0.1;
        s.clip_seconds = 5.0;
        s.latency = latency;
        return s;
    };
    auto run = [](metrics::DecisionStream& s, int k, int a, int b) {
        for (int t = a; t <= b; ++t) {
            s.decisions(k, t) = 1;
        }
    };
    auto near = [](const std::optional<double>& v, double x) { return v && std::abs(*v - x) < 1e-12; };

    // Late, early and missed events.
    {
        auto s = timeline(0.0);
        run(s, 0, 15, 20);
        run(s, 0, 30, 36);
        const std::vector<EventAnnotation> ev = {{"hand", 0, 1.0, 2.5}, {"hand", 0, 3.5, 4.0}, {"hand", 1, 2.0, 3.0}};
        const auto r = metrics::match_events(s, ev);
        const auto sc = metrics::early_f1(r);
        expect(sc.tp == 1 && sc.fp == 1 && sc.fn == 2, "counts A");
        expect(near(r[0].delay, 0.5), "delay A0");
        expect(r.size() == 4 && near(r[3].first_prediction, 3.0), "early run A1");
    }
    // Predictions before and at onset give zero delay.
    {
        auto s = timeline(0.0);
        run(s, 0, 10, 13);
        run(s, 1, 5, 8);
        run(s, 1, 33, 33);
        run(s, 1, 36, 37);
        run(s, 1, 45, 46);
        const std::vector<EventAnnotation> ev = {{"hand", 0, 1.2, 2.0}, {"hand", 1, 0.5, 1.5}, {"hand", 1, 3.0, 4.0}};
        const auto r = metrics::match_events(s, ev);
        const auto sc = metrics::early_f1(r);
        expect(sc.tp == 3 && sc.fp == 1 && sc.fn == 0, "counts B");
        expect(near(r[0].first_prediction, 1.0) && near(r[0].delay, 0.0), "d_p < d_t branch");
        expect(near(r[1].delay, 0.0), "d_p = d_t");
        expect(std::abs(*r[2].delay - 0.3) < 1e-12, "delay B2");
    }
    // Forward latency of 6 segments of 0.064 s.
    {
        metrics::DecisionStream s;
        s.clip_id = "hand";
        s.decisions = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(2, 156);
        s.clip_seconds = 10.0;
        s.latency = 6 * frontend::kSegmentSeconds;
        run(s, 0, 16, 20);
        run(s, 0, 59, 62);
        run(s, 1, 91, 93);
        const std::vector<EventAnnotation> ev = {{"hand", 0, 1.0, 3.0}, {"hand", 0, 4.0, 5.0}, {"hand", 1, 6.0, 6.5}};
        const auto r = metrics::match_events(s, ev);
        expect(metrics::early_f1(r).tp == 3, "counts C");
        expect(std::abs(*r[0].delay - 0.408) < 1e-12 && std::abs(*r[1].delay - 0.16) < 1e-12 &&
                   std::abs(*r[2].delay - 0.208) < 1e-12,
               "latency delays");
    }
    report(9, "metric correctness", ok, ok ? "3 hand-built timelines reproduce TP/FP/FN and delays exactly" : detail);
}

// ---- 10 ---------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv = {"penet"};
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != 0) {
        info("command failed: " + err.str());
    }
    return code;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void determinism() {
    const fs::path base = fs::temp_directory_path() / "penet_acceptance";
    fs::remove_all(base);
    bool ok = true;
    std::vector<std::string> run_dirs;
    for (int run = 0; run < 2; ++run) {
        const fs::path dir = base / ("run" + std::to_string(run));
        const std::string corpus = (dir / "corpus").string();
        const std::string trained = (dir / "train").string();
        ok = ok && run_cli({"gen", "--out", corpus, "--clips", "12", "--seed", "0"}) == 0;
        ok = ok && run_cli({"train", "--corpus", corpus, "--out", trained, "--epochs", "2", "--windows-per-epoch",
                            "600", "--seed", "0"}) == 0;
        ok = ok && run_cli({"detect", "--corpus", corpus, "--checkpoint", trained + "/model.ckpt", "--out",
                            (dir / "detect").string(), "--seed", "0"}) == 0;
        ok = ok && run_cli({"eval", "--corpus", corpus, "--detections", (dir / "detect" / "detections.csv").string(),
                            "--out", (dir / "eval").string(), "--seed", "0"}) == 0;
        run_dirs.push_back(dir.string());
    }
    std::vector<std::string> differing;
    for (const char* f : {"corpus/manifest.csv", "corpus/annotations.tsv", "corpus/audio/clip_0011.wav",
                          "train/loss_trace.csv", "train/model.ckpt", "detect/detections.csv", "eval/records.csv",
                          "eval/score.json"}) {
        const std::string a = slurp(fs::path(run_dirs[0]) / f);
        if (a.empty() || a != slurp(fs::path(run_dirs[1]) / f)) {
            differing.push_back(f);
        }
    }
    ok = ok && differing.empty();
    std::string detail = "gen/train/detect/eval twice with seed 0: ";
    if (differing.empty()) {
        detail += "manifest, loss trace, checkpoint, detections and scores byte-identical";
    } else {
        for (const auto& f : differing) {
            detail += f + " ";
        }
        detail += "differ";
    }
    report(10, "determinism", ok, detail);
}

} // namespace

int main() {
    const auto start = Clock::now();
    const std::vector<std::function<void()>> steps = {opinion_table, loss_oracle,      gradient_checks,
                                                      shapes,        metric_timelines, determinism,
                                                      trends};
    for (const auto& step : steps) {
        try {
            step();
        } catch (const std::exception& e) {
            std::printf("error: %s\n", e.what());
            ++failures;
        }
    }
    std::printf("acceptance: %d failure(s), %.0f s total\n", failures, seconds_since(start));
    return failures == 0 ? 0 : 1;
}
