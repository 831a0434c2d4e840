#include "penet/model.h"

#include "penet/errors.h"
#include "penet/random.h"
#include "penet/specfun.h"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace penet::model {
namespace {

template <class T>
struct ForwardCache {
    Mat<T> proj;     // H x SB, tanh output
    Mat<T> reset;    // H x SB
    Mat<T> update;   // H x SB
    Mat<T> cand;     // H x SB
    Mat<T> hidden;   // H x (S+1)B, hidden[0] = 0
    Mat<T> raw;      // 2K x B
};

template <class T>
Mat<T> sigmoid(const Mat<T>& x) {
    return (T(1) / (T(1) + (-x.array()).exp())).matrix();
}

template <class T>
void check_network(const Network<T>& net, const BatchInput<T>& input) {
    const int h = net.hidden();
    const int k = net.num_classes();
    if (net[kProjBias].rows() != h || net[kGruInput].rows() != 3 * h || net[kGruInput].cols() != h ||
        net[kGruRecurrent].rows() != 3 * h || net[kGruRecurrent].cols() != h || net[kGruBias].rows() != 3 * h ||
        net[kHeadWeight].rows() != 2 * k || net[kHeadWeight].cols() != h) {
        throw ShapeError("network tensors have inconsistent shapes");
    }
    if (input.x.rows() != net.mel_bins()) {
        throw ShapeError("input has " + std::to_string(input.x.rows()) + " mel bins, model expects " +
                         std::to_string(net.mel_bins()));
    }
    if (input.steps <= 0 || input.batch <= 0 ||
        input.x.cols() != static_cast<Eigen::Index>(input.steps) * input.batch) {
        throw ShapeError("packed input has inconsistent step/batch layout");
    }
}

template <class T>
ForwardCache<T> run_forward(const Network<T>& net, const BatchInput<T>& input) {
    check_network(net, input);
    const int h = net.hidden();
    const int b = input.batch;
    ForwardCache<T> c;

    c.proj = ((net[kProjWeight] * input.x).colwise() + net[kProjBias].col(0)).array().tanh().matrix();
    const Mat<T> gates_in = (net[kGruInput] * c.proj).colwise() + net[kGruBias].col(0);

    c.reset.resize(h, gates_in.cols());
    c.update.resize(h, gates_in.cols());
    c.cand.resize(h, gates_in.cols());
    c.hidden = Mat<T>::Zero(h, static_cast<Eigen::Index>(input.steps + 1) * b);

    const auto& wh = net[kGruRecurrent];
    for (int s = 0; s < input.steps; ++s) {
        const auto cols = Eigen::seqN(static_cast<Eigen::Index>(s) * b, b);
        const Mat<T> h_prev = c.hidden.middleCols(static_cast<Eigen::Index>(s) * b, b);
        const Mat<T> ru = sigmoid<T>(gates_in(Eigen::seqN(0, 2 * h), cols) + wh.topRows(2 * h) * h_prev);
        const Mat<T> r = ru.topRows(h);
        const Mat<T> u = ru.bottomRows(h);
        const Mat<T> rh = r.cwiseProduct(h_prev);
        const Mat<T> cand =
            (gates_in(Eigen::seqN(2 * h, h), cols) + wh.bottomRows(h) * rh).array().tanh().matrix();
        c.reset.middleCols(static_cast<Eigen::Index>(s) * b, b) = r;
        c.update.middleCols(static_cast<Eigen::Index>(s) * b, b) = u;
        c.cand.middleCols(static_cast<Eigen::Index>(s) * b, b) = cand;
        c.hidden.middleCols(static_cast<Eigen::Index>(s + 1) * b, b) =
            ((T(1) - u.array()) * h_prev.array() + u.array() * cand.array()).matrix();
    }

    const Mat<T> h_last = c.hidden.rightCols(b);
    c.raw = (net[kHeadWeight] * h_last).colwise() + net[kHeadBias].col(0);
    return c;
}

template <class T>
EvidenceBatch<T> evidence_from_raw(const Mat<T>& raw) {
    const auto k = raw.rows() / 2;
    EvidenceBatch<T> out;
    out.alpha = (raw.topRows(k).array().max(T(0)) + T(1)).matrix();
    out.beta = (raw.bottomRows(k).array().max(T(0)) + T(1)).matrix();
    return out;
}

void check_labels(Eigen::Index k, Eigen::Index b, const LabelMatrix& labels) {
    if (labels.rows() != k || labels.cols() != b) {
        throw ShapeError("labels are " + std::to_string(labels.rows()) + "x" + std::to_string(labels.cols()) +
                         ", evidence is " + std::to_string(k) + "x" + std::to_string(b));
    }
}

template <class T>
void glorot(Mat<T>& m, int fan_in, int fan_out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            m(i, j) = static_cast<T>(dist(rng));
        }
    }
}

// Each H x H gate block of the recurrent matrix gets an independent random
// orthogonal matrix (Q factor of a Gaussian matrix, sign-corrected).
template <class T>
void orthogonal_blocks(Mat<T>& m, std::mt19937_64& rng) {
    const Eigen::Index h = m.cols();
    std::normal_distribution<double> dist(0.0, 1.0);
    for (Eigen::Index block = 0; block * h < m.rows(); ++block) {
        Eigen::MatrixXd g(h, h);
        for (Eigen::Index j = 0; j < h; ++j) {
            for (Eigen::Index i = 0; i < h; ++i) {
                g(i, j) = dist(rng);
            }
        }
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
        Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(h, h);
        const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
        for (Eigen::Index j = 0; j < h; ++j) {
            if (r(j, j) < 0.0) {
                q.col(j) = -q.col(j);
            }
        }
        m.middleRows(block * h, h) = q.cast<T>();
    }
}

struct WindowRef {
    int clip = 0;
    int segment = 0;
};

std::vector<WindowRef> enumerate_windows(std::span<const TrainingClip> clips) {
    std::vector<WindowRef> refs;
    for (int c = 0; c < static_cast<int>(clips.size()); ++c) {
        const int count = static_cast<int>(clips[c].segments.size());
        for (int t = 0; t < count; ++t) {
            refs.push_back({c, t});
        }
    }
    return refs;
}

// Builds the packed input and label matrix for one mini-batch.
void gather_batch(const PENetConfig& cfg, const FeatureNorm& norm, std::span<const TrainingClip> clips,
                  std::span<const WindowRef> refs, BatchInput<float>& input, LabelMatrix& labels) {
    std::vector<frontend::FrameMatrix> windows;
    windows.reserve(refs.size());
    labels.resize(cfg.num_classes, static_cast<Eigen::Index>(refs.size()));
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const TrainingClip& clip = clips[refs[i].clip];
        windows.push_back(
            frontend::make_window(clip.segments, refs[i].segment, cfg.context, cfg.forward).frames);
        labels.col(static_cast<Eigen::Index>(i)) = clip.labels.col(refs[i].segment);
    }
    std::vector<const frontend::FrameMatrix*> ptrs;
    ptrs.reserve(windows.size());
    for (const auto& w : windows) {
        ptrs.push_back(&w);
    }
    input = pack_windows<float>(norm, ptrs);
}

} // namespace

// ---- configuration and parameters -------------------------------------------

void PENetConfig::validate() const {
    if (num_classes < 1) {
        throw ConfigError("num_classes must be >= 1");
    }
    if (mel_bins < 1) {
        throw ConfigError("mel_bins must be >= 1");
    }
    if (hidden < 1) {
        throw ConfigError("hidden must be >= 1");
    }
    if (context < 0 || forward < 0) {
        throw ConfigError("context (m) and forward (n) must be >= 0");
    }
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be finite and >= 0");
    }
    if (epochs < 0) {
        throw ConfigError("epochs must be >= 0");
    }
    if (batch_size < 1) {
        throw ConfigError("batch_size must be >= 1");
    }
    if (windows_per_epoch < 0) {
        throw ConfigError("windows_per_epoch must be >= 0");
    }
    if (!class_names.empty() && static_cast<int>(class_names.size()) != num_classes) {
        throw ConfigError("class_names must list exactly num_classes names");
    }
}

template <class T>
Network<T> Network<T>::zeros(int mel_bins, int hidden, int num_classes) {
    Network<T> net;
    net[kProjWeight] = Mat<T>::Zero(hidden, mel_bins);
    net[kProjBias] = Mat<T>::Zero(hidden, 1);
    net[kGruInput] = Mat<T>::Zero(3 * hidden, hidden);
    net[kGruRecurrent] = Mat<T>::Zero(3 * hidden, hidden);
    net[kGruBias] = Mat<T>::Zero(3 * hidden, 1);
    net[kHeadWeight] = Mat<T>::Zero(2 * num_classes, hidden);
    net[kHeadBias] = Mat<T>::Zero(2 * num_classes, 1);
    return net;
}

template struct Network<float>;
template struct Network<double>;

FeatureNorm FeatureNorm::identity(int mel_bins) {
    return {Eigen::VectorXf::Zero(mel_bins), Eigen::VectorXf::Ones(mel_bins)};
}

PENetParams PENetParams::zeros(int mel_bins, int hidden, int num_classes) {
    return {Network<float>::zeros(mel_bins, hidden, num_classes), FeatureNorm::identity(mel_bins)};
}

PENetParams PENetParams::initialise(const PENetConfig& cfg) {
    cfg.validate();
    PENetParams p = zeros(cfg.mel_bins, cfg.hidden, cfg.num_classes);
    std::mt19937_64 rng(derive_seed(cfg.seed, "train.init"));
    glorot(p.net[kProjWeight], cfg.mel_bins, cfg.hidden, rng);
    glorot(p.net[kGruInput], cfg.hidden, 3 * cfg.hidden, rng);
    orthogonal_blocks(p.net[kGruRecurrent], rng);
    glorot(p.net[kHeadWeight], cfg.hidden, 2 * cfg.num_classes, rng);
    // Start every evidence unit in its linear region.
    p.net[kHeadBias].setConstant(0.5f);
    return p;
}

bool PENetParams::all_finite() const {
    for (const auto& t : net.tensors) {
        if (!t.allFinite()) {
            return false;
        }
    }
    return norm.mean.allFinite() && norm.stddev.allFinite();
}

// ---- forward / backward -----------------------------------------------------

template <class T>
BatchInput<T> pack_windows(const FeatureNorm& norm, std::span<const frontend::FrameMatrix* const> windows) {
    if (windows.empty()) {
        throw ShapeError("pack_windows: empty batch");
    }
    const auto steps = windows.front()->rows();
    const auto bins = windows.front()->cols();
    if (bins != norm.mean.size() || bins != norm.stddev.size()) {
        throw ShapeError("window has " + std::to_string(bins) + " mel bins, normaliser expects " +
                         std::to_string(norm.mean.size()));
    }
    BatchInput<T> in;
    in.steps = static_cast<int>(steps);
    in.batch = static_cast<int>(windows.size());
    in.x.resize(bins, steps * in.batch);
    const Eigen::VectorXf inv_std = norm.stddev.cwiseInverse();
    for (int b = 0; b < in.batch; ++b) {
        const frontend::FrameMatrix& w = *windows[b];
        if (w.rows() != steps || w.cols() != bins) {
            throw ShapeError("pack_windows: windows in a batch must share one shape");
        }
        for (Eigen::Index s = 0; s < steps; ++s) {
            in.x.col(s * in.batch + b) =
                ((w.row(s).transpose() - norm.mean).cwiseProduct(inv_std)).template cast<T>();
        }
    }
    return in;
}

template <class T>
EvidenceBatch<T> evaluate(const Network<T>& net, const BatchInput<T>& input) {
    return evidence_from_raw<T>(run_forward(net, input).raw);
}

template <class T>
Network<T> backprop(const Network<T>& net, const BatchInput<T>& input, const LabelMatrix& labels, double* loss) {
    const ForwardCache<T> c = run_forward(net, input);
    const EvidenceBatch<T> ev = evidence_from_raw<T>(c.raw);
    if (loss) {
        *loss = beta_loss(ev, labels);
    }
    const EvidenceBatch<double> d_ev = beta_loss_grad(ev, labels);

    const int h = net.hidden();
    const int k = net.num_classes();
    const int b = input.batch;

    Mat<T> d_raw(2 * k, b);
    d_raw.topRows(k) = d_ev.alpha.template cast<T>();
    d_raw.bottomRows(k) = d_ev.beta.template cast<T>();
    d_raw = (c.raw.array() > T(0)).select(d_raw, T(0));

    Network<T> g = Network<T>::zeros(net.mel_bins(), h, k);
    const Mat<T> h_last = c.hidden.rightCols(b);
    g[kHeadWeight] = d_raw * h_last.transpose();
    g[kHeadBias] = d_raw.rowwise().sum();
    Mat<T> d_h = net[kHeadWeight].transpose() * d_raw;

    const auto& wh = net[kGruRecurrent];
    Mat<T> d_gates(3 * h, c.proj.cols());
    for (int s = input.steps - 1; s >= 0; --s) {
        const Eigen::Index off = static_cast<Eigen::Index>(s) * b;
        const Mat<T> h_prev = c.hidden.middleCols(off, b);
        const auto r = c.reset.middleCols(off, b).array();
        const auto u = c.update.middleCols(off, b).array();
        const auto cand = c.cand.middleCols(off, b).array();

        const Mat<T> d_cand_pre = (d_h.array() * u * (T(1) - cand.square())).matrix();
        const Mat<T> d_u_pre = (d_h.array() * (cand - h_prev.array()) * u * (T(1) - u)).matrix();
        Mat<T> d_h_prev = (d_h.array() * (T(1) - u)).matrix();

        const Mat<T> rh = (r * h_prev.array()).matrix();
        const Mat<T> d_rh = wh.bottomRows(h).transpose() * d_cand_pre;
        const Mat<T> d_r_pre = (d_rh.array() * h_prev.array() * r * (T(1) - r)).matrix();
        d_h_prev += (d_rh.array() * r).matrix();

        g[kGruRecurrent].bottomRows(h) += d_cand_pre * rh.transpose();
        g[kGruRecurrent].topRows(h) += d_r_pre * h_prev.transpose();
        g[kGruRecurrent].middleRows(h, h) += d_u_pre * h_prev.transpose();
        d_h_prev += wh.topRows(h).transpose() * d_r_pre + wh.middleRows(h, h).transpose() * d_u_pre;

        d_gates.block(0, off, h, b) = d_r_pre;
        d_gates.block(h, off, h, b) = d_u_pre;
        d_gates.block(2 * h, off, h, b) = d_cand_pre;
        d_h = std::move(d_h_prev);
    }

    g[kGruInput] = d_gates * c.proj.transpose();
    g[kGruBias] = d_gates.rowwise().sum();
    const Mat<T> d_proj_pre =
        ((net[kGruInput].transpose() * d_gates).array() * (T(1) - c.proj.array().square())).matrix();
    g[kProjWeight] = d_proj_pre * input.x.transpose();
    g[kProjBias] = d_proj_pre.rowwise().sum();
    return g;
}

template BatchInput<float> pack_windows<float>(const FeatureNorm&, std::span<const frontend::FrameMatrix* const>);
template BatchInput<double> pack_windows<double>(const FeatureNorm&, std::span<const frontend::FrameMatrix* const>);
template EvidenceBatch<float> evaluate<float>(const Network<float>&, const BatchInput<float>&);
template EvidenceBatch<double> evaluate<double>(const Network<double>&, const BatchInput<double>&);
template Network<float> backprop<float>(const Network<float>&, const BatchInput<float>&, const LabelMatrix&, double*);
template Network<double> backprop<double>(const Network<double>&, const BatchInput<double>&, const LabelMatrix&,
                                          double*);

namespace {

void check_window(const PENetParams& params, const frontend::FeatureWindow& window) {
    const int expected = (window.m + window.n + 1) * frontend::kSegmentFrames;
    if (window.frames.rows() != expected || window.frames.cols() != params.mel_bins()) {
        throw ShapeError("feature window is " + std::to_string(window.frames.rows()) + "x" +
                         std::to_string(window.frames.cols()) + ", expected " + std::to_string(expected) + "x" +
                         std::to_string(params.mel_bins()));
    }
}

} // namespace

std::vector<sl::BetaEvidence> forward(const PENetParams& params, const frontend::FeatureWindow& window) {
    check_window(params, window);
    const frontend::FrameMatrix* ptr = &window.frames;
    const EvidenceBatch<float> ev = evaluate(params.net, pack_windows<float>(params.norm, {&ptr, 1}));
    std::vector<sl::BetaEvidence> out(params.num_classes());
    for (int k = 0; k < params.num_classes(); ++k) {
        out[k] = ev.at(k, 0);
    }
    return out;
}

EvidenceBatch<float> forward_batch(const PENetParams& params, std::span<const frontend::FeatureWindow> windows) {
    std::vector<const frontend::FrameMatrix*> ptrs;
    ptrs.reserve(windows.size());
    for (const auto& w : windows) {
        check_window(params, w);
        ptrs.push_back(&w.frames);
    }
    return evaluate(params.net, pack_windows<float>(params.norm, ptrs));
}

Network<float> backprop(const PENetParams& params, const frontend::FeatureWindow& window,
                        std::span<const std::uint8_t> labels, double* loss) {
    check_window(params, window);
    if (static_cast<int>(labels.size()) != params.num_classes()) {
        throw ShapeError("expected one label per class");
    }
    LabelMatrix y(params.num_classes(), 1);
    for (int k = 0; k < params.num_classes(); ++k) {
        y(k, 0) = labels[k];
    }
    const frontend::FrameMatrix* ptr = &window.frames;
    return backprop(params.net, pack_windows<float>(params.norm, {&ptr, 1}), y, loss);
}

// ---- Beta loss --------------------------------------------------------------

double beta_loss_term(const sl::BetaEvidence& ev, int label) {
    sl::validate(ev);
    const double psi_total = specfun::digamma(ev.total());
    return label ? psi_total - specfun::digamma(ev.alpha) : psi_total - specfun::digamma(ev.beta);
}

EvidenceGradient beta_loss_term_grad(const sl::BetaEvidence& ev, int label) {
    sl::validate(ev);
    const double tri_total = specfun::trigamma(ev.total());
    if (label) {
        return {tri_total - specfun::trigamma(ev.alpha), tri_total};
    }
    return {tri_total, tri_total - specfun::trigamma(ev.beta)};
}

template <class T>
double beta_loss(const EvidenceBatch<T>& out, const LabelMatrix& labels) {
    check_labels(out.alpha.rows(), out.alpha.cols(), labels);
    double total = 0.0;
    for (Eigen::Index b = 0; b < out.alpha.cols(); ++b) {
        for (Eigen::Index k = 0; k < out.alpha.rows(); ++k) {
            total += beta_loss_term(out.at(static_cast<int>(k), static_cast<int>(b)), labels(k, b));
        }
    }
    return total;
}

template <class T>
EvidenceBatch<double> beta_loss_grad(const EvidenceBatch<T>& out, const LabelMatrix& labels) {
    check_labels(out.alpha.rows(), out.alpha.cols(), labels);
    EvidenceBatch<double> g{Mat<double>(out.alpha.rows(), out.alpha.cols()),
                            Mat<double>(out.alpha.rows(), out.alpha.cols())};
    for (Eigen::Index b = 0; b < out.alpha.cols(); ++b) {
        for (Eigen::Index k = 0; k < out.alpha.rows(); ++k) {
            const auto d = beta_loss_term_grad(out.at(static_cast<int>(k), static_cast<int>(b)), labels(k, b));
            g.alpha(k, b) = d.d_alpha;
            g.beta(k, b) = d.d_beta;
        }
    }
    return g;
}

template double beta_loss<float>(const EvidenceBatch<float>&, const LabelMatrix&);
template double beta_loss<double>(const EvidenceBatch<double>&, const LabelMatrix&);
template EvidenceBatch<double> beta_loss_grad<float>(const EvidenceBatch<float>&, const LabelMatrix&);
template EvidenceBatch<double> beta_loss_grad<double>(const EvidenceBatch<double>&, const LabelMatrix&);

// ---- labels -----------------------------------------------------------------

LabelMatrix rasterize_labels(std::span<const EventAnnotation> events, int num_segments, int num_classes,
                             double segment_seconds) {
    LabelMatrix labels = LabelMatrix::Zero(num_classes, num_segments);
    for (int s = 0; s < num_segments; ++s) {
        const double lo = s * segment_seconds;
        const double hi = lo + segment_seconds;
        for (const auto& ev : events) {
            if (ev.label < 0 || ev.label >= num_classes) {
                throw ConfigError("annotation class index " + std::to_string(ev.label) + " out of range");
            }
            const double overlap = std::min(hi, ev.offset) - std::max(lo, ev.onset);
            // half-span test with a small tolerance for decimal timestamps
            if (overlap >= 0.5 * segment_seconds - 1e-9) {
                labels(ev.label, s) = 1;
            }
        }
    }
    return labels;
}

TrainingClip make_training_clip(std::string id, const frontend::MelFrames& frames,
                                std::span<const EventAnnotation> events, int num_classes) {
    TrainingClip clip;
    clip.id = std::move(id);
    clip.segments = frontend::segment_stream(frames);
    clip.labels = rasterize_labels(events, static_cast<int>(clip.segments.size()), num_classes);
    return clip;
}

// ---- Adam -------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(const Network<float>& shape, double learning_rate)
    : learning_rate_(learning_rate),
      m_(Network<float>::zeros(shape.mel_bins(), shape.hidden(), shape.num_classes())),
      v_(Network<float>::zeros(shape.mel_bins(), shape.hidden(), shape.num_classes())) {}

void AdamOptimizer::step(Network<float>& params, const Network<float>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    const auto b1 = static_cast<float>(kBeta1);
    const auto b2 = static_cast<float>(kBeta2);
    const auto step_size = static_cast<float>(learning_rate_ / bc1);
    const auto v_scale = static_cast<float>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<float>(kEpsilon);
    for (int i = 0; i < kNumTensors; ++i) {
        auto& m = m_.tensors[i];
        auto& v = v_.tensors[i];
        const auto& g = grads.tensors[i];
        m = b1 * m + (1.0f - b1) * g;
        v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
        params.tensors[i].array() -= step_size * m.array() / (v.array().sqrt() * v_scale + eps);
    }
}

// ---- training ---------------------------------------------------------------

FeatureNorm compute_feature_norm(std::span<const TrainingClip> clips, int mel_bins) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(mel_bins);
    Eigen::VectorXd sum_sq = Eigen::VectorXd::Zero(mel_bins);
    double count = 0.0;
    for (const auto& clip : clips) {
        for (const auto& seg : clip.segments) {
            if (seg.frames.cols() != mel_bins) {
                throw ShapeError("training clip " + clip.id + " has the wrong number of mel bins");
            }
            for (Eigen::Index r = 0; r < seg.frames.rows(); ++r) {
                const Eigen::VectorXd row = seg.frames.row(r).transpose().cast<double>();
                sum += row;
                sum_sq += row.cwiseProduct(row);
                count += 1.0;
            }
        }
    }
    if (count == 0.0) {
        return FeatureNorm::identity(mel_bins);
    }
    const Eigen::VectorXd mean = sum / count;
    const Eigen::VectorXd var = (sum_sq / count - mean.cwiseProduct(mean)).cwiseMax(0.0);
    FeatureNorm norm;
    norm.mean = mean.cast<float>();
    norm.stddev = var.cwiseSqrt().cwiseMax(1e-3).cast<float>();
    return norm;
}

TrainState init_training(const PENetConfig& cfg, std::span<const TrainingClip> clips) {
    cfg.validate();
    if (clips.empty()) {
        throw ConfigError("training requires at least one clip");
    }
    TrainState state;
    state.config = cfg;
    state.params = PENetParams::initialise(cfg);
    state.params.norm = compute_feature_norm(clips, cfg.mel_bins);
    state.optimizer = AdamOptimizer(state.params.net, cfg.learning_rate);
    return state;
}

void train(TrainState& state, std::span<const TrainingClip> clips, const TrainOptions& options) {
    const PENetConfig& cfg = state.config;
    cfg.validate();
    if (clips.empty()) {
        throw ConfigError("training requires at least one clip");
    }
    for (const auto& clip : clips) {
        if (clip.labels.rows() != cfg.num_classes ||
            clip.labels.cols() != static_cast<Eigen::Index>(clip.segments.size())) {
            throw ShapeError("training clip " + clip.id + " has labels that do not match its segments");
        }
    }
    const std::vector<WindowRef> all = enumerate_windows(clips);
    if (all.empty()) {
        throw ConfigError("no training windows: every clip is empty");
    }
    state.optimizer.set_learning_rate(cfg.learning_rate);

    std::vector<WindowRef> order;
    BatchInput<float> input;
    LabelMatrix labels;
    while (state.epochs_completed < cfg.epochs) {
        const int epoch = state.epochs_completed + 1;
        order = all;
        std::mt19937_64 rng(derive_seed(cfg.seed, "train.shuffle", static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        if (cfg.windows_per_epoch > 0 && static_cast<std::size_t>(cfg.windows_per_epoch) < order.size()) {
            order.resize(cfg.windows_per_epoch);
        }

        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - start);
            gather_batch(cfg, state.params.norm, clips, std::span(order).subspan(start, count), input, labels);
            double batch_loss = 0.0;
            Network<float> grads = backprop(state.params.net, input, labels, &batch_loss);
            if (!std::isfinite(batch_loss)) {
                throw DivergenceError(epoch, "training diverged: non-finite loss in epoch " + std::to_string(epoch));
            }
            const float inv = 1.0f / static_cast<float>(count);
            for (auto& g : grads.tensors) {
                g *= inv;
            }
            state.optimizer.step(state.params.net, grads);
            epoch_loss += batch_loss;
        }
        const double mean = epoch_loss / static_cast<double>(order.size());
        if (!std::isfinite(mean) || !state.params.all_finite()) {
            throw DivergenceError(epoch, "training diverged: non-finite values after epoch " + std::to_string(epoch));
        }
        state.loss_trace.push_back(mean);
        state.epochs_completed = epoch;
        if (options.on_epoch) {
            options.on_epoch(epoch, mean);
        }
    }
}

TrainState train(const PENetConfig& cfg, std::span<const TrainingClip> clips, const TrainOptions& options) {
    TrainState state = init_training(cfg, clips);
    train(state, clips, options);
    return state;
}

double mean_loss(const PENetParams& params, const PENetConfig& cfg, std::span<const TrainingClip> clips) {
    const std::vector<WindowRef> all = enumerate_windows(clips);
    if (all.empty()) {
        throw ConfigError("no windows to evaluate");
    }
    constexpr std::size_t kChunk = 256;
    BatchInput<float> input;
    LabelMatrix labels;
    double total = 0.0;
    for (std::size_t start = 0; start < all.size(); start += kChunk) {
        const std::size_t count = std::min(kChunk, all.size() - start);
        gather_batch(cfg, params.norm, clips, std::span(all).subspan(start, count), input, labels);
        total += beta_loss(evaluate(params.net, input), labels);
    }
    return total / static_cast<double>(all.size());
}

} // namespace penet::model
