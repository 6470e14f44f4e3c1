#pragma once

// Autoregressive recurrent language model written from first principles:
// embedding, stacked LSTM (or plain tanh RNN) cells, softmax projection,
// truncated backpropagation through time and Adam/SGD training.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "akr/common.hpp"
#include "akr/error.hpp"
#include "akr/lm.hpp"
#include "akr/tokenizer.hpp"

namespace akr {

using Mat = Eigen::MatrixXd;

enum class CellType { Lstm, Rnn };
enum class OptimizerKind { Adam, Sgd };

struct LmConfig {
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 128;
    std::size_t hidden_dim = 256;
    std::size_t num_layers = 2;
    std::size_t bptt_len = 35;
    std::size_t batch_size = 20;
    double learning_rate = 1e-3;
    std::size_t max_epochs = 20;
    std::size_t early_stop_patience = 3;
    std::uint64_t seed = 1;
    double dropout_rate = 0.3;  // applied to the input of every layer above the first
    double clip_norm = 5.0;     // <= 0 disables clipping
    bool reset_at_eos = true;   // zero the state whenever <EOS> is the input
    CellType cell = CellType::Lstm;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    friend bool operator==(const LmConfig&, const LmConfig&) = default;

    std::size_t gate_rows() const { return cell == CellType::Lstm ? 4 * hidden_dim : hidden_dim; }

    void validate() const
    {
        if (vocab_size == 0 || embed_dim == 0 || hidden_dim == 0 || num_layers == 0 || batch_size == 0) {
            throw Error(ErrorCode::InvalidConfig, "model dimensions must be positive");
        }
        if (bptt_len < 2) {
            throw Error(ErrorCode::InvalidConfig, "bptt_len must be >= 2");
        }
        if (!(learning_rate > 0.0)) {
            throw Error(ErrorCode::InvalidConfig, "learning rate must be positive");
        }
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
            throw Error(ErrorCode::InvalidConfig, "dropout must lie in [0,1)");
        }
    }

    /// "key value" lines; the checkpoint stores this block verbatim.
    std::string serialize() const
    {
        std::string out;
        auto put = [&out](std::string_view k, const std::string& v) {
            out.append(k);
            out += ' ';
            out += v;
            out += '\n';
        };
        put("vocab_size", std::to_string(vocab_size));
        put("embed_dim", std::to_string(embed_dim));
        put("hidden_dim", std::to_string(hidden_dim));
        put("num_layers", std::to_string(num_layers));
        put("bptt_len", std::to_string(bptt_len));
        put("batch_size", std::to_string(batch_size));
        put("learning_rate", format_double(learning_rate));
        put("max_epochs", std::to_string(max_epochs));
        put("early_stop_patience", std::to_string(early_stop_patience));
        put("seed", std::to_string(seed));
        put("dropout_rate", format_double(dropout_rate));
        put("clip_norm", format_double(clip_norm));
        put("cell", cell == CellType::Lstm ? "lstm" : "rnn");
        put("optimizer", optimizer == OptimizerKind::Adam ? "adam" : "sgd");
        put("adam_beta1", format_double(adam_beta1));
        put("adam_beta2", format_double(adam_beta2));
        put("adam_eps", format_double(adam_eps));
        put("reset_at_eos", reset_at_eos ? "1" : "0");
        return out;
    }

    static LmConfig parse(std::string_view text)
    {
        LmConfig c;
        for (const auto& line : split(text, '\n')) {
            const auto f = split_ws(line);
            if (f.empty()) {
                continue;
            }
            if (f.size() != 2) {
                throw Error(ErrorCode::BadFormat, "config line '" + line + "'");
            }
            const auto& k = f[0];
            const auto& v = f[1];
            if (k == "vocab_size") c.vocab_size = std::stoull(v);
            else if (k == "embed_dim") c.embed_dim = std::stoull(v);
            else if (k == "hidden_dim") c.hidden_dim = std::stoull(v);
            else if (k == "num_layers") c.num_layers = std::stoull(v);
            else if (k == "bptt_len") c.bptt_len = std::stoull(v);
            else if (k == "batch_size") c.batch_size = std::stoull(v);
            else if (k == "learning_rate") c.learning_rate = std::stod(v);
            else if (k == "max_epochs") c.max_epochs = std::stoull(v);
            else if (k == "early_stop_patience") c.early_stop_patience = std::stoull(v);
            else if (k == "seed") c.seed = std::stoull(v);
            else if (k == "dropout_rate") c.dropout_rate = std::stod(v);
            else if (k == "clip_norm") c.clip_norm = std::stod(v);
            else if (k == "cell") {
                if (v != "lstm" && v != "rnn") throw Error(ErrorCode::BadFormat, "unknown cell '" + v + "'");
                c.cell = v == "lstm" ? CellType::Lstm : CellType::Rnn;
            } else if (k == "optimizer") {
                if (v != "adam" && v != "sgd") throw Error(ErrorCode::BadFormat, "unknown optimizer '" + v + "'");
                c.optimizer = v == "adam" ? OptimizerKind::Adam : OptimizerKind::Sgd;
            } else if (k == "adam_beta1") c.adam_beta1 = std::stod(v);
            else if (k == "adam_beta2") c.adam_beta2 = std::stod(v);
            else if (k == "adam_eps") c.adam_eps = std::stod(v);
            else if (k == "reset_at_eos") c.reset_at_eos = v == "1";
            else throw Error(ErrorCode::BadFormat, "unknown config key '" + k + "'");
        }
        return c;
    }
};

struct LayerParams {
    Mat w_in;   // G x in_dim, G = 4H for LSTM (gate order i, f, g, o), H for RNN
    Mat w_rec;  // G x H
    Mat bias;   // G x 1
};

/// Parameters (and, with the same shape, gradients and optimizer moments).
struct LstmParams {
    Mat embedding;  // V x E
    std::vector<LayerParams> layers;
    Mat out_w;  // V x H
    Mat out_b;  // V x 1

    /// Visits every tensor in a fixed order with its checkpoint name.
    template <typename F>
    void for_each(F&& f)
    {
        f(std::string("embedding"), embedding);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            f(p + "w_in", layers[l].w_in);
            f(p + "w_rec", layers[l].w_rec);
            f(p + "bias", layers[l].bias);
        }
        f(std::string("out.w"), out_w);
        f(std::string("out.b"), out_b);
    }

    template <typename F>
    void for_each(F&& f) const
    {
        const_cast<LstmParams*>(this)->for_each([&f](const std::string& n, Mat& m) { f(n, static_cast<const Mat&>(m)); });
    }

    /// Zero tensors shaped like `like`.
    static LstmParams zeros_like(const LstmParams& like)
    {
        LstmParams z = like;
        z.for_each([](const std::string&, Mat& m) { m.setZero(); });
        return z;
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for_each([&n](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
        return n;
    }

    friend bool operator==(const LstmParams& a, const LstmParams& b)
    {
        if (a.layers.size() != b.layers.size()) {
            return false;
        }
        auto same = [](const Mat& x, const Mat& y) {
            return x.rows() == y.rows() && x.cols() == y.cols()
                && std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) == 0;
        };
        if (!same(a.embedding, b.embedding) || !same(a.out_w, b.out_w) || !same(a.out_b, b.out_b)) {
            return false;
        }
        for (std::size_t l = 0; l < a.layers.size(); ++l) {
            if (!same(a.layers[l].w_in, b.layers[l].w_in) || !same(a.layers[l].w_rec, b.layers[l].w_rec)
                || !same(a.layers[l].bias, b.layers[l].bias)) {
                return false;
            }
        }
        return true;
    }
};

/// Uniform in [-1/sqrt(H), 1/sqrt(H)] for every weight, drawn in tensor
/// order from the seed; biases zero except the LSTM forget-gate slice, which
/// starts at 1.
inline LstmParams init_params(const LmConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    const auto V = static_cast<Eigen::Index>(cfg.vocab_size);
    const auto E = static_cast<Eigen::Index>(cfg.embed_dim);
    const auto H = static_cast<Eigen::Index>(cfg.hidden_dim);
    const auto G = static_cast<Eigen::Index>(cfg.gate_rows());
    const double s = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
    Rng rng(seed);
    auto fill = [&](Mat& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                m(r, c) = rng.uniform(-s, s);
            }
        }
    };
    LstmParams p;
    p.embedding.resize(V, E);
    fill(p.embedding);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        LayerParams lp;
        lp.w_in.resize(G, l == 0 ? E : H);
        lp.w_rec.resize(G, H);
        lp.bias = Mat::Zero(G, 1);
        fill(lp.w_in);
        fill(lp.w_rec);
        if (cfg.cell == CellType::Lstm) {
            lp.bias.block(H, 0, H, 1).setConstant(1.0);
        }
        p.layers.push_back(std::move(lp));
    }
    p.out_w.resize(V, H);
    fill(p.out_w);
    p.out_b = Mat::Zero(V, 1);
    return p;
}

/// Recurrent state for B parallel lanes (B = 1 for single sequences).
struct LstmState {
    std::vector<Mat> h;  // per layer, H x B
    std::vector<Mat> c;  // per layer, H x B (unused by the RNN cell)

    static LstmState zeros(const LmConfig& cfg, std::size_t lanes = 1)
    {
        LstmState s;
        const auto H = static_cast<Eigen::Index>(cfg.hidden_dim);
        const auto B = static_cast<Eigen::Index>(lanes);
        s.h.assign(cfg.num_layers, Mat::Zero(H, B));
        s.c.assign(cfg.num_layers, Mat::Zero(H, B));
        return s;
    }

    /// Copies lane 0 into `lanes` lanes.
    LstmState broadcast(std::size_t lanes) const
    {
        LstmState s;
        for (const auto& m : h) {
            s.h.push_back(m.col(0).replicate(1, static_cast<Eigen::Index>(lanes)));
        }
        for (const auto& m : c) {
            s.c.push_back(m.col(0).replicate(1, static_cast<Eigen::Index>(lanes)));
        }
        return s;
    }
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct LayerStepCache {
    Mat x;       // layer input after dropout, in_dim x B
    Mat mask;    // dropout mask applied to x (empty when unused)
    Mat h_prev;  // H x B
    Mat c_prev;  // H x B
    Mat act;     // activated gates, G x B: i, f, g, o (LSTM) or tanh output (RNN)
    Mat c;       // H x B
    Mat tanh_c;  // H x B
    Mat h;       // H x B
};

/// One time step over B lanes. Writes the new state in place. When `cache`
/// is non-null the activations needed by backward are kept.
inline void step_layers(const LstmParams& p, const LmConfig& cfg, const Mat& x_emb, LstmState& state,
                        std::vector<LayerStepCache>* cache, Rng* dropout)
{
    const auto H = static_cast<Eigen::Index>(cfg.hidden_dim);
    Mat x = x_emb;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const auto& lp = p.layers[l];
        LayerStepCache lc;
        if (l > 0 && dropout != nullptr && cfg.dropout_rate > 0.0) {
            const double keep = 1.0 - cfg.dropout_rate;
            lc.mask.resize(x.rows(), x.cols());
            for (Eigen::Index c = 0; c < x.cols(); ++c) {
                for (Eigen::Index r = 0; r < x.rows(); ++r) {
                    lc.mask(r, c) = dropout->bernoulli(keep) ? 1.0 / keep : 0.0;
                }
            }
            x = x.cwiseProduct(lc.mask);
        }
        Mat z = lp.w_in * x + lp.w_rec * state.h[l];
        z.colwise() += lp.bias.col(0);
        if (cfg.cell == CellType::Lstm) {
            Mat act(z.rows(), z.cols());
            act.topRows(2 * H) = z.topRows(2 * H).unaryExpr([](double v) { return sigmoid(v); });
            act.middleRows(2 * H, H) = z.middleRows(2 * H, H).array().tanh().matrix();
            act.bottomRows(H) = z.bottomRows(H).unaryExpr([](double v) { return sigmoid(v); });
            Mat c_new = act.middleRows(H, H).cwiseProduct(state.c[l]) + act.topRows(H).cwiseProduct(act.middleRows(2 * H, H));
            Mat tanh_c = c_new.array().tanh().matrix();
            Mat h_new = act.bottomRows(H).cwiseProduct(tanh_c);
            if (cache != nullptr) {
                lc.x = x;
                lc.h_prev = state.h[l];
                lc.c_prev = state.c[l];
                lc.act = std::move(act);
                lc.c = c_new;
                lc.tanh_c = std::move(tanh_c);
                lc.h = h_new;
            }
            state.c[l] = std::move(c_new);
            state.h[l] = std::move(h_new);
        } else {
            Mat h_new = z.array().tanh().matrix();
            if (cache != nullptr) {
                lc.x = x;
                lc.h_prev = state.h[l];
                lc.act = h_new;
                lc.h = h_new;
            }
            state.h[l] = std::move(h_new);
        }
        if (cache != nullptr) {
            cache->push_back(std::move(lc));
        }
        x = state.h[l];
    }
}

/// Column-wise softmax with max subtraction.
inline Mat softmax_columns(const Mat& logits)
{
    Mat out(logits.rows(), logits.cols());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        const double m = logits.col(c).maxCoeff();
        out.col(c) = (logits.col(c).array() - m).exp().matrix();
        out.col(c) /= out.col(c).sum();
    }
    return out;
}

inline Mat gather_embeddings(const LstmParams& p, std::span<const TokenId> ids)
{
    Mat x(p.embedding.cols(), static_cast<Eigen::Index>(ids.size()));
    for (std::size_t b = 0; b < ids.size(); ++b) {
        if (ids[b] >= static_cast<std::size_t>(p.embedding.rows())) {
            throw Error(ErrorCode::UnknownId, "token id " + std::to_string(ids[b]) + " outside vocabulary");
        }
        x.col(static_cast<Eigen::Index>(b)) = p.embedding.row(ids[b]).transpose();
    }
    return x;
}

/// Lines are scored independently: a lane whose input is <EOS> starts over
/// from the zero state.
inline void reset_lanes(const LmConfig& cfg, LstmState& s, std::span<const TokenId> inputs)
{
    if (!cfg.reset_at_eos) {
        return;
    }
    for (std::size_t b = 0; b < inputs.size(); ++b) {
        if (inputs[b] != kEosId) {
            continue;
        }
        const auto col = static_cast<Eigen::Index>(b);
        for (std::size_t l = 0; l < s.h.size(); ++l) {
            s.h[l].col(col).setZero();
            s.c[l].col(col).setZero();
        }
    }
}

inline void check_finite(const Mat& m, const char* what)
{
    if (!m.allFinite()) {
        throw Error(ErrorCode::NonFiniteActivation, std::string("non-finite ") + what);
    }
}

}  // namespace detail

struct StepOutput {
    LstmState state;
    Eigen::VectorXd logits;
};

/// Single-lane cell update: gates i, f, o = sigmoid, g = tanh,
/// c' = f*c + i*g, h' = o*tanh(c'), logits = W_out h'_top + b_out.
inline StepOutput lstm_step(const LstmParams& p, const LmConfig& cfg, const Eigen::VectorXd& x_emb, const LstmState& state)
{
    StepOutput out{state, {}};
    detail::step_layers(p, cfg, Mat(x_emb), out.state, nullptr, nullptr);
    Mat logits = p.out_w * out.state.h.back() + p.out_b;
    detail::check_finite(logits, "logits");
    out.logits = logits.col(0);
    return out;
}

/// Activations of a forward pass over T steps and B lanes; inputs and
/// targets are laid out step-major (index t * B + b).
struct ForwardCache {
    std::size_t steps = 0;
    std::size_t lanes = 0;
    std::vector<TokenId> inputs;
    std::vector<std::vector<detail::LayerStepCache>> layers;  // [t][l]
    std::vector<Mat> probs;                                   // [t], V x B
};

inline ForwardCache forward(const LstmParams& p, const LmConfig& cfg, std::span<const TokenId> inputs, std::size_t lanes,
                            LstmState& state, Rng* dropout = nullptr)
{
    ForwardCache cache;
    cache.lanes = lanes;
    cache.steps = inputs.size() / lanes;
    cache.inputs.assign(inputs.begin(), inputs.end());
    cache.layers.resize(cache.steps);
    cache.probs.reserve(cache.steps);
    for (std::size_t t = 0; t < cache.steps; ++t) {
        const Mat x = detail::gather_embeddings(p, inputs.subspan(t * lanes, lanes));
        detail::reset_lanes(cfg, state, inputs.subspan(t * lanes, lanes));
        detail::step_layers(p, cfg, x, state, &cache.layers[t], dropout);
        Mat logits = p.out_w * state.h.back();
        logits.colwise() += p.out_b.col(0);
        detail::check_finite(logits, "logits");
        cache.probs.push_back(detail::softmax_columns(logits));
    }
    return cache;
}

/// Mean over positions of -log prob[target].
inline double nll_loss(const std::vector<Mat>& probs, std::span<const TokenId> targets)
{
    if (probs.empty()) {
        return 0.0;
    }
    const auto lanes = static_cast<std::size_t>(probs.front().cols());
    if (targets.size() != probs.size() * lanes) {
        throw Error(ErrorCode::InvalidConfig, "target count does not match forward steps");
    }
    double sum = 0.0;
    for (std::size_t t = 0; t < probs.size(); ++t) {
        for (std::size_t b = 0; b < lanes; ++b) {
            sum -= std::log(probs[t](targets[t * lanes + b], static_cast<Eigen::Index>(b)));
        }
    }
    return sum / static_cast<double>(targets.size());
}

inline double nll_loss(std::span<const ProbVector> probs, std::span<const TokenId> targets)
{
    if (probs.size() != targets.size()) {
        throw Error(ErrorCode::InvalidConfig, "probability and target counts differ");
    }
    if (probs.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (std::size_t t = 0; t < probs.size(); ++t) {
        sum -= std::log(probs[t][targets[t]]);
    }
    return sum / static_cast<double>(probs.size());
}

/// Exact gradient of the mean NLL of the cached window. The state entering
/// the window is treated as a constant (truncated BPTT).
inline LstmParams backward(const LstmParams& p, const LmConfig& cfg, const ForwardCache& cache,
                           std::span<const TokenId> targets)
{
    const auto H = static_cast<Eigen::Index>(cfg.hidden_dim);
    const auto B = static_cast<Eigen::Index>(cache.lanes);
    const std::size_t L = cfg.num_layers;
    const double scale = 1.0 / static_cast<double>(cache.steps * cache.lanes);
    LstmParams g = LstmParams::zeros_like(p);
    std::vector<Mat> dh_next(L, Mat::Zero(H, B));
    std::vector<Mat> dc_next(L, Mat::Zero(H, B));
    for (std::size_t ti = cache.steps; ti-- > 0;) {
        const auto& lc = cache.layers[ti];
        Mat dlogits = cache.probs[ti];
        for (Eigen::Index b = 0; b < B; ++b) {
            dlogits(targets[ti * cache.lanes + static_cast<std::size_t>(b)], b) -= 1.0;
        }
        dlogits *= scale;
        g.out_w.noalias() += dlogits * lc.back().h.transpose();
        g.out_b += dlogits.rowwise().sum();
        Mat dh = p.out_w.transpose() * dlogits;
        for (std::size_t l = L; l-- > 0;) {
            const auto& c = lc[l];
            const auto& lp = p.layers[l];
            auto& gl = g.layers[l];
            dh += dh_next[l];
            Mat dz;
            if (cfg.cell == CellType::Lstm) {
                const auto i = c.act.topRows(H).array();
                const auto f = c.act.middleRows(H, H).array();
                const auto gg = c.act.middleRows(2 * H, H).array();
                const auto o = c.act.bottomRows(H).array();
                const auto tc = c.tanh_c.array();
                Eigen::ArrayXXd dc = dh.array() * o * (1.0 - tc.square()) + dc_next[l].array();
                dz.resize(4 * H, B);
                dz.topRows(H) = (dc * gg * i * (1.0 - i)).matrix();
                dz.middleRows(H, H) = (dc * c.c_prev.array() * f * (1.0 - f)).matrix();
                dz.middleRows(2 * H, H) = (dc * i * (1.0 - gg.square())).matrix();
                dz.bottomRows(H) = (dh.array() * tc * o * (1.0 - o)).matrix();
                dc_next[l] = (dc * f).matrix();
            } else {
                dz = (dh.array() * (1.0 - c.h.array().square())).matrix();
            }
            gl.w_in.noalias() += dz * c.x.transpose();
            gl.w_rec.noalias() += dz * c.h_prev.transpose();
            gl.bias += dz.rowwise().sum();
            dh_next[l].noalias() = lp.w_rec.transpose() * dz;
            Mat dx = lp.w_in.transpose() * dz;
            if (c.mask.size() != 0) {
                dx = dx.cwiseProduct(c.mask);
            }
            if (l > 0) {
                dh = std::move(dx);
            } else {
                for (Eigen::Index b = 0; b < B; ++b) {
                    g.embedding.row(cache.inputs[ti * cache.lanes + static_cast<std::size_t>(b)]) += dx.col(b).transpose();
                }
            }
        }
        if (cfg.reset_at_eos) {
            for (Eigen::Index b = 0; b < B; ++b) {
                if (cache.inputs[ti * cache.lanes + static_cast<std::size_t>(b)] == kEosId) {
                    for (std::size_t l = 0; l < L; ++l) {
                        dh_next[l].col(b).setZero();
                        dc_next[l].col(b).setZero();
                    }
                }
            }
        }
    }
    return g;
}

inline double grad_norm(const LstmParams& g)
{
    double sq = 0.0;
    g.for_each([&sq](const std::string&, const Mat& m) { sq += m.squaredNorm(); });
    return std::sqrt(sq);
}

/// Rescales gradients so their global L2 norm is at most max_norm.
inline void clip_grad_norm(LstmParams& g, double max_norm)
{
    if (max_norm <= 0.0) {
        return;
    }
    const double n = grad_norm(g);
    if (n > max_norm) {
        const double f = max_norm / n;
        g.for_each([f](const std::string&, Mat& m) { m *= f; });
    }
}

inline void sgd_update(LstmParams& p, const LstmParams& g, double lr)
{
    std::vector<const Mat*> grads;
    g.for_each([&grads](const std::string&, const Mat& m) { grads.push_back(&m); });
    std::size_t k = 0;
    p.for_each([&](const std::string&, Mat& m) { m.noalias() -= lr * *grads[k++]; });
}

struct AdamState {
    LstmParams m;
    LstmParams v;
    std::size_t step = 0;

    static AdamState for_params(const LstmParams& p) { return {LstmParams::zeros_like(p), LstmParams::zeros_like(p), 0}; }
};

/// Adam with bias correction: m = b1 m + (1-b1) g, v = b2 v + (1-b2) g^2,
/// p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
inline void adam_update(LstmParams& p, const LstmParams& g, AdamState& st, double lr, double b1 = 0.9,
                        double b2 = 0.999, double eps = 1e-8)
{
    ++st.step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    std::vector<const Mat*> gs;
    std::vector<Mat*> ms;
    std::vector<Mat*> vs;
    g.for_each([&gs](const std::string&, const Mat& m) { gs.push_back(&m); });
    st.m.for_each([&ms](const std::string&, Mat& m) { ms.push_back(&m); });
    st.v.for_each([&vs](const std::string&, Mat& m) { vs.push_back(&m); });
    std::size_t k = 0;
    p.for_each([&](const std::string&, Mat& w) {
        const Mat& gr = *gs[k];
        Mat& m = *ms[k];
        Mat& v = *vs[k];
        m = b1 * m + (1.0 - b1) * gr;
        v = b2 * v + (1.0 - b2) * gr.cwiseProduct(gr);
        w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
        ++k;
    });
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;  // tensor name and entry of the largest error
    std::size_t checked = 0;
};

/// Compares backward() with central differences of the window loss for
/// every parameter entry. Dropout masks, if any, are replayed from
/// `dropout_seed` on every evaluation. The relative error of an entry is
/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose gradient is
/// near zero from being judged against rounding noise: with loss ~ 2 and
/// eps = 1e-5 a central difference is only good to ~4e-11 absolute.
inline GradCheckResult gradient_check(const LstmParams& p, const LmConfig& cfg, std::span<const TokenId> inputs,
                                      std::size_t lanes, std::span<const TokenId> targets, const LstmState& initial,
                                      double eps = 1e-5, std::uint64_t dropout_seed = 0, double floor = 1e-6)
{
    auto loss = [&](const LstmParams& q) {
        LstmState s = initial;
        Rng r(dropout_seed);
        const auto cache = forward(q, cfg, inputs, lanes, s, cfg.dropout_rate > 0.0 ? &r : nullptr);
        return nll_loss(cache.probs, targets);
    };
    LstmState s = initial;
    Rng r(dropout_seed);
    const auto cache = forward(p, cfg, inputs, lanes, s, cfg.dropout_rate > 0.0 ? &r : nullptr);
    const LstmParams analytic = backward(p, cfg, cache, targets);
    std::vector<const Mat*> grads;
    analytic.for_each([&grads](const std::string&, const Mat& m) { grads.push_back(&m); });
    LstmParams probe = p;
    GradCheckResult out;
    std::size_t k = 0;
    probe.for_each([&](const std::string& name, Mat& m) {
        const Mat& g = *grads[k++];
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const double orig = m.data()[i];
            m.data()[i] = orig + eps;
            const double up = loss(probe);
            m.data()[i] = orig - eps;
            const double down = loss(probe);
            m.data()[i] = orig;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = g.data()[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            ++out.checked;
            if (rel > out.max_rel_error) {
                out.max_rel_error = rel;
                out.worst = name + "[" + std::to_string(i) + "]";
            }
        }
    });
    return out;
}

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double train_nll = 0.0;
    double valid_nll = 0.0;
    double wall_seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
    std::size_t best_epoch = 0;  // 1-based, 0 if no epoch ran
};

class LstmModel : public LanguageModel {
public:
    LstmModel() = default;
    LstmModel(LmConfig config, LstmParams params, std::uint64_t vocab_hash = 0)
        : config_(std::move(config)), params_(std::move(params)), vocab_hash_(vocab_hash)
    {
    }

    const LmConfig& config() const noexcept { return config_; }
    const LstmParams& params() const noexcept { return params_; }
    LstmParams& params() noexcept { return params_; }
    std::uint64_t vocab_hash() const noexcept { return vocab_hash_; }
    void set_vocab_hash(std::uint64_t h) noexcept { vocab_hash_ = h; }

    std::size_t vocab_size() const override { return config_.vocab_size; }

    /// One distribution per position: probs[t] = p(x_t | x_1..x_{t-1}),
    /// computed from the zero state with <EOS> as the first input.
    ForwardCache forward_sequence(std::span<const TokenId> ids) const
    {
        std::vector<TokenId> inputs;
        inputs.reserve(ids.size());
        inputs.push_back(kEosId);
        if (!ids.empty()) {
            inputs.insert(inputs.end(), ids.begin(), ids.end() - 1);
        }
        auto state = LstmState::zeros(config_);
        return forward(params_, config_, inputs, 1, state);
    }

    /// Consumes `ids` from (state, previous input), returning their summed
    /// log-probability. State and previous input are advanced.
    double score_continue(std::span<const TokenId> ids, LstmState& state, TokenId& previous) const
    {
        double total = 0.0;
        for (TokenId id : ids) {
            const Mat x = detail::gather_embeddings(params_, std::span<const TokenId>(&previous, 1));
            detail::reset_lanes(config_, state, std::span<const TokenId>(&previous, 1));
            detail::step_layers(params_, config_, x, state, nullptr, nullptr);
            total += log_softmax_at(state.h.back(), id, 0);
            previous = id;
        }
        return total;
    }

    double score_sequence(std::span<const TokenId> ids) const override
    {
        auto state = LstmState::zeros(config_);
        TokenId prev = kEosId;
        return score_continue(ids, state, prev);
    }

    ProbVector next_token_dist(std::span<const TokenId> prefix) const override
    {
        auto state = LstmState::zeros(config_);
        TokenId prev = kEosId;
        score_continue(prefix, state, prev);
        const Mat x = detail::gather_embeddings(params_, std::span<const TokenId>(&prev, 1));
        detail::reset_lanes(config_, state, std::span<const TokenId>(&prev, 1));
        detail::step_layers(params_, config_, x, state, nullptr, nullptr);
        Mat logits = params_.out_w * state.h.back() + params_.out_b;
        detail::check_finite(logits, "logits");
        const Mat probs = detail::softmax_columns(logits);
        return ProbVector(probs.data(), probs.data() + probs.rows());
    }

    /// Runs the shared prefix once, then scores all continuations of equal
    /// length as parallel lanes (continuations of other lengths are grouped).
    std::vector<double> score_continuations(std::span<const TokenId> prefix,
                                            const std::vector<std::vector<TokenId>>& continuations) const override
    {
        std::vector<double> out(continuations.size(), 0.0);
        auto state = LstmState::zeros(config_);
        TokenId prev = kEosId;
        const double base = score_continue(prefix, state, prev);
        std::map<std::size_t, std::vector<std::size_t>> by_length;
        for (std::size_t i = 0; i < continuations.size(); ++i) {
            by_length[continuations[i].size()].push_back(i);
        }
        for (const auto& [len, idx] : by_length) {
            const std::size_t B = idx.size();
            auto lanes = state.broadcast(B);
            std::vector<TokenId> inputs(B, prev);
            std::vector<double> acc(B, base);
            for (std::size_t t = 0; t < len; ++t) {
                const Mat x = detail::gather_embeddings(params_, inputs);
                detail::reset_lanes(config_, lanes, inputs);
                detail::step_layers(params_, config_, x, lanes, nullptr, nullptr);
                Mat logits = params_.out_w * lanes.h.back();
                logits.colwise() += params_.out_b.col(0);
                detail::check_finite(logits, "logits");
                for (std::size_t b = 0; b < B; ++b) {
                    const TokenId target = continuations[idx[b]][t];
                    const auto col = logits.col(static_cast<Eigen::Index>(b));
                    const double m = col.maxCoeff();
                    acc[b] += col(target) - m - std::log((col.array() - m).exp().sum());
                    inputs[b] = target;
                }
            }
            for (std::size_t b = 0; b < B; ++b) {
                out[idx[b]] = acc[b];
            }
        }
        return out;
    }

private:
    double log_softmax_at(const Mat& h_top, TokenId id, Eigen::Index lane) const
    {
        Eigen::VectorXd logits = params_.out_w * h_top.col(lane) + params_.out_b.col(0);
        detail::check_finite(logits, "logits");
        if (id >= static_cast<TokenId>(logits.size())) {
            throw Error(ErrorCode::UnknownId, "token id " + std::to_string(id) + " outside vocabulary");
        }
        const double m = logits.maxCoeff();
        return logits(id) - m - std::log((logits.array() - m).exp().sum());
    }

    LmConfig config_;
    LstmParams params_;
    std::uint64_t vocab_hash_ = 0;
};

namespace detail {

/// Lays a token stream out as `lanes` contiguous lanes. Returns the lane
/// length in predictions (each lane has one extra token for its last target).
inline std::size_t lane_length(std::size_t stream_size, std::size_t lanes)
{
    return stream_size <= 1 ? 0 : (stream_size - 1) / lanes;
}

/// <EOS> followed by every sequence in order (sequences carry their own
/// <EOS> terminators).
inline std::vector<TokenId> pack_stream(std::span<const EncodedSequence> seqs)
{
    std::vector<TokenId> stream{kEosId};
    for (const auto& s : seqs) {
        stream.insert(stream.end(), s.begin(), s.end());
    }
    return stream;
}

struct Window {
    std::vector<TokenId> inputs;
    std::vector<TokenId> targets;
};

inline Window make_window(const std::vector<TokenId>& stream, std::size_t lanes, std::size_t lane_len, std::size_t start,
                          std::size_t len)
{
    Window w;
    w.inputs.resize(len * lanes);
    w.targets.resize(len * lanes);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t b = 0; b < lanes; ++b) {
            const std::size_t pos = b * lane_len + start + t;
            w.inputs[t * lanes + b] = stream[pos];
            w.targets[t * lanes + b] = stream[pos + 1];
        }
    }
    return w;
}

}  // namespace detail

/// Mean NLL of a packed stream with state carried across windows, no dropout.
inline double evaluate_stream(const LstmModel& model, std::span<const EncodedSequence> seqs, std::size_t lanes)
{
    const auto& cfg = model.config();
    const auto stream = detail::pack_stream(seqs);
    lanes = std::max<std::size_t>(1, std::min(lanes, stream.size() - 1));
    const std::size_t lane_len = detail::lane_length(stream.size(), lanes);
    if (lane_len == 0) {
        return 0.0;
    }
    auto state = LstmState::zeros(cfg, lanes);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t start = 0; start < lane_len; start += cfg.bptt_len) {
        const std::size_t len = std::min(cfg.bptt_len, lane_len - start);
        const auto w = detail::make_window(stream, lanes, lane_len, start, len);
        const auto cache = forward(model.params(), cfg, w.inputs, lanes, state);
        sum += nll_loss(cache.probs, w.targets) * static_cast<double>(w.targets.size());
        n += w.targets.size();
    }
    return sum / static_cast<double>(n);
}

struct TrainResult {
    LstmModel model;  // parameters of the best validation epoch
    TrainLog log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Truncated-BPTT training. The training lines are concatenated into one
/// stream, split into batch_size contiguous lanes and cut into bptt_len
/// windows; state carries across windows within an epoch. After every epoch
/// the validation NLL is measured and the best epoch's parameters are kept;
/// training stops after early_stop_patience epochs without improvement.
inline TrainResult train(std::span<const EncodedSequence> train_seqs, std::span<const EncodedSequence> valid_seqs,
                         const LmConfig& cfg, const EpochCallback& on_epoch = {})
{
    cfg.validate();
    if (train_seqs.empty() || valid_seqs.empty()) {
        throw Error(ErrorCode::EmptyTrainingStream, "training and validation splits must be non-empty");
    }
    const auto stream = detail::pack_stream(train_seqs);
    const std::size_t lanes = cfg.batch_size;
    const std::size_t lane_len = detail::lane_length(stream.size(), lanes);
    if (lane_len == 0) {
        throw Error(ErrorCode::InvalidConfig, "training stream shorter than one token per batch lane");
    }
    LstmModel model(cfg, init_params(cfg, cfg.seed));
    LstmParams best = model.params();
    auto adam = AdamState::for_params(model.params());
    Rng dropout(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    TrainLog log;
    double best_valid = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        auto state = LstmState::zeros(cfg, lanes);
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t start = 0; start < lane_len; start += cfg.bptt_len) {
            const std::size_t len = std::min(cfg.bptt_len, lane_len - start);
            const auto w = detail::make_window(stream, lanes, lane_len, start, len);
            const auto cache = forward(model.params(), cfg, w.inputs, lanes, state, &dropout);
            const double loss = nll_loss(cache.probs, w.targets);
            if (!std::isfinite(loss)) {
                throw Error(ErrorCode::DivergedTraining, "loss became non-finite in epoch " + std::to_string(epoch));
            }
            auto g = backward(model.params(), cfg, cache, w.targets);
            clip_grad_norm(g, cfg.clip_norm);
            if (cfg.optimizer == OptimizerKind::Adam) {
                adam_update(model.params(), g, adam, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
            } else {
                sgd_update(model.params(), g, cfg.learning_rate);
            }
            sum += loss * static_cast<double>(w.targets.size());
            n += w.targets.size();
        }
        EpochLog e;
        e.epoch = epoch;
        e.train_nll = sum / static_cast<double>(n);
        try {
            e.valid_nll = evaluate_stream(model, valid_seqs, lanes);
        } catch (const Error& err) {
            if (err.code() == ErrorCode::NonFiniteActivation) {
                throw Error(ErrorCode::DivergedTraining, err.what());
            }
            throw;
        }
        if (!std::isfinite(e.valid_nll) || !std::isfinite(e.train_nll)) {
            throw Error(ErrorCode::DivergedTraining, "loss became non-finite in epoch " + std::to_string(epoch));
        }
        e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.epochs.push_back(e);
        if (on_epoch) {
            on_epoch(e);
        }
        if (e.valid_nll < best_valid) {
            best_valid = e.valid_nll;
            best = model.params();
            log.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience && cfg.early_stop_patience > 0) {
            break;
        }
    }
    return {LstmModel(cfg, std::move(best)), std::move(log)};
}

// ---------------------------------------------------------------------------
// Checkpoint: "AKLM", u32 version, u64 config length + config text, u64
// vocabulary hash, then tensors until end of file, each as u32 name length,
// name, u64 rows, u64 cols, rows*cols float64 in row-major order. All
// integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

inline void put_u64(std::string& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

    bool done() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    std::string_view take(std::size_t n)
    {
        if (bytes_.size() - pos_ < n) {
            throw Error(ErrorCode::BadFormat, "truncated checkpoint");
        }
        const auto out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    std::uint64_t uint(int width)
    {
        const auto b = take(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = width - 1; i >= 0; --i) {
            v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
        }
        return v;
    }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string save_checkpoint(const LstmModel& model)
{
    std::string out = "AKLM";
    detail::put_u32(out, kCheckpointVersion);
    const std::string cfg = model.config().serialize();
    detail::put_u64(out, cfg.size());
    out += cfg;
    detail::put_u64(out, model.vocab_hash());
    model.params().for_each([&out](const std::string& name, const Mat& m) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u64(out, static_cast<std::uint64_t>(m.rows()));
        detail::put_u64(out, static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                std::uint64_t bits = 0;
                const double v = m(r, c);
                std::memcpy(&bits, &v, sizeof bits);
                detail::put_u64(out, bits);
            }
        }
    });
    return out;
}

/// Parses a checkpoint. When `expected_vocab_hash` is given, a checkpoint
/// trained against a different vocabulary is refused.
inline LstmModel load_checkpoint(std::string_view bytes, std::optional<std::uint64_t> expected_vocab_hash = std::nullopt)
{
    detail::ByteReader in(bytes);
    if (in.take(4) != "AKLM") {
        throw Error(ErrorCode::BadFormat, "not an AKLM checkpoint");
    }
    const auto version = static_cast<std::uint32_t>(in.uint(4));
    if (version != kCheckpointVersion) {
        throw Error(ErrorCode::UnsupportedVersion, "checkpoint version " + std::to_string(version));
    }
    const auto cfg_len = in.uint(8);
    const LmConfig cfg = LmConfig::parse(in.take(static_cast<std::size_t>(cfg_len)));
    cfg.validate();
    const std::uint64_t vocab_hash = in.uint(8);
    if (expected_vocab_hash && *expected_vocab_hash != vocab_hash) {
        throw Error(ErrorCode::VocabHashMismatch,
                    "checkpoint vocabulary " + hex64(vocab_hash) + " != served vocabulary " + hex64(*expected_vocab_hash));
    }
    std::map<std::string, Mat> tensors;
    while (!in.done()) {
        const auto name_len = in.uint(4);
        std::string name(in.take(static_cast<std::size_t>(name_len)));
        const auto rows_u = in.uint(8);
        const auto cols_u = in.uint(8);
        if (cols_u != 0 && rows_u > in.remaining() / 8 / cols_u) {
            throw Error(ErrorCode::BadFormat, "tensor '" + name + "' larger than the file");
        }
        const auto rows = static_cast<Eigen::Index>(rows_u);
        const auto cols = static_cast<Eigen::Index>(cols_u);
        Mat m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                const std::uint64_t bits = in.uint(8);
                double v = 0.0;
                std::memcpy(&v, &bits, sizeof v);
                m(r, c) = v;
            }
        }
        tensors[std::move(name)] = std::move(m);
    }
    LstmParams p = init_params(cfg, 0);  // shapes only; every tensor is overwritten
    p.for_each([&tensors](const std::string& name, Mat& m) {
        const auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw Error(ErrorCode::BadFormat, "checkpoint lacks tensor '" + name + "'");
        }
        if (it->second.rows() != m.rows() || it->second.cols() != m.cols()) {
            throw Error(ErrorCode::BadFormat, "tensor '" + name + "' has the wrong shape");
        }
        m = it->second;
    });
    return LstmModel(cfg, std::move(p), vocab_hash);
}

}  // namespace akr
