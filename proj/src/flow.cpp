#include "dars/flow.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

namespace dars::flow {

using nn::Mat;
using nn::Tape;
using nn::Var;

void OtCfmConfig::validate() const {
    if (!(sigma_min > 0.0 && sigma_min < 1.0)) throw std::invalid_argument("sigma_min must lie in (0, 1)");
    if (n_euler_steps < 1) throw std::invalid_argument("n_euler_steps must be >= 1");
}

// -----------------------------------------------------------------------------
// Conditional mean

MuBuilder MuBuilder::create(nn::ParameterStore& store, const MuBuilderConfig& cfg, nn::Rng& rng) {
    MuBuilder b;
    b.config = cfg;
    b.speaker_embedding = nn::Embedding::create(store, "mu.speaker_embedding",
                                                std::max(cfg.num_speakers, 1), cfg.speaker_dim, rng);
    const int in = cfg.hidden + cfg.global_dim + cfg.local_dim + cfg.speaker_dim;
    b.fuse = nn::Linear::create(store, "mu.fuse", in, cfg.fused_dim, rng);
    b.to_mel = nn::Linear::create(store, "mu.to_mel", cfg.fused_dim, cfg.mel_dim, rng);
    return b;
}

Var token_means(Tape& tape, const MuBuilder& b, const Var& H_c, const Var& global_style,
                const Var& local_style, int speaker) {
    const auto L = static_cast<int>(H_c.rows());
    if (global_style.rows() != 1 || global_style.cols() != b.config.global_dim) {
        throw std::invalid_argument("build_mu: global style must be 1 x G");
    }
    if (local_style.rows() != L || local_style.cols() != b.config.local_dim) {
        throw std::invalid_argument("build_mu: local style must be aligned to H_c");
    }
    const std::vector<int> zeros(static_cast<std::size_t>(L), 0);
    const Var g = nn::gather_rows(global_style, zeros);
    Var spk;
    if (speaker >= 0) {
        const std::vector<int> ids(static_cast<std::size_t>(L), speaker);
        spk = b.speaker_embedding(tape, ids);
    } else {
        spk = tape.constant(Mat::Zero(L, b.config.speaker_dim));
    }
    const Var parts[] = {H_c, g, local_style, spk};
    return b.to_mel(tape, b.fuse(tape, nn::concat_cols(parts)));
}

Var upsample(const Var& rows, std::span<const int> durations) {
    if (static_cast<Eigen::Index>(durations.size()) != rows.rows()) {
        throw std::invalid_argument("upsample: one duration per row required");
    }
    std::vector<int> index;
    for (std::size_t i = 0; i < durations.size(); ++i) {
        int d = durations[i];
        if (d < 1) {
            spdlog::warn("duration {} at position {} clamped to 1 frame", d, i);
            d = 1;
        }
        index.insert(index.end(), static_cast<std::size_t>(d), static_cast<int>(i));
    }
    return nn::gather_rows(rows, index);
}

ConditionalMean build_mu(Tape& tape, const MuBuilder& builder, const Var& H_c, const Var& global_style,
                         const Var& local_style, int speaker, std::span<const int> durations) {
    ConditionalMean out;
    out.token_mu = token_means(tape, builder, H_c, global_style, local_style, speaker);
    out.mu = upsample(out.token_mu, durations);
    for (int d : durations) out.durations.push_back(std::max(d, 1));
    return out;
}

// -----------------------------------------------------------------------------
// Fields

namespace {

Var time_rows(Tape& tape, std::span<const double> t, Eigen::Index rows, int dim) {
    if (t.size() == 1) {
        const std::vector<int> zeros(static_cast<std::size_t>(rows), 0);
        return nn::gather_rows(tape.constant(nn::time_features(t[0], dim)), zeros);
    }
    if (static_cast<Eigen::Index>(t.size()) != rows) {
        throw std::invalid_argument("velocity: need one time or one time per row");
    }
    Mat f(rows, dim);
    for (Eigen::Index r = 0; r < rows; ++r) f.row(r) = nn::time_features(t[static_cast<std::size_t>(r)], dim);
    return tape.constant(std::move(f));
}

}  // namespace

MlpField MlpField::create(nn::ParameterStore& store, const std::string& name, int dim, int cond_dim,
                          int hidden, int time_dim, nn::Rng& rng, nn::Activation act) {
    MlpField f;
    f.time_dim_ = time_dim;
    f.act_ = act;
    f.l1_ = nn::Linear::create(store, name + ".l1", dim + cond_dim + time_dim, hidden, rng);
    f.l2_ = nn::Linear::create(store, name + ".l2", hidden, hidden, rng);
    f.out_ = nn::Linear::create(store, name + ".out", hidden, dim, rng);
    return f;
}

Var MlpField::velocity(Tape& tape, const Var& x, const Var& mu, std::span<const double> t) const {
    const Var parts[] = {x, mu, time_rows(tape, t, x.rows(), time_dim_)};
    Var h = nn::activate(l1_(tape, nn::concat_cols(parts)), act_);
    h = nn::activate(l2_(tape, h), act_);
    return out_(tape, h);
}

UNetField UNetField::create(nn::ParameterStore& store, const std::string& name, const UNetConfig& cfg,
                            nn::Rng& rng) {
    UNetField f;
    f.cfg_ = cfg;
    const int C = cfg.channels;
    f.time1_ = nn::Linear::create(store, name + ".time1", cfg.time_dim, C, rng);
    f.time2_ = nn::Linear::create(store, name + ".time2", C, C, rng);
    auto make = [&](const std::string& n, int in) {
        return Block{nn::Conv1d::create(store, name + "." + n + ".conv", in, C, 3, rng),
                     nn::Linear::create(store, name + "." + n + ".time", C, C, rng),
                     nn::LayerNorm::create(store, name + "." + n + ".norm", C)};
    };
    f.in_ = make("in", 2 * cfg.mel_dim);
    f.down1_ = make("down1", C);
    f.down2_ = make("down2", C);
    f.mid_ = make("mid", C);
    f.up2_ = make("up2", 2 * C);
    f.up1_ = make("up1", 2 * C);
    f.out_ = nn::Linear::create(store, name + ".out", C, cfg.mel_dim, rng);
    f.gate_x_ = nn::Linear::create(store, name + ".gate_x", C, cfg.mel_dim, rng);
    f.gate_mu_ = nn::Linear::create(store, name + ".gate_mu", C, cfg.mel_dim, rng);
    return f;
}

Var UNetField::block(Tape& tape, const Block& b, const Var& x, const Var& temb) const {
    const Var h = nn::add_row(b.conv(tape, x), b.time_proj(tape, temb));
    return nn::activate(b.norm(tape, h), cfg_.activation);
}

namespace {

// Averages row pairs; an odd last row is kept as is.
Var pool2(const Var& x) {
    const auto n = static_cast<int>(x.rows());
    const int m = (n + 1) / 2;
    std::vector<int> even(static_cast<std::size_t>(m)), odd(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        even[static_cast<std::size_t>(i)] = 2 * i;
        odd[static_cast<std::size_t>(i)] = std::min(2 * i + 1, n - 1);
    }
    return (nn::gather_rows(x, even) + nn::gather_rows(x, odd)) * 0.5;
}

Var unpool2(const Var& x, Eigen::Index rows) {
    std::vector<int> idx(static_cast<std::size_t>(rows));
    for (Eigen::Index i = 0; i < rows; ++i) idx[static_cast<std::size_t>(i)] = static_cast<int>(i / 2);
    return nn::gather_rows(x, idx);
}

}  // namespace

Var UNetField::velocity(Tape& tape, const Var& x, const Var& mu, std::span<const double> t) const {
    if (t.size() != 1) throw std::invalid_argument("UNetField takes a single time per call");
    if (x.rows() != mu.rows() || x.cols() != cfg_.mel_dim || mu.cols() != cfg_.mel_dim) {
        throw std::invalid_argument("UNetField: x and mu must both be T x mel_dim");
    }
    const Var temb = time2_(tape, nn::silu(time1_(tape, tape.constant(nn::time_features(t[0], cfg_.time_dim)))));
    const Var in_parts[] = {x, mu};
    const Var h0 = block(tape, in_, nn::concat_cols(in_parts), temb);
    const Var skip1 = block(tape, down1_, h0, temb);
    const Var skip2 = block(tape, down2_, pool2(skip1), temb);
    const Var mid = block(tape, mid_, pool2(skip2), temb);
    const Var up2_parts[] = {unpool2(mid, skip2.rows()), skip2};
    const Var u2 = block(tape, up2_, nn::concat_cols(up2_parts), temb);
    const Var up1_parts[] = {unpool2(u2, skip1.rows()), skip1};
    const Var u1 = block(tape, up1_, nn::concat_cols(up1_parts), temb);
    const std::vector<int> every_row(static_cast<std::size_t>(x.rows()), 0);
    const Var gx = nn::gather_rows(gate_x_(tape, temb), every_row);
    const Var gm = nn::gather_rows(gate_mu_(tape, temb), every_row);
    return out_(tape, u1) + nn::hadamard(gx, x) + nn::hadamard(gm, mu);
}

// -----------------------------------------------------------------------------
// OT-CFM

CfmPair ot_cfm_pair(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& x1, double t, const OtCfmConfig& cfg) {
    return ot_cfm_pair_rows(x0, x1, std::span<const double>(&t, 1), cfg);
}

CfmPair ot_cfm_pair_rows(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& x1, std::span<const double> t,
                         const OtCfmConfig& cfg) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) {
        throw std::invalid_argument("ot_cfm_pair: x0 and x1 shapes differ");
    }
    if (t.size() != 1 && static_cast<Eigen::Index>(t.size()) != x0.rows()) {
        throw std::invalid_argument("ot_cfm_pair: need one time or one per row");
    }
    const double s = 1.0 - cfg.sigma_min;
    CfmPair p;
    p.x_t.resize(x0.rows(), x0.cols());
    for (Eigen::Index r = 0; r < x0.rows(); ++r) {
        const double tr = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(r)];
        if (tr < 0.0 || tr > 1.0) throw std::invalid_argument("ot_cfm_pair: t outside [0, 1]");
        p.x_t.row(r) = (1.0 - s * tr) * x0.row(r) + tr * x1.row(r);
    }
    p.u_t = x1 - s * x0;
    return p;
}

Var cfm_loss(Tape& tape, const VectorField& field, const Var& mu, const Eigen::MatrixXd& x1,
             const Eigen::MatrixXd& x0, std::span<const double> t, const OtCfmConfig& cfg) {
    if (mu.rows() != x1.rows()) throw std::invalid_argument("cfm_loss: mu and target lengths differ");
    CfmPair p = ot_cfm_pair_rows(x0, x1, t, cfg);
    const Var v = field.velocity(tape, tape.constant(std::move(p.x_t)), mu, t);
    return nn::mean(nn::square(v - tape.constant(std::move(p.u_t))));
}

Var cfm_loss(Tape& tape, const VectorField& field, const Var& mu, const Eigen::MatrixXd& x1, nn::Rng& rng,
             const OtCfmConfig& cfg) {
    const Eigen::MatrixXd x0 = standard_normal(x1.rows(), x1.cols(), rng);
    const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return cfm_loss(tape, field, mu, x1, x0, std::span<const double>(&t, 1), cfg);
}

Eigen::MatrixXd euler_integrate(const VectorField& field, const Eigen::MatrixXd& mu, Eigen::MatrixXd x,
                                int n_steps) {
    if (n_steps < 1) throw std::invalid_argument("n_euler_steps must be >= 1");
    const double h = 1.0 / n_steps;
    for (int k = 0; k < n_steps; ++k) {
        Tape tape;
        const double t = static_cast<double>(k) / n_steps;
        const Var v = field.velocity(tape, tape.constant(x), tape.constant(mu), t);
        if (!v.value().allFinite()) {
            throw NonFiniteField("vector field produced non-finite values at step " + std::to_string(k) +
                                 " (t=" + std::to_string(t) + ", |x|max=" +
                                 std::to_string(x.cwiseAbs().maxCoeff()) + ")");
        }
        x += h * v.value();
    }
    return x;
}

Eigen::MatrixXd euler_sample(const VectorField& field, const Eigen::MatrixXd& mu, const OtCfmConfig& cfg,
                             std::uint64_t seed) {
    cfg.validate();
    nn::Rng rng(seed);
    return euler_integrate(field, mu, standard_normal(mu.rows(), mu.cols(), rng), cfg.n_euler_steps);
}

Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, nn::Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
    return m;
}

}  // namespace dars::flow
