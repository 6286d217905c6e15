#ifndef DARS_FLOW_HPP
#define DARS_FLOW_HPP

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "dars/nn.hpp"

namespace dars::flow {

struct OtCfmConfig {
    double sigma_min = 1e-4;
    int n_euler_steps = 10;
    void validate() const;
};

class NonFiniteField : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// -----------------------------------------------------------------------------
// Conditional mean

struct MuBuilderConfig {
    int hidden = 128;       // width of H_c
    int global_dim = 64;    // A_g
    int local_dim = 32;     // A_l
    int num_speakers = 1;
    int speaker_dim = 16;
    int fused_dim = 128;
    int mel_dim = 80;
};

struct MuBuilder {
    MuBuilderConfig config;
    nn::Embedding speaker_embedding;
    nn::Linear fuse;
    nn::Linear to_mel;

    static MuBuilder create(nn::ParameterStore& store, const MuBuilderConfig& cfg, nn::Rng& rng);
};

struct ConditionalMean {
    nn::Var token_mu;  // L' x D, one row per encoder position
    nn::Var mu;        // T' x D, token_mu rows repeated by duration
    std::vector<int> durations;
};

// Per-position fused representation projected to mel dims (before upsampling).
nn::Var token_means(nn::Tape& tape, const MuBuilder& builder, const nn::Var& H_c,
                    const nn::Var& global_style, const nn::Var& local_style, int speaker);

// Repeats row i durations[i] times; zero durations are clamped to 1.
nn::Var upsample(const nn::Var& rows, std::span<const int> durations);

// speaker < 0 selects a zero speaker embedding.
ConditionalMean build_mu(nn::Tape& tape, const MuBuilder& builder, const nn::Var& H_c,
                         const nn::Var& global_style, const nn::Var& local_style, int speaker,
                         std::span<const int> durations);

// -----------------------------------------------------------------------------
// Vector fields

class VectorField {
public:
    virtual ~VectorField() = default;
    // v(x | mu; t). `t` holds one time for all rows, or one per row where supported.
    virtual nn::Var velocity(nn::Tape& tape, const nn::Var& x, const nn::Var& mu,
                             std::span<const double> t) const = 0;
    nn::Var velocity(nn::Tape& tape, const nn::Var& x, const nn::Var& mu, double t) const {
        return velocity(tape, x, mu, std::span<const double>(&t, 1));
    }
};

// Row-wise MLP over [x, mu, time features]; rows are independent.
class MlpField : public VectorField {
public:
    static MlpField create(nn::ParameterStore& store, const std::string& name, int dim, int cond_dim,
                           int hidden, int time_dim, nn::Rng& rng,
                           nn::Activation act = nn::Activation::Silu);
    nn::Var velocity(nn::Tape& tape, const nn::Var& x, const nn::Var& mu,
                     std::span<const double> t) const override;
    using VectorField::velocity;

private:
    nn::Linear l1_, l2_, out_;
    int time_dim_ = 16;
    nn::Activation act_ = nn::Activation::Silu;
};

struct UNetConfig {
    int mel_dim = 80;
    int channels = 64;
    int time_dim = 16;
    nn::Activation activation = nn::Activation::Silu;
};

// Temporal U-Net: two down blocks, one mid block, two up blocks with skips.
class UNetField : public VectorField {
public:
    static UNetField create(nn::ParameterStore& store, const std::string& name, const UNetConfig& cfg,
                            nn::Rng& rng);
    nn::Var velocity(nn::Tape& tape, const nn::Var& x, const nn::Var& mu,
                     std::span<const double> t) const override;
    using VectorField::velocity;

private:
    struct Block {
        nn::Conv1d conv;
        nn::Linear time_proj;
        nn::LayerNorm norm;
    };
    nn::Var block(nn::Tape& tape, const Block& b, const nn::Var& x, const nn::Var& temb) const;

    UNetConfig cfg_;
    nn::Linear time1_, time2_;
    Block in_, down1_, down2_, mid_, up2_, up1_;
    nn::Linear out_;
    // Per-bin, time-dependent gains on x and mu added to the output.
    nn::Linear gate_x_, gate_mu_;
};

// -----------------------------------------------------------------------------
// OT-CFM

struct CfmPair {
    Eigen::MatrixXd x_t;
    Eigen::MatrixXd u_t;
};

// x_t = (1 - (1 - sigma_min) t) x0 + t x1,  u_t = x1 - (1 - sigma_min) x0
CfmPair ot_cfm_pair(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& x1, double t,
                    const OtCfmConfig& cfg);
// Row r uses time t[r].
CfmPair ot_cfm_pair_rows(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& x1,
                         std::span<const double> t, const OtCfmConfig& cfg);

// mean over elements of (v(x_t | mu; t) - u_t)^2 for the given noise and time(s).
nn::Var cfm_loss(nn::Tape& tape, const VectorField& field, const nn::Var& mu,
                 const Eigen::MatrixXd& x1, const Eigen::MatrixXd& x0, std::span<const double> t,
                 const OtCfmConfig& cfg);
// Samples x0 ~ N(0, I) and one t ~ U(0, 1).
nn::Var cfm_loss(nn::Tape& tape, const VectorField& field, const nn::Var& mu,
                 const Eigen::MatrixXd& x1, nn::Rng& rng, const OtCfmConfig& cfg);

// x <- x + (1/n) v(x | mu; k/n) for k = 0..n-1.
Eigen::MatrixXd euler_integrate(const VectorField& field, const Eigen::MatrixXd& mu,
                                Eigen::MatrixXd x0, int n_steps);
// Starts from standard normal noise drawn from `seed`.
Eigen::MatrixXd euler_sample(const VectorField& field, const Eigen::MatrixXd& mu,
                             const OtCfmConfig& cfg, std::uint64_t seed);

Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, nn::Rng& rng);

}  // namespace dars::flow

#endif  // DARS_FLOW_HPP
