#ifndef DARS_STYLE_HPP
#define DARS_STYLE_HPP

#include <span>
#include <vector>

#include "dars/nn.hpp"

namespace dars::style {

struct StyleConfig {
    int mel_dim = 80;
    int ref_channels = 32;   // reference encoder width
    int num_tokens = 8;      // global style tokens
    int token_heads = 4;
    int global_dim = 64;     // G
    int local_dim = 32;      // H of local style rows
    int codebook_size = 16;
    int downsample = 4;
    int attn_dim = 32;
    double commitment = 0.25;
};

// Global style tokens: a reference encoder summary attends over a learned token bank.
struct GlobalStyleEncoder {
    nn::Conv1d ref_conv1;
    nn::Conv1d ref_conv2;
    nn::Linear query;
    nn::Linear key;
    nn::Parameter* tokens = nullptr;  // num_tokens x G
    int heads = 4;

    static GlobalStyleEncoder create(nn::ParameterStore& store, const StyleConfig& cfg, nn::Rng& rng);
};

struct GlobalStyle {
    nn::Var vector;  // 1 x G
    // heads x num_tokens attention weights
    Eigen::MatrixXd weights;
};

GlobalStyle global_style(nn::Tape& tape, const GlobalStyleEncoder& enc, const Eigen::MatrixXd& mel);

struct Codebook {
    nn::Parameter* entries = nullptr;  // C x H
};

struct Quantized {
    Eigen::VectorXd vector;
    int index = 0;
};

// Nearest entry in squared Euclidean distance; ties go to the lowest index.
Quantized vq_quantize(const Eigen::VectorXd& z, const Eigen::MatrixXd& codebook);

struct LocalStyleEncoder {
    nn::Conv1d conv1;
    nn::Conv1d conv2;
    nn::Linear proj;
    Codebook codebook;
    int downsample = 4;
    double commitment = 0.25;

    static LocalStyleEncoder create(nn::ParameterStore& store, const StyleConfig& cfg, nn::Rng& rng);
};

struct LocalStyle {
    nn::Var frames;  // F x H, straight-through quantized rows
    nn::Var pre_quantization;
    std::vector<int> codebook_indices;
    nn::Var vq_loss;  // codebook + commitment * commitment loss
};

// ceil(T / downsample) quantized rows.
LocalStyle local_style_encode(nn::Tape& tape, const LocalStyleEncoder& enc, const Eigen::MatrixXd& mel);

// Forward returns `quantized` exactly; gradient passes to `z` unchanged.
nn::Var straight_through(const nn::Var& z, const Eigen::MatrixXd& quantized);

// Averages groups of `factor` consecutive rows; the last group may be partial.
Eigen::MatrixXd pooling_matrix(Eigen::Index rows, int factor);

struct StyleAligner {
    nn::Linear query;  // from H_c
    nn::Linear key;    // from style rows

    static StyleAligner create(nn::ParameterStore& store, int hidden, const StyleConfig& cfg, nn::Rng& rng);
};

struct AlignedStyle {
    nn::Var frames;     // L' x H
    nn::Var attention;  // L' x F
};

AlignedStyle align_local_style(nn::Tape& tape, const StyleAligner& aligner, const nn::Var& style,
                               const nn::Var& H_c);

struct StyleModel {
    StyleConfig config;
    GlobalStyleEncoder global;
    LocalStyleEncoder local;
    StyleAligner aligner;

    static StyleModel create(nn::ParameterStore& store, const StyleConfig& cfg, int hidden, nn::Rng& rng);
};

// Per-speaker fallback when no reference mel is given at synthesis.
struct SpeakerStyleStats {
    Eigen::RowVectorXd global_mean;
    std::vector<double> code_histogram;
    int count = 0;

    void add(const Eigen::RowVectorXd& global, std::span<const int> codes, int codebook_size);
    int most_frequent_code() const;
};

}  // namespace dars::style

#endif  // DARS_STYLE_HPP
