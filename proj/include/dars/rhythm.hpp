#ifndef DARS_RHYTHM_HPP
#define DARS_RHYTHM_HPP

#include <span>
#include <vector>

#include "dars/alignment.hpp"
#include "dars/nn.hpp"

namespace dars::rhythm {

struct RhythmConfig {
    int vocab_size = 12;
    int num_pause_classes = 4;
    // Phoneme encoder (pause-free input).
    int phone_layers = 2;
    int phone_heads = 4;
    int phone_hidden = 64;
    int phone_filter = 128;
    // Pause-augmented encoder.
    int aug_layers = 4;
    int aug_heads = 4;
    int aug_hidden = 128;
    int aug_filter = 256;
    // Pause and duration predictors share this structure.
    int predictor_filter = 64;
    int predictor_kernel = 3;
};

enum class RowKind { Phoneme, Pause };

// Provenance of one row of an encoded sequence. For pause rows `index` is the
// phoneme the pause follows.
struct RowTag {
    RowKind kind = RowKind::Phoneme;
    int index = 0;
    int pause_class = 0;
    bool operator==(const RowTag&) const = default;
};

struct EncodedSequence {
    nn::Var hidden;  // L x H
    std::vector<RowTag> tags;
    Eigen::Index length() const { return hidden.rows(); }
};

struct PausePrediction {
    nn::Var probs;  // N x K, rows sum to one
};

struct DurationPrediction {
    nn::Var log_durations;  // L' x 1, natural log of frames
};

// conv -> relu -> norm -> conv -> relu -> norm -> linear
struct PredictorNet {
    nn::Conv1d conv1;
    nn::LayerNorm norm1;
    nn::Conv1d conv2;
    nn::LayerNorm norm2;
    nn::Linear head;

    static PredictorNet create(nn::ParameterStore& store, const std::string& name, int in,
                               int filter, int kernel, int out, nn::Rng& rng, bool zero_head);
    nn::Var operator()(nn::Tape& tape, const nn::Var& x) const;
};

struct RhythmModel {
    RhythmConfig config;
    nn::Embedding phone_embedding;
    nn::TransformerEncoder phone_encoder;
    PredictorNet pause_predictor;
    nn::Parameter* pause_embeddings = nullptr;  // K x phone_hidden; row 0 unused
    nn::Linear aug_input;
    nn::TransformerEncoder aug_encoder;
    PredictorNet duration_predictor;

    // zero_pause_head starts the pause classifier at uniform predictions.
    static RhythmModel create(nn::ParameterStore& store, const RhythmConfig& config, nn::Rng& rng,
                              bool zero_pause_head = false);
};

EncodedSequence encode_phonemes(nn::Tape& tape, const RhythmModel& model, std::span<const int> tokens);
PausePrediction predict_pauses(nn::Tape& tape, const RhythmModel& model, const EncodedSequence& E);

inline constexpr double kLogProbClamp = 1e-9;

// -(1/N) sum_i log max(p[i, label_i], eps)
nn::Var pause_cross_entropy(const PausePrediction& pred, const alignment::PauseLabelSequence& labels);

std::vector<int> argmax_classes(const PausePrediction& pred);

// After every position i with class k > 0, inserts the learned embedding of class k.
EncodedSequence insert_pause_embeddings(nn::Tape& tape, const RhythmModel& model,
                                        const EncodedSequence& E, std::span<const int> classes);
// Rows of the original sequence, in order.
std::vector<int> phoneme_rows(std::span<const RowTag> tags);

EncodedSequence encode_augmented(nn::Tape& tape, const RhythmModel& model, const EncodedSequence& E_aug);
DurationPrediction predict_durations(nn::Tape& tape, const RhythmModel& model, const EncodedSequence& H_c);

// (1/N') sum_i (log d_i - log_pred_i)^2; targets must be >= 1.
nn::Var duration_mse(const DurationPrediction& pred, std::span<const int> target_frames);

// exp -> round -> clamp(>= 1)
std::vector<int> log_durations_to_frames(const Eigen::MatrixXd& log_durations);

}  // namespace dars::rhythm

#endif  // DARS_RHYTHM_HPP
