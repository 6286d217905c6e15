#include "dars/rhythm.hpp"

#include <cmath>
#include <stdexcept>

namespace dars::rhythm {

using nn::Mat;
using nn::Tape;
using nn::Var;

PredictorNet PredictorNet::create(nn::ParameterStore& store, const std::string& name, int in,
                                  int filter, int kernel, int out, nn::Rng& rng, bool zero_head) {
    PredictorNet p;
    p.conv1 = nn::Conv1d::create(store, name + ".conv1", in, filter, kernel, rng);
    p.norm1 = nn::LayerNorm::create(store, name + ".norm1", filter);
    p.conv2 = nn::Conv1d::create(store, name + ".conv2", filter, filter, kernel, rng);
    p.norm2 = nn::LayerNorm::create(store, name + ".norm2", filter);
    p.head = nn::Linear::create(store, name + ".head", filter, out, rng, zero_head);
    return p;
}

Var PredictorNet::operator()(Tape& tape, const Var& x) const {
    Var h = norm1(tape, nn::relu(conv1(tape, x)));
    h = norm2(tape, nn::relu(conv2(tape, h)));
    return head(tape, h);
}

RhythmModel RhythmModel::create(nn::ParameterStore& store, const RhythmConfig& c, nn::Rng& rng,
                                bool zero_pause_head) {
    if (c.num_pause_classes < 2) throw std::invalid_argument("need at least two pause classes");
    RhythmModel m;
    m.config = c;
    m.phone_embedding = nn::Embedding::create(store, "rhythm.phone_embedding", c.vocab_size,
                                              c.phone_hidden, rng);
    m.phone_encoder = nn::TransformerEncoder::create(store, "rhythm.phone_encoder", c.phone_layers,
                                                     c.phone_heads, c.phone_hidden, c.phone_filter, rng);
    m.pause_predictor = PredictorNet::create(store, "rhythm.pause_predictor", c.phone_hidden,
                                             c.predictor_filter, c.predictor_kernel,
                                             c.num_pause_classes, rng, zero_pause_head);
    m.pause_embeddings = &store.create("rhythm.pause_embeddings",
                                       nn::gaussian(c.num_pause_classes, c.phone_hidden, 0.3, rng));
    m.aug_input = nn::Linear::create(store, "rhythm.aug_input", c.phone_hidden, c.aug_hidden, rng);
    m.aug_encoder = nn::TransformerEncoder::create(store, "rhythm.aug_encoder", c.aug_layers,
                                                   c.aug_heads, c.aug_hidden, c.aug_filter, rng);
    m.duration_predictor = PredictorNet::create(store, "rhythm.duration_predictor", c.aug_hidden,
                                                c.predictor_filter, c.predictor_kernel, 1, rng, false);
    return m;
}

EncodedSequence encode_phonemes(Tape& tape, const RhythmModel& model, std::span<const int> tokens) {
    if (tokens.empty()) throw std::invalid_argument("encode_phonemes: empty token sequence");
    EncodedSequence E;
    E.hidden = model.phone_encoder(tape, model.phone_embedding(tape, tokens));
    E.tags.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        E.tags.push_back({RowKind::Phoneme, static_cast<int>(i), 0});
    }
    return E;
}

PausePrediction predict_pauses(Tape& tape, const RhythmModel& model, const EncodedSequence& E) {
    return {nn::softmax_rows(model.pause_predictor(tape, E.hidden))};
}

Var pause_cross_entropy(const PausePrediction& pred, const alignment::PauseLabelSequence& labels) {
    const Mat& p = pred.probs.value();
    const auto& s = labels.labels;
    if (static_cast<Eigen::Index>(s.size()) != p.rows()) {
        throw std::invalid_argument("pause_cross_entropy: " + std::to_string(p.rows()) +
                                    " prediction rows vs " + std::to_string(s.size()) + " labels");
    }
    const double n = static_cast<double>(s.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] < 0 || s[i] >= p.cols()) throw std::out_of_range("pause label outside [0, K)");
        loss -= std::log(std::max(p(static_cast<Eigen::Index>(i), s[i]), kLogProbClamp));
    }
    Mat out(1, 1);
    out(0, 0) = loss / n;
    const int ip = pred.probs.id();
    Tape& tape = *pred.probs.tape();
    return tape.record(std::move(out), tape.requires_grad(ip),
                       [ip, s, n](Tape& t, const Mat&, const Mat& g) {
                           const Mat& pv = t.value(ip);
                           Mat gp = Mat::Zero(pv.rows(), pv.cols());
                           for (std::size_t i = 0; i < s.size(); ++i) {
                               const double pi = pv(static_cast<Eigen::Index>(i), s[i]);
                               if (pi > kLogProbClamp) {
                                   gp(static_cast<Eigen::Index>(i), s[i]) = -g(0, 0) / (n * pi);
                               }
                           }
                           t.accumulate(ip, gp);
                       });
}

std::vector<int> argmax_classes(const PausePrediction& pred) {
    const Mat& p = pred.probs.value();
    std::vector<int> out(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        Eigen::Index k;
        p.row(i).maxCoeff(&k);
        out[static_cast<std::size_t>(i)] = static_cast<int>(k);
    }
    return out;
}

EncodedSequence insert_pause_embeddings(Tape& tape, const RhythmModel& model,
                                        const EncodedSequence& E, std::span<const int> classes) {
    const int N = static_cast<int>(E.length());
    if (static_cast<int>(classes.size()) != N) {
        throw std::invalid_argument("insert_pause_embeddings: class count differs from sequence length");
    }
    const int K = static_cast<int>(model.pause_embeddings->value.rows());
    std::vector<int> index;
    EncodedSequence out;
    for (int i = 0; i < N; ++i) {
        index.push_back(i);
        out.tags.push_back(E.tags[static_cast<std::size_t>(i)]);
        const int k = classes[static_cast<std::size_t>(i)];
        if (k < 0 || k >= K) throw std::out_of_range("pause class outside [0, K)");
        if (k > 0) {
            index.push_back(N + k);
            out.tags.push_back({RowKind::Pause, E.tags[static_cast<std::size_t>(i)].index, k});
        }
    }
    if (static_cast<int>(index.size()) == N) {
        out.hidden = E.hidden;
        return out;
    }
    const Var both[] = {E.hidden, tape.param(*model.pause_embeddings)};
    out.hidden = nn::gather_rows(nn::concat_rows(both), index);
    return out;
}

std::vector<int> phoneme_rows(std::span<const RowTag> tags) {
    std::vector<int> rows;
    for (std::size_t r = 0; r < tags.size(); ++r) {
        if (tags[r].kind == RowKind::Phoneme) rows.push_back(static_cast<int>(r));
    }
    return rows;
}

EncodedSequence encode_augmented(Tape& tape, const RhythmModel& model, const EncodedSequence& E_aug) {
    EncodedSequence H;
    H.hidden = model.aug_encoder(tape, model.aug_input(tape, E_aug.hidden));
    H.tags = E_aug.tags;
    return H;
}

DurationPrediction predict_durations(Tape& tape, const RhythmModel& model, const EncodedSequence& H_c) {
    return {model.duration_predictor(tape, H_c.hidden)};
}

Var duration_mse(const DurationPrediction& pred, std::span<const int> target_frames) {
    const Var& p = pred.log_durations;
    if (p.rows() != static_cast<Eigen::Index>(target_frames.size()) || p.cols() != 1) {
        throw std::invalid_argument("duration_mse: length mismatch");
    }
    Mat log_target(p.rows(), 1);
    for (std::size_t i = 0; i < target_frames.size(); ++i) {
        if (target_frames[i] < 1) {
            throw std::domain_error("duration target must be >= 1 frame, got " +
                                    std::to_string(target_frames[i]));
        }
        log_target(static_cast<Eigen::Index>(i), 0) = std::log(static_cast<double>(target_frames[i]));
    }
    return nn::mean(nn::square(p - p.tape()->constant(std::move(log_target))));
}

std::vector<int> log_durations_to_frames(const Eigen::MatrixXd& log_durations) {
    std::vector<int> frames;
    frames.reserve(static_cast<std::size_t>(log_durations.size()));
    for (Eigen::Index i = 0; i < log_durations.size(); ++i) {
        const double d = std::exp(log_durations(i));
        frames.push_back(std::max(1, static_cast<int>(std::lround(std::min(d, 1e6)))));
    }
    return frames;
}

}  // namespace dars::rhythm
