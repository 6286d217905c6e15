#ifndef DARS_TRAINER_HPP
#define DARS_TRAINER_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dars/config.hpp"
#include "dars/corpus.hpp"
#include "dars/cpo.hpp"
#include "dars/eval.hpp"
#include "dars/flow.hpp"
#include "dars/model.hpp"

namespace dars::trainer {

struct LossWeights {
    double s = 1.0;      // pause cross-entropy
    double d = 1.0;      // log-duration MSE
    double cp = 1.0;     // CPO hinge
    double cfm = 1.0;    // flow matching
    double prior = 1.0;  // ||mel - mu||^2
    double vq = 1.0;     // codebook + commitment
};

struct AblationFlags {
    bool rhythm_on = true;
    bool cpo_on = true;
    bool style_on = true;
};

// Where duration targets come from: MAS against the current mu, or the alignment files.
enum class DurationSource { Mas, Alignment };

struct TrainConfig {
    LossWeights weights;
    cpo::CpoConfig cpo;
    flow::OtCfmConfig otcfm;
    nn::AdamConfig adam;
    int epochs = 30;
    int batch_size = 8;
    std::uint64_t seed = 1;
    corpus::Strategy strategy = corpus::Strategy::ASp;
    AblationFlags flags;
    // L_cp joins the objective once validation pause accuracy reaches this.
    double cpo_warmup_accuracy = 0.6;
    DurationSource duration_source = DurationSource::Alignment;
    // Random window for the flow loss; 0 uses whole utterances.
    int decoder_crop_frames = 0;
    // Normal-speech mean durations; empty means <manifest dir>/normal_table.txt.
    std::filesystem::path normal_table;
    model::ModelConfig model;

    static TrainConfig from_config(const config::KeyValueConfig& cfg);
    // Throws config::ConfigError; returns warnings.
    std::vector<std::string> validate() const;
    // Model config with the ablation flags applied.
    model::ModelConfig effective_model() const;
};

// One named flag preset of the ablation ladder: E5..E9.
TrainConfig apply_preset(TrainConfig base, const std::string& name);
std::vector<std::string> preset_names();

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, std::filesystem::path last_good)
        : std::runtime_error(what), last_good_(std::move(last_good)) {}
    const std::filesystem::path& last_good_checkpoint() const { return last_good_; }

private:
    std::filesystem::path last_good_;
};

class MissingStyleSource : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Everything the loss needs for one utterance, loaded once.
struct PreparedUtterance {
    corpus::UtteranceRecord record;
    Eigen::MatrixXd mel;  // T x D
    alignment::PauseLabelSequence pauses;
    std::vector<int> phone_frames;   // from the alignment file
    std::vector<int> silence_after;  // frames of silence after each phoneme
    int leading_silence = 0;
    std::vector<double> normal_log_d;
    int speaker = -1;
};

PreparedUtterance prepare_utterance(const corpus::UtteranceRecord& record, const model::DarsModel& model,
                                    const cpo::NormalDurationTable& normal);

// Alignment-file duration targets per encoder row (pauses merged into the
// preceding phoneme when `with_pauses` is false).
std::vector<int> alignment_durations(const PreparedUtterance& u, bool with_pauses);

struct LossBreakdown {
    nn::Var total;
    double s = 0, d = 0, cp = 0, cfm = 0, prior = 0, vq = 0;
    double total_value = 0;
    std::vector<int> durations;  // targets used for L_d
    bool cpo_applied = false;
};

// Builds the full objective for one utterance on `tape`. The rng supplies the
// flow noise, time and crop offset.
LossBreakdown utterance_losses(nn::Tape& tape, const model::DarsModel& model, const TrainConfig& cfg,
                               const PreparedUtterance& u, nn::Rng& rng, bool cpo_active);

// Fraction of phoneme positions whose argmax pause class matches the label.
double pause_accuracy(const model::DarsModel& model, const std::vector<PreparedUtterance>& utts);

struct StepLog {
    std::string group;
    int epoch = 0;
    long step = 0;
    double s = 0, d = 0, cp = 0, cfm = 0, prior = 0, vq = 0, total = 0;
    double grad_norm = 0;
    bool cpo_active = false;
};

std::string format_log_header();
std::string format_log_line(const StepLog& log);

struct GroupResult {
    std::string group_key;
    std::unique_ptr<model::DarsModel> model;
    std::vector<StepLog> log;
    std::filesystem::path checkpoint;  // empty when not written
};

// Trains one group on its train split; the valid split drives the CPO warm-up.
// With a non-empty out_dir a last-good checkpoint is kept for divergence aborts.
GroupResult train_group(const TrainConfig& cfg, const corpus::TrainingGroup& group,
                        const cpo::NormalDurationTable& normal, const std::filesystem::path& out_dir = {});

// Groups the manifest by cfg.strategy, trains every group and writes
// <out>/<strategy>_<group>.ckpt plus <out>/train_log.tsv.
std::vector<GroupResult> train(const TrainConfig& cfg, const std::filesystem::path& manifest,
                               const std::filesystem::path& out_dir);

struct SynthesisRequest {
    std::vector<int> tokens;
    std::optional<corpus::MelSpectrogram> reference;
    std::optional<std::string> speaker;
    std::uint64_t seed = 0;
    int n_steps = 0;  // 0 uses the default step count
    // Teacher forcing: ground-truth pause classes (per phoneme) and/or frame
    // counts (per encoder row) replace the predictions.
    std::optional<std::vector<int>> forced_pauses;
    std::optional<std::vector<int>> forced_durations;
};

struct SynthesisResult {
    corpus::MelSpectrogram mel;
    std::vector<int> pause_classes;
    std::vector<int> durations;  // per encoder row
    std::vector<rhythm::RowTag> tags;
};

SynthesisResult synthesize(const model::DarsModel& model, const SynthesisRequest& req,
                           const flow::OtCfmConfig& cfg = {});

std::vector<int> parse_token_ids(const std::string& text);

// -----------------------------------------------------------------------------
// Toy-scale ablation experiment

struct ExperimentConfig {
    TrainConfig base;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    int n_utts = 300;
    corpus::ToyCorpusConfig corpus;
    std::vector<std::string> rows = {"E5", "E6", "E7", "E8", "E9"};
    std::vector<corpus::Strategy> strategies = {corpus::Strategy::ASp, corpus::Strategy::DSpG,
                                                corpus::Strategy::SSp};
    // Rows evaluated on every strategy; the others only on strategies.front().
    std::vector<std::string> full_grid_rows = {"E9"};
    std::uint64_t synth_seed = 1234;
    std::filesystem::path work_dir;  // empty: <temp dir>/dars_experiment

    static ExperimentConfig from_config(const config::KeyValueConfig& cfg);
};

struct ExperimentCell {
    std::string row;
    corpus::Strategy strategy = corpus::Strategy::ASp;
    std::vector<eval::EvalReport> per_seed;
    eval::EvalReport mean;  // per-group and overall averaged over seeds
};

struct ExperimentResult {
    std::vector<ExperimentCell> cells;
    const ExperimentCell* find(const std::string& row, corpus::Strategy s) const;
    // Overall MCD table, rows x strategies.
    std::string render() const;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg);

// Validation MCD of trained group models: each validation utterance is
// synthesized by the model of its group with its own mel as style reference.
eval::EvalReport validation_mcd(const std::vector<GroupResult>& models, corpus::Strategy strategy,
                                const std::vector<corpus::ToyUtterance>& valid, std::uint64_t seed,
                                const flow::OtCfmConfig& cfg);

}  // namespace dars::trainer

#endif  // DARS_TRAINER_HPP
