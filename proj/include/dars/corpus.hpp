#ifndef DARS_CORPUS_HPP
#define DARS_CORPUS_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dars::corpus {

// Raised for malformed files; carries the offending line when known.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, int line = 0)
        : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
          line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Severity { Severe, ModSev, Moderate, Mild, Control };
enum class Split { Train, Valid, Eval };
enum class Strategy { ASp, SSp, DSpG };

// Canonical order of the dysarthric severities, most to least severe.
inline constexpr std::array<Severity, 4> kDysarthricSeverities = {
    Severity::Severe, Severity::ModSev, Severity::Moderate, Severity::Mild};

std::string to_string(Severity s);
std::string to_string(Split s);
std::string to_string(Strategy s);
// Table column header, e.g. "Mod.-Sev.".
std::string display_name(Severity s);
Severity parse_severity(const std::string& s);
Split parse_split(const std::string& s);
Strategy parse_strategy(const std::string& s);

struct UtteranceRecord {
    std::string utt_id;
    std::string speaker_id;
    Severity severity = Severity::Mild;
    std::vector<int> phonemes;
    std::filesystem::path mel_path;
    std::filesystem::path alignment_path;
    Split split = Split::Train;
};

// Tab-separated, one record per line. Relative mel/alignment paths are resolved
// against the manifest directory.
std::vector<UtteranceRecord> load_manifest(const std::filesystem::path& path);
std::vector<UtteranceRecord> parse_manifest(const std::string& content,
                                            const std::filesystem::path& base_dir = {});
void save_manifest(const std::filesystem::path& path, const std::vector<UtteranceRecord>& records,
                   const std::filesystem::path& relative_to = {});
// Checks utt_id uniqueness, per-speaker severity consistency and non-empty phonemes.
void validate_records(const std::vector<UtteranceRecord>& records);

struct TrainingGroup {
    Strategy strategy = Strategy::ASp;
    std::string group_key;  // "all", a speaker id, or a severity name
    std::vector<UtteranceRecord> records;
};

// Partitions the dysarthric records; Control speakers are dropped.
std::vector<TrainingGroup> group_records(const std::vector<UtteranceRecord>& records,
                                         Strategy strategy);

// -----------------------------------------------------------------------------
// Mel spectrograms (MEL1 binary format)

struct MelSpectrogram {
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> frames;  // T x D
    double frame_shift_s = 0.01;

    Eigen::Index num_frames() const { return frames.rows(); }
    Eigen::Index dim() const { return frames.cols(); }
    Eigen::MatrixXd as_double() const { return frames.cast<double>(); }
    static MelSpectrogram from_double(const Eigen::MatrixXd& m, double frame_shift_s);
};

void save_mel(const std::filesystem::path& path, const MelSpectrogram& mel);
MelSpectrogram load_mel(const std::filesystem::path& path);
std::string encode_mel(const MelSpectrogram& mel);
MelSpectrogram decode_mel(const std::string& bytes);

// -----------------------------------------------------------------------------
// Alignment files

enum class TokenKind { Phoneme, Silence };

struct AlignmentToken {
    TokenKind kind = TokenKind::Phoneme;
    int token_id = 0;
    int start_frame = 0;
    int end_frame = 0;  // exclusive
    int frames() const { return end_frame - start_frame; }
};

std::vector<AlignmentToken> parse_alignment(const std::string& content);
std::vector<AlignmentToken> load_alignment(const std::filesystem::path& path);
std::string format_alignment(const std::vector<AlignmentToken>& tokens);
void save_alignment(const std::filesystem::path& path, const std::vector<AlignmentToken>& tokens);

// -----------------------------------------------------------------------------
// Synthetic pseudo-dysarthric corpus

struct SeverityProfile {
    double stretch = 1.0;           // multiplicative duration stretch
    double pause_prob = 0.0;        // after a boundary phoneme
    double tremor_amp = 0.0;        // local energy modulation
    bool force_long_pause = false;  // no long pause drawn: one goes before the final phoneme
};

struct ToyCorpusConfig {
    int vocab_size = 12;
    int mel_dim = 80;
    double frame_shift_s = 0.01;
    int min_phonemes = 5;
    int max_phonemes = 9;
    int min_normal_frames = 3;
    int max_normal_frames = 8;
    // Phonemes with id % boundary_period == boundary_period - 1 act as word ends;
    // pauses follow them with the severity's pause_prob, other gaps with
    // pause_prob * off_boundary_scale. The boundary phoneme fixes the pause
    // length range: short, medium, long for (id / boundary_period) % 3 = 0, 1, 2.
    int boundary_period = 4;
    double off_boundary_scale = 0.05;
    // Pause lengths in frames; boundaries match the default labeling thresholds
    // (0.15 s, 0.40 s) at 10 ms frames.
    int short_pause_min = 4, short_pause_max = 12;
    int medium_pause_min = 18, medium_pause_max = 34;
    int long_pause_min = 45, long_pause_max = 60;
    double noise_std = 0.05;
    double utt_style_std = 0.35;
    double valid_fraction = 0.1;
    double eval_fraction = 0.0;
    // Speaker ids with their severity; defaults follow the TORGO dysarthric roster.
    std::vector<std::pair<std::string, Severity>> speakers = {
        {"F01", Severity::Severe},   {"M01", Severity::Severe}, {"M02", Severity::Severe},
        {"M04", Severity::Severe},   {"M05", Severity::ModSev}, {"F03", Severity::Moderate},
        {"F04", Severity::Mild},     {"M03", Severity::Mild}};
    std::map<Severity, SeverityProfile> profiles = {
        {Severity::Severe, {1.8, 0.9, 0.6, true}},
        {Severity::ModSev, {1.55, 0.8, 0.45}},
        {Severity::Moderate, {1.3, 0.7, 0.3}},
        {Severity::Mild, {1.1, 0.6, 0.15}},
        {Severity::Control, {1.0, 0.0, 0.0}}};

    bool is_boundary(int phoneme) const { return phoneme % boundary_period == boundary_period - 1; }
    // 0 short, 1 medium, 2 long
    int pause_range(int phoneme) const { return (phoneme / boundary_period) % 3; }
};

struct ToyUtterance {
    UtteranceRecord record;
    MelSpectrogram mel;
    std::vector<AlignmentToken> alignment;
    std::vector<int> normal_frames;  // per phoneme, unstretched and pause-free
};

struct ToyCorpus {
    std::vector<ToyUtterance> utterances;
    std::map<int, double> normal_table;  // phoneme id -> mean normal frames
};

// Deterministic in (seed, n_utts, config). Utterances are assigned to speakers
// round-robin; the last fraction of each speaker's utterances goes to valid/eval.
ToyCorpus generate_toy_corpus(std::uint64_t seed, int n_utts, const ToyCorpusConfig& config);

// Writes manifest.tsv, mel/, align/, normal_table.txt and normal_durations.tsv
// under `dir`. Returns the manifest path.
std::filesystem::path write_toy_corpus(const ToyCorpus& corpus, const std::filesystem::path& dir);

// The fixed pseudo-mel of one phoneme frame (before style offsets and noise).
Eigen::VectorXd toy_phoneme_envelope(int phoneme, double rel_pos, int dim);

}  // namespace dars::corpus

#endif  // DARS_CORPUS_HPP
