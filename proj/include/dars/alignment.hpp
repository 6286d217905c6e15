#ifndef DARS_ALIGNMENT_HPP
#define DARS_ALIGNMENT_HPP

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dars/corpus.hpp"

namespace dars::alignment {

class InfeasibleAlignment : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class AlignmentFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// assignment[t] is the phoneme index of frame t. Monotone, surjective, steps of 0 or 1.
struct AlignmentPath {
    std::vector<int> assignment;
};

bool is_valid_path(const AlignmentPath& path, int n_phonemes);
double path_score(const Eigen::MatrixXd& log_lik, const AlignmentPath& path);

// Maximizes sum_t log_lik(assignment[t], t) over valid paths. log_lik is N x T.
// On equal scores the path stays on the current phoneme.
AlignmentPath monotonic_alignment_search(const Eigen::MatrixXd& log_lik);

std::vector<int> durations_from_path(const AlignmentPath& path, int n_phonemes);

struct PauseThresholds {
    // K-2 ascending upper boundaries (seconds) for classes 1..K-2; class K-1 is open.
    std::vector<double> upper_s = {0.15, 0.40};
    int num_classes() const { return static_cast<int>(upper_s.size()) + 2; }
};

struct PauseLabelSequence {
    std::vector<int> labels;
    int num_classes = 4;
};

int pause_class(double silence_s, const PauseThresholds& thresholds);

// Labels each phoneme with the class of the silence that directly follows it.
// Leading silence (before the first phoneme) is ignored.
PauseLabelSequence pause_labels_from_alignment(const std::vector<corpus::AlignmentToken>& tokens,
                                               const PauseThresholds& thresholds,
                                               double frame_shift_s);
PauseLabelSequence pause_labels_from_alignment(const std::string& content,
                                               const PauseThresholds& thresholds,
                                               double frame_shift_s);

// Frames of silence following each phoneme (0 if none).
std::vector<int> silence_after_phonemes(const std::vector<corpus::AlignmentToken>& tokens);
// Per-phoneme frame counts straight from the alignment file.
std::vector<int> phoneme_frames(const std::vector<corpus::AlignmentToken>& tokens);

}  // namespace dars::alignment

#endif  // DARS_ALIGNMENT_HPP
