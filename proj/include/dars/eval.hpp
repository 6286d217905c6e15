#ifndef DARS_EVAL_HPP
#define DARS_EVAL_HPP

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dars/corpus.hpp"

namespace dars::eval {

struct McdConfig {
    int num_coeffs = 13;   // c1..c13
    bool use_dtw = true;   // otherwise frames are truncated to the shorter length
};

// Orthonormal DCT-II of each row.
Eigen::MatrixXd mel_cepstrum(const Eigen::MatrixXd& log_mel);

struct DtwResult {
    std::vector<std::pair<int, int>> path;
    double cost = 0.0;
};

// Squared-Euclidean DTW with steps (1,0), (0,1), (1,1).
DtwResult dtw(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// Mean over matched frame pairs of (10 / ln 10) * sqrt(2 * sum_d (c_d - c'_d)^2), d = 1..num_coeffs.
double mcd(const Eigen::MatrixXd& ref_log_mel, const Eigen::MatrixXd& syn_log_mel, const McdConfig& cfg = {});
double mcd(const corpus::MelSpectrogram& ref, const corpus::MelSpectrogram& syn, const McdConfig& cfg = {});

struct EditCounts {
    int substitutions = 0;
    int deletions = 0;
    int insertions = 0;
    int total() const { return substitutions + deletions + insertions; }
};

EditCounts edit_counts(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);
// (S + D + I) / |ref|; may exceed 1.
double wer(const std::vector<std::string>& ref_words, const std::vector<std::string>& hyp_words);
// Lowercase, strip punctuation, collapse whitespace, split.
std::vector<std::string> normalize_words(const std::string& text);

enum class Metric { MCD, WER };
std::string to_string(Metric m);

struct EvalReport {
    Metric metric = Metric::MCD;
    std::map<std::string, double> per_speaker;
    std::map<corpus::Severity, double> per_group;
    double overall = 0.0;  // mean of per-speaker means

    // Aligned text table, columns in severity order plus Overall.
    std::string render_table(const std::string& row_label = "") const;
    // key=value lines.
    std::string to_key_values() const;
    std::vector<std::string> column_names() const;
};

// per_utt maps utt_id -> metric value; every id must exist in `records`.
EvalReport build_report(const std::map<std::string, double>& per_utt,
                        const std::vector<corpus::UtteranceRecord>& records, Metric metric);

}  // namespace dars::eval

#endif  // DARS_EVAL_HPP
