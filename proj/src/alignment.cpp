#include "dars/alignment.hpp"

#include <cmath>
#include <limits>

namespace dars::alignment {

using corpus::AlignmentToken;
using corpus::TokenKind;

bool is_valid_path(const AlignmentPath& path, int n_phonemes) {
    const auto& a = path.assignment;
    if (a.empty() || n_phonemes < 1) return false;
    if (a.front() != 0 || a.back() != n_phonemes - 1) return false;
    for (std::size_t t = 1; t < a.size(); ++t) {
        const int step = a[t] - a[t - 1];
        if (step != 0 && step != 1) return false;
    }
    return true;
}

double path_score(const Eigen::MatrixXd& log_lik, const AlignmentPath& path) {
    double s = 0.0;
    for (std::size_t t = 0; t < path.assignment.size(); ++t) {
        s += log_lik(path.assignment[t], static_cast<Eigen::Index>(t));
    }
    return s;
}

AlignmentPath monotonic_alignment_search(const Eigen::MatrixXd& log_lik) {
    const int N = static_cast<int>(log_lik.rows());
    const int T = static_cast<int>(log_lik.cols());
    if (N < 1) throw InfeasibleAlignment("MAS needs at least one phoneme");
    if (T < N) {
        throw InfeasibleAlignment("MAS infeasible: " + std::to_string(T) + " frames for " +
                                  std::to_string(N) + " phonemes");
    }
    if (!log_lik.allFinite()) throw std::invalid_argument("MAS log-likelihoods must be finite");

    constexpr double kNegInf = -std::numeric_limits<double>::infinity();
    // best(i, t): best score of a prefix ending at phoneme i on frame t.
    Eigen::MatrixXd best = Eigen::MatrixXd::Constant(N, T, kNegInf);
    best(0, 0) = log_lik(0, 0);
    for (int t = 1; t < T; ++t) {
        const int lo = std::max(0, N - (T - t));
        const int hi = std::min(N - 1, t);
        for (int i = lo; i <= hi; ++i) {
            const double stay = best(i, t - 1);
            const double advance = i > 0 ? best(i - 1, t - 1) : kNegInf;
            best(i, t) = log_lik(i, t) + std::max(stay, advance);
        }
    }

    AlignmentPath path;
    path.assignment.assign(static_cast<std::size_t>(T), 0);
    int i = N - 1;
    for (int t = T - 1; t >= 0; --t) {
        path.assignment[static_cast<std::size_t>(t)] = i;
        if (t == 0) break;
        if (i > 0 && (i == t || best(i - 1, t - 1) > best(i, t - 1))) --i;
    }
    return path;
}

std::vector<int> durations_from_path(const AlignmentPath& path, int n_phonemes) {
    if (!is_valid_path(path, n_phonemes)) {
        throw std::invalid_argument("durations_from_path: invalid alignment path");
    }
    std::vector<int> d(static_cast<std::size_t>(n_phonemes), 0);
    for (int p : path.assignment) ++d[static_cast<std::size_t>(p)];
    return d;
}

int pause_class(double silence_s, const PauseThresholds& thresholds) {
    if (silence_s <= 0.0) return 0;
    constexpr double kSlack = 1e-9;
    for (std::size_t k = 0; k < thresholds.upper_s.size(); ++k) {
        if (silence_s <= thresholds.upper_s[k] + kSlack) return static_cast<int>(k) + 1;
    }
    return thresholds.num_classes() - 1;
}

namespace {

void check_ordering(const std::vector<AlignmentToken>& tokens) {
    for (std::size_t k = 1; k < tokens.size(); ++k) {
        if (tokens[k].start_frame < tokens[k - 1].end_frame) {
            throw AlignmentFormatError("alignment tokens overlap or are out of order at token " +
                                       std::to_string(k));
        }
    }
}

}  // namespace

std::vector<int> silence_after_phonemes(const std::vector<AlignmentToken>& tokens) {
    check_ordering(tokens);
    std::vector<int> out;
    for (const auto& tok : tokens) {
        if (tok.kind == TokenKind::Phoneme) {
            out.push_back(0);
        } else if (!out.empty()) {
            out.back() += tok.frames();
        }
    }
    return out;
}

std::vector<int> phoneme_frames(const std::vector<AlignmentToken>& tokens) {
    check_ordering(tokens);
    std::vector<int> out;
    for (const auto& tok : tokens) {
        if (tok.kind == TokenKind::Phoneme) out.push_back(tok.frames());
    }
    return out;
}

PauseLabelSequence pause_labels_from_alignment(const std::vector<AlignmentToken>& tokens,
                                               const PauseThresholds& thresholds,
                                               double frame_shift_s) {
    for (std::size_t k = 1; k < thresholds.upper_s.size(); ++k) {
        if (thresholds.upper_s[k] <= thresholds.upper_s[k - 1]) {
            throw std::invalid_argument("pause thresholds must be strictly ascending");
        }
    }
    PauseLabelSequence seq;
    seq.num_classes = thresholds.num_classes();
    for (int frames : silence_after_phonemes(tokens)) {
        seq.labels.push_back(pause_class(frames * frame_shift_s, thresholds));
    }
    return seq;
}

PauseLabelSequence pause_labels_from_alignment(const std::string& content,
                                               const PauseThresholds& thresholds,
                                               double frame_shift_s) {
    return pause_labels_from_alignment(corpus::parse_alignment(content), thresholds, frame_shift_s);
}

}  // namespace dars::alignment
