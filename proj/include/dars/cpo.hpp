#ifndef DARS_CPO_HPP
#define DARS_CPO_HPP

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dars/alignment.hpp"
#include "dars/nn.hpp"

namespace dars::cpo {

struct CpoConfig {
    double alpha = 0.7;   // pause positions
    double beta = 0.3;    // non-pause positions
    double margin = 0.75; // log-duration units

    // Throws on negative values; returns a warning string when alpha < beta.
    std::string validate() const;
};

// w_i = alpha * p[i, s_i] if s_i > 0, else beta * p[i, 0].
std::vector<double> cpo_weights(const Eigen::MatrixXd& probs,
                                const alignment::PauseLabelSequence& labels, const CpoConfig& cfg);

// (1/N) sum_i w_i * max(0, |pred_i - dys_i| - |pred_i - normal_i| + m)
// `pred_log_d` is N x 1 (phoneme positions only). Weights carry no gradient.
nn::Var cpo_loss(const nn::Var& pred_log_d, std::span<const double> dys_log_d,
                 std::span<const double> normal_log_d, std::span<const double> weights,
                 const CpoConfig& cfg);

struct NormalReference {
    std::vector<double> log_durations;
};

// Mean normal-speech frames per phoneme; file lines are `phoneme_id mean_frames`.
class NormalDurationTable {
public:
    NormalDurationTable() = default;
    explicit NormalDurationTable(std::map<int, double> mean_frames);

    static NormalDurationTable load(const std::filesystem::path& path);
    static NormalDurationTable parse(const std::string& content);
    void save(const std::filesystem::path& path) const;

    NormalReference reference(std::span<const int> tokens) const;
    const std::map<int, double>& table() const { return mean_frames_; }
    bool empty() const { return mean_frames_.empty(); }

private:
    std::map<int, double> mean_frames_;
};

}  // namespace dars::cpo

#endif  // DARS_CPO_HPP
