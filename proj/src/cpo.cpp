#include "dars/cpo.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dars::cpo {

using nn::Mat;
using nn::Var;

std::string CpoConfig::validate() const {
    if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("CPO alpha/beta must be non-negative");
    if (margin < 0.0) throw std::invalid_argument("CPO margin must be non-negative");
    if (alpha < beta) {
        return "CPO alpha (" + std::to_string(alpha) + ") < beta (" + std::to_string(beta) +
               "): pause positions are weighted below non-pause positions";
    }
    return {};
}

std::vector<double> cpo_weights(const Eigen::MatrixXd& probs,
                                const alignment::PauseLabelSequence& labels, const CpoConfig& cfg) {
    const auto& s = labels.labels;
    if (static_cast<Eigen::Index>(s.size()) != probs.rows()) {
        throw std::invalid_argument("cpo_weights: label count differs from prediction rows");
    }
    std::vector<double> w(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        if (s[i] < 0 || s[i] >= probs.cols()) throw std::out_of_range("pause label outside [0, K)");
        w[i] = s[i] > 0 ? cfg.alpha * probs(row, s[i]) : cfg.beta * probs(row, 0);
    }
    return w;
}

Var cpo_loss(const Var& pred_log_d, std::span<const double> dys_log_d,
             std::span<const double> normal_log_d, std::span<const double> weights,
             const CpoConfig& cfg) {
    const auto n = static_cast<Eigen::Index>(dys_log_d.size());
    if (pred_log_d.cols() != 1 || pred_log_d.rows() != n ||
        static_cast<Eigen::Index>(normal_log_d.size()) != n ||
        static_cast<Eigen::Index>(weights.size()) != n) {
        throw std::invalid_argument("cpo_loss: sequences must share length N");
    }
    if (n == 0) throw std::invalid_argument("cpo_loss: empty sequence");
    nn::Tape& tape = *pred_log_d.tape();
    const Var dys = tape.constant(Eigen::Map<const Eigen::VectorXd>(dys_log_d.data(), n));
    const Var normal = tape.constant(Eigen::Map<const Eigen::VectorXd>(normal_log_d.data(), n));
    const Var w = tape.constant(Eigen::Map<const Eigen::VectorXd>(weights.data(), n));
    // |d^-d| + m - |d^-d_n|: adding the margin first keeps the loss exactly zero
    // whenever |d^-d| + m <= |d^-d_n| holds in floating point.
    const Var gap = nn::add_scalar(nn::abs(pred_log_d - dys), cfg.margin) - nn::abs(pred_log_d - normal);
    const Var hinge = nn::relu(gap);
    return nn::mean(nn::hadamard(w, hinge));
}

NormalDurationTable::NormalDurationTable(std::map<int, double> mean_frames)
    : mean_frames_(std::move(mean_frames)) {
    for (const auto& [id, frames] : mean_frames_) {
        if (!(frames > 0.0) || !std::isfinite(frames)) {
            throw std::invalid_argument("normal duration for phoneme " + std::to_string(id) +
                                        " must be positive");
        }
    }
}

NormalDurationTable NormalDurationTable::parse(const std::string& content) {
    std::map<int, double> table;
    std::istringstream in(content);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        int id;
        double frames;
        if (!(ls >> id)) continue;
        if (!(ls >> frames)) {
            throw std::runtime_error("normal duration table line " + std::to_string(lineno) +
                                     ": expected 'phoneme_id mean_frames'");
        }
        table[id] = frames;
    }
    return NormalDurationTable(std::move(table));
}

NormalDurationTable NormalDurationTable::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void NormalDurationTable::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    for (const auto& [id, frames] : mean_frames_) out << id << ' ' << frames << '\n';
}

NormalReference NormalDurationTable::reference(std::span<const int> tokens) const {
    NormalReference ref;
    ref.log_durations.reserve(tokens.size());
    for (int tok : tokens) {
        auto it = mean_frames_.find(tok);
        if (it == mean_frames_.end()) {
            throw std::out_of_range("phoneme " + std::to_string(tok) +
                                    " missing from normal duration table");
        }
        ref.log_durations.push_back(std::log(it->second));
    }
    return ref;
}

}  // namespace dars::cpo
