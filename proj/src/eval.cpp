#include "dars/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace dars::eval {

Eigen::MatrixXd mel_cepstrum(const Eigen::MatrixXd& log_mel) {
    const Eigen::Index D = log_mel.cols();
    Eigen::MatrixXd basis(D, D);  // basis(n, k): input bin n -> coefficient k
    for (Eigen::Index k = 0; k < D; ++k) {
        const double scale = k == 0 ? std::sqrt(1.0 / D) : std::sqrt(2.0 / D);
        for (Eigen::Index n = 0; n < D; ++n) {
            basis(n, k) = scale * std::cos(std::numbers::pi * (n + 0.5) * k / static_cast<double>(D));
        }
    }
    // Row by row so that identical frames always get identical cepstra; a
    // blocked matrix product may round differently depending on the row count.
    Eigen::MatrixXd out(log_mel.rows(), D);
    for (Eigen::Index r = 0; r < log_mel.rows(); ++r) out.row(r).noalias() = log_mel.row(r) * basis;
    return out;
}

DtwResult dtw(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const Eigen::Index n = a.rows(), m = b.rows();
    if (n == 0 || m == 0) throw std::invalid_argument("dtw: empty sequence");
    constexpr double kInf = std::numeric_limits<double>::infinity();
    Eigen::MatrixXd acc = Eigen::MatrixXd::Constant(n + 1, m + 1, kInf);
    acc(0, 0) = 0.0;
    for (Eigen::Index i = 1; i <= n; ++i) {
        for (Eigen::Index j = 1; j <= m; ++j) {
            const double c = (a.row(i - 1) - b.row(j - 1)).squaredNorm();
            acc(i, j) = c + std::min({acc(i - 1, j - 1), acc(i - 1, j), acc(i, j - 1)});
        }
    }
    DtwResult r;
    r.cost = acc(n, m);
    Eigen::Index i = n, j = m;
    while (i > 0 && j > 0) {
        r.path.emplace_back(static_cast<int>(i - 1), static_cast<int>(j - 1));
        const double diag = acc(i - 1, j - 1), up = acc(i - 1, j), left = acc(i, j - 1);
        if (diag <= up && diag <= left) {
            --i;
            --j;
        } else if (up <= left) {
            --i;
        } else {
            --j;
        }
    }
    std::reverse(r.path.begin(), r.path.end());
    return r;
}

double mcd(const Eigen::MatrixXd& ref_log_mel, const Eigen::MatrixXd& syn_log_mel, const McdConfig& cfg) {
    if (ref_log_mel.rows() == 0 || syn_log_mel.rows() == 0) throw std::invalid_argument("mcd: empty mel");
    if (ref_log_mel.cols() != syn_log_mel.cols()) throw std::invalid_argument("mcd: feature dimension mismatch");
    const Eigen::Index D = ref_log_mel.cols();
    const Eigen::Index n = std::min<Eigen::Index>(cfg.num_coeffs, D - 1);
    if (n < 1) throw std::invalid_argument("mcd: need at least two mel bins");
    const Eigen::MatrixXd a = mel_cepstrum(ref_log_mel).middleCols(1, n);
    const Eigen::MatrixXd b = mel_cepstrum(syn_log_mel).middleCols(1, n);

    std::vector<std::pair<int, int>> pairs;
    if (cfg.use_dtw) {
        pairs = dtw(a, b).path;
    } else {
        for (Eigen::Index t = 0; t < std::min(a.rows(), b.rows()); ++t) {
            pairs.emplace_back(static_cast<int>(t), static_cast<int>(t));
        }
    }
    const double k = 10.0 / std::numbers::ln10;
    double total = 0.0;
    for (const auto& [i, j] : pairs) total += k * std::sqrt(2.0 * (a.row(i) - b.row(j)).squaredNorm());
    return total / static_cast<double>(pairs.size());
}

double mcd(const corpus::MelSpectrogram& ref, const corpus::MelSpectrogram& syn, const McdConfig& cfg) {
    return mcd(ref.as_double(), syn.as_double(), cfg);
}

EditCounts edit_counts(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    const std::size_t n = ref.size(), m = hyp.size();
    std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1, 0));
    for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<int>(i);
    for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            const int sub = d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            d[i][j] = std::min({sub, d[i - 1][j] + 1, d[i][j - 1] + 1});
        }
    }
    EditCounts c;
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
            if (ref[i - 1] != hyp[j - 1]) ++c.substitutions;
            --i;
            --j;
        } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
            ++c.deletions;
            --i;
        } else {
            ++c.insertions;
            --j;
        }
    }
    return c;
}

double wer(const std::vector<std::string>& ref_words, const std::vector<std::string>& hyp_words) {
    if (ref_words.empty()) throw std::domain_error("wer: empty reference");
    return static_cast<double>(edit_counts(ref_words, hyp_words).total()) /
           static_cast<double>(ref_words.size());
}

std::vector<std::string> normalize_words(const std::string& text) {
    std::string clean;
    clean.reserve(text.size());
    for (unsigned char c : text) {
        if (std::ispunct(c) && c != '\'') continue;
        clean.push_back(static_cast<char>(std::isspace(c) ? ' ' : std::tolower(c)));
    }
    std::istringstream in(clean);
    std::vector<std::string> words;
    for (std::string w; in >> w;) words.push_back(w);
    return words;
}

std::string to_string(Metric m) { return m == Metric::MCD ? "MCD" : "WER"; }

EvalReport build_report(const std::map<std::string, double>& per_utt,
                        const std::vector<corpus::UtteranceRecord>& records, Metric metric) {
    std::map<std::string, const corpus::UtteranceRecord*> by_id;
    for (const auto& r : records) by_id[r.utt_id] = &r;

    std::map<std::string, std::pair<double, int>> spk_acc;
    std::map<std::string, corpus::Severity> spk_sev;
    for (const auto& [utt, value] : per_utt) {
        auto it = by_id.find(utt);
        if (it == by_id.end()) throw std::out_of_range("report: unknown utterance '" + utt + "'");
        auto& acc = spk_acc[it->second->speaker_id];
        acc.first += value;
        ++acc.second;
        spk_sev[it->second->speaker_id] = it->second->severity;
    }
    EvalReport rep;
    rep.metric = metric;
    std::map<corpus::Severity, std::pair<double, int>> sev_acc;
    double total = 0.0;
    for (const auto& [spk, acc] : spk_acc) {
        const double m = acc.first / acc.second;
        rep.per_speaker[spk] = m;
        auto& s = sev_acc[spk_sev[spk]];
        s.first += m;
        ++s.second;
        total += m;
    }
    for (const auto& [sev, acc] : sev_acc) rep.per_group[sev] = acc.first / acc.second;
    rep.overall = spk_acc.empty() ? 0.0 : total / static_cast<double>(spk_acc.size());
    return rep;
}

std::vector<std::string> EvalReport::column_names() const {
    std::vector<std::string> cols;
    for (const auto& [sev, v] : per_group) cols.push_back(corpus::display_name(sev));
    cols.push_back("Overall");
    return cols;
}

std::string EvalReport::render_table(const std::string& row_label) const {
    std::ostringstream out;
    constexpr int w = 11;
    out << std::left << std::setw(14) << (row_label.empty() ? to_string(metric) : row_label);
    for (const auto& c : column_names()) out << std::right << std::setw(w) << c;
    out << '\n' << std::left << std::setw(14) << "";
    out << std::fixed << std::setprecision(metric == Metric::WER ? 2 : 3);
    const double scale = metric == Metric::WER ? 100.0 : 1.0;
    for (const auto& [sev, v] : per_group) out << std::right << std::setw(w) << v * scale;
    out << std::right << std::setw(w) << overall * scale << '\n';
    return out.str();
}

std::string EvalReport::to_key_values() const {
    std::ostringstream out;
    out << std::setprecision(10);
    out << "metric=" << to_string(metric) << '\n';
    for (const auto& [sev, v] : per_group) out << "group." << corpus::to_string(sev) << '=' << v << '\n';
    for (const auto& [spk, v] : per_speaker) out << "speaker." << spk << '=' << v << '\n';
    out << "overall=" << overall << '\n';
    return out.str();
}

}  // namespace dars::eval
