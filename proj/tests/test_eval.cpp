#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "dars/eval.hpp"
#include "test_support.hpp"

using namespace dars;
using namespace dars::eval;

namespace {

// Log-mel rows whose cepstra are exactly the rows of `c`.
Eigen::MatrixXd from_cepstra(const Eigen::MatrixXd& c) {
    const Eigen::MatrixXd basis = mel_cepstrum(Eigen::MatrixXd::Identity(c.cols(), c.cols()));
    return c * basis.transpose();
}

// Top-down recursion over word positions, kept separate from the table-based implementation.
int edit_distance_oracle(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::map<std::pair<std::size_t, std::size_t>, int> memo;
    std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
        if (i == a.size()) return static_cast<int>(b.size() - j);
        if (j == b.size()) return static_cast<int>(a.size() - i);
        const auto key = std::make_pair(i, j);
        if (auto it = memo.find(key); it != memo.end()) return it->second;
        int best = go(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1);
        best = std::min(best, go(i + 1, j) + 1);
        best = std::min(best, go(i, j + 1) + 1);
        return memo[key] = best;
    };
    return go(0, 0);
}

std::vector<std::string> words(const std::string& s) { return normalize_words(s); }

corpus::UtteranceRecord record(const std::string& utt, const std::string& spk, corpus::Severity sev) {
    corpus::UtteranceRecord r;
    r.utt_id = utt;
    r.speaker_id = spk;
    r.severity = sev;
    return r;
}

}  // namespace

TEST_CASE("mel cepstrum is the orthonormal DCT-II") {
    std::mt19937_64 rng(1);
    const Eigen::MatrixXd x = testing::random_matrix(3, 7, rng);
    const Eigen::MatrixXd c = mel_cepstrum(x);
    const double n = 7.0;
    for (int r = 0; r < 3; ++r) {
        for (int k = 0; k < 7; ++k) {
            double s = 0.0;
            for (int i = 0; i < 7; ++i) s += x(r, i) * std::cos(M_PI / n * (i + 0.5) * k);
            s *= std::sqrt((k == 0 ? 1.0 : 2.0) / n);
            CHECK(c(r, k) == doctest::Approx(s).epsilon(1e-12));
        }
    }
}

TEST_CASE("MCD worked examples") {
    std::mt19937_64 rng(2);
    const Eigen::MatrixXd ref = testing::random_matrix(9, 20, rng);
    CHECK(mcd(ref, ref) == 0.0);

    Eigen::MatrixXd c0 = Eigen::MatrixXd::Zero(1, 20);
    Eigen::MatrixXd c1 = c0;
    c1(0, 5) = 1.0;
    const double expected = 10.0 / std::log(10.0) * std::sqrt(2.0);
    CHECK(std::abs(mcd(from_cepstra(c0), from_cepstra(c1)) - expected) < 1e-6);
    CHECK(expected == doctest::Approx(6.14185).epsilon(1e-6));
    // c0 and coefficients past c13 do not count
    Eigen::MatrixXd c2 = c0;
    c2(0, 0) = 3.0;
    c2(0, 14) = 2.0;
    CHECK(mcd(from_cepstra(c0), from_cepstra(c2)) < 1e-12);

    Eigen::MatrixXd stretched(18, 20);
    for (int i = 0; i < 9; ++i) stretched.row(2 * i) = stretched.row(2 * i + 1) = ref.row(i);
    CHECK(mcd(stretched, ref) < 1e-12);
    CHECK(mcd(ref, stretched) < 1e-12);

    CHECK_THROWS(mcd(Eigen::MatrixXd(0, 20), ref));
    CHECK_THROWS(mcd(ref, testing::random_matrix(9, 19, rng)));
}

TEST_CASE("MCD is symmetric and non-negative (property)") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::Index t = 1 + static_cast<Eigen::Index>(rng() % 8);
        const Eigen::Index t2 = 1 + static_cast<Eigen::Index>(rng() % 8);
        const Eigen::MatrixXd a = testing::random_matrix(t, 16, rng);
        const Eigen::MatrixXd b = testing::random_matrix(t, 16, rng);
        CHECK(mcd(a, b) == doctest::Approx(mcd(b, a)).epsilon(1e-12));
        CHECK(mcd(a, b) >= 0.0);
        CHECK(mcd(a, testing::random_matrix(t2, 16, rng)) >= 0.0);
    }
}

TEST_CASE("DTW path shape") {
    Eigen::MatrixXd a(3, 1), b(2, 1);
    a << 0, 1, 2;
    b << 0, 2;
    const auto r = dtw(a, b);
    CHECK(r.path.front() == std::make_pair(0, 0));
    CHECK(r.path.back() == std::make_pair(2, 1));
    CHECK(r.cost == doctest::Approx(1.0));
}

TEST_CASE("WER worked examples") {
    CHECK(wer(words("a b c"), words("a b c")) == 0.0);
    CHECK(wer(words("the cat sat"), words("the cat")) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(wer(words("a b"), words("a x b")) == 0.5);
    CHECK(wer(words("a"), words("x y z")) == 3.0);
    CHECK_THROWS_AS(wer({}, words("a")), std::domain_error);
    CHECK(words("  The, CAT's   sat!\n") == std::vector<std::string>{"the", "cat's", "sat"});
    const auto c = edit_counts(words("a b c d"), words("a x c d e"));
    CHECK(c.substitutions == 1);
    CHECK(c.insertions == 1);
    CHECK(c.deletions == 0);
}

TEST_CASE("WER matches the recursive edit distance (property)") {
    std::mt19937_64 rng(4);
    const std::vector<std::string> alphabet = {"a", "b", "c"};
    for (int trial = 0; trial < 2000; ++trial) {
        std::vector<std::string> r(1 + rng() % 6), h(rng() % 7);
        for (auto& w : r) w = alphabet[rng() % 3];
        for (auto& w : h) w = alphabet[rng() % 3];
        CHECK(wer(r, h) == static_cast<double>(edit_distance_oracle(r, h)) / static_cast<double>(r.size()));
        CHECK(edit_counts(r, h).total() == edit_distance_oracle(r, h));
    }
}

TEST_CASE("severity-grouped reports") {
    using corpus::Severity;
    const std::vector<corpus::UtteranceRecord> recs = {
        record("u1", "F01", Severity::Severe),   record("u2", "F01", Severity::Severe),
        record("u3", "M03", Severity::ModSev),   record("u4", "M05", Severity::Moderate),
        record("u5", "F04", Severity::Mild),     record("u6", "M01", Severity::Severe)};
    const auto rep = build_report({{"u1", 0.2}, {"u2", 0.4}, {"u3", 0.5}, {"u4", 0.1}, {"u5", 0.0}, {"u6", 0.6}},
                                  recs, Metric::WER);
    CHECK(rep.per_speaker.at("F01") == doctest::Approx(0.3));
    CHECK(rep.per_group.at(Severity::Severe) == doctest::Approx(0.45));
    CHECK(rep.overall == doctest::Approx((0.3 + 0.5 + 0.1 + 0.0 + 0.6) / 5.0));
    CHECK(rep.column_names() == std::vector<std::string>{"Severe", "Mod.-Sev.", "Moderate", "Mild", "Overall"});
    CHECK(rep.render_table().find("Mod.-Sev.") != std::string::npos);
    CHECK(rep.to_key_values().find("overall=") != std::string::npos);

    const auto two = build_report({{"u3", 0.2}, {"u4", 0.4}}, recs, Metric::WER);
    CHECK(two.overall == doctest::Approx(0.3));
    CHECK_THROWS_AS(build_report({{"nope", 1.0}}, recs, Metric::MCD), std::out_of_range);
}

TEST_CASE("overall is the mean of per-speaker means (property)") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    const std::vector<corpus::Severity> sevs = {corpus::Severity::Severe, corpus::Severity::Mild,
                                                corpus::Severity::Moderate};
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<corpus::UtteranceRecord> recs;
        std::map<std::string, double> per_utt;
        std::map<std::string, std::vector<double>> by_spk;
        const int n = 1 + static_cast<int>(rng() % 12);
        for (int i = 0; i < n; ++i) {
            const std::string spk = "S" + std::to_string(rng() % 4);
            const std::string utt = "u" + std::to_string(i);
            recs.push_back(record(utt, spk, sevs[std::stoul(spk.substr(1)) % 3]));
            per_utt[utt] = u(rng);
            by_spk[spk].push_back(per_utt[utt]);
        }
        double expected = 0.0;
        for (const auto& [spk, v] : by_spk) expected += std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        expected /= static_cast<double>(by_spk.size());
        CHECK(build_report(per_utt, recs, Metric::MCD).overall == doctest::Approx(expected).epsilon(1e-12));
    }
}
