#include <doctest.h>

#include <numeric>

#include "dars/alignment.hpp"
#include "test_support.hpp"

using namespace dars;
using namespace dars::alignment;
using corpus::AlignmentToken;
using corpus::TokenKind;

namespace {

double brute_best(const Eigen::MatrixXd& ll) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& p : testing::all_paths(static_cast<int>(ll.rows()), static_cast<int>(ll.cols()))) {
        double s = 0;
        for (std::size_t t = 0; t < p.size(); ++t) s += ll(p[t], static_cast<Eigen::Index>(t));
        best = std::max(best, s);
    }
    return best;
}

std::vector<AlignmentToken> phones_with_silences(const std::vector<int>& phone_frames, const std::vector<int>& sil_after) {
    std::vector<AlignmentToken> toks;
    int f = 0;
    for (std::size_t i = 0; i < phone_frames.size(); ++i) {
        toks.push_back({TokenKind::Phoneme, static_cast<int>(i), f, f + phone_frames[i]});
        f += phone_frames[i];
        if (sil_after[i] > 0) {
            toks.push_back({TokenKind::Silence, 0, f, f + sil_after[i]});
            f += sil_after[i];
        }
    }
    return toks;
}

}  // namespace

TEST_CASE("MAS worked examples") {
    CHECK(monotonic_alignment_search(Eigen::MatrixXd::Random(1, 4)).assignment == std::vector<int>{0, 0, 0, 0});
    Eigen::MatrixXd diag = Eigen::MatrixXd::Constant(3, 3, -10.0);
    diag.diagonal().setZero();
    CHECK(monotonic_alignment_search(diag).assignment == std::vector<int>{0, 1, 2});

    std::mt19937_64 rng(5);
    const Eigen::MatrixXd ll = testing::random_matrix(3, 5, rng);
    CHECK(testing::all_paths(3, 5).size() == 6);
    CHECK(path_score(ll, monotonic_alignment_search(ll)) == brute_best(ll));
}

TEST_CASE("MAS rejects infeasible inputs") {
    CHECK_THROWS_AS(monotonic_alignment_search(Eigen::MatrixXd::Zero(4, 3)), InfeasibleAlignment);
    Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(2, 3);
    bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(monotonic_alignment_search(bad), std::invalid_argument);
}

TEST_CASE("MAS ties stay on the current phoneme") {
    // All scores equal. Backtracking from the last frame keeps the current
    // phoneme unless the previous one is strictly better.
    const auto p = monotonic_alignment_search(Eigen::MatrixXd::Zero(3, 6));
    CHECK(p.assignment == std::vector<int>{0, 1, 2, 2, 2, 2});
}

TEST_CASE("MAS matches exhaustive search and yields valid paths (property)") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 4);
        const int t = n + static_cast<int>(rng() % static_cast<unsigned>(8 - n));
        // integer scores make ties common
        Eigen::MatrixXd ll(n, t);
        for (Eigen::Index i = 0; i < ll.size(); ++i) ll.data()[i] = static_cast<double>(static_cast<int>(rng() % 5)) - 2.0;
        const auto path = monotonic_alignment_search(ll);
        REQUIRE(is_valid_path(path, n));
        CHECK(path_score(ll, path) == brute_best(ll));
        const auto d = durations_from_path(path, n);
        CHECK(std::accumulate(d.begin(), d.end(), 0) == t);
        CHECK(*std::min_element(d.begin(), d.end()) >= 1);
    }
}

TEST_CASE("path validity and durations") {
    CHECK(durations_from_path({{0, 0, 1}}, 2) == std::vector<int>{2, 1});
    CHECK(durations_from_path({{0, 1, 2}}, 3) == std::vector<int>{1, 1, 1});
    CHECK_FALSE(is_valid_path({{0, 2, 2}}, 3));
    CHECK_FALSE(is_valid_path({{1, 1, 2}}, 3));
    CHECK_FALSE(is_valid_path({{0, 1, 0}}, 2));
    CHECK_FALSE(is_valid_path({{0, 0, 0}}, 2));
    CHECK(is_valid_path({{0, 1, 1}}, 2));
}

TEST_CASE("pause classes follow the thresholds") {
    const PauseThresholds th;
    CHECK(th.num_classes() == 4);
    CHECK(pause_class(0.0, th) == 0);
    CHECK(pause_class(0.10, th) == 1);
    CHECK(pause_class(0.15, th) == 1);
    CHECK(pause_class(0.16, th) == 2);
    CHECK(pause_class(0.40, th) == 2);
    CHECK(pause_class(0.50, th) == 3);
}

TEST_CASE("pause labels from alignment files") {
    const PauseThresholds th;
    CHECK(pause_labels_from_alignment("P 1 0 3\nP 2 3 5\nP 3 5 9\nP 4 9 10\n", th, 0.01).labels ==
          std::vector<int>{0, 0, 0, 0});
    // 10 frames (0.10 s) after phoneme 2
    CHECK(pause_labels_from_alignment("P 1 0 3\nP 2 3 5\nP 3 5 9\nSIL 0 9 19\nP 4 19 20\n", th, 0.01).labels ==
          std::vector<int>{0, 0, 1, 0});
    // 50 frames after phoneme 0; leading silence is ignored
    const auto l = pause_labels_from_alignment("SIL 0 0 30\nP 1 30 33\nSIL 0 33 83\nP 2 83 85\n", th, 0.01);
    CHECK(l.labels == std::vector<int>{3, 0});
    CHECK(l.num_classes == 4);
    CHECK_THROWS_AS(pause_labels_from_alignment("P 1 0 5\nP 2 4 6\n", th, 0.01), AlignmentFormatError);
}

TEST_CASE("pause labels depend only on the silence after each phoneme (property)") {
    std::mt19937_64 rng(4);
    const PauseThresholds th;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 6);
        std::vector<int> frames(static_cast<std::size_t>(n)), sil(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            frames[static_cast<std::size_t>(i)] = 1 + static_cast<int>(rng() % 9);
            sil[static_cast<std::size_t>(i)] = (rng() % 2) ? static_cast<int>(rng() % 70) : 0;
        }
        const auto labels = pause_labels_from_alignment(phones_with_silences(frames, sil), th, 0.01).labels;
        for (int i = 0; i < n; ++i) {
            CHECK(labels[static_cast<std::size_t>(i)] == pause_class(sil[static_cast<std::size_t>(i)] * 0.01, th));
        }
        // changing the other phonemes' lengths never moves a label
        auto frames2 = frames;
        for (auto& f : frames2) f = 1 + static_cast<int>(rng() % 9);
        CHECK(pause_labels_from_alignment(phones_with_silences(frames2, sil), th, 0.01).labels == labels);
        CHECK(silence_after_phonemes(phones_with_silences(frames, sil)) == sil);
        CHECK(phoneme_frames(phones_with_silences(frames, sil)) == frames);
    }
}
