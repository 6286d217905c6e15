#include <doctest.h>

#include <cmath>

#include "dars/corpus.hpp"
#include "dars/cpo.hpp"
#include "dars/rhythm.hpp"
#include "test_support.hpp"

using namespace dars;
using namespace dars::cpo;
using nn::Var;

namespace {

Eigen::VectorXd vec(std::vector<double> v) {
    return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

double loss_value(std::vector<double> pred, const std::vector<double>& dys, const std::vector<double>& normal,
                  const std::vector<double>& w, const CpoConfig& cfg) {
    nn::Tape t;
    return cpo_loss(t.constant(vec(std::move(pred))), dys, normal, w, cfg).scalar();
}

}  // namespace

TEST_CASE("CPO weights worked examples") {
    const CpoConfig cfg;
    Eigen::MatrixXd p(1, 2);
    p << 0.2, 0.8;
    const auto w = cpo_weights(p, {{1}, 2}, cfg);
    CHECK(w[0] == doctest::Approx(0.56).epsilon(1e-12));
    p << 1.0, 0.0;
    CHECK(cpo_weights(p, {{0}, 2}, cfg)[0] == doctest::Approx(0.3).epsilon(1e-12));

    CpoConfig eq;
    eq.alpha = eq.beta = 0.5;
    Eigen::MatrixXd q(2, 3);
    q << 0.6, 0.3, 0.1, 0.2, 0.2, 0.6;
    const auto we = cpo_weights(q, {{0, 2}, 3}, eq);
    CHECK(we[0] == doctest::Approx(we[1]));
    CHECK_THROWS(cpo_weights(q, {{0}, 3}, cfg));
}

TEST_CASE("CPO weights stay in [0, max(alpha, beta)] (property)") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        CpoConfig cfg;
        cfg.alpha = u(rng);
        cfg.beta = u(rng);
        Eigen::MatrixXd p = Eigen::MatrixXd::Random(4, 4).array().abs();
        for (int r = 0; r < 4; ++r) p.row(r) /= p.row(r).sum();
        std::vector<int> labels;
        for (int r = 0; r < 4; ++r) labels.push_back(static_cast<int>(rng() % 4));
        for (double w : cpo_weights(p, {labels, 4}, cfg)) {
            CHECK(w >= 0.0);
            CHECK(w <= std::max(cfg.alpha, cfg.beta) + 1e-15);
        }
    }
}

TEST_CASE("CPO config validation") {
    CpoConfig c;
    CHECK(c.validate().empty());
    c.alpha = 0.2;
    c.beta = 0.4;
    CHECK_FALSE(c.validate().empty());
    c.margin = -1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("CPO loss worked examples") {
    const CpoConfig cfg;
    CHECK(loss_value({2.0}, {1.8}, {1.0}, {0.56}, cfg) == 0.0);
    CHECK(loss_value({1.4}, {1.0}, {1.5}, {0.27}, cfg) == doctest::Approx(0.2835).epsilon(1e-12));
    // identical references: the hinge reduces to the margin
    CHECK(loss_value({0.3, -2.0, 5.0}, {1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}, {0.1, 0.2, 0.6}, cfg) ==
          doctest::Approx(0.75 * 0.3).epsilon(1e-12));
    nn::Tape t;
    CHECK_THROWS(cpo_loss(t.constant(vec({1.0, 2.0})), std::vector<double>{1.0}, std::vector<double>{1.0},
                          std::vector<double>{1.0}, cfg));
}

TEST_CASE("CPO zero-loss region and monotone weighting (property)") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    const CpoConfig cfg;
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 6);
        std::vector<double> pred, dys, normal, w;
        for (int i = 0; i < n; ++i) {
            const double p = u(rng);
            const double near = p + 0.5 * u(rng) / 3.0;
            const double gap = std::abs(p - near) + cfg.margin + std::abs(u(rng));
            pred.push_back(p);
            dys.push_back(near);
            normal.push_back(rng() % 2 ? p + gap : p - gap);
            w.push_back(std::abs(u(rng)));
        }
        CHECK(loss_value(pred, dys, normal, w, cfg) == 0.0);
    }
    // raising the true-class probability raises the weight, hence the active hinge term
    for (int trial = 0; trial < 100; ++trial) {
        Eigen::MatrixXd p(1, 3);
        const double a = std::abs(u(rng)) / 3.0 * 0.9;
        p << 1.0 - a - 0.05, a, 0.05;
        Eigen::MatrixXd q = p;
        q(0, 1) += 0.04;
        q(0, 0) -= 0.04;
        const double lp = loss_value({1.0}, {2.0}, {1.2}, cpo_weights(p, {{1}, 3}, cfg), cfg);
        const double lq = loss_value({1.0}, {2.0}, {1.2}, cpo_weights(q, {{1}, 3}, cfg), cfg);
        CHECK(lp > 0.0);
        CHECK(lq >= lp);
    }
}

TEST_CASE("L_cp gradients match finite differences") {
    const CpoConfig cfg;
    // inputs kept away from the |.| and hinge kinks
    const std::vector<double> dys = {1.0, 2.0, 0.5, 1.7};
    const std::vector<double> normal = {1.3, 1.2, 0.1, 2.9};
    const std::vector<double> w = {0.4, 0.7, 0.2, 0.3};
    const Eigen::MatrixXd pred = vec({1.55, 1.7, 0.35, 2.2});
    const double err = testing::check_input_gradient(pred, [&](nn::Tape&, const Var& x) {
        return cpo_loss(x, dys, normal, w, cfg);
    });
    CHECK(err < 1e-4);

    nn::ParameterStore store;
    nn::Rng rng(4);
    const auto model = rhythm::RhythmModel::create(store, testing::tiny_rhythm_config(), rng);
    const std::vector<int> tokens = {1, 3, 5, 2};
    const std::vector<int> classes = {0, 2, 0, 0};
    auto predicted = [&](nn::Tape& t) {
        const auto E = rhythm::encode_phonemes(t, model, tokens);
        const auto H = rhythm::encode_augmented(t, model, rhythm::insert_pause_embeddings(t, model, E, classes));
        const Var d = rhythm::predict_durations(t, model, H).log_durations;
        return nn::gather_rows(d, rhythm::phoneme_rows(H.tags));
    };
    // references straddle the initial predictions so the hinge has a nonzero slope
    testing::CpoReferences refs;
    {
        nn::Tape t;
        refs = testing::cpo_references_around(predicted(t).value());
    }
    const auto res = testing::check_gradients(store, [&](nn::Tape& t) {
        return cpo_loss(predicted(t), refs.dys, refs.normal, w, cfg);
    });
    CAPTURE(res.worst);
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("normal duration table") {
    const auto table = NormalDurationTable::parse("0 5\n1 2.5\n\n7 10\n");
    const auto ref = table.reference(std::vector<int>{0, 7, 0});
    CHECK(ref.log_durations[0] == doctest::Approx(1.609438).epsilon(1e-6));
    CHECK(ref.log_durations[1] == doctest::Approx(std::log(10.0)));
    CHECK(table.reference(std::vector<int>{0, 7, 0}).log_durations == ref.log_durations);
    CHECK_THROWS_AS(table.reference(std::vector<int>{3}), std::out_of_range);
    CHECK_THROWS(NormalDurationTable::parse("0\n"));
    CHECK_THROWS(NormalDurationTable::parse("0 0\n"));

    const auto dir = testing::temp_dir("normal");
    table.save(dir / "n.txt");
    CHECK(NormalDurationTable::load(dir / "n.txt").table() == table.table());
}

TEST_CASE("severe toy speech is slower than the normal reference") {
    const auto corpus = corpus::generate_toy_corpus(3, 64, {});
    const NormalDurationTable table(corpus.normal_table);
    double dys = 0.0, normal = 0.0;
    int n = 0;
    for (const auto& u : corpus.utterances) {
        if (u.record.severity != corpus::Severity::Severe) continue;
        const auto ref = table.reference(u.record.phonemes);
        const auto frames = alignment::phoneme_frames(u.alignment);
        for (std::size_t i = 0; i < frames.size(); ++i) {
            dys += std::log(frames[i]);
            normal += ref.log_durations[i];
            ++n;
        }
    }
    REQUIRE(n > 0);
    CHECK(dys / n > normal / n);
}

TEST_CASE("training on L_d + L_cp moves held-out predictions toward the dysarthric durations") {
    corpus::ToyCorpusConfig cc;
    cc.valid_fraction = 0.25;
    const auto corpus = corpus::generate_toy_corpus(9, 96, cc);
    const NormalDurationTable table(corpus.normal_table);
    nn::ParameterStore store;
    nn::Rng rng(1);
    auto rc = testing::tiny_rhythm_config();
    rc.vocab_size = cc.vocab_size;
    const auto model = rhythm::RhythmModel::create(store, rc, rng);
    const alignment::PauseThresholds th;
    const CpoConfig cfg;

    struct Item {
        std::vector<int> tokens, classes, frames;  // frames per encoder row
        std::vector<double> dys, normal;
        bool valid;
    };
    std::vector<Item> items;
    for (const auto& u : corpus.utterances) {
        Item it;
        it.tokens = u.record.phonemes;
        it.classes = alignment::pause_labels_from_alignment(u.alignment, th, cc.frame_shift_s).labels;
        const auto pf = alignment::phoneme_frames(u.alignment);
        const auto sil = alignment::silence_after_phonemes(u.alignment);
        for (std::size_t i = 0; i < pf.size(); ++i) {
            it.frames.push_back(pf[i]);
            if (it.classes[i] > 0) it.frames.push_back(sil[i]);
            it.dys.push_back(std::log(pf[i]));
        }
        it.normal = table.reference(it.tokens).log_durations;
        it.valid = u.record.split == corpus::Split::Valid;
        items.push_back(std::move(it));
    }

    nn::AdamConfig ac;
    ac.lr = 3e-3;
    nn::Adam opt(ac);
    const auto params = store.all();
    for (int epoch = 0; epoch < 15; ++epoch) {
        for (const auto& it : items) {
            if (it.valid) continue;
            store.zero_grad();
            nn::Tape t;
            const auto E = rhythm::encode_phonemes(t, model, it.tokens);
            const auto H = rhythm::encode_augmented(t, model, rhythm::insert_pause_embeddings(t, model, E, it.classes));
            const auto d = rhythm::predict_durations(t, model, H);
            const Var at_ph = nn::gather_rows(d.log_durations, rhythm::phoneme_rows(H.tags));
            const std::vector<double> w(it.tokens.size(), 1.0);
            t.backward(rhythm::duration_mse(d, it.frames) + cpo_loss(at_ph, it.dys, it.normal, w, cfg));
            opt.step(params);
        }
    }
    double to_dys = 0.0, to_normal = 0.0;
    int n = 0;
    for (const auto& it : items) {
        if (!it.valid) continue;
        nn::Tape t;
        const auto E = rhythm::encode_phonemes(t, model, it.tokens);
        const auto H = rhythm::encode_augmented(t, model, rhythm::insert_pause_embeddings(t, model, E, it.classes));
        const Eigen::MatrixXd d = rhythm::predict_durations(t, model, H).log_durations.value();
        const auto rows = rhythm::phoneme_rows(H.tags);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            to_dys += std::abs(d(rows[i], 0) - it.dys[i]);
            to_normal += std::abs(d(rows[i], 0) - it.normal[i]);
            ++n;
        }
    }
    REQUIRE(n > 0);
    CAPTURE(to_dys / n);
    CAPTURE(to_normal / n);
    CHECK(to_dys < to_normal);
}
