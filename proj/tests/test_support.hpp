#ifndef DARS_TEST_SUPPORT_HPP
#define DARS_TEST_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dars/nn.hpp"
#include "dars/rhythm.hpp"
#include "dars/style.hpp"

namespace dars::testing {

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("dars_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline bool nearly(double a, double b, double rel, double abs_floor = 0.0) {
    return std::abs(a - b) <= std::max(abs_floor, rel * std::max(std::abs(a), std::abs(b)));
}

struct GradCheck {
    double max_rel_error = 0.0;  // worst tensor: ||analytic - numeric|| / max(||analytic||, ||numeric||)
    std::string worst;
    long checked = 0;
};

// Compares backward() gradients of `analytic` against central differences of
// `numeric` for every entry of every parameter in `store`. Both must build a
// fresh tape each call; they differ only where a surrogate stands in for a
// non-differentiable forward (straight-through quantization).
inline GradCheck check_gradients(nn::ParameterStore& store, const std::function<nn::Var(nn::Tape&)>& analytic,
                                 const std::function<nn::Var(nn::Tape&)>& numeric, double h = 1e-6,
                                 double tiny = 1e-10) {
    store.zero_grad();
    {
        nn::Tape tape;
        tape.backward(analytic(tape));
    }
    GradCheck out;
    for (nn::Parameter* p : store.all()) {
        const Eigen::MatrixXd grad = p->grad;
        Eigen::MatrixXd fd(p->value.rows(), p->value.cols());
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            const double orig = p->value.data()[i];
            p->value.data()[i] = orig + h;
            nn::Tape t1;
            const double up = numeric(t1).scalar();
            p->value.data()[i] = orig - h;
            nn::Tape t2;
            const double down = numeric(t2).scalar();
            p->value.data()[i] = orig;
            fd.data()[i] = (up - down) / (2 * h);
            ++out.checked;
        }
        const double scale = std::max(grad.norm(), fd.norm());
        const double err = scale < tiny ? 0.0 : (grad - fd).norm() / scale;
        if (err > out.max_rel_error) {
            out.max_rel_error = err;
            out.worst = p->name;
        }
    }
    return out;
}

inline GradCheck check_gradients(nn::ParameterStore& store, const std::function<nn::Var(nn::Tape&)>& loss,
                                 double h = 1e-6, double tiny = 1e-10) {
    return check_gradients(store, loss, loss, h, tiny);
}

// Same check for a free input matrix (not a Parameter).
inline double check_input_gradient(Eigen::MatrixXd x, const std::function<nn::Var(nn::Tape&, const nn::Var&)>& f,
                                   double h = 1e-6) {
    nn::Tape tape;
    const nn::Var xv = tape.record(x, true, nullptr);
    tape.backward(f(tape, xv));
    const Eigen::MatrixXd analytic = xv.grad();
    Eigen::MatrixXd numeric(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + h;
        nn::Tape t1;
        const double up = f(t1, t1.constant(x)).scalar();
        x.data()[i] = orig - h;
        nn::Tape t2;
        const double down = f(t2, t2.constant(x)).scalar();
        x.data()[i] = orig;
        numeric.data()[i] = (up - down) / (2 * h);
    }
    const double scale = std::max(analytic.norm(), numeric.norm());
    return scale < 1e-12 ? 0.0 : (analytic - numeric).norm() / scale;
}

// Every monotone surjective assignment of T frames to N phonemes with unit steps.
inline void enumerate_paths(int n, int t, std::vector<int>& cur, std::vector<std::vector<int>>& out) {
    if (static_cast<int>(cur.size()) == t) {
        if (cur.back() == n - 1) out.push_back(cur);
        return;
    }
    const int last = cur.back();
    cur.push_back(last);
    enumerate_paths(n, t, cur, out);
    cur.pop_back();
    if (last + 1 < n) {
        cur.push_back(last + 1);
        enumerate_paths(n, t, cur, out);
        cur.pop_back();
    }
}

inline std::vector<std::vector<int>> all_paths(int n, int t) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur = {0};
    if (t >= 1) enumerate_paths(n, t, cur, out);
    return out;
}

// Edit distance by plain recursion over the three operations (no table), for short inputs.
inline int brute_edit_distance(const std::vector<std::string>& a, std::size_t i, const std::vector<std::string>& b,
                               std::size_t j) {
    if (i == a.size()) return static_cast<int>(b.size() - j);
    if (j == b.size()) return static_cast<int>(a.size() - i);
    const int sub = brute_edit_distance(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
    const int del = brute_edit_distance(a, i + 1, b, j) + 1;
    const int ins = brute_edit_distance(a, i, b, j + 1) + 1;
    return std::min({sub, del, ins});
}

// Finite-difference stand-in for the local style path. Quantization becomes
// z + (q0 - z0) and each stop-gradient in the VQ loss becomes a constant frozen
// at the base point, so the surrogate has the analytic gradients as its true
// derivatives.
struct LocalStyleSurrogate {
    Eigen::MatrixXd z0, offset, entries0;
    std::vector<int> codes;

    LocalStyleSurrogate(const style::LocalStyleEncoder& enc, const Eigen::MatrixXd& mel) {
        nn::Tape t;
        const auto l = style::local_style_encode(t, enc, mel);
        z0 = l.pre_quantization.value();
        offset = l.frames.value() - z0;
        codes = l.codebook_indices;
        entries0 = l.frames.value();
    }

    // frames and vq loss
    std::pair<nn::Var, nn::Var> operator()(nn::Tape& t, const style::LocalStyleEncoder& enc,
                                           const Eigen::MatrixXd& mel) const {
        const auto l = style::local_style_encode(t, enc, mel);
        const nn::Var entries = nn::gather_rows(t.param(*enc.codebook.entries), codes);
        const nn::Var vq = nn::mean(nn::square(t.constant(z0) - entries)) +
                           nn::mean(nn::square(l.pre_quantization - t.constant(entries0))) * enc.commitment;
        return {l.pre_quantization + t.constant(offset), vq};
    }
};

// Dysarthric and normal log-duration references placed around `pred` so that
// each position sits strictly between them (alternately inside and outside the
// hinge's active region) and away from every kink.
struct CpoReferences {
    std::vector<double> dys, normal;
};

inline CpoReferences cpo_references_around(const Eigen::MatrixXd& pred) {
    CpoReferences r;
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
        const double p = pred.data()[i];
        const double s = (i % 2) ? -1.0 : 1.0;
        if (i % 3 == 2) {
            r.dys.push_back(p + s * 0.2);  // |p-d| - |p-n| + 0.75 = -0.55: inactive
            r.normal.push_back(p - s * 1.5);
        } else {
            r.dys.push_back(p + s * 0.3);  // 0.3 - 0.5 + 0.75 = 0.55: active
            r.normal.push_back(p - s * 0.5);
        }
    }
    return r;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

// Small enough for exhaustive finite differences (well under 5k parameters).
inline rhythm::RhythmConfig tiny_rhythm_config() {
    rhythm::RhythmConfig c;
    c.vocab_size = 6;
    c.num_pause_classes = 4;
    c.phone_layers = 1;
    c.phone_heads = 2;
    c.phone_hidden = 8;
    c.phone_filter = 8;
    c.aug_layers = 1;
    c.aug_heads = 2;
    c.aug_hidden = 8;
    c.aug_filter = 8;
    c.predictor_filter = 6;
    c.predictor_kernel = 3;
    return c;
}

inline style::StyleConfig tiny_style_config(int mel_dim) {
    style::StyleConfig c;
    c.mel_dim = mel_dim;
    c.ref_channels = 4;
    c.num_tokens = 3;
    c.token_heads = 2;
    c.global_dim = 4;
    c.local_dim = 3;
    c.codebook_size = 4;
    c.downsample = 2;
    c.attn_dim = 4;
    return c;
}

}  // namespace dars::testing

#endif  // DARS_TEST_SUPPORT_HPP
