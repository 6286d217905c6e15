#include "dars/nn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dars::nn {

namespace {

void require_same_tape(const Var& a, const Var& b) {
    if (a.tape() != b.tape()) {
        throw std::logic_error("operands recorded on different tapes");
    }
}

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
    }
}

bool needs(const Var& v) { return v.tape()->requires_grad(v.id()); }

// Unary elementwise op helper: `df(x, y)` returns dy/dx elementwise.
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
    Tape& tape = *a.tape();
    Mat out = f(a.value());
    const int ia = a.id();
    return tape.record(std::move(out), needs(a), [ia, df](Tape& t, const Mat& y, const Mat& g) {
        t.accumulate(ia, g.cwiseProduct(df(t.value(ia), y)));
    });
}

}  // namespace

// -----------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::create(const std::string& name, Mat init) {
    if (contains(name)) {
        throw std::logic_error("duplicate parameter name: " + name);
    }
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = std::move(init);
    p->zero_grad();
    p->m = Mat::Zero(p->value.rows(), p->value.cols());
    p->v = Mat::Zero(p->value.rows(), p->value.cols());
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw std::out_of_range("unknown parameter: " + name);
    }
    return *params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw std::out_of_range("unknown parameter: " + name);
    }
    return *params_[it->second];
}

std::vector<Parameter*> ParameterStore::all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
    std::vector<const Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

Eigen::Index ParameterStore::total_size() const {
    Eigen::Index n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p->zero_grad();
}

Mat xavier_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
    return m;
}

Mat gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
    return m;
}

// -----------------------------------------------------------------------------
// Tape

const Mat& Var::value() const { return tape_->value(id_); }
const Mat& Var::grad() const { return tape_->grad(id_); }

Var Tape::constant(Mat value) { return record(std::move(value), false, nullptr); }

Var Tape::param(Parameter& p) {
    Node n;
    n.value = p.value;
    n.requires_grad = true;
    n.param = &p;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Mat value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Mat& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
        n.grad = g;
    } else {
        n.grad += g;
    }
}

void Tape::backward(const Var& root) {
    if (root.tape() != this) throw std::logic_error("backward on foreign tape");
    if (root.rows() != 1 || root.cols() != 1) {
        throw std::invalid_argument("backward requires a scalar root");
    }
    accumulate(root.id(), Mat::Ones(1, 1));
    for (int i = root.id(); i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.grad.size() == 0) continue;
        if (n.backward) n.backward(*this, n.value, n.grad);
        if (n.param != nullptr) n.param->grad += n.grad;
    }
}

// -----------------------------------------------------------------------------
// Elementwise arithmetic

Var operator+(const Var& a, const Var& b) {
    require_same_tape(a, b);
    require_same_shape(a.value(), b.value(), "add");
    const int ia = a.id(), ib = b.id();
    return a.tape()->record(a.value() + b.value(), needs(a) || needs(b),
                            [ia, ib](Tape& t, const Mat&, const Mat& g) {
                                t.accumulate(ia, g);
                                t.accumulate(ib, g);
                            });
}

Var operator-(const Var& a, const Var& b) {
    require_same_tape(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    const int ia = a.id(), ib = b.id();
    return a.tape()->record(a.value() - b.value(), needs(a) || needs(b),
                            [ia, ib](Tape& t, const Mat&, const Mat& g) {
                                t.accumulate(ia, g);
                                t.accumulate(ib, -g);
                            });
}

Var operator*(const Var& a, double s) {
    const int ia = a.id();
    return a.tape()->record(a.value() * s, needs(a), [ia, s](Tape& t, const Mat&, const Mat& g) {
        t.accumulate(ia, g * s);
    });
}

Var operator*(double s, const Var& a) { return a * s; }

Var hadamard(const Var& a, const Var& b) {
    require_same_tape(a, b);
    require_same_shape(a.value(), b.value(), "hadamard");
    const int ia = a.id(), ib = b.id();
    return a.tape()->record(a.value().cwiseProduct(b.value()), needs(a) || needs(b),
                            [ia, ib](Tape& t, const Mat&, const Mat& g) {
                                t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                                t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                            });
}

Var add_scalar(const Var& a, double s) {
    const int ia = a.id();
    Mat out = a.value().array() + s;
    return a.tape()->record(std::move(out), needs(a),
                            [ia](Tape& t, const Mat&, const Mat& g) { t.accumulate(ia, g); });
}

Var add_row(const Var& a, const Var& row) {
    require_same_tape(a, row);
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("add_row: row must be 1 x cols");
    }
    const int ia = a.id(), ir = row.id();
    Mat out = a.value().rowwise() + row.value().row(0);
    return a.tape()->record(std::move(out), needs(a) || needs(row),
                            [ia, ir](Tape& t, const Mat&, const Mat& g) {
                                t.accumulate(ia, g);
                                t.accumulate(ir, g.colwise().sum());
                            });
}

Var scale_rows(const Var& a, const Var& col) {
    require_same_tape(a, col);
    if (col.cols() != 1 || col.rows() != a.rows()) {
        throw std::invalid_argument("scale_rows: column must be rows x 1");
    }
    const int ia = a.id(), ic = col.id();
    Mat out = a.value().array().colwise() * col.value().col(0).array();
    return a.tape()->record(std::move(out), needs(a) || needs(col),
                            [ia, ic](Tape& t, const Mat&, const Mat& g) {
                                const Mat& av = t.value(ia);
                                const Mat& cv = t.value(ic);
                                t.accumulate(ia, (g.array().colwise() * cv.col(0).array()).matrix());
                                t.accumulate(ic, g.cwiseProduct(av).rowwise().sum());
                            });
}

// -----------------------------------------------------------------------------
// Products

Var matmul(const Var& a, const Var& b) {
    require_same_tape(a, b);
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    const int ia = a.id(), ib = b.id();
    Mat out = a.value() * b.value();
    return a.tape()->record(std::move(out), needs(a) || needs(b),
                            [ia, ib](Tape& t, const Mat&, const Mat& g) {
                                if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                                if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                            });
}

Var matmul_nt(const Var& a, const Var& b) {
    require_same_tape(a, b);
    if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    const int ia = a.id(), ib = b.id();
    Mat out = a.value() * b.value().transpose();
    return a.tape()->record(std::move(out), needs(a) || needs(b),
                            [ia, ib](Tape& t, const Mat&, const Mat& g) {
                                if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
                                if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
                            });
}

Var transpose(const Var& a) {
    const int ia = a.id();
    return a.tape()->record(a.value().transpose(), needs(a),
                            [ia](Tape& t, const Mat&, const Mat& g) {
                                t.accumulate(ia, g.transpose());
                            });
}

// -----------------------------------------------------------------------------
// Nonlinearities

Var relu(const Var& a) {
    return unary(
        a, [](const Mat& x) -> Mat { return x.cwiseMax(0.0); },
        [](const Mat& x, const Mat&) -> Mat { return (x.array() > 0.0).cast<double>().matrix(); });
}

Var tanh(const Var& a) {
    return unary(
        a, [](const Mat& x) -> Mat { return x.array().tanh().matrix(); },
        [](const Mat&, const Mat& y) -> Mat { return (1.0 - y.array().square()).matrix(); });
}

Var sigmoid(const Var& a) {
    return unary(
        a, [](const Mat& x) -> Mat { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); },
        [](const Mat&, const Mat& y) -> Mat { return (y.array() * (1.0 - y.array())).matrix(); });
}

Var silu(const Var& a) {
    return unary(
        a,
        [](const Mat& x) -> Mat { return (x.array() / (1.0 + (-x.array()).exp())).matrix(); },
        [](const Mat& x, const Mat&) -> Mat {
            const Eigen::ArrayXXd s = 1.0 / (1.0 + (-x.array()).exp());
            return (s * (1.0 + x.array() * (1.0 - s))).matrix();
        });
}

Var snake(const Var& a, double alpha) {
    return unary(
        a,
        [alpha](const Mat& x) -> Mat {
            return (x.array() + (alpha * x.array()).sin().square() / alpha).matrix();
        },
        [alpha](const Mat& x, const Mat&) -> Mat {
            return (1.0 + (2.0 * alpha * x.array()).sin()).matrix();
        });
}

Var exp(const Var& a) {
    return unary(
        a, [](const Mat& x) -> Mat { return x.array().exp().matrix(); },
        [](const Mat&, const Mat& y) -> Mat { return y; });
}

Var log(const Var& a) {
    return unary(
        a, [](const Mat& x) -> Mat { return x.array().log().matrix(); },
        [](const Mat& x, const Mat&) -> Mat { return x.array().inverse().matrix(); });
}

Var square(const Var& a) {
    return unary(
        a, [](const Mat& x) -> Mat { return x.array().square().matrix(); },
        [](const Mat& x, const Mat&) -> Mat { return 2.0 * x; });
}

Var abs(const Var& a) {
    return unary(
        a, [](const Mat& x) -> Mat { return x.cwiseAbs(); },
        [](const Mat& x, const Mat&) -> Mat {
            return x.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
        });
}

Var softmax_rows(const Var& a) {
    Mat x = a.value();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mx = x.row(i).maxCoeff();
        x.row(i) = (x.row(i).array() - mx).exp().matrix();
        x.row(i) /= x.row(i).sum();
    }
    const int ia = a.id();
    return a.tape()->record(std::move(x), needs(a), [ia](Tape& t, const Mat& y, const Mat& g) {
        const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
        Mat gx = y.cwiseProduct(Mat(g.colwise() - dot));
        t.accumulate(ia, gx);
    });
}

Var log_softmax_rows(const Var& a) {
    Mat x = a.value();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mx = x.row(i).maxCoeff();
        const double lse = mx + std::log((x.row(i).array() - mx).exp().sum());
        x.row(i).array() -= lse;
    }
    const int ia = a.id();
    return a.tape()->record(std::move(x), needs(a), [ia](Tape& t, const Mat& y, const Mat& g) {
        const Eigen::VectorXd gsum = g.rowwise().sum();
        Mat p = y.array().exp().matrix();
        Mat gx = g - Mat(p.array().colwise() * gsum.array());
        t.accumulate(ia, gx);
    });
}

// -----------------------------------------------------------------------------
// Shape ops

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    Tape& tape = *parts[0].tape();
    const Eigen::Index rows = parts[0].rows();
    Eigen::Index cols = 0;
    bool req = false;
    for (const Var& p : parts) {
        require_same_tape(parts[0], p);
        if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p.cols();
        req = req || needs(p);
    }
    Mat out(rows, cols);
    std::vector<std::pair<int, Eigen::Index>> pieces;
    Eigen::Index off = 0;
    for (const Var& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        pieces.emplace_back(p.id(), p.cols());
        off += p.cols();
    }
    return tape.record(std::move(out), req, [pieces](Tape& t, const Mat&, const Mat& g) {
        Eigen::Index o = 0;
        for (const auto& [id, c] : pieces) {
            if (t.requires_grad(id)) t.accumulate(id, g.middleCols(o, c));
            o += c;
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Tape& tape = *parts[0].tape();
    const Eigen::Index cols = parts[0].cols();
    Eigen::Index rows = 0;
    bool req = false;
    for (const Var& p : parts) {
        require_same_tape(parts[0], p);
        if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += p.rows();
        req = req || needs(p);
    }
    Mat out(rows, cols);
    std::vector<std::pair<int, Eigen::Index>> pieces;
    Eigen::Index off = 0;
    for (const Var& p : parts) {
        out.middleRows(off, p.rows()) = p.value();
        pieces.emplace_back(p.id(), p.rows());
        off += p.rows();
    }
    return tape.record(std::move(out), req, [pieces](Tape& t, const Mat&, const Mat& g) {
        Eigen::Index o = 0;
        for (const auto& [id, r] : pieces) {
            if (t.requires_grad(id)) t.accumulate(id, g.middleRows(o, r));
            o += r;
        }
    });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) {
        throw std::out_of_range("slice_cols out of range");
    }
    const int ia = a.id();
    const Eigen::Index total = a.cols();
    return a.tape()->record(a.value().middleCols(start, count), needs(a),
                            [ia, start, count, total](Tape& t, const Mat&, const Mat& g) {
                                Mat full = Mat::Zero(g.rows(), total);
                                full.middleCols(start, count) = g;
                                t.accumulate(ia, full);
                            });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) {
        throw std::out_of_range("slice_rows out of range");
    }
    const int ia = a.id();
    const Eigen::Index total = a.rows();
    return a.tape()->record(a.value().middleRows(start, count), needs(a),
                            [ia, start, count, total](Tape& t, const Mat&, const Mat& g) {
                                Mat full = Mat::Zero(total, g.cols());
                                full.middleRows(start, count) = g;
                                t.accumulate(ia, full);
                            });
}

Var gather_rows(const Var& a, std::span<const int> index) {
    const Mat& src = a.value();
    Mat out = Mat::Zero(static_cast<Eigen::Index>(index.size()), src.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        const int r = index[i];
        if (r >= src.rows()) throw std::out_of_range("gather_rows index out of range");
        if (r >= 0) out.row(static_cast<Eigen::Index>(i)) = src.row(r);
    }
    const int ia = a.id();
    const Eigen::Index src_rows = src.rows();
    std::vector<int> idx(index.begin(), index.end());
    return a.tape()->record(std::move(out), needs(a),
                            [ia, src_rows, idx = std::move(idx)](Tape& t, const Mat&, const Mat& g) {
                                Mat ga = Mat::Zero(src_rows, g.cols());
                                for (std::size_t i = 0; i < idx.size(); ++i) {
                                    if (idx[i] >= 0) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                                }
                                t.accumulate(ia, ga);
                            });
}

// -----------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
    const int ia = a.id();
    const Eigen::Index r = a.rows(), c = a.cols();
    Mat out(1, 1);
    out(0, 0) = a.value().sum();
    return a.tape()->record(std::move(out), needs(a), [ia, r, c](Tape& t, const Mat&, const Mat& g) {
        t.accumulate(ia, Mat::Constant(r, c, g(0, 0)));
    });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().size());
    if (n == 0) throw std::invalid_argument("mean of empty matrix");
    return sum(a) * (1.0 / n);
}

Var mean_rows(const Var& a) {
    const int ia = a.id();
    const Eigen::Index r = a.rows();
    if (r == 0) throw std::invalid_argument("mean_rows of empty matrix");
    Mat out = a.value().colwise().mean();
    return a.tape()->record(std::move(out), needs(a), [ia, r](Tape& t, const Mat&, const Mat& g) {
        t.accumulate(ia, g.replicate(r, 1) / static_cast<double>(r));
    });
}

Var detach(const Var& a) { return a.tape()->constant(a.value()); }

Var layer_norm(const Var& a, const Var& gain, const Var& bias, double eps) {
    require_same_tape(a, gain);
    require_same_tape(a, bias);
    const Mat& x = a.value();
    const Eigen::Index n = x.rows(), c = x.cols();
    Eigen::VectorXd inv_std(n);
    Mat xhat(n, c);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = x.row(i).mean();
        const double var = (x.row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
    }
    Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
    out.rowwise() += bias.value().row(0);
    const int ia = a.id(), ig = gain.id(), ib = bias.id();
    return a.tape()->record(
        std::move(out), needs(a) || needs(gain) || needs(bias),
        [ia, ig, ib, xhat, inv_std](Tape& t, const Mat&, const Mat& g) {
            const Mat& gv = t.value(ig);
            t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
            t.accumulate(ib, g.colwise().sum());
            if (!t.requires_grad(ia)) return;
            const double c = static_cast<double>(g.cols());
            Mat gx_hat = (g.array().rowwise() * gv.row(0).array()).matrix();
            Mat gx(g.rows(), g.cols());
            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                const double m1 = gx_hat.row(i).sum() / c;
                const double m2 = gx_hat.row(i).cwiseProduct(xhat.row(i)).sum() / c;
                gx.row(i) = inv_std(i) * (gx_hat.row(i).array() - m1 - xhat.row(i).array() * m2);
            }
            t.accumulate(ia, gx);
        });
}

Activation parse_activation(const std::string& name) {
    if (name == "silu") return Activation::Silu;
    if (name == "snake") return Activation::Snake;
    if (name == "relu") return Activation::Relu;
    if (name == "tanh") return Activation::Tanh;
    throw std::invalid_argument("unknown activation: " + name);
}

std::string activation_name(Activation act) {
    switch (act) {
        case Activation::Silu: return "silu";
        case Activation::Snake: return "snake";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
    }
    return "silu";
}

Var activate(const Var& a, Activation act) {
    switch (act) {
        case Activation::Silu: return silu(a);
        case Activation::Snake: return snake(a);
        case Activation::Relu: return relu(a);
        case Activation::Tanh: return tanh(a);
    }
    return silu(a);
}

// -----------------------------------------------------------------------------
// Layers

Linear Linear::create(ParameterStore& store, const std::string& name, int in, int out, Rng& rng,
                      bool zero_init) {
    Linear l;
    l.weight = &store.create(name + ".weight",
                             zero_init ? Mat(Mat::Zero(in, out)) : xavier_uniform(in, out, rng));
    l.bias = &store.create(name + ".bias", Mat::Zero(1, out));
    return l;
}

Var Linear::operator()(Tape& tape, const Var& x) const {
    return add_row(matmul(x, tape.param(*weight)), tape.param(*bias));
}

Conv1d Conv1d::create(ParameterStore& store, const std::string& name, int in, int out, int kernel,
                      Rng& rng) {
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("Conv1d kernel must be odd");
    Conv1d c;
    c.kernel = kernel;
    c.proj = Linear::create(store, name, in * kernel, out, rng);
    return c;
}

Var Conv1d::operator()(Tape& tape, const Var& x) const {
    const int n = static_cast<int>(x.rows());
    const int half = kernel / 2;
    std::vector<Var> taps;
    taps.reserve(static_cast<std::size_t>(kernel));
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int k = -half; k <= half; ++k) {
        if (k == 0) {
            taps.push_back(x);
            continue;
        }
        for (int i = 0; i < n; ++i) {
            const int j = i + k;
            idx[static_cast<std::size_t>(i)] = (j >= 0 && j < n) ? j : -1;
        }
        taps.push_back(gather_rows(x, idx));
    }
    return proj(tape, concat_cols(taps));
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& name, int dim) {
    LayerNorm ln;
    ln.gain = &store.create(name + ".gain", Mat::Ones(1, dim));
    ln.bias = &store.create(name + ".bias", Mat::Zero(1, dim));
    return ln;
}

Var LayerNorm::operator()(Tape& tape, const Var& x) const {
    return layer_norm(x, tape.param(*gain), tape.param(*bias));
}

Embedding Embedding::create(ParameterStore& store, const std::string& name, int vocab, int dim,
                            Rng& rng, double stddev) {
    Embedding e;
    e.table = &store.create(name, gaussian(vocab, dim, stddev, rng));
    return e;
}

Var Embedding::operator()(Tape& tape, std::span<const int> ids) const {
    const int vocab = static_cast<int>(table->value.rows());
    for (int id : ids) {
        if (id < 0 || id >= vocab) {
            throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(vocab));
        }
    }
    return gather_rows(tape.param(*table), ids);
}

TransformerEncoder TransformerEncoder::create(ParameterStore& store, const std::string& name,
                                              int layers, int heads, int hidden, int filter,
                                              Rng& rng) {
    if (hidden % heads != 0) throw std::invalid_argument("hidden must be divisible by heads");
    TransformerEncoder enc;
    enc.heads = heads;
    enc.hidden = hidden;
    for (int l = 0; l < layers; ++l) {
        const std::string p = name + ".block" + std::to_string(l);
        Block b;
        b.norm1 = LayerNorm::create(store, p + ".norm1", hidden);
        b.qkv = Linear::create(store, p + ".qkv", hidden, 3 * hidden, rng);
        b.out = Linear::create(store, p + ".out", hidden, hidden, rng);
        b.norm2 = LayerNorm::create(store, p + ".norm2", hidden);
        b.ff1 = Linear::create(store, p + ".ff1", hidden, filter, rng);
        b.ff2 = Linear::create(store, p + ".ff2", filter, hidden, rng);
        enc.blocks.push_back(b);
    }
    enc.final_norm = LayerNorm::create(store, name + ".final_norm", hidden);
    return enc;
}

Var TransformerEncoder::operator()(Tape& tape, const Var& x) const {
    if (x.cols() != hidden) throw std::invalid_argument("transformer input width mismatch");
    Var h = x + tape.constant(sinusoidal_positions(x.rows(), hidden));
    const int dh = hidden / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const Block& b : blocks) {
        Var qkv = b.qkv(tape, b.norm1(tape, h));
        std::vector<Var> head_out;
        head_out.reserve(static_cast<std::size_t>(heads));
        for (int k = 0; k < heads; ++k) {
            Var q = slice_cols(qkv, k * dh, dh);
            Var kk = slice_cols(qkv, hidden + k * dh, dh);
            Var v = slice_cols(qkv, 2 * hidden + k * dh, dh);
            Var attn = softmax_rows(matmul_nt(q, kk) * scale);
            head_out.push_back(matmul(attn, v));
        }
        h = h + b.out(tape, concat_cols(head_out));
        h = h + b.ff2(tape, relu(b.ff1(tape, b.norm2(tape, h))));
    }
    return final_norm(tape, h);
}

Mat sinusoidal_positions(Eigen::Index length, Eigen::Index dim) {
    Mat pe(length, dim);
    for (Eigen::Index pos = 0; pos < length; ++pos) {
        for (Eigen::Index i = 0; i < dim; ++i) {
            const double freq =
                std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
            const double angle = static_cast<double>(pos) * freq;
            pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

Mat time_features(double t, Eigen::Index dim) {
    Mat f(1, dim);
    const Eigen::Index half = dim / 2;
    for (Eigen::Index i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(1000.0) * static_cast<double>(i) /
                                     static_cast<double>(std::max<Eigen::Index>(half - 1, 1)));
        f(0, i) = std::sin(1000.0 * t * freq);
        f(0, half + i) = std::cos(1000.0 * t * freq);
    }
    if (dim % 2 == 1) f(0, dim - 1) = t;
    return f;
}

// -----------------------------------------------------------------------------
// Adam

double global_grad_norm(std::span<Parameter* const> params) {
    double sq = 0.0;
    for (const Parameter* p : params) sq += p->grad.squaredNorm();
    return std::sqrt(sq);
}

double Adam::step(std::span<Parameter* const> params) {
    const double norm = global_grad_norm(params);
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
        const Mat g = p->grad * clip;
        p->m = cfg_.beta1 * p->m + (1.0 - cfg_.beta1) * g;
        p->v = cfg_.beta2 * p->v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        p->value.array() -= cfg_.lr * (p->m.array() / bc1) /
                            ((p->v.array() / bc2).sqrt() + cfg_.eps);
    }
    return norm;
}

}  // namespace dars::nn
