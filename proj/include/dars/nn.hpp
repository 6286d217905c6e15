#ifndef DARS_NN_HPP
#define DARS_NN_HPP

#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace dars::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Rng = std::mt19937_64;

// =============================================================================
// Parameters
// =============================================================================

struct Parameter {
    std::string name;
    Mat value;
    Mat grad;
    // Adam moments.
    Mat m;
    Mat v;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    Eigen::Index size() const { return value.size(); }
};

// Owns every trainable tensor of a model. Insertion order is stable and is the
// order tensors are written to checkpoints.
class ParameterStore {
public:
    Parameter& create(const std::string& name, Mat init);
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    Eigen::Index total_size() const;
    void zero_grad();

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

Mat xavier_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng);
Mat gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

// =============================================================================
// Reverse-mode tape
// =============================================================================
//
// A Tape records every operation of one forward pass. Values are dense double
// matrices; rows index time (frames or tokens) and columns index features.
// Calling backward() on a 1x1 node accumulates gradients into the nodes and
// into any Parameter that entered the tape via Tape::param().

class Tape;

class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    const Mat& value() const;
    const Mat& grad() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }

    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Mat& out_value, const Mat& out_grad)>;

    Var constant(Mat value);
    Var param(Parameter& p);

    // Records an op output. `backward` receives the output value and gradient
    // and pushes gradient into the parents through accumulate().
    Var record(Mat value, bool requires_grad, Backward backward);

    void accumulate(int id, const Mat& g);
    void backward(const Var& root);

    const Mat& value(int id) const { return nodes_[id].value; }
    const Mat& grad(int id) const { return nodes_[id].grad; }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
        Backward backward;
        Parameter* param = nullptr;
    };
    // deque keeps value() references valid while later ops are recorded
    std::deque<Node> nodes_;
};

// =============================================================================
// Operations
// =============================================================================

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, double s);
Var operator*(double s, const Var& a);
Var hadamard(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);

// a (n x c) + row (1 x c) broadcast over rows.
Var add_row(const Var& a, const Var& row);
// a (n x c) * col (n x 1) broadcast over columns.
Var scale_rows(const Var& a, const Var& col);

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
// x + sin^2(alpha x) / alpha with fixed alpha.
Var snake(const Var& a, double alpha = 1.0);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
// Subgradient 0 at the kink.
Var abs(const Var& a);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);

// out.row(i) = a.row(index[i]), or zeros when index[i] < 0.
Var gather_rows(const Var& a, std::span<const int> index);

Var sum(const Var& a);
Var mean(const Var& a);
// Column-wise mean over rows: (n x c) -> (1 x c).
Var mean_rows(const Var& a);

// Forward identity, backward zero.
Var detach(const Var& a);

// Normalizes each row to zero mean and unit variance, then applies gain/bias (1 x c).
Var layer_norm(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5);

enum class Activation { Silu, Snake, Relu, Tanh };
Activation parse_activation(const std::string& name);
std::string activation_name(Activation act);
Var activate(const Var& a, Activation act);

// =============================================================================
// Layers
// =============================================================================

struct Linear {
    Parameter* weight = nullptr;  // in x out
    Parameter* bias = nullptr;    // 1 x out

    static Linear create(ParameterStore& store, const std::string& name, int in, int out,
                         Rng& rng, bool zero_init = false);
    Var operator()(Tape& tape, const Var& x) const;
    int in_features() const { return static_cast<int>(weight->value.rows()); }
    int out_features() const { return static_cast<int>(weight->value.cols()); }
};

// Same-padded 1-D convolution along rows (time).
struct Conv1d {
    Linear proj;
    int kernel = 3;

    static Conv1d create(ParameterStore& store, const std::string& name, int in, int out,
                         int kernel, Rng& rng);
    Var operator()(Tape& tape, const Var& x) const;
};

struct LayerNorm {
    Parameter* gain = nullptr;
    Parameter* bias = nullptr;

    static LayerNorm create(ParameterStore& store, const std::string& name, int dim);
    Var operator()(Tape& tape, const Var& x) const;
};

struct Embedding {
    Parameter* table = nullptr;  // vocab x dim

    static Embedding create(ParameterStore& store, const std::string& name, int vocab, int dim,
                            Rng& rng, double stddev = 0.3);
    Var operator()(Tape& tape, std::span<const int> ids) const;
};

// Pre-norm transformer block stack with sinusoidal positions.
struct TransformerEncoder {
    struct Block {
        LayerNorm norm1;
        Linear qkv;
        Linear out;
        LayerNorm norm2;
        Linear ff1;
        Linear ff2;
    };
    std::vector<Block> blocks;
    LayerNorm final_norm;
    int heads = 4;
    int hidden = 64;

    static TransformerEncoder create(ParameterStore& store, const std::string& name, int layers,
                                     int heads, int hidden, int filter, Rng& rng);
    Var operator()(Tape& tape, const Var& x) const;
};

Mat sinusoidal_positions(Eigen::Index length, Eigen::Index dim);
// Sinusoidal features of a scalar in [0,1]: 1 x dim.
Mat time_features(double t, Eigen::Index dim);

// =============================================================================
// Optimizer
// =============================================================================

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
    // Clips by global norm, applies one update and returns the pre-clip norm.
    double step(std::span<Parameter* const> params);
    long steps() const { return t_; }

private:
    AdamConfig cfg_;
    long t_ = 0;
};

double global_grad_norm(std::span<Parameter* const> params);

}  // namespace dars::nn

#endif  // DARS_NN_HPP
