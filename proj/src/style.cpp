#include "dars/style.hpp"

#include <cmath>
#include <stdexcept>

namespace dars::style {

using nn::Mat;
using nn::Tape;
using nn::Var;

GlobalStyleEncoder GlobalStyleEncoder::create(nn::ParameterStore& store, const StyleConfig& cfg,
                                              nn::Rng& rng) {
    if (cfg.global_dim % cfg.token_heads != 0) {
        throw std::invalid_argument("global_dim must be divisible by token_heads");
    }
    GlobalStyleEncoder g;
    g.heads = cfg.token_heads;
    g.ref_conv1 = nn::Conv1d::create(store, "style.gst.ref_conv1", cfg.mel_dim, cfg.ref_channels, 3, rng);
    g.ref_conv2 = nn::Conv1d::create(store, "style.gst.ref_conv2", cfg.ref_channels, cfg.ref_channels, 3, rng);
    g.query = nn::Linear::create(store, "style.gst.query", cfg.ref_channels, cfg.global_dim, rng);
    g.key = nn::Linear::create(store, "style.gst.key", cfg.global_dim, cfg.global_dim, rng);
    g.tokens = &store.create("style.gst.tokens", nn::gaussian(cfg.num_tokens, cfg.global_dim, 0.3, rng));
    return g;
}

GlobalStyle global_style(Tape& tape, const GlobalStyleEncoder& enc, const Eigen::MatrixXd& mel) {
    if (mel.rows() < 1) throw std::invalid_argument("global_style: empty mel");
    Var h = nn::relu(enc.ref_conv1(tape, tape.constant(mel)));
    h = nn::relu(enc.ref_conv2(tape, h));
    const Var summary = nn::tanh(nn::mean_rows(h));
    const Var q = enc.query(tape, summary);
    const Var tokens = tape.param(*enc.tokens);
    const Var keys = enc.key(tape, tokens);
    const Eigen::Index G = tokens.cols();
    const Eigen::Index dh = G / enc.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    GlobalStyle out;
    out.weights.resize(enc.heads, tokens.rows());
    std::vector<Var> heads;
    for (int k = 0; k < enc.heads; ++k) {
        const Var w = nn::softmax_rows(
            nn::matmul_nt(nn::slice_cols(q, k * dh, dh), nn::slice_cols(keys, k * dh, dh)) * scale);
        out.weights.row(k) = w.value().row(0);
        heads.push_back(nn::matmul(w, nn::slice_cols(tokens, k * dh, dh)));
    }
    out.vector = nn::concat_cols(heads);
    return out;
}

Quantized vq_quantize(const Eigen::VectorXd& z, const Eigen::MatrixXd& codebook) {
    if (codebook.rows() < 1) throw std::invalid_argument("empty codebook");
    if (codebook.cols() != z.size()) throw std::invalid_argument("vq_quantize: dimension mismatch");
    Quantized q;
    double best = (codebook.row(0).transpose() - z).squaredNorm();
    for (Eigen::Index c = 1; c < codebook.rows(); ++c) {
        const double d = (codebook.row(c).transpose() - z).squaredNorm();
        if (d < best) {
            best = d;
            q.index = static_cast<int>(c);
        }
    }
    q.vector = codebook.row(q.index).transpose();
    return q;
}

LocalStyleEncoder LocalStyleEncoder::create(nn::ParameterStore& store, const StyleConfig& cfg,
                                            nn::Rng& rng) {
    LocalStyleEncoder l;
    l.downsample = cfg.downsample;
    l.commitment = cfg.commitment;
    l.conv1 = nn::Conv1d::create(store, "style.local.conv1", cfg.mel_dim, cfg.local_dim, 3, rng);
    l.conv2 = nn::Conv1d::create(store, "style.local.conv2", cfg.local_dim, cfg.local_dim, 3, rng);
    l.proj = nn::Linear::create(store, "style.local.proj", cfg.local_dim, cfg.local_dim, rng);
    l.codebook.entries = &store.create("style.local.codebook",
                                       nn::gaussian(cfg.codebook_size, cfg.local_dim, 0.5, rng));
    return l;
}

Eigen::MatrixXd pooling_matrix(Eigen::Index rows, int factor) {
    if (factor < 1) throw std::invalid_argument("pooling factor must be >= 1");
    const Eigen::Index out_rows = (rows + factor - 1) / factor;
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(out_rows, rows);
    for (Eigen::Index r = 0; r < out_rows; ++r) {
        const Eigen::Index start = r * factor;
        const Eigen::Index n = std::min<Eigen::Index>(factor, rows - start);
        P.block(r, start, 1, n).setConstant(1.0 / static_cast<double>(n));
    }
    return P;
}

Var straight_through(const Var& z, const Eigen::MatrixXd& quantized) {
    if (z.rows() != quantized.rows() || z.cols() != quantized.cols()) {
        throw std::invalid_argument("straight_through: shape mismatch");
    }
    const int iz = z.id();
    Tape& tape = *z.tape();
    return tape.record(quantized, tape.requires_grad(iz),
                       [iz](Tape& t, const Mat&, const Mat& g) { t.accumulate(iz, g); });
}

LocalStyle local_style_encode(Tape& tape, const LocalStyleEncoder& enc, const Eigen::MatrixXd& mel) {
    if (mel.rows() < 1) throw std::invalid_argument("local_style_encode: empty mel");
    Var h = nn::relu(enc.conv1(tape, tape.constant(mel)));
    h = nn::relu(enc.conv2(tape, h));
    h = nn::matmul(tape.constant(pooling_matrix(mel.rows(), enc.downsample)), h);
    const Var z = enc.proj(tape, h);

    const Mat& codebook = enc.codebook.entries->value;
    LocalStyle out;
    out.pre_quantization = z;
    Mat q(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const Quantized qr = vq_quantize(z.value().row(r).transpose(), codebook);
        q.row(r) = qr.vector.transpose();
        out.codebook_indices.push_back(qr.index);
    }
    out.frames = straight_through(z, q);

    // Codebook term pulls entries to encoder outputs; commitment term the reverse.
    const Var entries = nn::gather_rows(tape.param(*enc.codebook.entries), out.codebook_indices);
    const Var codebook_term = nn::mean(nn::square(nn::detach(z) - entries));
    const Var commitment_term = nn::mean(nn::square(z - nn::detach(entries)));
    out.vq_loss = codebook_term + commitment_term * enc.commitment;
    return out;
}

StyleAligner StyleAligner::create(nn::ParameterStore& store, int hidden, const StyleConfig& cfg,
                                  nn::Rng& rng) {
    StyleAligner a;
    a.query = nn::Linear::create(store, "style.align.query", hidden, cfg.attn_dim, rng);
    a.key = nn::Linear::create(store, "style.align.key", cfg.local_dim, cfg.attn_dim, rng);
    return a;
}

AlignedStyle align_local_style(Tape& tape, const StyleAligner& aligner, const Var& style, const Var& H_c) {
    if (style.rows() < 1 || H_c.rows() < 1) throw std::invalid_argument("align_local_style: empty input");
    const Var q = aligner.query(tape, H_c);
    const Var k = aligner.key(tape, style);
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    AlignedStyle out;
    out.attention = nn::softmax_rows(nn::matmul_nt(q, k) * scale);
    out.frames = nn::matmul(out.attention, style);
    return out;
}

StyleModel StyleModel::create(nn::ParameterStore& store, const StyleConfig& cfg, int hidden, nn::Rng& rng) {
    StyleModel m;
    m.config = cfg;
    m.global = GlobalStyleEncoder::create(store, cfg, rng);
    m.local = LocalStyleEncoder::create(store, cfg, rng);
    m.aligner = StyleAligner::create(store, hidden, cfg, rng);
    return m;
}

void SpeakerStyleStats::add(const Eigen::RowVectorXd& global, std::span<const int> codes,
                            int codebook_size) {
    if (count == 0) {
        global_mean = Eigen::RowVectorXd::Zero(global.size());
        code_histogram.assign(static_cast<std::size_t>(codebook_size), 0.0);
    }
    ++count;
    global_mean += (global - global_mean) / static_cast<double>(count);
    for (int c : codes) code_histogram[static_cast<std::size_t>(c)] += 1.0;
}

int SpeakerStyleStats::most_frequent_code() const {
    int best = 0;
    for (std::size_t c = 1; c < code_histogram.size(); ++c) {
        if (code_histogram[c] > code_histogram[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    }
    return best;
}

}  // namespace dars::style
