#include "dars/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dars::model {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'R', 'S', 'C', 'K', 'P', 'T'};

std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

class Writer {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian host");
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        out_.append(buf, sizeof(T));
    }
    void put_string(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        out_.append(s);
    }
    void put_matrix(const Eigen::MatrixXd& m) {
        put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
        put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) put<double>(m(r, c));
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(const std::string& in) : in_(in) {}
    template <typename T>
    T get() {
        if (off_ + sizeof(T) > in_.size()) throw CheckpointError("truncated checkpoint");
        T v;
        std::memcpy(&v, in_.data() + off_, sizeof(T));
        off_ += sizeof(T);
        return v;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        if (off_ + n > in_.size()) throw CheckpointError("truncated checkpoint");
        std::string s = in_.substr(off_, n);
        off_ += n;
        return s;
    }
    Eigen::MatrixXd get_matrix() {
        const auto rows = get<std::uint32_t>();
        const auto cols = get<std::uint32_t>();
        if (static_cast<std::uint64_t>(rows) * cols * 8 > in_.size() - off_) {
            throw CheckpointError("truncated checkpoint");
        }
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = get<double>();
        return m;
    }
    bool done() const { return off_ == in_.size(); }

private:
    const std::string& in_;
    std::size_t off_ = 0;
};

}  // namespace

void ModelConfig::set_mel_dim(int d) {
    style.mel_dim = d;
    unet.mel_dim = d;
}

void ModelConfig::apply(const config::KeyValueConfig& c) {
    auto& r = rhythm;
    r.vocab_size = static_cast<int>(c.get_int("model.vocab_size", r.vocab_size));
    r.phone_layers = static_cast<int>(c.get_int("model.phone_layers", r.phone_layers));
    r.phone_heads = static_cast<int>(c.get_int("model.phone_heads", r.phone_heads));
    r.phone_hidden = static_cast<int>(c.get_int("model.phone_hidden", r.phone_hidden));
    r.phone_filter = static_cast<int>(c.get_int("model.phone_filter", r.phone_filter));
    r.aug_layers = static_cast<int>(c.get_int("model.aug_layers", r.aug_layers));
    r.aug_heads = static_cast<int>(c.get_int("model.aug_heads", r.aug_heads));
    r.aug_hidden = static_cast<int>(c.get_int("model.aug_hidden", r.aug_hidden));
    r.aug_filter = static_cast<int>(c.get_int("model.aug_filter", r.aug_filter));
    r.predictor_filter = static_cast<int>(c.get_int("model.predictor_filter", r.predictor_filter));
    r.predictor_kernel = static_cast<int>(c.get_int("model.predictor_kernel", r.predictor_kernel));

    set_mel_dim(static_cast<int>(c.get_int("model.mel_dim", mel_dim())));
    auto& s = style;
    s.ref_channels = static_cast<int>(c.get_int("model.ref_channels", s.ref_channels));
    s.num_tokens = static_cast<int>(c.get_int("model.style_tokens", s.num_tokens));
    s.token_heads = static_cast<int>(c.get_int("model.style_token_heads", s.token_heads));
    s.global_dim = static_cast<int>(c.get_int("model.global_style_dim", s.global_dim));
    s.local_dim = static_cast<int>(c.get_int("model.local_style_dim", s.local_dim));
    s.codebook_size = static_cast<int>(c.get_int("model.codebook_size", s.codebook_size));
    s.downsample = static_cast<int>(c.get_int("model.local_downsample", s.downsample));
    s.attn_dim = static_cast<int>(c.get_int("model.style_attn_dim", s.attn_dim));
    s.commitment = c.get_double("model.commitment", s.commitment);

    unet.channels = static_cast<int>(c.get_int("model.unet_channels", unet.channels));
    unet.time_dim = static_cast<int>(c.get_int("model.time_dim", unet.time_dim));
    unet.activation = nn::parse_activation(c.get_string("model.activation", nn::activation_name(unet.activation)));
    speaker_dim = static_cast<int>(c.get_int("model.speaker_dim", speaker_dim));
    fused_dim = static_cast<int>(c.get_int("model.fused_dim", fused_dim));
    frame_shift_s = c.get_double("model.frame_shift_s", frame_shift_s);

    std::vector<std::string> thr_default;
    for (double t : thresholds.upper_s) thr_default.push_back(fmt(t));
    const auto thr = c.get_list("model.pause_thresholds_s", thr_default);
    thresholds.upper_s.clear();
    for (const auto& t : thr) {
        try {
            thresholds.upper_s.push_back(std::stod(t));
        } catch (const std::exception&) {
            throw config::ConfigError("model.pause_thresholds_s: bad value '" + t + "'");
        }
    }
    rhythm.num_pause_classes = thresholds.num_classes();

    rhythm_on = c.get_bool("flags.rhythm_on", rhythm_on);
    style_on = c.get_bool("flags.style_on", style_on);
}

config::KeyValueConfig ModelConfig::to_config() const {
    config::KeyValueConfig c;
    auto i = [&](const char* k, int v) { c.set(k, std::to_string(v)); };
    i("model.vocab_size", rhythm.vocab_size);
    i("model.phone_layers", rhythm.phone_layers);
    i("model.phone_heads", rhythm.phone_heads);
    i("model.phone_hidden", rhythm.phone_hidden);
    i("model.phone_filter", rhythm.phone_filter);
    i("model.aug_layers", rhythm.aug_layers);
    i("model.aug_heads", rhythm.aug_heads);
    i("model.aug_hidden", rhythm.aug_hidden);
    i("model.aug_filter", rhythm.aug_filter);
    i("model.predictor_filter", rhythm.predictor_filter);
    i("model.predictor_kernel", rhythm.predictor_kernel);
    i("model.mel_dim", mel_dim());
    i("model.ref_channels", style.ref_channels);
    i("model.style_tokens", style.num_tokens);
    i("model.style_token_heads", style.token_heads);
    i("model.global_style_dim", style.global_dim);
    i("model.local_style_dim", style.local_dim);
    i("model.codebook_size", style.codebook_size);
    i("model.local_downsample", style.downsample);
    i("model.style_attn_dim", style.attn_dim);
    c.set("model.commitment", fmt(style.commitment));
    i("model.unet_channels", unet.channels);
    i("model.time_dim", unet.time_dim);
    c.set("model.activation", nn::activation_name(unet.activation));
    i("model.speaker_dim", speaker_dim);
    i("model.fused_dim", fused_dim);
    c.set("model.frame_shift_s", fmt(frame_shift_s));
    std::string thr = "[";
    for (std::size_t k = 0; k < thresholds.upper_s.size(); ++k) {
        thr += (k ? ", " : "") + fmt(thresholds.upper_s[k]);
    }
    c.set("model.pause_thresholds_s", thr + "]");
    c.set("flags.rhythm_on", rhythm_on ? "true" : "false");
    c.set("flags.style_on", style_on ? "true" : "false");
    return c;
}

void ModelConfig::validate() const {
    if (rhythm.vocab_size < 1) throw config::ConfigError("model.vocab_size must be positive");
    if (mel_dim() < 2) throw config::ConfigError("model.mel_dim must be at least 2");
    if (rhythm.phone_hidden % rhythm.phone_heads || rhythm.aug_hidden % rhythm.aug_heads) {
        throw config::ConfigError("encoder hidden size must be divisible by its head count");
    }
    if (style.global_dim % style.token_heads) {
        throw config::ConfigError("model.global_style_dim must be divisible by model.style_token_heads");
    }
    if (rhythm.predictor_kernel % 2 == 0) throw config::ConfigError("model.predictor_kernel must be odd");
    if (style.downsample < 1) throw config::ConfigError("model.local_downsample must be >= 1");
    if (!std::is_sorted(thresholds.upper_s.begin(), thresholds.upper_s.end()) ||
        (!thresholds.upper_s.empty() && thresholds.upper_s.front() <= 0.0)) {
        throw config::ConfigError("model.pause_thresholds_s must be positive and ascending");
    }
}

std::unique_ptr<DarsModel> DarsModel::create(const ModelConfig& config, std::vector<std::string> speakers,
                                             std::uint64_t seed) {
    config.validate();
    std::unique_ptr<DarsModel> m(new DarsModel());
    m->config = config;
    m->config.rhythm.num_pause_classes = config.thresholds.num_classes();
    m->speakers = std::move(speakers);
    nn::Rng rng(seed);
    m->rhythm = rhythm::RhythmModel::create(m->store, m->config.rhythm, rng);
    m->style = style::StyleModel::create(m->store, m->config.style, m->config.rhythm.aug_hidden, rng);
    flow::MuBuilderConfig mc;
    mc.hidden = m->config.rhythm.aug_hidden;
    mc.global_dim = m->config.style.global_dim;
    mc.local_dim = m->config.style.local_dim;
    mc.num_speakers = std::max<int>(1, static_cast<int>(m->speakers.size()));
    mc.speaker_dim = m->config.speaker_dim;
    mc.fused_dim = m->config.fused_dim;
    mc.mel_dim = m->config.mel_dim();
    m->mu = flow::MuBuilder::create(m->store, mc, rng);
    m->decoder = flow::UNetField::create(m->store, "decoder", m->config.unet, rng);
    return m;
}

int DarsModel::speaker_index(const std::string& speaker) const {
    auto it = std::find(speakers.begin(), speakers.end(), speaker);
    return it == speakers.end() ? -1 : static_cast<int>(it - speakers.begin());
}

std::string DarsModel::encode() const {
    Writer w;
    for (char ch : kMagic) w.put<char>(ch);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put_string(config.to_config().serialize());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(speakers.size()));
    for (const auto& s : speakers) w.put_string(s);
    const auto params = store.all();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        w.put_string(p->name);
        w.put_matrix(p->value);
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(speaker_stats.size()));
    for (const auto& [spk, st] : speaker_stats) {
        w.put_string(spk);
        w.put<std::int32_t>(st.count);
        w.put_matrix(st.global_mean);
        w.put_matrix(Eigen::Map<const Eigen::RowVectorXd>(st.code_histogram.data(),
                                                          static_cast<Eigen::Index>(st.code_histogram.size())));
    }
    return w.take();
}

std::unique_ptr<DarsModel> DarsModel::decode(const std::string& bytes) {
    Reader r(bytes);
    for (char ch : kMagic) {
        if (r.get<char>() != ch) throw CheckpointError("not a DARS checkpoint (bad magic)");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    ModelConfig cfg;
    cfg.apply(config::KeyValueConfig::parse(r.get_string()));
    std::vector<std::string> speakers(r.get<std::uint32_t>());
    for (auto& s : speakers) s = r.get_string();
    auto m = create(cfg, std::move(speakers), 0);

    const auto n = r.get<std::uint32_t>();
    const auto params = m->store.all();
    if (n != params.size()) {
        throw CheckpointError("checkpoint has " + std::to_string(n) + " tensors, model expects " +
                              std::to_string(params.size()));
    }
    for (std::uint32_t k = 0; k < n; ++k) {
        const std::string name = r.get_string();
        Eigen::MatrixXd value = r.get_matrix();
        if (!m->store.contains(name)) throw CheckpointError("unknown tensor '" + name + "'");
        auto& p = m->store.get(name);
        if (p.value.rows() != value.rows() || p.value.cols() != value.cols()) {
            throw CheckpointError("shape mismatch for tensor '" + name + "'");
        }
        p.value = std::move(value);
    }
    const auto n_stats = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < n_stats; ++k) {
        const std::string spk = r.get_string();
        style::SpeakerStyleStats st;
        st.count = r.get<std::int32_t>();
        st.global_mean = r.get_matrix();
        const Eigen::MatrixXd hist = r.get_matrix();
        st.code_histogram.assign(hist.data(), hist.data() + hist.size());
        m->speaker_stats[spk] = std::move(st);
    }
    if (!r.done()) throw CheckpointError("trailing bytes in checkpoint");
    return m;
}

void DarsModel::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string bytes = encode();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + path.string());
}

std::unique_ptr<DarsModel> DarsModel::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode(ss.str());
}

}  // namespace dars::model
