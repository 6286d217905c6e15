#include "dars/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

namespace dars::trainer {

namespace fs = std::filesystem;
using nn::Var;

// -----------------------------------------------------------------------------
// Configuration

TrainConfig TrainConfig::from_config(const config::KeyValueConfig& c) {
    TrainConfig t;
    t.epochs = static_cast<int>(c.get_int("train.epochs", t.epochs));
    t.batch_size = static_cast<int>(c.get_int("train.batch_size", t.batch_size));
    t.seed = static_cast<std::uint64_t>(c.get_int("train.seed", static_cast<long>(t.seed)));
    try {
        t.strategy = corpus::parse_strategy(c.get_string("train.strategy", corpus::to_string(t.strategy)));
    } catch (const std::invalid_argument& e) {
        throw config::ConfigError(std::string("train.strategy: ") + e.what());
    }
    t.cpo_warmup_accuracy = c.get_double("train.cpo_warmup_accuracy", t.cpo_warmup_accuracy);
    const std::string src = c.get_string("train.duration_source", t.duration_source == DurationSource::Mas ? "mas" : "alignment");
    if (src == "mas") {
        t.duration_source = DurationSource::Mas;
    } else if (src == "alignment") {
        t.duration_source = DurationSource::Alignment;
    } else {
        throw config::ConfigError("train.duration_source must be mas or alignment, got '" + src + "'");
    }
    t.decoder_crop_frames = static_cast<int>(c.get_int("train.decoder_crop_frames", t.decoder_crop_frames));
    t.normal_table = c.get_string("train.normal_table", t.normal_table.string());

    t.weights.s = c.get_double("loss.lambda_s", t.weights.s);
    t.weights.d = c.get_double("loss.lambda_d", t.weights.d);
    t.weights.cp = c.get_double("loss.lambda_cp", t.weights.cp);
    t.weights.cfm = c.get_double("loss.lambda_cfm", t.weights.cfm);
    t.weights.prior = c.get_double("loss.lambda_prior", t.weights.prior);
    t.weights.vq = c.get_double("loss.lambda_vq", t.weights.vq);

    t.cpo.alpha = c.get_double("cpo.alpha", t.cpo.alpha);
    t.cpo.beta = c.get_double("cpo.beta", t.cpo.beta);
    t.cpo.margin = c.get_double("cpo.margin", t.cpo.margin);
    t.otcfm.sigma_min = c.get_double("otcfm.sigma_min", t.otcfm.sigma_min);
    t.otcfm.n_euler_steps = static_cast<int>(c.get_int("otcfm.n_euler_steps", t.otcfm.n_euler_steps));
    t.adam.lr = c.get_double("optim.lr", t.adam.lr);
    t.adam.beta1 = c.get_double("optim.beta1", t.adam.beta1);
    t.adam.beta2 = c.get_double("optim.beta2", t.adam.beta2);
    t.adam.eps = c.get_double("optim.eps", t.adam.eps);
    t.adam.clip_norm = c.get_double("optim.clip_norm", t.adam.clip_norm);

    t.flags.rhythm_on = c.get_bool("flags.rhythm_on", t.flags.rhythm_on);
    t.flags.cpo_on = c.get_bool("flags.cpo_on", t.flags.cpo_on);
    t.flags.style_on = c.get_bool("flags.style_on", t.flags.style_on);
    t.model.apply(c);
    return t;
}

std::vector<std::string> TrainConfig::validate() const {
    std::vector<std::string> warnings;
    const double w[] = {weights.s, weights.d, weights.cp, weights.cfm, weights.prior, weights.vq};
    for (double x : w) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw config::ConfigError("loss weights must be finite and non-negative");
    }
    if (std::none_of(std::begin(w), std::end(w), [](double x) { return x > 0.0; })) {
        throw config::ConfigError("at least one loss weight must be positive");
    }
    if (epochs < 1) throw config::ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw config::ConfigError("train.batch_size must be >= 1");
    if (decoder_crop_frames < 0) throw config::ConfigError("train.decoder_crop_frames must be >= 0");
    if (flags.cpo_on && !flags.rhythm_on) {
        throw config::ConfigError("flags.cpo_on requires flags.rhythm_on (CPO weights come from the pause predictor)");
    }
    if (!(adam.lr > 0.0)) throw config::ConfigError("optim.lr must be positive");
    if (cpo_warmup_accuracy < 0.0 || cpo_warmup_accuracy > 1.0) {
        throw config::ConfigError("train.cpo_warmup_accuracy must lie in [0, 1]");
    }
    try {
        const std::string w_cpo = cpo.validate();
        if (!w_cpo.empty()) warnings.push_back(w_cpo);
        otcfm.validate();
    } catch (const std::invalid_argument& e) {
        throw config::ConfigError(e.what());
    }
    effective_model().validate();
    return warnings;
}

model::ModelConfig TrainConfig::effective_model() const {
    model::ModelConfig m = model;
    m.rhythm_on = flags.rhythm_on;
    m.style_on = flags.style_on;
    return m;
}

std::vector<std::string> preset_names() { return {"E5", "E6", "E7", "E8", "E9"}; }

TrainConfig apply_preset(TrainConfig base, const std::string& name) {
    auto& f = base.flags;
    if (name == "E5") {
        f = {false, false, false};
    } else if (name == "E6") {
        f = {true, false, false};
    } else if (name == "E7") {
        f = {true, true, false};
        base.cpo.alpha = 0.5;
        base.cpo.beta = 0.5;
    } else if (name == "E8") {
        f = {true, true, false};
        base.cpo.alpha = 0.7;
        base.cpo.beta = 0.3;
    } else if (name == "E9") {
        f = {true, true, true};
        base.cpo.alpha = 0.7;
        base.cpo.beta = 0.3;
    } else {
        throw config::ConfigError("unknown preset '" + name + "' (expected E5..E9)");
    }
    return base;
}

// -----------------------------------------------------------------------------
// Data

PreparedUtterance prepare_utterance(const corpus::UtteranceRecord& record, const model::DarsModel& model,
                                    const cpo::NormalDurationTable& normal) {
    PreparedUtterance u;
    u.record = record;
    const auto mel = corpus::load_mel(record.mel_path);
    if (mel.dim() != model.config.mel_dim()) {
        throw corpus::ValidationError(record.utt_id + ": mel has " + std::to_string(mel.dim()) +
                                      " bins, model expects " + std::to_string(model.config.mel_dim()));
    }
    u.mel = mel.as_double();
    const auto tokens = corpus::load_alignment(record.alignment_path);
    u.pauses = alignment::pause_labels_from_alignment(tokens, model.config.thresholds, mel.frame_shift_s);
    u.phone_frames = alignment::phoneme_frames(tokens);
    u.silence_after = alignment::silence_after_phonemes(tokens);
    for (const auto& tok : tokens) {
        if (tok.kind == corpus::TokenKind::Phoneme) break;
        u.leading_silence += tok.frames();
    }
    if (u.phone_frames.size() != record.phonemes.size()) {
        throw corpus::ValidationError(record.utt_id + ": alignment has " + std::to_string(u.phone_frames.size()) +
                                      " phonemes, manifest has " + std::to_string(record.phonemes.size()));
    }
    for (int p : record.phonemes) {
        if (p < 0 || p >= model.config.rhythm.vocab_size) {
            throw corpus::ValidationError(record.utt_id + ": phoneme id " + std::to_string(p) +
                                          " outside the vocabulary");
        }
    }
    if (!normal.empty()) u.normal_log_d = normal.reference(record.phonemes).log_durations;
    u.speaker = model.speaker_index(record.speaker_id);
    return u;
}

std::vector<int> alignment_durations(const PreparedUtterance& u, bool with_pauses) {
    std::vector<int> d;
    for (std::size_t i = 0; i < u.phone_frames.size(); ++i) {
        int frames = u.phone_frames[i] + (i == 0 ? u.leading_silence : 0);
        if (with_pauses && u.pauses.labels[i] > 0) {
            d.push_back(frames);
            d.push_back(u.silence_after[i]);
        } else {
            d.push_back(frames + u.silence_after[i]);
        }
    }
    return d;
}

// -----------------------------------------------------------------------------
// Objective

namespace {

// -0.5 ||mel_t - mu_i||^2 as an N x T matrix.
Eigen::MatrixXd gaussian_log_lik(const Eigen::MatrixXd& token_mu, const Eigen::MatrixXd& mel) {
    const Eigen::VectorXd mu2 = token_mu.rowwise().squaredNorm();
    const Eigen::RowVectorXd mel2 = mel.rowwise().squaredNorm().transpose();
    Eigen::MatrixXd ll = 2.0 * token_mu * mel.transpose();
    ll.colwise() -= mu2;
    ll.rowwise() -= mel2;
    return 0.5 * ll;
}

struct StyleVars {
    Var global;
    Var local;  // aligned, L' x local_dim
    std::optional<Var> vq_loss;
    std::vector<int> codes;
};

StyleVars style_from_mel(nn::Tape& tape, const model::DarsModel& m, const Eigen::MatrixXd& mel, const Var& H_c) {
    StyleVars s;
    s.global = style::global_style(tape, m.style.global, mel).vector;
    auto local = style::local_style_encode(tape, m.style.local, mel);
    s.local = style::align_local_style(tape, m.style.aligner, local.frames, H_c).frames;
    s.vq_loss = local.vq_loss;
    s.codes = std::move(local.codebook_indices);
    return s;
}

StyleVars zero_style(nn::Tape& tape, const model::DarsModel& m, Eigen::Index rows) {
    StyleVars s;
    s.global = tape.constant(Eigen::MatrixXd::Zero(1, m.config.style.global_dim));
    s.local = tape.constant(Eigen::MatrixXd::Zero(rows, m.config.style.local_dim));
    return s;
}

}  // namespace

LossBreakdown utterance_losses(nn::Tape& tape, const model::DarsModel& m, const TrainConfig& cfg,
                               const PreparedUtterance& u, nn::Rng& rng, bool cpo_active) {
    LossBreakdown out;
    const auto& tokens = u.record.phonemes;
    const bool rhythm_on = cfg.flags.rhythm_on;
    std::vector<std::pair<double, Var>> terms;

    const auto E = rhythm::encode_phonemes(tape, m.rhythm, tokens);
    std::optional<rhythm::PausePrediction> pauses;
    rhythm::EncodedSequence E_aug = E;
    if (rhythm_on) {
        pauses = rhythm::predict_pauses(tape, m.rhythm, E);
        const Var ls = rhythm::pause_cross_entropy(*pauses, u.pauses);
        out.s = ls.scalar();
        terms.emplace_back(cfg.weights.s, ls);
        E_aug = rhythm::insert_pause_embeddings(tape, m.rhythm, E, u.pauses.labels);  // teacher forcing
    }
    const auto H_c = rhythm::encode_augmented(tape, m.rhythm, E_aug);

    const StyleVars sv = cfg.flags.style_on ? style_from_mel(tape, m, u.mel, H_c.hidden)
                                            : zero_style(tape, m, H_c.length());
    if (sv.vq_loss) {
        out.vq = sv.vq_loss->scalar();
        terms.emplace_back(cfg.weights.vq, *sv.vq_loss);
    }

    const Var token_mu = flow::token_means(tape, m.mu, H_c.hidden, sv.global, sv.local, u.speaker);
    if (cfg.duration_source == DurationSource::Mas) {
        const auto path = alignment::monotonic_alignment_search(gaussian_log_lik(token_mu.value(), u.mel));
        out.durations = alignment::durations_from_path(path, static_cast<int>(H_c.length()));
    } else {
        out.durations = alignment_durations(u, rhythm_on);
        const int total = std::accumulate(out.durations.begin(), out.durations.end(), 0);
        if (total != u.mel.rows()) {
            throw corpus::ValidationError(u.record.utt_id + ": alignment covers " + std::to_string(total) +
                                          " frames, mel has " + std::to_string(u.mel.rows()));
        }
    }

    const auto dur = rhythm::predict_durations(tape, m.rhythm, H_c);
    const Var ld = rhythm::duration_mse(dur, out.durations);
    out.d = ld.scalar();
    terms.emplace_back(cfg.weights.d, ld);

    if (cfg.flags.cpo_on && rhythm_on && cpo_active) {
        if (u.normal_log_d.size() != tokens.size()) {
            throw std::invalid_argument(u.record.utt_id + ": CPO needs a normal-duration reference");
        }
        const auto rows = rhythm::phoneme_rows(H_c.tags);
        std::vector<double> dys;
        for (int r : rows) dys.push_back(std::log(static_cast<double>(out.durations[static_cast<std::size_t>(r)])));
        const auto w = cpo::cpo_weights(pauses->probs.value(), u.pauses, cfg.cpo);
        const Var pred = nn::gather_rows(dur.log_durations, rows);
        const Var lcp = cpo::cpo_loss(pred, dys, u.normal_log_d, w, cfg.cpo);
        out.cp = lcp.scalar();
        out.cpo_applied = true;
        terms.emplace_back(cfg.weights.cp, lcp);
    }

    const Var mu = flow::upsample(token_mu, out.durations);
    const Var lp = nn::mean(nn::square(mu - tape.constant(u.mel)));
    out.prior = lp.scalar();
    terms.emplace_back(cfg.weights.prior, lp);

    Var mu_win = mu;
    Eigen::MatrixXd x1 = u.mel;
    const Eigen::Index T = u.mel.rows();
    if (cfg.decoder_crop_frames > 0 && T > cfg.decoder_crop_frames) {
        std::uniform_int_distribution<Eigen::Index> pick(0, T - cfg.decoder_crop_frames);
        const Eigen::Index off = pick(rng);
        mu_win = nn::slice_rows(mu, off, cfg.decoder_crop_frames);
        x1 = u.mel.middleRows(off, cfg.decoder_crop_frames);
    }
    const Var lcfm = flow::cfm_loss(tape, m.decoder, mu_win, x1, rng, cfg.otcfm);
    out.cfm = lcfm.scalar();
    terms.emplace_back(cfg.weights.cfm, lcfm);

    out.total = terms.front().second * terms.front().first;
    for (std::size_t k = 1; k < terms.size(); ++k) out.total = out.total + terms[k].second * terms[k].first;
    out.total_value = out.total.scalar();
    return out;
}

double pause_accuracy(const model::DarsModel& m, const std::vector<PreparedUtterance>& utts) {
    if (!m.config.rhythm_on) return 0.0;
    long correct = 0, total = 0;
    for (const auto& u : utts) {
        nn::Tape tape;
        const auto E = rhythm::encode_phonemes(tape, m.rhythm, u.record.phonemes);
        const auto pred = rhythm::argmax_classes(rhythm::predict_pauses(tape, m.rhythm, E));
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == u.pauses.labels[i];
        total += static_cast<long>(pred.size());
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

// -----------------------------------------------------------------------------
// Training

std::string format_log_header() {
    return "group\tepoch\tstep\tL_s\tL_d\tL_cp\tL_cfm\tL_prior\tL_vq\ttotal\tgrad_norm\tcpo_active\n";
}

std::string format_log_line(const StepLog& l) {
    std::ostringstream s;
    s << std::setprecision(10) << l.group << '\t' << l.epoch << '\t' << l.step << '\t' << l.s << '\t' << l.d
      << '\t' << l.cp << '\t' << l.cfm << '\t' << l.prior << '\t' << l.vq << '\t' << l.total << '\t'
      << l.grad_norm << '\t' << (l.cpo_active ? 1 : 0) << '\n';
    return s.str();
}

namespace {

std::string file_safe(const std::string& s) {
    std::string out = s;
    for (char& c : out) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
    }
    return out;
}

[[noreturn]] void diverge(const std::string& group, const std::string& what, const std::string& last_good,
                          const fs::path& out_dir) {
    fs::path saved;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        saved = out_dir / (file_safe(group) + ".last_good.ckpt");
        std::ofstream f(saved, std::ios::binary);
        f.write(last_good.data(), static_cast<std::streamsize>(last_good.size()));
    }
    throw TrainingDiverged("training diverged in group '" + group + "': " + what +
                               (saved.empty() ? "" : "; last good checkpoint at " + saved.string()),
                           saved);
}

}  // namespace

GroupResult train_group(const TrainConfig& cfg, const corpus::TrainingGroup& group,
                        const cpo::NormalDurationTable& normal, const fs::path& out_dir) {
    for (const auto& w : cfg.validate()) spdlog::warn("{}", w);
    std::set<std::string> spk_set;
    for (const auto& r : group.records) spk_set.insert(r.speaker_id);
    GroupResult res;
    res.group_key = group.group_key;
    res.model = model::DarsModel::create(cfg.effective_model(), {spk_set.begin(), spk_set.end()}, cfg.seed);
    auto& m = *res.model;
    if (cfg.flags.cpo_on && normal.empty()) {
        throw config::ConfigError("CPO is enabled but no normal-duration table was provided");
    }

    std::vector<PreparedUtterance> train_set, valid_set;
    for (const auto& r : group.records) {
        if (r.split == corpus::Split::Train) train_set.push_back(prepare_utterance(r, m, normal));
        else if (r.split == corpus::Split::Valid) valid_set.push_back(prepare_utterance(r, m, normal));
    }
    if (train_set.empty()) {
        throw std::invalid_argument("group '" + group.group_key + "' has no training utterances");
    }
    const auto& warmup_set = valid_set.empty() ? train_set : valid_set;

    nn::Rng rng(cfg.seed);
    nn::Adam opt(cfg.adam);
    const auto params = m.store.all();
    bool cpo_active = cfg.flags.cpo_on && cfg.cpo_warmup_accuracy <= 0.0;
    std::string last_good = m.encode();
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(end - start);
            m.store.zero_grad();
            StepLog log;
            log.group = group.group_key;
            log.epoch = epoch;
            log.step = step;
            log.cpo_active = cpo_active;
            for (std::size_t k = start; k < end; ++k) {
                nn::Tape tape;
                const auto L = utterance_losses(tape, m, cfg, train_set[order[k]], rng, cpo_active);
                if (!std::isfinite(L.total_value)) {
                    diverge(group.group_key, "non-finite loss on " + train_set[order[k]].record.utt_id, last_good,
                            out_dir);
                }
                tape.backward(L.total * inv);
                log.s += inv * L.s;
                log.d += inv * L.d;
                log.cp += inv * L.cp;
                log.cfm += inv * L.cfm;
                log.prior += inv * L.prior;
                log.vq += inv * L.vq;
                log.total += inv * L.total_value;
            }
            log.grad_norm = nn::global_grad_norm(params);
            if (!std::isfinite(log.grad_norm)) diverge(group.group_key, "non-finite gradient", last_good, out_dir);
            opt.step(params);
            res.log.push_back(log);
            ++step;
        }
        last_good = m.encode();
        if (cfg.flags.cpo_on && !cpo_active) {
            const double acc = pause_accuracy(m, warmup_set);
            if (acc >= cfg.cpo_warmup_accuracy) {
                cpo_active = true;
                spdlog::debug("group {}: CPO enabled after epoch {} (pause accuracy {:.3f})", group.group_key,
                              epoch, acc);
            }
        }
    }

    if (m.config.style_on) {
        for (const auto& u : train_set) {
            nn::Tape tape;
            const Eigen::RowVectorXd g = style::global_style(tape, m.style.global, u.mel).vector.value();
            const auto local = style::local_style_encode(tape, m.style.local, u.mel);
            m.speaker_stats[u.record.speaker_id].add(g, local.codebook_indices, m.config.style.codebook_size);
        }
    }
    return res;
}

std::vector<GroupResult> train(const TrainConfig& cfg, const fs::path& manifest, const fs::path& out_dir) {
    const auto records = corpus::load_manifest(manifest);
    const auto groups = corpus::group_records(records, cfg.strategy);
    if (groups.empty()) throw std::invalid_argument("no dysarthric records for the chosen strategy");
    const fs::path table_path = cfg.normal_table.empty() ? manifest.parent_path() / "normal_table.txt"
                                                         : cfg.normal_table;
    cpo::NormalDurationTable normal;
    if (fs::exists(table_path)) {
        normal = cpo::NormalDurationTable::load(table_path);
    } else if (cfg.flags.cpo_on) {
        throw config::ConfigError("normal-duration table not found at " + table_path.string());
    }

    fs::create_directories(out_dir);
    std::ofstream log(out_dir / "train_log.tsv");
    log << format_log_header();
    std::vector<GroupResult> results;
    for (const auto& g : groups) {
        auto r = train_group(cfg, g, normal, out_dir);
        r.checkpoint = out_dir / (corpus::to_string(cfg.strategy) + "_" + file_safe(g.group_key) + ".ckpt");
        r.model->save(r.checkpoint);
        for (const auto& l : r.log) log << format_log_line(l);
        results.push_back(std::move(r));
    }
    return results;
}

// -----------------------------------------------------------------------------
// Synthesis

SynthesisResult synthesize(const model::DarsModel& m, const SynthesisRequest& req, const flow::OtCfmConfig& cfg) {
    if (req.tokens.empty()) throw std::invalid_argument("synthesize: empty token sequence");
    for (int t : req.tokens) {
        if (t < 0 || t >= m.config.rhythm.vocab_size) {
            throw std::out_of_range("synthesize: token " + std::to_string(t) + " outside vocabulary of size " +
                                    std::to_string(m.config.rhythm.vocab_size));
        }
    }
    if (req.reference && req.reference->dim() != m.config.mel_dim()) {
        throw std::invalid_argument("synthesize: reference mel has " + std::to_string(req.reference->dim()) +
                                    " bins, model expects " + std::to_string(m.config.mel_dim()));
    }
    const int speaker = req.speaker ? m.speaker_index(*req.speaker) : -1;
    if (req.speaker && speaker < 0) spdlog::warn("unknown speaker '{}', using a neutral speaker embedding", *req.speaker);

    nn::Tape tape;
    SynthesisResult out;
    const auto E = rhythm::encode_phonemes(tape, m.rhythm, req.tokens);
    rhythm::EncodedSequence E_aug = E;
    if (m.config.rhythm_on) {
        out.pause_classes = req.forced_pauses ? *req.forced_pauses
                                              : rhythm::argmax_classes(rhythm::predict_pauses(tape, m.rhythm, E));
        if (out.pause_classes.size() != req.tokens.size()) {
            throw std::invalid_argument("synthesize: forced pause classes must match the token count");
        }
        E_aug = rhythm::insert_pause_embeddings(tape, m.rhythm, E, out.pause_classes);
    } else {
        out.pause_classes.assign(req.tokens.size(), 0);
    }
    const auto H_c = rhythm::encode_augmented(tape, m.rhythm, E_aug);
    out.tags = H_c.tags;
    if (req.forced_durations) {
        if (static_cast<Eigen::Index>(req.forced_durations->size()) != H_c.length()) {
            throw std::invalid_argument("synthesize: forced durations must match the encoder length");
        }
        out.durations = *req.forced_durations;
    } else {
        out.durations =
            rhythm::log_durations_to_frames(rhythm::predict_durations(tape, m.rhythm, H_c).log_durations.value());
    }

    StyleVars sv;
    if (!m.config.style_on) {
        sv = zero_style(tape, m, H_c.length());
    } else if (req.reference) {
        sv = style_from_mel(tape, m, req.reference->as_double(), H_c.hidden);
    } else {
        auto it = req.speaker ? m.speaker_stats.find(*req.speaker) : m.speaker_stats.end();
        if (it == m.speaker_stats.end() || it->second.count == 0) {
            throw MissingStyleSource("synthesize: no reference mel and no cached style statistics for speaker '" +
                                     req.speaker.value_or("") + "'");
        }
        sv.global = tape.constant(it->second.global_mean);
        const Eigen::MatrixXd row = m.style.local.codebook.entries->value.row(it->second.most_frequent_code());
        sv.local = style::align_local_style(tape, m.style.aligner, tape.constant(row), H_c.hidden).frames;
    }
    const auto cm = flow::build_mu(tape, m.mu, H_c.hidden, sv.global, sv.local, speaker, out.durations);
    flow::OtCfmConfig sample_cfg = cfg;
    if (req.n_steps > 0) sample_cfg.n_euler_steps = req.n_steps;
    const Eigen::MatrixXd x = flow::euler_sample(m.decoder, cm.mu.value(), sample_cfg, req.seed);
    out.mel = corpus::MelSpectrogram::from_double(x, m.config.frame_shift_s);
    return out;
}

std::vector<int> parse_token_ids(const std::string& text) {
    std::string s = text;
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream in(s);
    std::vector<int> ids;
    for (std::string tok; in >> tok;) {
        std::size_t pos = 0;
        int v = 0;
        try {
            v = std::stoi(tok, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != tok.size() || tok.empty()) throw std::invalid_argument("bad token id '" + tok + "'");
        ids.push_back(v);
    }
    return ids;
}

// -----------------------------------------------------------------------------
// Experiment

ExperimentConfig ExperimentConfig::from_config(const config::KeyValueConfig& c) {
    ExperimentConfig e;
    e.base = TrainConfig::from_config(c);
    std::vector<std::string> seed_default;
    for (auto s : e.seeds) seed_default.push_back(std::to_string(s));
    e.seeds.clear();
    for (const auto& s : c.get_list("experiment.seeds", seed_default)) {
        try {
            e.seeds.push_back(std::stoull(s));
        } catch (const std::exception&) {
            throw config::ConfigError("experiment.seeds: bad seed '" + s + "'");
        }
    }
    e.n_utts = static_cast<int>(c.get_int("experiment.n_utts", e.n_utts));
    e.rows = c.get_list("experiment.rows", e.rows);
    std::vector<std::string> strat_default;
    for (auto s : e.strategies) strat_default.push_back(corpus::to_string(s));
    e.strategies.clear();
    for (const auto& s : c.get_list("experiment.strategies", strat_default)) {
        try {
            e.strategies.push_back(corpus::parse_strategy(s));
        } catch (const std::invalid_argument& err) {
            throw config::ConfigError(std::string("experiment.strategies: ") + err.what());
        }
    }
    e.full_grid_rows = c.get_list("experiment.full_grid_rows", e.full_grid_rows);
    e.synth_seed = static_cast<std::uint64_t>(c.get_int("experiment.synth_seed", static_cast<long>(e.synth_seed)));
    e.work_dir = c.get_string("experiment.work_dir", "");

    auto& k = e.corpus;
    k.vocab_size = e.base.model.rhythm.vocab_size;
    k.mel_dim = e.base.model.mel_dim();
    k.frame_shift_s = e.base.model.frame_shift_s;
    k.noise_std = c.get_double("corpus.noise_std", k.noise_std);
    k.utt_style_std = c.get_double("corpus.utt_style_std", k.utt_style_std);
    k.valid_fraction = c.get_double("corpus.valid_fraction", k.valid_fraction);
    k.min_phonemes = static_cast<int>(c.get_int("corpus.min_phonemes", k.min_phonemes));
    k.max_phonemes = static_cast<int>(c.get_int("corpus.max_phonemes", k.max_phonemes));

    if (e.seeds.empty() || e.rows.empty() || e.strategies.empty()) {
        throw config::ConfigError("experiment needs at least one seed, row and strategy");
    }
    for (const auto& r : e.rows) apply_preset(e.base, r);  // validates names
    return e;
}

const ExperimentCell* ExperimentResult::find(const std::string& row, corpus::Strategy s) const {
    for (const auto& c : cells) {
        if (c.row == row && c.strategy == s) return &c;
    }
    return nullptr;
}

std::string ExperimentResult::render() const {
    std::vector<std::string> rows;
    std::vector<corpus::Strategy> strats;
    for (const auto& c : cells) {
        if (std::find(rows.begin(), rows.end(), c.row) == rows.end()) rows.push_back(c.row);
        if (std::find(strats.begin(), strats.end(), c.strategy) == strats.end()) strats.push_back(c.strategy);
    }
    std::ostringstream out;
    out << "Validation MCD (overall, mean over seeds)\n" << std::left << std::setw(8) << "row";
    for (auto s : strats) out << std::right << std::setw(10) << corpus::to_string(s);
    out << '\n' << std::fixed << std::setprecision(3);
    for (const auto& r : rows) {
        out << std::left << std::setw(8) << r;
        for (auto s : strats) {
            const auto* c = find(r, s);
            out << std::right << std::setw(10);
            if (c) out << c->mean.overall;
            else out << "-";
        }
        out << '\n';
    }
    out << '\n';
    for (const auto& c : cells) out << c.mean.render_table(c.row + " " + corpus::to_string(c.strategy));
    return out.str();
}

eval::EvalReport validation_mcd(const std::vector<GroupResult>& models, corpus::Strategy strategy,
                                const std::vector<corpus::ToyUtterance>& valid, std::uint64_t seed,
                                const flow::OtCfmConfig& cfg) {
    std::map<std::string, const model::DarsModel*> by_key;
    for (const auto& g : models) by_key[g.group_key] = g.model.get();
    std::map<std::string, double> per_utt;
    std::vector<corpus::UtteranceRecord> records;
    for (const auto& u : valid) {
        const auto& r = u.record;
        const std::string key = strategy == corpus::Strategy::ASp   ? "all"
                                : strategy == corpus::Strategy::SSp ? r.speaker_id
                                                                    : corpus::to_string(r.severity);
        auto it = by_key.find(key);
        if (it == by_key.end()) throw std::out_of_range("no model for group '" + key + "'");
        SynthesisRequest req;
        req.tokens = r.phonemes;
        req.reference = u.mel;
        req.speaker = r.speaker_id;
        req.seed = seed;
        const auto syn = synthesize(*it->second, req, cfg);
        per_utt[r.utt_id] = eval::mcd(u.mel, syn.mel);
        records.push_back(r);
    }
    return eval::build_report(per_utt, records, eval::Metric::MCD);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    ExperimentResult res;
    for (const auto& row : cfg.rows) {
        const bool full = std::find(cfg.full_grid_rows.begin(), cfg.full_grid_rows.end(), row) !=
                          cfg.full_grid_rows.end();
        for (auto s : cfg.strategies) {
            if (!full && s != cfg.strategies.front()) continue;
            res.cells.push_back(ExperimentCell{row, s, {}, {}});
        }
    }
    const fs::path root = cfg.work_dir.empty() ? fs::temp_directory_path() / "dars_experiment" : cfg.work_dir;
    for (auto seed : cfg.seeds) {
        const auto toy = corpus::generate_toy_corpus(seed, cfg.n_utts, cfg.corpus);
        const fs::path dir = root / ("seed_" + std::to_string(seed));
        const auto manifest = corpus::write_toy_corpus(toy, dir);
        const auto records = corpus::load_manifest(manifest);
        const auto normal = cpo::NormalDurationTable::load(dir / "normal_table.txt");
        std::vector<corpus::ToyUtterance> valid;
        for (const auto& u : toy.utterances) {
            if (u.record.split == corpus::Split::Valid) valid.push_back(u);
        }
        for (auto& cell : res.cells) {
            TrainConfig tc = apply_preset(cfg.base, cell.row);
            tc.seed = seed;
            tc.strategy = cell.strategy;
            std::vector<GroupResult> models;
            for (const auto& g : corpus::group_records(records, cell.strategy)) {
                models.push_back(train_group(tc, g, normal));
            }
            cell.per_seed.push_back(validation_mcd(models, cell.strategy, valid, cfg.synth_seed, tc.otcfm));
            spdlog::info("seed {} {} {}: validation MCD {:.3f}", seed, cell.row, corpus::to_string(cell.strategy),
                         cell.per_seed.back().overall);
        }
    }
    for (auto& cell : res.cells) {
        eval::EvalReport mean;
        mean.metric = eval::Metric::MCD;
        const double n = static_cast<double>(cell.per_seed.size());
        for (const auto& r : cell.per_seed) {
            mean.overall += r.overall / n;
            for (const auto& [k, v] : r.per_group) mean.per_group[k] += v / n;
            for (const auto& [k, v] : r.per_speaker) mean.per_speaker[k] += v / n;
        }
        cell.mean = std::move(mean);
    }
    return res;
}

}  // namespace dars::trainer
