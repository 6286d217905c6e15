#include "dars/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace dars::corpus {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return fields;
}

int parse_int(const std::string& s, int line, const char* what) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParseError(std::string("invalid ") + what + " '" + s + "'", line);
    }
}

template <typename T>
void put_le(std::string& out, T v) {
    static_assert(std::endian::native == std::endian::little, "MEL1 I/O assumes little-endian host");
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& off) {
    if (off + sizeof(T) > in.size()) throw ParseError("truncated MEL1 data");
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

// -----------------------------------------------------------------------------
// Enums

std::string to_string(Severity s) {
    switch (s) {
        case Severity::Severe: return "Severe";
        case Severity::ModSev: return "ModSev";
        case Severity::Moderate: return "Moderate";
        case Severity::Mild: return "Mild";
        case Severity::Control: return "Control";
    }
    return "?";
}

std::string display_name(Severity s) {
    return s == Severity::ModSev ? "Mod.-Sev." : to_string(s);
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Valid: return "valid";
        case Split::Eval: return "eval";
    }
    return "?";
}

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::ASp: return "ASp";
        case Strategy::SSp: return "SSp";
        case Strategy::DSpG: return "DSpG";
    }
    return "?";
}

Severity parse_severity(const std::string& s) {
    if (s == "Severe") return Severity::Severe;
    if (s == "ModSev" || s == "Mod.-Sev." || s == "Mod-Sev") return Severity::ModSev;
    if (s == "Moderate") return Severity::Moderate;
    if (s == "Mild") return Severity::Mild;
    if (s == "Control") return Severity::Control;
    throw std::invalid_argument("unknown severity '" + s + "'");
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "valid") return Split::Valid;
    if (s == "eval") return Split::Eval;
    throw std::invalid_argument("unknown split '" + s + "'");
}

Strategy parse_strategy(const std::string& s) {
    std::string lower = s;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower == "asp") return Strategy::ASp;
    if (lower == "ssp") return Strategy::SSp;
    if (lower == "dspg") return Strategy::DSpG;
    throw std::invalid_argument("unknown strategy '" + s + "'");
}

// -----------------------------------------------------------------------------
// Manifest

std::vector<UtteranceRecord> parse_manifest(const std::string& content, const fs::path& base_dir) {
    std::vector<UtteranceRecord> records;
    std::istringstream in(content);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_tabs(line);
        if (f.size() != 7) {
            throw ParseError("expected 7 tab-separated fields, got " + std::to_string(f.size()),
                             lineno);
        }
        UtteranceRecord r;
        r.utt_id = f[0];
        r.speaker_id = f[1];
        if (r.utt_id.empty() || r.speaker_id.empty()) throw ParseError("empty id field", lineno);
        try {
            r.severity = parse_severity(f[2]);
            r.split = parse_split(f[6]);
        } catch (const std::invalid_argument& e) {
            throw ParseError(e.what(), lineno);
        }
        std::istringstream ids(f[3]);
        std::string tok;
        while (ids >> tok) r.phonemes.push_back(parse_int(tok, lineno, "phoneme id"));
        r.mel_path = f[4];
        r.alignment_path = f[5];
        if (!base_dir.empty()) {
            if (r.mel_path.is_relative()) r.mel_path = base_dir / r.mel_path;
            if (r.alignment_path.is_relative()) r.alignment_path = base_dir / r.alignment_path;
        }
        records.push_back(std::move(r));
    }
    validate_records(records);
    return records;
}

std::vector<UtteranceRecord> load_manifest(const fs::path& path) {
    return parse_manifest(read_file(path), path.parent_path());
}

void validate_records(const std::vector<UtteranceRecord>& records) {
    std::unordered_set<std::string> ids;
    std::unordered_map<std::string, Severity> speaker_severity;
    for (const auto& r : records) {
        if (!ids.insert(r.utt_id).second) {
            throw ValidationError("duplicate utt_id '" + r.utt_id + "'");
        }
        if (r.phonemes.empty()) {
            throw ValidationError("utterance '" + r.utt_id + "' has no phonemes");
        }
        auto [it, inserted] = speaker_severity.emplace(r.speaker_id, r.severity);
        if (!inserted && it->second != r.severity) {
            throw ValidationError("speaker '" + r.speaker_id + "' listed with severities " +
                                  to_string(it->second) + " and " + to_string(r.severity));
        }
    }
}

void save_manifest(const fs::path& path, const std::vector<UtteranceRecord>& records,
                   const fs::path& relative_to) {
    std::ostringstream out;
    auto rel = [&](const fs::path& p) {
        return relative_to.empty() ? p.generic_string()
                                   : p.lexically_relative(relative_to).generic_string();
    };
    for (const auto& r : records) {
        out << r.utt_id << '\t' << r.speaker_id << '\t' << to_string(r.severity) << '\t';
        for (std::size_t i = 0; i < r.phonemes.size(); ++i) {
            if (i) out << ' ';
            out << r.phonemes[i];
        }
        out << '\t' << rel(r.mel_path) << '\t' << rel(r.alignment_path) << '\t'
            << to_string(r.split) << '\n';
    }
    write_file(path, out.str());
}

std::vector<TrainingGroup> group_records(const std::vector<UtteranceRecord>& records,
                                         Strategy strategy) {
    if (records.empty()) throw std::invalid_argument("group_records: no records");
    std::vector<TrainingGroup> groups;
    std::map<std::string, std::size_t> slot;
    auto group_for = [&](const std::string& key) -> TrainingGroup& {
        auto it = slot.find(key);
        if (it == slot.end()) {
            it = slot.emplace(key, groups.size()).first;
            groups.push_back(TrainingGroup{strategy, key, {}});
        }
        return groups[it->second];
    };
    for (const auto& r : records) {
        if (r.severity == Severity::Control) continue;
        switch (strategy) {
            case Strategy::ASp: group_for("all").records.push_back(r); break;
            case Strategy::SSp: group_for(r.speaker_id).records.push_back(r); break;
            case Strategy::DSpG: group_for(to_string(r.severity)).records.push_back(r); break;
        }
    }
    if (strategy == Strategy::DSpG) {
        std::stable_sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) {
            return static_cast<int>(parse_severity(a.group_key)) <
                   static_cast<int>(parse_severity(b.group_key));
        });
    }
    return groups;
}

// -----------------------------------------------------------------------------
// MEL1

MelSpectrogram MelSpectrogram::from_double(const Eigen::MatrixXd& m, double frame_shift_s) {
    MelSpectrogram mel;
    mel.frames = m.cast<float>();
    mel.frame_shift_s = frame_shift_s;
    return mel;
}

std::string encode_mel(const MelSpectrogram& mel) {
    if (mel.num_frames() < 1) throw std::invalid_argument("mel must have at least one frame");
    std::string out = "MEL1";
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(mel.num_frames()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(mel.dim()));
    put_le<double>(out, mel.frame_shift_s);
    out.reserve(out.size() + static_cast<std::size_t>(mel.frames.size()) * 4);
    for (Eigen::Index t = 0; t < mel.num_frames(); ++t)
        for (Eigen::Index d = 0; d < mel.dim(); ++d) put_le<float>(out, mel.frames(t, d));
    return out;
}

MelSpectrogram decode_mel(const std::string& bytes) {
    if (bytes.size() < 4 || bytes.compare(0, 4, "MEL1") != 0) throw ParseError("missing MEL1 magic");
    std::size_t off = 4;
    const auto T = get_le<std::uint32_t>(bytes, off);
    const auto D = get_le<std::uint32_t>(bytes, off);
    MelSpectrogram mel;
    mel.frame_shift_s = get_le<double>(bytes, off);
    if (T < 1 || D < 1) throw ParseError("MEL1 with empty shape");
    if (bytes.size() - off != static_cast<std::size_t>(T) * D * 4) {
        throw ParseError("MEL1 payload size does not match header");
    }
    mel.frames.resize(T, D);
    for (std::uint32_t t = 0; t < T; ++t) {
        for (std::uint32_t d = 0; d < D; ++d) {
            const float v = get_le<float>(bytes, off);
            if (!std::isfinite(v)) throw ParseError("non-finite value in MEL1 data");
            mel.frames(t, d) = v;
        }
    }
    return mel;
}

void save_mel(const fs::path& path, const MelSpectrogram& mel) { write_file(path, encode_mel(mel)); }

MelSpectrogram load_mel(const fs::path& path) {
    try {
        return decode_mel(read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

// -----------------------------------------------------------------------------
// Alignments

std::vector<AlignmentToken> parse_alignment(const std::string& content) {
    std::vector<AlignmentToken> tokens;
    std::istringstream in(content);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string kind, id, start, end, extra;
        if (!(ls >> kind)) continue;
        if (!(ls >> id >> start >> end) || (ls >> extra)) {
            throw ParseError("expected 'P|SIL token_id start end'", lineno);
        }
        AlignmentToken tok;
        if (kind == "P") {
            tok.kind = TokenKind::Phoneme;
        } else if (kind == "SIL") {
            tok.kind = TokenKind::Silence;
        } else {
            throw ParseError("unknown token kind '" + kind + "'", lineno);
        }
        tok.token_id = parse_int(id, lineno, "token id");
        tok.start_frame = parse_int(start, lineno, "start frame");
        tok.end_frame = parse_int(end, lineno, "end frame");
        if (tok.start_frame < 0 || tok.end_frame <= tok.start_frame) {
            throw ParseError("empty or negative frame span", lineno);
        }
        tokens.push_back(tok);
    }
    return tokens;
}

std::vector<AlignmentToken> load_alignment(const fs::path& path) {
    try {
        return parse_alignment(read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::string format_alignment(const std::vector<AlignmentToken>& tokens) {
    std::ostringstream out;
    for (const auto& t : tokens) {
        out << (t.kind == TokenKind::Phoneme ? "P" : "SIL") << ' ' << t.token_id << ' '
            << t.start_frame << ' ' << t.end_frame << '\n';
    }
    return out.str();
}

void save_alignment(const fs::path& path, const std::vector<AlignmentToken>& tokens) {
    write_file(path, format_alignment(tokens));
}

// -----------------------------------------------------------------------------
// Toy corpus

Eigen::VectorXd toy_phoneme_envelope(int phoneme, double rel_pos, int dim) {
    // Two spectral bumps per phoneme; the second drifts slightly across the phoneme.
    const double d = static_cast<double>(dim);
    const double c1 = std::fmod(0.11 * d + 0.37 * d * phoneme * 0.61803398875, 0.55 * d) + 0.05 * d;
    const double c2 = std::fmod(0.47 * d + 0.29 * d * phoneme * 0.41421356237, 0.4 * d) + 0.5 * d +
                      0.04 * d * (rel_pos - 0.5);
    const double w1 = 0.04 * d + 0.01 * d * (phoneme % 3);
    const double w2 = 0.06 * d;
    const double a1 = 3.0 + 0.5 * (phoneme % 4);
    const double a2 = 2.0 + 0.4 * ((phoneme * 7) % 5);
    Eigen::VectorXd env(dim);
    for (int k = 0; k < dim; ++k) {
        const double x = static_cast<double>(k);
        env(k) = -3.0 + a1 * std::exp(-0.5 * std::pow((x - c1) / w1, 2)) +
                 a2 * std::exp(-0.5 * std::pow((x - c2) / w2, 2));
    }
    return env;
}

ToyCorpus generate_toy_corpus(std::uint64_t seed, int n_utts, const ToyCorpusConfig& cfg) {
    if (n_utts < 1) throw std::invalid_argument("n_utts must be >= 1");
    if (cfg.speakers.empty()) throw std::invalid_argument("toy corpus needs speakers");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto uniform_int = [&](int lo, int hi) {
        return lo + static_cast<int>(std::floor(unit(rng) * (hi - lo + 1)));
    };

    ToyCorpus corpus;
    std::vector<int> base_frames(static_cast<std::size_t>(cfg.vocab_size));
    for (int p = 0; p < cfg.vocab_size; ++p) {
        base_frames[static_cast<std::size_t>(p)] =
            uniform_int(cfg.min_normal_frames, cfg.max_normal_frames);
        corpus.normal_table[p] = base_frames[static_cast<std::size_t>(p)];
    }

    struct SpeakerStyle {
        double level, tilt, tremor_rate;
    };
    std::vector<SpeakerStyle> styles;
    for (std::size_t s = 0; s < cfg.speakers.size(); ++s) {
        styles.push_back({-0.8 + 1.6 * unit(rng), -1.2 + 2.4 * unit(rng), 3.0 + 4.0 * unit(rng)});
    }

    const int n_spk = static_cast<int>(cfg.speakers.size());
    std::vector<int> per_speaker(static_cast<std::size_t>(n_spk), 0);
    for (int u = 0; u < n_utts; ++u) ++per_speaker[static_cast<std::size_t>(u % n_spk)];
    std::vector<int> seen(static_cast<std::size_t>(n_spk), 0);

    const int D = cfg.mel_dim;
    for (int u = 0; u < n_utts; ++u) {
        const int s = u % n_spk;
        const auto& [speaker, severity] = cfg.speakers[static_cast<std::size_t>(s)];
        const SeverityProfile& prof = cfg.profiles.at(severity);
        const int index_in_speaker = seen[static_cast<std::size_t>(s)]++;

        ToyUtterance utt;
        UtteranceRecord& rec = utt.record;
        std::ostringstream id;
        id << speaker << '_' << std::setw(4) << std::setfill('0') << index_in_speaker;
        rec.utt_id = id.str();
        rec.speaker_id = speaker;
        rec.severity = severity;

        const int total = per_speaker[static_cast<std::size_t>(s)];
        const int n_valid = cfg.valid_fraction > 0.0 && total >= 2
                                ? std::max(1, static_cast<int>(std::lround(cfg.valid_fraction * total)))
                                : 0;
        const int n_eval = static_cast<int>(std::lround(cfg.eval_fraction * total));
        if (index_in_speaker >= total - n_valid) {
            rec.split = Split::Valid;
        } else if (index_in_speaker >= total - n_valid - n_eval) {
            rec.split = Split::Eval;
        } else {
            rec.split = Split::Train;
        }

        const int n_ph = uniform_int(cfg.min_phonemes, cfg.max_phonemes);
        for (int i = 0; i < n_ph; ++i) rec.phonemes.push_back(uniform_int(0, cfg.vocab_size - 1));

        // Durations: normal frames stretched by severity, never shorter than normal.
        std::vector<int> dys(static_cast<std::size_t>(n_ph));
        for (int i = 0; i < n_ph; ++i) {
            const int base = base_frames[static_cast<std::size_t>(rec.phonemes[static_cast<std::size_t>(i)])];
            utt.normal_frames.push_back(base);
            const double jitter = std::exp(0.1 * normal(rng));
            dys[static_cast<std::size_t>(i)] =
                std::max(base, static_cast<int>(std::lround(base * prof.stretch * jitter)));
        }

        // Pauses after phoneme i (never after the last one).
        std::vector<int> pause(static_cast<std::size_t>(n_ph), 0);
        for (int i = 0; i + 1 < n_ph; ++i) {
            const int ph = rec.phonemes[static_cast<std::size_t>(i)];
            const double prob = cfg.is_boundary(ph) ? prof.pause_prob : prof.pause_prob * cfg.off_boundary_scale;
            if (unit(rng) >= prob) continue;
            int len;
            switch (cfg.pause_range(ph)) {
                case 0: len = uniform_int(cfg.short_pause_min, cfg.short_pause_max); break;
                case 1: len = uniform_int(cfg.medium_pause_min, cfg.medium_pause_max); break;
                default: len = uniform_int(cfg.long_pause_min, cfg.long_pause_max); break;
            }
            pause[static_cast<std::size_t>(i)] = len;
        }
        const bool has_long = std::any_of(pause.begin(), pause.end(), [&](int p) { return p >= cfg.long_pause_min; });
        if (prof.force_long_pause && !has_long && n_ph >= 2) {
            pause[static_cast<std::size_t>(n_ph - 2)] = uniform_int(cfg.long_pause_min, cfg.long_pause_max);
        }

        int frame = 0;
        for (int i = 0; i < n_ph; ++i) {
            const int d = dys[static_cast<std::size_t>(i)];
            utt.alignment.push_back({TokenKind::Phoneme, rec.phonemes[static_cast<std::size_t>(i)],
                                     frame, frame + d});
            frame += d;
            if (const int p = pause[static_cast<std::size_t>(i)]; p > 0) {
                utt.alignment.push_back({TokenKind::Silence, 0, frame, frame + p});
                frame += p;
            }
        }
        const int T = frame;

        const SpeakerStyle& st = styles[static_cast<std::size_t>(s)];
        const double level = st.level + cfg.utt_style_std * normal(rng);
        const double tilt = st.tilt + cfg.utt_style_std * normal(rng);
        const double phase = 2.0 * std::numbers::pi * unit(rng);
        Eigen::MatrixXd m(T, D);
        for (const auto& tok : utt.alignment) {
            for (int t = tok.start_frame; t < tok.end_frame; ++t) {
                if (tok.kind == TokenKind::Silence) {
                    m.row(t).setConstant(-6.0);
                    continue;
                }
                const double rel = (t - tok.start_frame + 0.5) / tok.frames();
                Eigen::VectorXd env = toy_phoneme_envelope(tok.token_id, rel, D);
                const double tremor =
                    prof.tremor_amp *
                    std::sin(2.0 * std::numbers::pi * st.tremor_rate * t * cfg.frame_shift_s + phase);
                for (int k = 0; k < D; ++k) {
                    env(k) += level + tilt * (static_cast<double>(k) / D - 0.5) + tremor;
                }
                m.row(t) = env.transpose();
            }
        }
        for (int t = 0; t < T; ++t)
            for (int k = 0; k < D; ++k) m(t, k) += cfg.noise_std * normal(rng);
        utt.mel = MelSpectrogram::from_double(m, cfg.frame_shift_s);

        rec.mel_path = fs::path("mel") / (rec.utt_id + ".mel");
        rec.alignment_path = fs::path("align") / (rec.utt_id + ".ali");
        corpus.utterances.push_back(std::move(utt));
    }
    return corpus;
}

fs::path write_toy_corpus(const ToyCorpus& corpus, const fs::path& dir) {
    fs::create_directories(dir / "mel");
    fs::create_directories(dir / "align");
    std::vector<UtteranceRecord> records;
    std::ostringstream normal;
    for (const auto& u : corpus.utterances) {
        UtteranceRecord r = u.record;
        r.mel_path = dir / u.record.mel_path;
        r.alignment_path = dir / u.record.alignment_path;
        save_mel(r.mel_path, u.mel);
        save_alignment(r.alignment_path, u.alignment);
        normal << r.utt_id << '\t';
        for (std::size_t i = 0; i < u.normal_frames.size(); ++i) {
            if (i) normal << ' ';
            normal << u.normal_frames[i];
        }
        normal << '\n';
        records.push_back(std::move(r));
    }
    std::ostringstream table;
    for (const auto& [ph, frames] : corpus.normal_table) table << ph << ' ' << frames << '\n';
    write_file(dir / "normal_table.txt", table.str());
    write_file(dir / "normal_durations.tsv", normal.str());
    const fs::path manifest = dir / "manifest.tsv";
    save_manifest(manifest, records, dir);
    return manifest;
}

}  // namespace dars::corpus
