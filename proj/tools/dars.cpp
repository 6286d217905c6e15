// dars: command-line front end for corpus generation, training, synthesis and scoring.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "dars/config.hpp"
#include "dars/corpus.hpp"
#include "dars/eval.hpp"
#include "dars/model.hpp"
#include "dars/trainer.hpp"

namespace fs = std::filesystem;
using namespace dars;

namespace {

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << s;
}

config::KeyValueConfig load_config(const std::string& path) {
    return path.empty() ? config::KeyValueConfig{} : config::KeyValueConfig::load(path);
}

void warn_unused(const config::KeyValueConfig& cfg) {
    for (const auto& k : cfg.unused_keys()) spdlog::warn("config key '{}' is not recognized", k);
}

int cmd_gen_corpus(std::uint64_t seed, int n_utts, const std::string& out, const std::string& cfg_path) {
    const auto cfg = load_config(cfg_path);
    corpus::ToyCorpusConfig tc;
    tc.vocab_size = static_cast<int>(cfg.get_int("model.vocab_size", tc.vocab_size));
    tc.mel_dim = static_cast<int>(cfg.get_int("model.mel_dim", tc.mel_dim));
    tc.noise_std = cfg.get_double("corpus.noise_std", tc.noise_std);
    tc.utt_style_std = cfg.get_double("corpus.utt_style_std", tc.utt_style_std);
    tc.valid_fraction = cfg.get_double("corpus.valid_fraction", tc.valid_fraction);
    tc.eval_fraction = cfg.get_double("corpus.eval_fraction", tc.eval_fraction);
    tc.min_phonemes = static_cast<int>(cfg.get_int("corpus.min_phonemes", tc.min_phonemes));
    tc.max_phonemes = static_cast<int>(cfg.get_int("corpus.max_phonemes", tc.max_phonemes));
    warn_unused(cfg);
    const auto toy = corpus::generate_toy_corpus(seed, n_utts, tc);
    const auto manifest = corpus::write_toy_corpus(toy, out);
    std::cout << "wrote " << toy.utterances.size() << " utterances, manifest " << manifest.string() << '\n';
    return 0;
}

int cmd_train(const std::string& cfg_path, const std::string& manifest, const std::string& strategy,
              const std::string& out) {
    const auto cfg = load_config(cfg_path);
    auto tc = trainer::TrainConfig::from_config(cfg);
    warn_unused(cfg);
    if (!strategy.empty()) tc.strategy = corpus::parse_strategy(strategy);
    const auto results = trainer::train(tc, manifest, out);
    for (const auto& r : results) {
        const auto& last = r.log.back();
        std::cout << r.group_key << ": " << r.log.size() << " steps, final total loss " << last.total << ", "
                  << r.checkpoint.string() << '\n';
    }
    return 0;
}

int cmd_synthesize(const std::string& ckpt, const std::string& text_ids, const std::string& ref_mel,
                   const std::string& speaker, std::uint64_t seed, int steps, const std::string& out) {
    const auto model = model::DarsModel::load(ckpt);
    trainer::SynthesisRequest req;
    req.tokens = trainer::parse_token_ids(fs::is_regular_file(text_ids) ? read_text(text_ids) : text_ids);
    if (!ref_mel.empty()) req.reference = corpus::load_mel(ref_mel);
    if (!speaker.empty()) req.speaker = speaker;
    req.seed = seed;
    req.n_steps = steps;
    const auto res = trainer::synthesize(*model, req);
    corpus::save_mel(out, res.mel);
    std::cout << "wrote " << res.mel.num_frames() << " frames to " << out << '\n';
    return 0;
}

// WER references: one `utt_id<TAB>text` per line.
std::map<std::string, std::string> load_refs(const fs::path& p) {
    std::map<std::string, std::string> refs;
    std::istringstream in(read_text(p));
    int lineno = 0;
    for (std::string line; std::getline(in, line);) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw corpus::ParseError("expected utt_id<TAB>text", lineno);
        refs[line.substr(0, tab)] = line.substr(tab + 1);
    }
    return refs;
}

int cmd_eval(const std::string& metric, const std::string& manifest, const std::string& syn_dir,
             const std::string& refs_path, const std::string& report) {
    const auto records = corpus::load_manifest(manifest);
    std::map<std::string, double> per_utt;
    eval::Metric m;
    if (metric == "mcd") {
        m = eval::Metric::MCD;
        for (const auto& r : records) {
            const fs::path syn = fs::path(syn_dir) / (r.utt_id + ".mel");
            if (!fs::exists(syn)) continue;
            per_utt[r.utt_id] = eval::mcd(corpus::load_mel(r.mel_path), corpus::load_mel(syn));
        }
    } else if (metric == "wer") {
        m = eval::Metric::WER;
        if (refs_path.empty()) throw std::invalid_argument("--metric wer needs --refs");
        const auto refs = load_refs(refs_path);
        for (const auto& r : records) {
            const fs::path hyp = fs::path(syn_dir) / (r.utt_id + ".txt");
            auto it = refs.find(r.utt_id);
            if (!fs::exists(hyp) || it == refs.end()) continue;
            per_utt[r.utt_id] = eval::wer(eval::normalize_words(it->second), eval::normalize_words(read_text(hyp)));
        }
    } else {
        throw std::invalid_argument("unknown metric '" + metric + "'");
    }
    if (per_utt.empty()) throw std::invalid_argument("no synthesized outputs found in " + syn_dir);
    const auto rep = eval::build_report(per_utt, records, m);
    const std::string table = rep.render_table();
    std::cout << table;
    if (!report.empty()) write_text(report, table + "\n" + rep.to_key_values());
    return 0;
}

int cmd_experiment(const std::string& cfg_path, const std::string& report) {
    const auto cfg = load_config(cfg_path);
    const auto ec = trainer::ExperimentConfig::from_config(cfg);
    warn_unused(cfg);
    const auto res = trainer::run_experiment(ec);
    const std::string text = res.render();
    std::cout << text;
    if (!report.empty()) write_text(report, text);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dars: dysarthric speech synthesis toolkit"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");

    std::uint64_t seed = 1;
    int n_utts = 300;
    std::string out, cfg_path, manifest, strategy, ckpt, text_ids, ref_mel, speaker, metric, syn_dir, refs, report;
    int steps = 0;

    auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic toy corpus");
    gen->add_option("--seed", seed, "Random seed")->required();
    gen->add_option("--n-utts", n_utts, "Number of utterances")->required()->check(CLI::PositiveNumber);
    gen->add_option("--out", out, "Output directory")->required();
    gen->add_option("--config", cfg_path, "Optional config file (corpus.* keys)");

    auto* tr = app.add_subcommand("train", "Train one model per group");
    tr->add_option("--config", cfg_path, "Config file");
    tr->add_option("--manifest", manifest, "Manifest TSV")->required()->check(CLI::ExistingFile);
    tr->add_option("--strategy", strategy, "asp, ssp or dspg");
    tr->add_option("--out", out, "Output directory")->required();

    auto* syn = app.add_subcommand("synthesize", "Synthesize a mel spectrogram");
    syn->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    syn->add_option("--text-ids", text_ids, "Phoneme ids (space/comma separated) or a file holding them")->required();
    syn->add_option("--ref-mel", ref_mel, "Reference mel (MEL1)");
    syn->add_option("--speaker", speaker, "Speaker id");
    syn->add_option("--seed", seed, "Sampling seed");
    syn->add_option("--steps", steps, "Euler steps (default from config)");
    syn->add_option("--out", out, "Output MEL1 path")->required();

    auto* ev = app.add_subcommand("eval", "Score synthesized outputs");
    ev->add_option("--metric", metric, "mcd or wer")->required()->check(CLI::IsMember({"mcd", "wer"}));
    ev->add_option("--manifest", manifest, "Manifest TSV")->required()->check(CLI::ExistingFile);
    ev->add_option("--syn-dir", syn_dir, "Directory of <utt_id>.mel or <utt_id>.txt")->required();
    ev->add_option("--refs", refs, "WER references: utt_id<TAB>text per line");
    ev->add_option("--report", report, "Report output path");

    auto* ex = app.add_subcommand("experiment", "Toy-scale ablation experiment");
    ex->add_option("--config", cfg_path, "Config file");
    ex->add_option("--report", report, "Report output path");

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

    try {
        if (*gen) return cmd_gen_corpus(seed, n_utts, out, cfg_path);
        if (*tr) return cmd_train(cfg_path, manifest, strategy, out);
        if (*syn) return cmd_synthesize(ckpt, text_ids, ref_mel, speaker, seed, steps, out);
        if (*ev) return cmd_eval(metric, manifest, syn_dir, refs, report);
        if (*ex) return cmd_experiment(cfg_path, report);
    } catch (const config::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const corpus::ParseError& e) {
        std::cerr << "parse error: " << e.what() << '\n';
        return 3;
    } catch (const corpus::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return 3;
    } catch (const trainer::TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
