#include <doctest.h>

#include <fstream>
#include <numeric>

#include "dars/trainer.hpp"
#include "test_support.hpp"

using namespace dars;
using namespace dars::trainer;
namespace fs = std::filesystem;

namespace {

constexpr const char* kTinyModel = R"(
[model]
vocab_size = 12
mel_dim = 8
phone_layers = 1
phone_heads = 2
phone_hidden = 8
phone_filter = 16
aug_layers = 1
aug_heads = 2
aug_hidden = 8
aug_filter = 16
predictor_filter = 8
ref_channels = 4
style_tokens = 4
style_token_heads = 2
global_style_dim = 4
local_style_dim = 4
codebook_size = 4
style_attn_dim = 4
unet_channels = 8
time_dim = 8
speaker_dim = 4
fused_dim = 8
)";

TrainConfig tiny_config(const std::string& extra = "") {
    auto cfg = TrainConfig::from_config(config::KeyValueConfig::parse(std::string(kTinyModel) + extra));
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.cpo_warmup_accuracy = 0.0;
    cfg.otcfm.n_euler_steps = 4;
    return cfg;
}

corpus::ToyCorpusConfig tiny_corpus_config() {
    corpus::ToyCorpusConfig c;
    c.mel_dim = 8;
    c.valid_fraction = 0.2;
    c.speakers = {{"F01", corpus::Severity::Severe}, {"F04", corpus::Severity::Mild}};
    return c;
}

// One corpus on disk and one trained ASp model, shared by the cases below.
struct Shared {
    fs::path dir;
    fs::path manifest;
    std::vector<corpus::UtteranceRecord> records;
    cpo::NormalDurationTable normal;
    std::vector<GroupResult> asp;

    Shared() {
        dir = testing::temp_dir("trainer");
        manifest = corpus::write_toy_corpus(corpus::generate_toy_corpus(5, 40, tiny_corpus_config()), dir / "corpus");
        records = corpus::load_manifest(manifest);
        normal = cpo::NormalDurationTable::load(manifest.parent_path() / "normal_table.txt");
        asp = train(tiny_config(), manifest, dir / "asp");
    }
    static Shared& get() {
        static Shared s;
        return s;
    }
    const model::DarsModel& model() const { return *asp.front().model; }
};

std::string mel_bytes(const corpus::MelSpectrogram& m) { return corpus::encode_mel(m); }

}  // namespace

TEST_CASE("training config parsing, validation and presets") {
    const auto cfg = TrainConfig::from_config(config::KeyValueConfig::parse(
        "[train]\nepochs = 3\nstrategy = SSp\n[loss]\nlambda_cp = 0.5\n[cpo]\nmargin = 0.5\n[optim]\nlr = 0.01\n"));
    CHECK(cfg.epochs == 3);
    CHECK(cfg.strategy == corpus::Strategy::SSp);
    CHECK(cfg.weights.cp == 0.5);
    CHECK(cfg.cpo.margin == 0.5);
    CHECK(cfg.adam.lr == 0.01);
    CHECK(cfg.validate().empty());

    TrainConfig bad = cfg;
    bad.flags = {false, true, true};
    CHECK_THROWS_AS(bad.validate(), config::ConfigError);
    bad = cfg;
    bad.weights = {0, 0, 0, 0, 0, 0};
    CHECK_THROWS_AS(bad.validate(), config::ConfigError);
    bad = cfg;
    bad.weights.d = -1.0;
    CHECK_THROWS_AS(bad.validate(), config::ConfigError);
    bad = cfg;
    bad.cpo.alpha = 0.2;
    bad.cpo.beta = 0.8;
    CHECK_FALSE(bad.validate().empty());

    const auto e5 = apply_preset(cfg, "E5");
    CHECK_FALSE(e5.flags.rhythm_on);
    CHECK_FALSE(e5.flags.cpo_on);
    CHECK_FALSE(e5.flags.style_on);
    const auto e7 = apply_preset(cfg, "E7");
    CHECK(e7.cpo.alpha == 0.5);
    const auto e9 = apply_preset(cfg, "E9");
    CHECK(e9.flags.style_on);
    CHECK(e9.cpo.alpha == 0.7);
    CHECK(e9.cpo.beta == 0.3);
    CHECK_FALSE(e9.effective_model().style_on == false);
    CHECK_THROWS_AS(apply_preset(cfg, "E4"), config::ConfigError);
    CHECK(preset_names().size() == 5);
}

TEST_CASE("total loss is the weighted sum of its parts") {
    auto& s = Shared::get();
    auto cfg = tiny_config();
    cfg.weights = {0.7, 1.3, 0.4, 2.0, 0.25, 0.6};
    const auto& m = s.model();
    for (const auto& rec : s.records) {
        if (rec.split != corpus::Split::Train) continue;
        const auto u = prepare_utterance(rec, m, s.normal);
        nn::Tape tape;
        nn::Rng rng(3);
        const auto L = utterance_losses(tape, m, cfg, u, rng, true);
        CHECK(L.cpo_applied);
        const auto& w = cfg.weights;
        const double sum = w.s * L.s + w.d * L.d + w.cp * L.cp + w.cfm * L.cfm + w.prior * L.prior + w.vq * L.vq;
        CHECK(std::abs(L.total_value - sum) <= 1e-6 * std::max(1.0, std::abs(sum)));
        CHECK(std::accumulate(L.durations.begin(), L.durations.end(), 0) == u.mel.rows());
    }
}

TEST_CASE("checkpoint round-trip preserves every loss") {
    auto& s = Shared::get();
    const auto& m = s.model();
    REQUIRE(fs::exists(s.asp.front().checkpoint));
    const auto loaded = model::DarsModel::load(s.asp.front().checkpoint);
    CHECK(loaded->speakers == m.speakers);
    CHECK(loaded->encode() == m.encode());
    const auto cfg = tiny_config();
    const auto u = prepare_utterance(s.records.front(), m, s.normal);
    auto run = [&](const model::DarsModel& mm) {
        nn::Tape tape;
        nn::Rng rng(11);
        return utterance_losses(tape, mm, cfg, u, rng, true).total_value;
    };
    CHECK(run(*loaded) == run(m));
    CHECK_THROWS_AS(model::DarsModel::decode("DARSCKPT garbage"), model::CheckpointError);
    const auto trunc = m.encode();
    CHECK_THROWS_AS(model::DarsModel::decode(trunc.substr(0, trunc.size() / 2)), model::CheckpointError);
}

TEST_CASE("the training log lists every step") {
    auto& s = Shared::get();
    std::ifstream f(s.dir / "asp" / "train_log.tsv");
    std::string header;
    std::getline(f, header);
    CHECK(header + "\n" == format_log_header());
    long lines = 0;
    for (std::string l; std::getline(f, l);) ++lines;
    CHECK(lines == static_cast<long>(s.asp.front().log.size()));
    CHECK(lines > 0);
}

TEST_CASE("synthesis is deterministic and its length follows the durations") {
    auto& s = Shared::get();
    const auto& m = s.model();
    SynthesisRequest req;
    req.tokens = {3, 1, 7, 2, 11};
    req.reference = corpus::load_mel(s.records.front().mel_path);
    req.speaker = s.records.front().speaker_id;
    req.seed = 42;
    const auto a = synthesize(m, req);
    const auto b = synthesize(m, req);
    CHECK(mel_bytes(a.mel) == mel_bytes(b.mel));
    CHECK(a.mel.num_frames() == std::accumulate(a.durations.begin(), a.durations.end(), 0));
    CHECK(a.mel.dim() == 8);
    CHECK(a.durations.size() == a.tags.size());
    CHECK(*std::min_element(a.durations.begin(), a.durations.end()) >= 1);
    req.seed = 43;
    CHECK(mel_bytes(synthesize(m, req).mel) != mel_bytes(a.mel));

    req.forced_pauses = std::vector<int>{0, 3, 0, 0, 1};
    req.forced_durations = std::vector<int>{2, 3, 50, 4, 5, 6, 7};
    const auto f = synthesize(m, req);
    CHECK(f.pause_classes == *req.forced_pauses);
    CHECK(f.mel.num_frames() == 77);
    req.forced_durations = std::vector<int>{1, 2};
    CHECK_THROWS_AS(synthesize(m, req), std::invalid_argument);
    req.forced_durations.reset();
    req.forced_pauses = std::vector<int>{0};
    CHECK_THROWS_AS(synthesize(m, req), std::invalid_argument);

    SynthesisRequest bad;
    bad.tokens = {12};
    CHECK_THROWS_AS(synthesize(m, bad), std::out_of_range);
    bad.tokens = {};
    CHECK_THROWS_AS(synthesize(m, bad), std::invalid_argument);
}

TEST_CASE("style source resolution") {
    auto& s = Shared::get();
    const auto& m = s.model();
    SynthesisRequest req;
    req.tokens = {1, 2, 3};
    CHECK_THROWS_AS(synthesize(m, req), MissingStyleSource);
    req.speaker = "nobody";
    CHECK_THROWS_AS(synthesize(m, req), MissingStyleSource);
    req.speaker = "F01";
    REQUIRE(m.speaker_stats.count("F01") == 1);
    const auto from_stats = synthesize(m, req);
    CHECK(from_stats.mel.num_frames() > 0);

    // conditioning is live: a different reference changes the output
    req.reference = corpus::load_mel(s.records.front().mel_path);
    const auto r1 = synthesize(m, req);
    req.reference = corpus::load_mel(s.records.back().mel_path);
    const auto r2 = synthesize(m, req);
    req.forced_durations = r1.durations;
    req.forced_pauses = r1.pause_classes;
    const auto r2_same_len = synthesize(m, req);
    REQUIRE(r2_same_len.mel.num_frames() == r1.mel.num_frames());
    CHECK((r2_same_len.mel.as_double() - r1.mel.as_double()).norm() > 1e-6);
    CHECK(r2.mel.dim() == 8);

    nn::Tape t;
    const auto g1 = style::global_style(t, m.style.global, corpus::load_mel(s.records.front().mel_path).as_double());
    const auto g2 = style::global_style(t, m.style.global, corpus::load_mel(s.records.back().mel_path).as_double());
    CHECK((g1.vector.value() - g2.vector.value()).norm() > 1e-9);
}

TEST_CASE("a diverging run aborts with a loadable last-good checkpoint") {
    auto& s = Shared::get();
    auto cfg = tiny_config();
    cfg.adam.lr = 1e200;
    cfg.adam.clip_norm = 0.0;
    cfg.epochs = 5;
    const auto groups = corpus::group_records(s.records, corpus::Strategy::ASp);
    const auto out = s.dir / "diverge";
    try {
        train_group(cfg, groups.front(), s.normal, out);
        FAIL("expected TrainingDiverged");
    } catch (const TrainingDiverged& e) {
        REQUIRE(fs::exists(e.last_good_checkpoint()));
        const auto m = model::DarsModel::load(e.last_good_checkpoint());
        for (const auto& p : m->store.all()) CHECK(p->value.allFinite());
    }
}

TEST_CASE("severity-grouped models: severe speech is synthesized slower than mild") {
    auto& s = Shared::get();
    auto cfg = tiny_config();
    cfg.strategy = corpus::Strategy::DSpG;
    cfg.epochs = 12;
    cfg.adam.lr = 1e-2;
    cfg.flags.style_on = false;
    const auto models = train(cfg, s.manifest, s.dir / "dspg");
    REQUIRE(models.size() == 2);
    const model::DarsModel* severe = nullptr;
    const model::DarsModel* mild = nullptr;
    for (const auto& g : models) {
        if (g.group_key == corpus::to_string(corpus::Severity::Severe)) severe = g.model.get();
        if (g.group_key == corpus::to_string(corpus::Severity::Mild)) mild = g.model.get();
    }
    REQUIRE(severe);
    REQUIRE(mild);
    long frames_severe = 0, frames_mild = 0;
    for (const auto& rec : s.records) {
        if (rec.split != corpus::Split::Valid) continue;
        SynthesisRequest req;
        req.tokens = rec.phonemes;
        req.seed = 1;
        frames_severe += synthesize(*severe, req).mel.num_frames();
        frames_mild += synthesize(*mild, req).mel.num_frames();
    }
    CAPTURE(frames_severe);
    CAPTURE(frames_mild);
    CHECK(frames_severe > frames_mild);
}

TEST_CASE("token id parsing") {
    CHECK(parse_token_ids("1 2,3  4") == std::vector<int>{1, 2, 3, 4});
    CHECK_THROWS(parse_token_ids("1 x"));
    CHECK_THROWS(parse_token_ids("1.5"));
}
