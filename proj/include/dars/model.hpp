#ifndef DARS_MODEL_HPP
#define DARS_MODEL_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dars/alignment.hpp"
#include "dars/config.hpp"
#include "dars/flow.hpp"
#include "dars/rhythm.hpp"
#include "dars/style.hpp"

namespace dars::model {

struct ModelConfig {
    rhythm::RhythmConfig rhythm;
    style::StyleConfig style;
    flow::UNetConfig unet;
    int speaker_dim = 16;
    int fused_dim = 128;
    alignment::PauseThresholds thresholds;
    double frame_shift_s = 0.01;
    // Architecture switches; the trainer copies its ablation flags here.
    bool rhythm_on = true;
    bool style_on = true;

    int mel_dim() const { return style.mel_dim; }
    void set_mel_dim(int d);

    // Reads `model.*` and `flags.*` keys; missing keys keep their current value.
    void apply(const config::KeyValueConfig& cfg);
    config::KeyValueConfig to_config() const;
    void validate() const;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Every trainable module plus the speaker table and per-speaker style statistics.
// Modules hold pointers into `store`, so instances live behind unique_ptr.
class DarsModel {
public:
    static std::unique_ptr<DarsModel> create(const ModelConfig& config,
                                             std::vector<std::string> speakers, std::uint64_t seed);

    // Binary layout: "DARSCKPT", u32 version, config text, speaker list, named
    // tensors in store order, speaker style statistics. Little-endian.
    void save(const std::filesystem::path& path) const;
    static std::unique_ptr<DarsModel> load(const std::filesystem::path& path);
    std::string encode() const;
    static std::unique_ptr<DarsModel> decode(const std::string& bytes);

    // -1 when unknown.
    int speaker_index(const std::string& speaker) const;

    ModelConfig config;
    std::vector<std::string> speakers;
    nn::ParameterStore store;
    rhythm::RhythmModel rhythm;
    style::StyleModel style;
    flow::MuBuilder mu;
    flow::UNetField decoder;
    std::map<std::string, style::SpeakerStyleStats> speaker_stats;

    DarsModel(const DarsModel&) = delete;
    DarsModel& operator=(const DarsModel&) = delete;

private:
    DarsModel() = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace dars::model

#endif  // DARS_MODEL_HPP
