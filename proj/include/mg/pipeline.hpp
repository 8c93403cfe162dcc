#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mg/datagen.hpp"
#include "mg/gnn.hpp"
#include "mg/gradcam.hpp"
#include "mg/siamese.hpp"

namespace mg::pipe {

// usage-level problem (bad config / flags) -> exit 1
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// stage-level problem (missing artifact, lock held, training blowup) -> exit 2
class PipelineError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    // dataset
    std::string source = "synthetic";  // synthetic | synthetic-confusable | GTZAN directory
    int clips_per_class = 50;
    double duration_s = 5.0;
    // spectrogram
    audio::SpectrogramConfig spec;
    int frames = 0;  // crop/pad target; 0 = natural count for duration_s
    // siamese
    siamese::SiameseConfig siam;
    // gnn (dims front is overwritten by the 128-d embedding width)
    gnn::GnnConfig gnncfg;
    // split
    double test_fraction = 0.3;
    std::vector<double> labeled_fractions = {0.3, 0.5, 1.0};
    // explain
    int explain_clips = 4;
    double explain_threshold = 0.5;
    // run
    std::uint64_t seed = 0;
    bool seed_set = false;  // seed is mandatory, no wall-clock default
    std::string out;

    int target_frames() const;  // frames, or the natural frame count
    void validate() const;      // throws ConfigError
};

// INI-style file: [section] headers, key = value pairs, # comments.
// Errors cite the offending line number and key.
ExperimentConfig parse_config_file(const std::string& path);
// single "section.key" override, same validation as the file parser
void apply_override(ExperimentConfig& config, const std::string& key, const std::string& value);

struct FractionMetrics {
    double labeled_fraction = 0;
    double gnn_accuracy = 0;
    double nn_accuracy = 0;
    double pair_accuracy = 0;
    double siamese_final_loss = 0;
    double gnn_final_loss = 0;
    double projection_variance = 0;
    Tensor confusion;
};

struct MetricsReport {
    std::vector<FractionMetrics> rows;
};

// Stages: prepare, train-siamese, embed, train-gnn, evaluate, explain; "all"
// chains them. Each stage reads its inputs from config.out and fails with the
// missing artifact's path if an earlier stage has not run.
void run_stage(const ExperimentConfig& config, const std::string& stage);

// evaluate-stage output, also returned for in-process callers
MetricsReport evaluate(const ExperimentConfig& config);

struct BaselineResult {
    double accuracy = 0;
    Tensor confusion;
    std::vector<double> epoch_loss;
};

// 2-layer dense baseline (d -> 64 -> n_classes) on the same embeddings,
// labeled nodes only, same Adam settings as the GNN.
BaselineResult run_baseline_nn(const Tensor& embeddings, const std::vector<int>& labels,
                               const std::vector<std::uint8_t>& train_mask,
                               const std::vector<std::uint8_t>& test_mask, int n_classes,
                               int epochs, double lr, std::uint64_t seed);

struct Projection {
    Tensor coords;  // [n, 2]
    double variance_ratio = 0;  // captured by the two components, in [0,1]
    bool degenerate = false;
};

// top-2 principal components of mean-centered embeddings
Projection project_2d(const Tensor& embeddings);

// mel rows whose filter centers fall inside [f_lo, f_hi]
std::vector<int> mel_rows_in_band(const audio::SpectrogramConfig& config, double f_lo, double f_hi);

// fraction of heatmap mass inside the given rows
double band_mass_fraction(const Tensor& heat, const std::vector<int>& rows);

// split suffix for artifact names: 0.3 -> "30", 1.0 -> "100"
std::string pct_tag(double fraction);

}  // namespace mg::pipe
