#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mg/audio.hpp"

namespace mg::data {

enum class GeneratorKind { HarmonicStack, BandNoise, PulseTrain, Chirp };

struct GenreSpec {
    std::string name;
    GeneratorKind kind = GeneratorKind::HarmonicStack;
    double f_lo = 110.0, f_hi = 440.0;   // fundamental band / noise band / chirp range
    double pulse_rate_hz = 4.0;          // PulseTrain only
    int harmonics = 8;                   // HarmonicStack only
    double amp_jitter_lo = 0.7, amp_jitter_hi = 1.0;
    double noise_floor_lo = 0.001, noise_floor_hi = 0.005;
};

struct LabeledDataset {
    std::vector<audio::AudioClip> clips;
    std::vector<int> labels;        // dense class indices from 0
    std::vector<int> source_ids;    // segments of one recording share a source id
    std::vector<std::string> class_names;
    int num_warnings = 0;           // unreadable files skipped by the loader
    size_t size() const { return clips.size(); }
};

struct SplitMasks {
    std::vector<std::uint8_t> test_mask;
    std::vector<std::uint8_t> train_mask;      // labeled training nodes
    std::vector<std::uint8_t> unlabeled_mask;  // train-pool nodes without visible labels
};

// Deterministic per (spec, seed); frequencies/phases/amplitude drawn inside the
// spec's ranges so clips within a class differ. Peak-normalized to 0.9.
audio::AudioClip synth_clip(const GenreSpec& spec, double duration_s, std::uint64_t seed,
                            int sample_rate = 22050);

LabeledDataset generate_dataset(const std::vector<GenreSpec>& specs, int clips_per_class,
                                double duration_s, std::uint64_t seed, int sample_rate = 22050);

// Stratified test split, then a stratified labeled subset of the train pool.
// Segments sharing a source id are pinned to the same side of every boundary.
SplitMasks split_dataset(const LabeledDataset& dataset, double test_fraction,
                         double labeled_fraction, std::uint64_t seed);

// Directory-per-genre WAV tree; 30 s clips are cut into non-overlapping
// segments of segment_seconds inheriting the clip label.
LabeledDataset load_gtzan_layout(const std::string& root_dir, double segment_seconds = 5.0);

// The 4-class suites used throughout the experiments.
std::vector<GenreSpec> default_synthetic_specs();     // spectrally well separated
std::vector<GenreSpec> confusable_synthetic_specs();  // overlapping bands

// Fraction of spectral energy inside [f_lo, f_hi]; the band-energy oracle.
double band_energy_fraction(const audio::AudioClip& clip, double f_lo, double f_hi);

// Deterministic per-clip seed derivation.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0);
std::uint64_t derive_seed(std::uint64_t master, const std::string& tag);

void save_manifest_csv(const LabeledDataset& dataset, const SplitMasks& masks,
                       const std::string& path);

}  // namespace mg::data
