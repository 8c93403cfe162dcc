#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mg/autodiff.hpp"

namespace mg::siamese {

// 4-block conv backbone (16/32/64/128, 3x3 same, relu; blocks 1-2 pool 2x2,
// block 3 pools time only) ending in global average pooling to a 128-d
// embedding. Conv biases are fixed at zero so silent spectrogram regions
// produce (near-)zero activations, keeping Grad-CAM heat on actual energy.
struct BackboneModel {
    std::vector<ad::Var> conv_w;  // [O,C,3,3] per block
    std::vector<ad::Var> conv_b;  // zero constants, kept for the conv interface

    static BackboneModel init(std::uint64_t seed);
    BackboneModel frozen() const;  // constant copies, for inference paths
    std::vector<ad::Var> params() const;
};

struct BackboneOut {
    ad::Var maps;       // last conv block post-relu, [N,128,h',w'] (Grad-CAM tap)
    ad::Var embedding;  // [N,128]
};

// input [N,1,H,W]
BackboneOut backbone_forward(const BackboneModel& model, const ad::Var& input);
// pool + GAP from the tapped maps; lets callers treat the maps as a leaf
ad::Var backbone_tail(const ad::Var& maps);

// Conjoining head: dense 512->128 relu, dense 128->1 sigmoid.
struct SimilarityHead {
    ad::Var w1, b1, w2, b2;
    static SimilarityHead init(std::uint64_t seed);
    SimilarityHead frozen() const;
    std::vector<ad::Var> params() const;
};

// [f_i | f_j | (f_i-f_j)^2 | f_i . f_j], each block 128 wide.
ad::Var combine_features(const ad::Var& fi, const ad::Var& fj);

// s_ij in (0,1) per pair row
ad::Var head_forward(const SimilarityHead& head, const ad::Var& combined);

struct SiameseModel {
    BackboneModel backbone;
    SimilarityHead head;
    static SiameseModel init(std::uint64_t seed);
    std::vector<ad::Var> params() const;
    void save(const std::string& dir) const;
    static SiameseModel load(const std::string& dir);
};

struct Pair {
    int i, j;
    int same;  // 1 = same class
};

struct PairSet {
    std::vector<Pair> pairs;
    int n_pos = 0, n_neg = 0;
    long n_pos_candidates = 0, n_neg_candidates = 0;
    std::vector<std::string> warnings;
};

// Same-class vs cross-class unordered pairs within the training mask, larger
// side down-sampled toward target_ratio (pos:neg).
PairSet sample_pairs(const std::vector<int>& labels, const std::vector<std::uint8_t>& train_mask,
                     double target_ratio, std::uint64_t seed);

void save_pairs_csv(const PairSet& ps, const std::string& path);

struct SiameseConfig {
    int epochs = 20;
    int batch = 64;
    double lr = 3e-4;
    std::uint64_t seed = 0;
    // pairs are re-drawn per epoch; this caps the per-epoch subset (balance kept)
    int max_pairs_per_epoch = 320;
};

struct SiameseTrace {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_pair_accuracy;
};

// specs: [n,H,W] stack of cropped spectrograms. Trains in place.
SiameseTrace train_siamese(SiameseModel& model, const Tensor& specs, const std::vector<int>& labels,
                           const std::vector<std::uint8_t>& train_mask, const SiameseConfig& config);

// full similarity path for two single spectrograms [H,W]
double similarity(const SiameseModel& model, const Tensor& spec_i, const Tensor& spec_j);

// row i = embedding of clip i; [n,128]
Tensor embed_all(const SiameseModel& model, const Tensor& specs, int batch = 16);

// pair classification accuracy of the trained model over a given pair set
double pair_accuracy(const SiameseModel& model, const Tensor& specs, const PairSet& ps);

}  // namespace mg::siamese
