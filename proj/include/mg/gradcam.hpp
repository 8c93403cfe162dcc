#pragma once

#include <string>

#include "mg/gnn.hpp"
#include "mg/siamese.hpp"

namespace mg::cam {

struct Heatmap {
    Tensor raw;     // [h', w'] at feature-map resolution, >= 0
    Tensor values;  // upsampled [n_mels, n_frames], >= 0, mass-preserving
    int class_index = -1;
    std::string layer_tag = "conv4_relu";
};

// d(Y^c)/dA for the tapped backbone maps A of one clip, where Y^c is the
// pre-softmax GNN logit of class c at the clip's node after a full forward
// over the graph (the clip's embedding row is recomputed from A so the
// gradient flows GNN -> embedding -> GAP -> maps). Returns [128, h', w'];
// the maps themselves come back via maps_out when given.
Tensor class_score_gradients(const siamese::SiameseModel& siam, const gnn::GnnModel& model,
                             const gnn::EmbeddingGraph& graph, const Tensor& spec, int clip_index,
                             int class_index, Tensor* maps_out = nullptr);

// w_k = sum_ij alpha * relu(g_kij) with uniform alpha = 1/(h'*w')
Tensor cam_weights(const Tensor& grads);

// relu(sum_k w_k A_k), bilinearly upsampled to [out_rows, out_cols] with the
// total mass rescaled to the raw map's mass.
Heatmap heatmap(const Tensor& weights, const Tensor& feature_maps, int out_rows, int out_cols);

// heat / max(heat); all-zero stays all-zero
Tensor max_normalized(const Tensor& heat);
// heat / sum(heat); sums to 1 or stays all-zero
Tensor mass_normalized(const Tensor& heat);

// spectrogram with pixels below the normalized-heat threshold zeroed
Tensor overlay(const Heatmap& hm, const Tensor& spec, double threshold);

// the three columns of the figure: spectrogram, heatmap, overlay; writes
// <prefix>_spec.pgm, _heat.pgm, _overlay.ppm, _heat.csv
void write_explanation(const std::string& prefix, const Tensor& spec, const Heatmap& hm,
                       double threshold = 0.5);

}  // namespace mg::cam
