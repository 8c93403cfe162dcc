#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mg/autodiff.hpp"

namespace mg::gnn {

// Complete graph over embedding nodes; adjacency is implicit, never stored.
// test_mask marks every non-labeled transduction node (held-out test clips and
// label-dropped train-pool clips alike); scoring can narrow to a sub-mask.
struct EmbeddingGraph {
    Tensor features;  // [n, d]
    std::vector<int> labels;  // ground truth per node; -1 = unknown (extension nodes)
    std::vector<std::uint8_t> train_mask, test_mask;

    int n() const { return features.shape()[0]; }
    int dim() const { return features.shape()[1]; }
    void validate() const;  // n >= 2, finite, masks disjoint and covering
};

// One asymmetric edge-convolution layer (Eq 4): message gamma(x_i - x_j),
// update phi(concat(x_i, mean_j messages)).
struct EdgeGcnLayer {
    ad::Var gamma_w, gamma_b;  // [d, d], [d]
    ad::Var phi_w, phi_b;      // [d_out, 2d], [d_out]
};

struct GnnModel {
    std::vector<EdgeGcnLayer> layers;
    ad::Var cls_w, cls_b;  // [n_classes, dims.back()]
    std::vector<int> dims;  // layer widths, e.g. {128, 64, 32}
    int n_classes = 0;

    static GnnModel init(std::uint64_t seed, int n_classes, std::vector<int> dims = {128, 64, 32});
    GnnModel frozen() const;
    std::vector<ad::Var> params() const;
    void save(const std::string& dir) const;
    static GnnModel load(const std::string& dir);
};

// Plain (non-tape) reference path, used directly by tests and as the oracle
// for the fused op below.
Tensor edge_message(const Tensor& x_i, const Tensor& x_j, const EdgeGcnLayer& layer);
Tensor node_update(const Tensor& x_i, const std::vector<Tensor>& messages, const EdgeGcnLayer& layer);

// Fused tape op: agg_i = mean_{j != i} relu(g_i - g_j + b) with g = x W^T.
// Computes O(n^2 d) elementwise work instead of materializing n(n-1) messages.
ad::Var edge_aggregate(const ad::Var& x, const ad::Var& gamma_w, const ad::Var& gamma_b);

struct GnnOut {
    ad::Var logits;  // [n, n_classes]
    ad::Var probs;   // softmax rows
};

GnnOut gnn_forward(const GnnModel& model, const ad::Var& features);
GnnOut gnn_forward(const GnnModel& model, const EmbeddingGraph& graph);

struct GnnConfig {
    int epochs = 1000;
    double lr = 3e-4;
    std::uint64_t seed = 0;
    std::vector<int> dims = {128, 64, 32};
    int max_nodes = 2000;  // O(n^2) messages; larger graphs are rejected
};

struct GnnTrace {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;  // on train_mask
};

GnnModel train_gnn(const EmbeddingGraph& graph, int n_classes, const GnnConfig& config,
                   GnnTrace* trace = nullptr);

struct Prediction {
    std::vector<int> pred;  // argmax class per node, lowest index wins ties
    double accuracy = 0.0;  // over the scored mask, nodes with known labels
    Tensor confusion;       // [n_classes, n_classes], rows = true class
};

// Scores over eval_mask if given, else over graph.test_mask. Nodes with
// label -1 are predicted but never counted.
Prediction predict_and_score(const GnnModel& model, const EmbeddingGraph& graph,
                             const std::vector<std::uint8_t>& eval_mask = {});

// Appends unlabeled nodes (label -1, test_mask); existing nodes untouched.
EmbeddingGraph extend_graph(const EmbeddingGraph& graph, const Tensor& new_features);

void save_graph_csv(const EmbeddingGraph& graph, const std::string& path);
EmbeddingGraph load_graph_csv(const std::string& path);
void save_confusion_csv(const Tensor& confusion, const std::vector<std::string>& class_names,
                        const std::string& path);

}  // namespace mg::gnn
