#include "mg/gnn.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mg/datagen.hpp"  // derive_seed

namespace mg::gnn {

using ad::Var;
using data::derive_seed;

void EmbeddingGraph::validate() const {
    if (features.rank() != 2 || n() < 2)
        throw std::invalid_argument("graph needs a [n>=2, d] feature matrix, got " +
                                    shape_str(features.shape()));
    if (!features.all_finite()) throw std::invalid_argument("graph features must be finite");
    const auto size = static_cast<size_t>(n());
    if (labels.size() != size || train_mask.size() != size || test_mask.size() != size)
        throw std::invalid_argument("graph labels/mask length != node count");
    for (size_t i = 0; i < size; ++i) {
        if (train_mask[i] + test_mask[i] != 1)
            throw std::invalid_argument("node " + std::to_string(i) +
                                        " must sit in exactly one of train/test mask");
        if (train_mask[i] && labels[i] < 0)
            throw std::invalid_argument("train node " + std::to_string(i) + " lacks a label");
    }
}

GnnModel GnnModel::init(std::uint64_t seed, int n_classes, std::vector<int> dims) {
    if (n_classes < 2 || dims.size() < 2)
        throw std::invalid_argument("GnnModel::init: need >= 2 classes and >= 2 layer dims");
    std::mt19937_64 rng(derive_seed(seed, "gnn-init"));
    GnnModel m;
    m.dims = dims;
    m.n_classes = n_classes;
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        const int d = dims[l], d_out = dims[l + 1];
        EdgeGcnLayer layer;
        layer.gamma_w = ad::param(ad::he_normal({d, d}, rng, d));
        layer.gamma_b = ad::param(Tensor::zeros({d}));
        layer.phi_w = ad::param(ad::he_normal({d_out, 2 * d}, rng, 2 * d));
        layer.phi_b = ad::param(Tensor::zeros({d_out}));
        m.layers.push_back(std::move(layer));
    }
    m.cls_w = ad::param(ad::he_normal({n_classes, dims.back()}, rng, dims.back()));
    m.cls_b = ad::param(Tensor::zeros({n_classes}));
    return m;
}

GnnModel GnnModel::frozen() const {
    GnnModel m;
    m.dims = dims;
    m.n_classes = n_classes;
    for (const auto& l : layers)
        m.layers.push_back({ad::constant(l.gamma_w.value()), ad::constant(l.gamma_b.value()),
                            ad::constant(l.phi_w.value()), ad::constant(l.phi_b.value())});
    m.cls_w = ad::constant(cls_w.value());
    m.cls_b = ad::constant(cls_b.value());
    return m;
}

std::vector<Var> GnnModel::params() const {
    std::vector<Var> out;
    for (const auto& l : layers) {
        out.push_back(l.gamma_w);
        out.push_back(l.gamma_b);
        out.push_back(l.phi_w);
        out.push_back(l.phi_b);
    }
    out.push_back(cls_w);
    out.push_back(cls_b);
    return out;
}

void GnnModel::save(const std::string& dir) const {
    ad::Checkpoint ck;
    for (size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        ck.add(p + "gamma_w", layers[l].gamma_w.value());
        ck.add(p + "gamma_b", layers[l].gamma_b.value());
        ck.add(p + "phi_w", layers[l].phi_w.value());
        ck.add(p + "phi_b", layers[l].phi_b.value());
    }
    ck.add("cls.w", cls_w.value());
    ck.add("cls.b", cls_b.value());
    ad::save_checkpoint(ck, dir);
}

GnnModel GnnModel::load(const std::string& dir) {
    ad::Checkpoint ck = ad::load_checkpoint(dir);
    GnnModel m;
    for (size_t l = 0;; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        if (std::find(ck.names.begin(), ck.names.end(), p + "gamma_w") == ck.names.end()) break;
        EdgeGcnLayer layer;
        layer.gamma_w = ad::param(ck.get(p + "gamma_w"));
        layer.gamma_b = ad::param(ck.get(p + "gamma_b"));
        layer.phi_w = ad::param(ck.get(p + "phi_w"));
        layer.phi_b = ad::param(ck.get(p + "phi_b"));
        m.dims.push_back(layer.gamma_w.value().dim(0));
        m.layers.push_back(std::move(layer));
    }
    if (m.layers.empty()) throw std::runtime_error("GnnModel::load: no layers in " + dir);
    m.dims.push_back(m.layers.back().phi_w.value().dim(0));
    m.cls_w = ad::param(ck.get("cls.w"));
    m.cls_b = ad::param(ck.get("cls.b"));
    m.n_classes = m.cls_w.value().dim(0);
    return m;
}

// ------------------------------------------------------------ reference path

Tensor edge_message(const Tensor& x_i, const Tensor& x_j, const EdgeGcnLayer& layer) {
    const int d = layer.gamma_w.value().dim(1);
    if (x_i.numel() != d || x_j.numel() != d)
        throw std::invalid_argument("edge_message: feature dim != layer gamma input dim");
    const Tensor& w = layer.gamma_w.value();
    const Tensor& b = layer.gamma_b.value();
    Tensor m({w.dim(0)});
    for (int o = 0; o < w.dim(0); ++o) {
        double acc = b[o];
        for (int k = 0; k < d; ++k) acc += w.at(o, k) * (x_i[k] - x_j[k]);
        m[o] = std::max(0.0, acc);
    }
    return m;
}

Tensor node_update(const Tensor& x_i, const std::vector<Tensor>& messages, const EdgeGcnLayer& layer) {
    if (messages.empty()) throw std::invalid_argument("node_update: node has no neighbors");
    const int d_msg = static_cast<int>(messages[0].numel());
    Tensor agg({d_msg});
    for (const auto& m : messages)
        for (int k = 0; k < d_msg; ++k) agg[k] += m[k];
    for (int k = 0; k < d_msg; ++k) agg[k] /= static_cast<double>(messages.size());

    const Tensor& w = layer.phi_w.value();
    const Tensor& b = layer.phi_b.value();
    const int d_in = static_cast<int>(x_i.numel());
    if (w.dim(1) != d_in + d_msg) throw std::invalid_argument("node_update: phi dim mismatch");
    Tensor out({w.dim(0)});
    for (int o = 0; o < w.dim(0); ++o) {
        double acc = b[o];
        for (int k = 0; k < d_in; ++k) acc += w.at(o, k) * x_i[k];
        for (int k = 0; k < d_msg; ++k) acc += w.at(o, d_in + k) * agg[k];
        out[o] = std::max(0.0, acc);
    }
    return out;
}

// --------------------------------------------------------------- fused op

// agg_i = mean_{j != i} relu(g_i - g_j + b) with g = x W^T. The relu argument
// is linear in (x_i - x_j), so g is computed once per node and the n(n-1)
// messages are never materialized; backward recomputes the relu masks from g.
Var edge_aggregate(const Var& x, const Var& gamma_w, const Var& gamma_b) {
    const int n = x.shape()[0], d_in = x.shape()[1];
    const int d = gamma_w.shape()[0];
    if (gamma_w.shape()[1] != d_in || gamma_b.shape()[0] != d)
        throw std::invalid_argument("edge_aggregate: gamma shape mismatch with features");
    if (n < 2) throw std::invalid_argument("edge_aggregate: graph has no neighbors (n < 2)");

    Tensor g({n, d});
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, n, d, d_in, 1.0, x.value().data(), d_in,
                gamma_w.value().data(), d_in, 0.0, g.data(), d);
    const Tensor& b = gamma_b.value();
    const double inv = 1.0 / (n - 1);

    Tensor agg({n, d});
    for (int i = 0; i < n; ++i) {
        const double* gi = g.data() + static_cast<std::int64_t>(i) * d;
        double* out = agg.data() + static_cast<std::int64_t>(i) * d;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const double* gj = g.data() + static_cast<std::int64_t>(j) * d;
            for (int k = 0; k < d; ++k) {
                double v = gi[k] - gj[k] + b[k];
                if (v > 0) out[k] += v;
            }
        }
        for (int k = 0; k < d; ++k) out[k] *= inv;
    }

    return ad::make_op(std::move(agg), {x, gamma_w, gamma_b}, [g, n, d, d_in, inv](ad::Node& node) {
        const Tensor& go = node.grad;
        const Tensor& b = node.parents[2]->value;
        Tensor dg({n, d});
        Tensor db({d});
        for (int i = 0; i < n; ++i) {
            const double* gi = g.data() + static_cast<std::int64_t>(i) * d;
            const double* goi = go.data() + static_cast<std::int64_t>(i) * d;
            double* dgi = dg.data() + static_cast<std::int64_t>(i) * d;
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                const double* gj = g.data() + static_cast<std::int64_t>(j) * d;
                double* dgj = dg.data() + static_cast<std::int64_t>(j) * d;
                for (int k = 0; k < d; ++k) {
                    if (gi[k] - gj[k] + b[k] > 0) {
                        const double v = goi[k] * inv;
                        dgi[k] += v;
                        dgj[k] -= v;
                        db[k] += v;
                    }
                }
            }
        }
        if (node.parents[0]->needs_grad) {  // dX = dG W
            const Tensor& w = node.parents[1]->value;
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, n, d_in, d, 1.0, dg.data(), d,
                        w.data(), d_in, 1.0, node.parents[0]->grad_buf().data(), d_in);
        }
        if (node.parents[1]->needs_grad) {  // dW = dG^T X
            const Tensor& xv = node.parents[0]->value;
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, d, d_in, n, 1.0, dg.data(), d,
                        xv.data(), d_in, 1.0, node.parents[1]->grad_buf().data(), d_in);
        }
        if (node.parents[2]->needs_grad) {
            Tensor& gb = node.parents[2]->grad_buf();
            for (int k = 0; k < d; ++k) gb[k] += db[k];
        }
    });
}

GnnOut gnn_forward(const GnnModel& model, const ad::Var& features) {
    if (features.shape()[1] != model.dims[0])
        throw std::invalid_argument("gnn_forward: feature dim " + std::to_string(features.shape()[1]) +
                                    " != model input dim " + std::to_string(model.dims[0]));
    Var x = features;
    for (const auto& layer : model.layers) {
        Var agg = edge_aggregate(x, layer.gamma_w, layer.gamma_b);
        x = ad::relu(ad::linear(ad::concat({x, agg}, 1), layer.phi_w, layer.phi_b));
    }
    Var logits = ad::linear(x, model.cls_w, model.cls_b);
    return {logits, ad::softmax(logits)};
}

GnnOut gnn_forward(const GnnModel& model, const EmbeddingGraph& graph) {
    graph.validate();
    return gnn_forward(model, ad::constant(graph.features));
}

GnnModel train_gnn(const EmbeddingGraph& graph, int n_classes, const GnnConfig& config,
                   GnnTrace* trace) {
    graph.validate();
    if (graph.n() > config.max_nodes)
        throw std::invalid_argument("train_gnn: graph has " + std::to_string(graph.n()) +
                                    " nodes, above the O(n^2) full-batch cap of " +
                                    std::to_string(config.max_nodes));
    std::set<int> train_classes;
    std::vector<int> targets(graph.labels.size(), 0);
    long n_train = 0;
    for (size_t i = 0; i < graph.labels.size(); ++i)
        if (graph.train_mask[i]) {
            if (graph.labels[i] >= n_classes)
                throw std::invalid_argument("train_gnn: label out of range");
            targets[i] = graph.labels[i];
            train_classes.insert(graph.labels[i]);
            ++n_train;
        }
    if (n_train == 0) throw std::invalid_argument("train_gnn: empty training mask");
    if (train_classes.size() < 2)
        throw std::invalid_argument("train_gnn: training mask covers a single class");

    GnnConfig cfg = config;
    if (cfg.dims.front() != graph.dim()) cfg.dims.front() = graph.dim();
    GnnModel model = GnnModel::init(cfg.seed, n_classes, cfg.dims);
    std::vector<Var> params = model.params();
    ad::AdamState adam;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        GnnOut out = gnn_forward(model, ad::constant(graph.features));
        Var loss = ad::cross_entropy(out.logits, targets, graph.train_mask);
        if (!std::isfinite(loss.value()[0]))
            throw std::runtime_error("train_gnn: NaN loss at epoch " + std::to_string(epoch));
        if (trace) {
            long correct = 0;
            for (size_t i = 0; i < targets.size(); ++i) {
                if (!graph.train_mask[i]) continue;
                int best = 0;
                for (int c = 1; c < n_classes; ++c)
                    if (out.logits.value().at(static_cast<int>(i), c) >
                        out.logits.value().at(static_cast<int>(i), best))
                        best = c;
                correct += (best == targets[i]);
            }
            trace->epoch_loss.push_back(loss.value()[0]);
            trace->epoch_accuracy.push_back(static_cast<double>(correct) / n_train);
        }
        ad::backward(loss);
        ad::adam_step(params, adam, cfg.lr);
    }
    return model;
}

Prediction predict_and_score(const GnnModel& model, const EmbeddingGraph& graph,
                             const std::vector<std::uint8_t>& eval_mask) {
    const std::vector<std::uint8_t>& mask = eval_mask.empty() ? graph.test_mask : eval_mask;
    if (mask.size() != static_cast<size_t>(graph.n()))
        throw std::invalid_argument("predict_and_score: eval mask length != node count");
    if (std::count(mask.begin(), mask.end(), 1) == 0)
        throw std::invalid_argument("predict_and_score: empty evaluation mask");

    GnnOut out = gnn_forward(model.frozen(), graph);
    Prediction p;
    p.confusion = Tensor::zeros({model.n_classes, model.n_classes});
    long correct = 0, total = 0;
    for (int i = 0; i < graph.n(); ++i) {
        int best = 0;
        for (int c = 1; c < model.n_classes; ++c)
            if (out.probs.value().at(i, c) > out.probs.value().at(i, best)) best = c;
        p.pred.push_back(best);
        if (mask[i] && graph.labels[i] >= 0) {
            p.confusion.at(graph.labels[i], best) += 1.0;
            correct += (best == graph.labels[i]);
            ++total;
        }
    }
    if (total == 0) throw std::invalid_argument("predict_and_score: no labeled nodes under the mask");
    p.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    return p;
}

EmbeddingGraph extend_graph(const EmbeddingGraph& graph, const Tensor& new_features) {
    graph.validate();
    if (new_features.numel() == 0) return graph;
    if (new_features.rank() != 2 || new_features.dim(1) != graph.dim())
        throw std::invalid_argument("extend_graph: new features must be [m, " +
                                    std::to_string(graph.dim()) + "], got " +
                                    shape_str(new_features.shape()));
    const int m = new_features.dim(0);
    EmbeddingGraph out = graph;
    Tensor feats({graph.n() + m, graph.dim()});
    std::copy_n(graph.features.data(), graph.features.numel(), feats.data());
    std::copy_n(new_features.data(), new_features.numel(), feats.data() + graph.features.numel());
    out.features = std::move(feats);
    for (int i = 0; i < m; ++i) {
        out.labels.push_back(-1);
        out.train_mask.push_back(0);
        out.test_mask.push_back(1);
    }
    return out;
}

void save_graph_csv(const EmbeddingGraph& graph, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write graph CSV: " + path);
    os << "id";
    for (int k = 0; k < graph.dim(); ++k) os << ",f" << k;
    os << ",label,split\n";
    os.precision(17);
    for (int i = 0; i < graph.n(); ++i) {
        os << i;
        for (int k = 0; k < graph.dim(); ++k) os << "," << graph.features.at(i, k);
        os << "," << graph.labels[i] << "," << (graph.train_mask[i] ? "train" : "test") << "\n";
    }
}

EmbeddingGraph load_graph_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read graph CSV: " + path);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("empty graph CSV: " + path);
    const int d = static_cast<int>(std::count(line.begin(), line.end(), ',')) - 2;
    if (d < 1) throw std::runtime_error("malformed graph CSV header: " + path);

    std::vector<double> feats;
    EmbeddingGraph g;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');  // id
        for (int k = 0; k < d; ++k) {
            std::getline(ss, cell, ',');
            feats.push_back(std::stod(cell));
        }
        std::getline(ss, cell, ',');
        g.labels.push_back(std::stoi(cell));
        std::getline(ss, cell, ',');
        g.train_mask.push_back(cell == "train");
        g.test_mask.push_back(cell != "train");
    }
    g.features = Tensor({static_cast<int>(g.labels.size()), d}, std::move(feats));
    g.validate();
    return g;
}

void save_confusion_csv(const Tensor& confusion, const std::vector<std::string>& class_names,
                        const std::string& path) {
    const int c = confusion.dim(0);
    if (class_names.size() != static_cast<size_t>(c))
        throw std::invalid_argument("save_confusion_csv: class name count mismatch");
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write confusion CSV: " + path);
    os << "true\\pred";
    for (const auto& name : class_names) os << "," << name;
    os << "\n";
    for (int i = 0; i < c; ++i) {
        os << class_names[i];
        for (int j = 0; j < c; ++j) os << "," << static_cast<long>(confusion.at(i, j));
        os << "\n";
    }
}

}  // namespace mg::gnn
