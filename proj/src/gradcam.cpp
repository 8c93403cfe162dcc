#include "mg/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace mg::cam {

using ad::Var;

Tensor class_score_gradients(const siamese::SiameseModel& siam, const gnn::GnnModel& model,
                             const gnn::EmbeddingGraph& graph, const Tensor& spec, int clip_index,
                             int class_index, Tensor* maps_out) {
    graph.validate();
    if (clip_index < 0 || clip_index >= graph.n())
        throw std::invalid_argument("class_score_gradients: clip index " +
                                    std::to_string(clip_index) + " outside graph of " +
                                    std::to_string(graph.n()) + " nodes");
    if (class_index < 0 || class_index >= model.n_classes)
        throw std::invalid_argument("class_score_gradients: invalid class " +
                                    std::to_string(class_index));
    if (spec.rank() != 2) throw std::invalid_argument("class_score_gradients: spec must be [H,W]");

    // maps value from a frozen pass, then re-entered as a gradient leaf
    Tensor input({1, 1, spec.dim(0), spec.dim(1)}, spec.vec());
    siamese::BackboneOut fwd = siamese::backbone_forward(siam.backbone.frozen(), ad::constant(input));
    Tensor maps_val = fwd.maps.value();
    if (maps_out) *maps_out = maps_val.reshaped({maps_val.dim(1), maps_val.dim(2), maps_val.dim(3)});

    Var a = ad::param(maps_val);
    Var emb = siamese::backbone_tail(a);  // [1, 128]
    Var feats = ad::replace_row(graph.features, clip_index, ad::reshape(emb, {graph.dim()}));
    gnn::GnnOut out = gnn::gnn_forward(model.frozen(), feats);
    Var y = ad::element(out.logits,
                        static_cast<std::int64_t>(clip_index) * model.n_classes + class_index);
    ad::backward(y);
    return a.grad().reshaped({maps_val.dim(1), maps_val.dim(2), maps_val.dim(3)});
}

Tensor cam_weights(const Tensor& grads) {
    if (grads.rank() != 3) throw std::invalid_argument("cam_weights: grads must be [K,h,w]");
    if (!grads.all_finite()) throw std::invalid_argument("cam_weights: non-finite gradients");
    const int k = grads.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(grads.dim(1)) * grads.dim(2);
    Tensor w({k});
    for (int c = 0; c < k; ++c) {
        double acc = 0;
        for (std::int64_t i = 0; i < plane; ++i) acc += std::max(0.0, grads[c * plane + i]);
        w[c] = acc / static_cast<double>(plane);
    }
    return w;
}

namespace {

// pixel-center-aligned bilinear interpolation
Tensor upsample_bilinear(const Tensor& src, int rows, int cols) {
    const int h = src.dim(0), w = src.dim(1);
    Tensor out({rows, cols});
    for (int r = 0; r < rows; ++r) {
        double fy = (r + 0.5) * h / rows - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        y0 = std::clamp(y0, 0, h - 1);
        int y1 = std::min(y0 + 1, h - 1);
        for (int c = 0; c < cols; ++c) {
            double fx = (c + 0.5) * w / cols - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            x0 = std::clamp(x0, 0, w - 1);
            int x1 = std::min(x0 + 1, w - 1);
            out.at(r, c) = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                           wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
        }
    }
    return out;
}

}  // namespace

Heatmap heatmap(const Tensor& weights, const Tensor& feature_maps, int out_rows, int out_cols) {
    if (feature_maps.rank() != 3 || weights.numel() != feature_maps.dim(0))
        throw std::invalid_argument("heatmap: weights [K] must match maps [K,h,w], got " +
                                    shape_str(weights.shape()) + " vs " +
                                    shape_str(feature_maps.shape()));
    const int k = feature_maps.dim(0), h = feature_maps.dim(1), w = feature_maps.dim(2);
    Heatmap hm;
    hm.raw = Tensor::zeros({h, w});
    for (int c = 0; c < k; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) hm.raw.at(i, j) += weights[c] * feature_maps.at(c, i, j);
    for (std::int64_t i = 0; i < hm.raw.numel(); ++i) hm.raw[i] = std::max(0.0, hm.raw[i]);

    hm.values = upsample_bilinear(hm.raw, out_rows, out_cols);
    double raw_mass = hm.raw.sum(), up_mass = hm.values.sum();
    if (up_mass > 0)  // area-consistent: total mass equals the raw map's mass
        for (std::int64_t i = 0; i < hm.values.numel(); ++i) hm.values[i] *= raw_mass / up_mass;
    return hm;
}

Tensor max_normalized(const Tensor& heat) {
    Tensor out = heat;
    double m = heat.max();
    if (m > 0)
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= m;
    return out;
}

Tensor mass_normalized(const Tensor& heat) {
    Tensor out = heat;
    double s = heat.sum();
    if (s > 0)
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= s;
    return out;
}

Tensor overlay(const Heatmap& hm, const Tensor& spec, double threshold) {
    if (hm.values.shape() != spec.shape())
        throw std::invalid_argument("overlay: heatmap " + shape_str(hm.values.shape()) +
                                    " vs spectrogram " + shape_str(spec.shape()));
    if (threshold < 0.0 || threshold > 1.0)
        throw std::invalid_argument("overlay: threshold must lie in [0,1]");
    Tensor norm = max_normalized(hm.values);
    Tensor out = spec;
    for (std::int64_t i = 0; i < out.numel(); ++i)
        if (norm[i] < threshold) out[i] = 0.0;
    return out;
}

void write_explanation(const std::string& prefix, const Tensor& spec, const Heatmap& hm,
                       double threshold) {
    save_pgm(spec, prefix + "_spec.pgm");
    save_pgm(hm.values, prefix + "_heat.pgm");

    // overlay as PPM: grayscale spectrogram with surviving pixels tinted red
    Tensor norm = max_normalized(hm.values);
    double lo = spec.min(), range = std::max(1e-12, spec.max() - lo);
    const int rows = spec.dim(0), cols = spec.dim(1);
    Tensor rgb({rows, cols, 3});
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double v = (spec.at(r, c) - lo) / range;
            bool hot = norm.at(r, c) >= threshold;
            rgb.at(r, c, 0) = hot ? std::min(1.0, 0.3 + 0.7 * v) : v;
            rgb.at(r, c, 1) = hot ? 0.2 * v : v;
            rgb.at(r, c, 2) = hot ? 0.2 * v : v;
        }
    save_ppm(rgb, prefix + "_overlay.ppm");

    std::ofstream os(prefix + "_heat.csv");
    if (!os) throw std::runtime_error("cannot write heatmap CSV: " + prefix + "_heat.csv");
    os.precision(17);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) os << (c ? "," : "") << hm.values.at(r, c);
        os << "\n";
    }
}

}  // namespace mg::cam
