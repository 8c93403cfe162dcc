#include "mg/siamese.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <unordered_map>

#include "mg/datagen.hpp"  // derive_seed

namespace mg::siamese {

using ad::Var;
using data::derive_seed;

namespace {

constexpr int kWidths[4] = {16, 32, 64, 128};

Tensor batch_from(const Tensor& specs, const std::vector<int>& idx) {
    const int H = specs.dim(1), W = specs.dim(2);
    Tensor out({static_cast<int>(idx.size()), 1, H, W});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (size_t k = 0; k < idx.size(); ++k)
        std::copy_n(specs.data() + idx[k] * plane, plane, out.data() + k * plane);
    return out;
}

}  // namespace

BackboneModel BackboneModel::init(std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, "backbone-init"));
    BackboneModel m;
    int in_ch = 1;
    for (int b = 0; b < 4; ++b) {
        const int out_ch = kWidths[b];
        m.conv_w.push_back(ad::param(ad::he_normal({out_ch, in_ch, 3, 3}, rng, in_ch * 9)));
        // conv biases are fixed at zero: a trainable bias adds a constant
        // plane to every feature map, which lights up silent spectrogram
        // regions and destroys Grad-CAM localization
        m.conv_b.push_back(ad::constant(Tensor::zeros({out_ch})));
        in_ch = out_ch;
    }
    return m;
}

BackboneModel BackboneModel::frozen() const {
    BackboneModel m;
    for (int b = 0; b < 4; ++b) {
        m.conv_w.push_back(ad::constant(conv_w[b].value()));
        m.conv_b.push_back(ad::constant(conv_b[b].value()));
    }
    return m;
}

std::vector<Var> BackboneModel::params() const {
    std::vector<Var> out;
    for (int b = 0; b < 4; ++b) out.push_back(conv_w[b]);  // biases stay zero
    return out;
}

BackboneOut backbone_forward(const BackboneModel& model, const ad::Var& input) {
    Var x = input;
    for (int b = 0; b < 3; ++b) {
        x = ad::conv2d(x, model.conv_w[b], model.conv_b[b], 1, ad::Padding::Same, /*fuse_relu=*/true);
        // block 3 pools time only: keeps the tapped maps at 1/4 frequency
        // resolution so Grad-CAM heat stays band-localized
        x = b < 2 ? ad::max_pool2d(x) : ad::max_pool2d(x, 1, 1, 2, 2);
    }
    Var maps = ad::conv2d(x, model.conv_w[3], model.conv_b[3], 1, ad::Padding::Same, true);
    return {maps, backbone_tail(maps)};
}

ad::Var backbone_tail(const ad::Var& maps) {
    return ad::global_avg_pool(ad::max_pool2d(maps));
}

SimilarityHead SimilarityHead::init(std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, "head-init"));
    SimilarityHead h;
    h.w1 = ad::param(ad::he_normal({128, 512}, rng, 512));
    h.b1 = ad::param(Tensor::zeros({128}));
    h.w2 = ad::param(ad::randn({1, 128}, rng, 0.05));
    h.b2 = ad::param(Tensor::zeros({1}));
    return h;
}

SimilarityHead SimilarityHead::frozen() const {
    SimilarityHead h;
    h.w1 = ad::constant(w1.value());
    h.b1 = ad::constant(b1.value());
    h.w2 = ad::constant(w2.value());
    h.b2 = ad::constant(b2.value());
    return h;
}

std::vector<Var> SimilarityHead::params() const { return {w1, b1, w2, b2}; }

ad::Var combine_features(const ad::Var& fi, const ad::Var& fj) {
    if (fi.shape() != fj.shape() || fi.value().rank() != 2 || fi.shape()[1] != 128)
        throw std::invalid_argument("combine_features expects two [n,128] matrices, got " +
                                    shape_str(fi.shape()) + " and " + shape_str(fj.shape()));
    Var t1 = ad::square(ad::sub(fi, fj));
    Var t2 = ad::mul(fi, fj);
    return ad::concat({fi, fj, t1, t2}, 1);
}

ad::Var head_forward(const SimilarityHead& head, const ad::Var& combined) {
    Var h = ad::relu(ad::linear(combined, head.w1, head.b1));
    Var s = ad::sigmoid(ad::linear(h, head.w2, head.b2));
    return ad::reshape(s, {combined.shape()[0]});
}

SiameseModel SiameseModel::init(std::uint64_t seed) {
    return {BackboneModel::init(seed), SimilarityHead::init(seed)};
}

std::vector<Var> SiameseModel::params() const {
    std::vector<Var> out = backbone.params();
    for (auto& p : head.params()) out.push_back(p);
    return out;
}

void SiameseModel::save(const std::string& dir) const {
    ad::Checkpoint ck;
    for (int b = 0; b < 4; ++b) {
        ck.add("conv" + std::to_string(b) + ".w", backbone.conv_w[b].value());
        ck.add("conv" + std::to_string(b) + ".b", backbone.conv_b[b].value());
    }
    ck.add("head.w1", head.w1.value());
    ck.add("head.b1", head.b1.value());
    ck.add("head.w2", head.w2.value());
    ck.add("head.b2", head.b2.value());
    ad::save_checkpoint(ck, dir);
}

SiameseModel SiameseModel::load(const std::string& dir) {
    ad::Checkpoint ck = ad::load_checkpoint(dir);
    SiameseModel m;
    for (int b = 0; b < 4; ++b) {
        m.backbone.conv_w.push_back(ad::param(ck.get("conv" + std::to_string(b) + ".w")));
        m.backbone.conv_b.push_back(ad::constant(ck.get("conv" + std::to_string(b) + ".b")));
    }
    m.head.w1 = ad::param(ck.get("head.w1"));
    m.head.b1 = ad::param(ck.get("head.b1"));
    m.head.w2 = ad::param(ck.get("head.w2"));
    m.head.b2 = ad::param(ck.get("head.b2"));
    return m;
}

PairSet sample_pairs(const std::vector<int>& labels, const std::vector<std::uint8_t>& train_mask,
                     double target_ratio, std::uint64_t seed) {
    if (labels.size() != train_mask.size())
        throw std::invalid_argument("sample_pairs: labels/mask size mismatch");
    std::vector<int> nodes;
    for (size_t i = 0; i < labels.size(); ++i)
        if (train_mask[i]) nodes.push_back(static_cast<int>(i));

    PairSet ps;
    std::map<int, int> per_class;
    for (int i : nodes) per_class[labels[i]]++;
    if (per_class.size() < 2)
        throw std::invalid_argument("sample_pairs: need >= 2 classes in the training mask");
    for (auto& [cls, count] : per_class)
        if (count < 2)
            ps.warnings.push_back("class " + std::to_string(cls) +
                                  " has fewer than 2 training samples; contributes no positive pairs");

    std::vector<Pair> pos, neg;
    for (size_t a = 0; a < nodes.size(); ++a)
        for (size_t b = a + 1; b < nodes.size(); ++b) {
            bool same = labels[nodes[a]] == labels[nodes[b]];
            (same ? pos : neg).push_back({nodes[a], nodes[b], same ? 1 : 0});
        }
    ps.n_pos_candidates = static_cast<long>(pos.size());
    ps.n_neg_candidates = static_cast<long>(neg.size());
    if (pos.empty() && neg.empty()) throw std::invalid_argument("sample_pairs: no candidate pairs");
    if (pos.empty()) throw std::invalid_argument("sample_pairs: no positive pairs available");

    std::mt19937_64 rng(derive_seed(seed, "pair-balance"));
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    // down-sample the larger side toward target_ratio = n_pos : n_neg
    auto want_pos = static_cast<size_t>(std::lround(static_cast<double>(neg.size()) * target_ratio));
    if (pos.size() > want_pos && want_pos >= 1) pos.resize(want_pos);
    auto want_neg = static_cast<size_t>(std::lround(static_cast<double>(pos.size()) / target_ratio));
    if (neg.size() > want_neg && want_neg >= 1) neg.resize(want_neg);

    ps.n_pos = static_cast<int>(pos.size());
    ps.n_neg = static_cast<int>(neg.size());
    ps.pairs = std::move(pos);
    ps.pairs.insert(ps.pairs.end(), neg.begin(), neg.end());
    std::shuffle(ps.pairs.begin(), ps.pairs.end(), rng);
    return ps;
}

void save_pairs_csv(const PairSet& ps, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write pair CSV: " + path);
    os << "i,j,label\n";
    for (const auto& p : ps.pairs) os << p.i << "," << p.j << "," << p.same << "\n";
}

namespace {

// forward a batch of pairs through shared backbone + head; indices deduplicated
Var batch_similarity(const SiameseModel& model, const Tensor& specs, const std::vector<Pair>& batch) {
    std::unordered_map<int, int> local;
    std::vector<int> uniq, bi, bj;
    for (const auto& p : batch) {
        for (int idx : {p.i, p.j})
            if (!local.count(idx)) {
                local[idx] = static_cast<int>(uniq.size());
                uniq.push_back(idx);
            }
        bi.push_back(local[p.i]);
        bj.push_back(local[p.j]);
    }
    Var input = ad::constant(batch_from(specs, uniq));
    BackboneOut out = backbone_forward(model.backbone, input);
    Var fi = ad::gather_rows(out.embedding, bi);
    Var fj = ad::gather_rows(out.embedding, bj);
    return head_forward(model.head, combine_features(fi, fj));
}

}  // namespace

SiameseTrace train_siamese(SiameseModel& model, const Tensor& specs, const std::vector<int>& labels,
                           const std::vector<std::uint8_t>& train_mask, const SiameseConfig& config) {
    std::vector<Var> params = model.params();
    ad::AdamState adam;
    SiameseTrace trace;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        PairSet ps = sample_pairs(labels, train_mask, 1.0,
                                  derive_seed(derive_seed(config.seed, "pairs"), epoch));
        if (static_cast<int>(ps.pairs.size()) > config.max_pairs_per_epoch) {
            // keep the head of the already-shuffled balanced list
            ps.pairs.resize(config.max_pairs_per_epoch);
        }
        double loss_sum = 0;
        long correct = 0, total = 0;
        for (size_t start = 0; start < ps.pairs.size(); start += config.batch) {
            std::vector<Pair> batch(ps.pairs.begin() + start,
                                    ps.pairs.begin() + std::min(ps.pairs.size(), start + config.batch));
            Var s = batch_similarity(model, specs, batch);
            std::vector<double> targets;
            for (const auto& p : batch) targets.push_back(p.same);
            Var loss = ad::binary_cross_entropy(s, targets);
            if (!std::isfinite(loss.value()[0]))
                throw std::runtime_error("train_siamese: NaN loss at epoch " + std::to_string(epoch));
            ad::backward(loss);
            ad::adam_step(params, adam, config.lr);
            loss_sum += loss.value()[0] * static_cast<double>(batch.size());
            for (size_t k = 0; k < batch.size(); ++k)
                correct += (s.value()[k] > 0.5) == (batch[k].same == 1);
            total += static_cast<long>(batch.size());
        }
        for (const auto& p : params)
            if (!p.value().all_finite())
                throw std::runtime_error("train_siamese: non-finite parameter after epoch " +
                                         std::to_string(epoch));
        trace.epoch_loss.push_back(loss_sum / static_cast<double>(total));
        trace.epoch_pair_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(total));
    }
    return trace;
}

double similarity(const SiameseModel& model, const Tensor& spec_i, const Tensor& spec_j) {
    if (spec_i.shape() != spec_j.shape() || spec_i.rank() != 2)
        throw std::invalid_argument("similarity: spectrogram shape mismatch");
    const int H = spec_i.dim(0), W = spec_i.dim(1);
    Tensor both({2, 1, H, W});
    std::copy_n(spec_i.data(), spec_i.numel(), both.data());
    std::copy_n(spec_j.data(), spec_j.numel(), both.data() + spec_i.numel());
    SiameseModel frozen{model.backbone.frozen(), model.head.frozen()};
    BackboneOut out = backbone_forward(frozen.backbone, ad::constant(both));
    Var fi = ad::gather_rows(out.embedding, {0});
    Var fj = ad::gather_rows(out.embedding, {1});
    return head_forward(frozen.head, combine_features(fi, fj)).value()[0];
}

Tensor embed_all(const SiameseModel& model, const Tensor& specs, int batch) {
    const int n = specs.dim(0);
    Tensor out({n, 128});
    BackboneModel frozen = model.backbone.frozen();
    for (int start = 0; start < n; start += batch) {
        std::vector<int> idx;
        for (int i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
        BackboneOut bo = backbone_forward(frozen, ad::constant(batch_from(specs, idx)));
        for (size_t k = 0; k < idx.size(); ++k)
            std::copy_n(bo.embedding.value().data() + k * 128, 128, out.data() + idx[k] * 128LL);
    }
    return out;
}

double pair_accuracy(const SiameseModel& model, const Tensor& specs, const PairSet& ps) {
    if (ps.pairs.empty()) return 0.0;
    SiameseModel frozen{model.backbone.frozen(), model.head.frozen()};
    long correct = 0;
    const int batch = 64;
    for (size_t start = 0; start < ps.pairs.size(); start += batch) {
        std::vector<Pair> chunk(ps.pairs.begin() + start,
                                ps.pairs.begin() + std::min(ps.pairs.size(), start + batch));
        Var s = batch_similarity(frozen, specs, chunk);
        for (size_t k = 0; k < chunk.size(); ++k)
            correct += (s.value()[k] > 0.5) == (chunk[k].same == 1);
    }
    return static_cast<double>(correct) / static_cast<double>(ps.pairs.size());
}

}  // namespace mg::siamese
