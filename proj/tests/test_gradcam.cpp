#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mg/gradcam.hpp"

using namespace mg;
using namespace mg::cam;

namespace {

Tensor randt(std::vector<int> shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = u(rng);
    return t;
}

struct Micro {
    siamese::SiameseModel siam;
    gnn::GnnModel model;
    gnn::EmbeddingGraph graph;
    Tensor spec;
};

// 4-node graph over 128-d embeddings of tiny 16x16 spectrograms
Micro micro_fixture() {
    Micro m{siamese::SiameseModel::init(5), gnn::GnnModel::init(6, 3, {128, 6, 4}), {}, {}};
    Tensor specs = randt({4, 16, 16}, 7, 0.0, 1.0);
    m.graph.features = siamese::embed_all(m.siam, specs);
    m.graph.labels = {0, 1, 2, 0};
    m.graph.train_mask = {1, 1, 1, 0};
    m.graph.test_mask = {0, 0, 0, 1};
    m.spec = Tensor({16, 16});
    for (std::int64_t i = 0; i < 256; ++i) m.spec[i] = specs[3 * 256 + i];
    return m;
}

}  // namespace

TEST_CASE("class_score_gradients: shape contract and finiteness") {
    Micro m = micro_fixture();
    Tensor maps;
    Tensor g = class_score_gradients(m.siam, m.model, m.graph, m.spec, 3, 1, &maps);
    REQUIRE(g.shape() == std::vector<int>{128, 4, 2});
    CHECK(maps.shape() == g.shape());
    CHECK(g.all_finite());

    CHECK_THROWS(class_score_gradients(m.siam, m.model, m.graph, m.spec, 9, 1));
    CHECK_THROWS(class_score_gradients(m.siam, m.model, m.graph, m.spec, 3, 5));
}

TEST_CASE("zeroed classifier row kills the gradient") {
    Micro m = micro_fixture();
    Tensor w = m.model.cls_w.value();
    for (int k = 0; k < w.dim(1); ++k) w.at(2, k) = 0.0;
    m.model.cls_w = ad::param(w);
    Tensor b = m.model.cls_b.value();
    b[2] = 0.0;
    m.model.cls_b = ad::param(b);
    Tensor g = class_score_gradients(m.siam, m.model, m.graph, m.spec, 3, 2);
    for (std::int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("gradients match finite differences on the 4-node micro-graph") {
    Micro m = micro_fixture();
    const int clip = 3, cls = 0;
    Tensor maps;
    Tensor g = class_score_gradients(m.siam, m.model, m.graph, m.spec, clip, cls, &maps);

    gnn::GnnModel frozen = m.model.frozen();
    auto score = [&](const ad::Var& a) {
        ad::Var emb = siamese::backbone_tail(ad::reshape(a, {1, 128, 4, 2}));
        ad::Var feats = ad::replace_row(m.graph.features, clip, ad::reshape(emb, {128}));
        gnn::GnnOut out = gnn::gnn_forward(frozen, feats);
        return ad::element(out.logits, static_cast<std::int64_t>(clip) * 3 + cls);
    };
    // FD point jittered off the relu zeros / pooling ties the raw maps sit on
    Tensor fd_point = maps.reshaped({1, 128, 4, 2});
    std::mt19937_64 jrng(99);
    std::uniform_real_distribution<double> jit(0.01, 0.05);
    for (std::int64_t i = 0; i < fd_point.numel(); ++i) fd_point[i] += jit(jrng);
    double err = ad::check_gradient(score, fd_point);
    CHECK(err <= 1e-4);

    ad::Var leaf = ad::param(maps.reshaped({1, 128, 4, 2}));
    ad::backward(score(leaf));
    for (std::int64_t i = 0; i < g.numel(); ++i)
        CHECK(leaf.grad()[i] == doctest::Approx(g[i]).epsilon(1e-12));
}

TEST_CASE("cam_weights oracles") {
    // all negative -> zero vector
    Tensor neg = Tensor::full({3, 2, 2}, -1.5);
    Tensor w = cam_weights(neg);
    for (int k = 0; k < 3; ++k) CHECK(w[k] == 0.0);

    // all +1 -> every weight 1 (uniform alpha sums to 1)
    Tensor ones = Tensor::full({3, 2, 2}, 1.0);
    w = cam_weights(ones);
    for (int k = 0; k < 3; ++k) CHECK(w[k] == 1.0);

    // single positive entry g -> g / (h*w) for that channel
    Tensor single = Tensor::full({2, 2, 3}, -0.1);
    single.at(1, 0, 2) = 0.42;
    w = cam_weights(single);
    CHECK(w[0] == 0.0);
    CHECK(w[1] == doctest::Approx(0.42 / 6.0));

    // scale covariance: lambda * grads -> lambda * weights
    Tensor g = randt({4, 3, 3}, 2);
    Tensor w1 = cam_weights(g);
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= 2.5;
    Tensor w2 = cam_weights(g);
    for (int k = 0; k < 4; ++k) CHECK(w2[k] == doctest::Approx(2.5 * w1[k]).epsilon(1e-12));

    CHECK_THROWS(cam_weights(Tensor::zeros({3, 3})));
}

TEST_CASE("heatmap: zero weights, one-hot selection, non-negativity") {
    Tensor maps = randt({3, 4, 5}, 9);
    Heatmap zero = heatmap(Tensor::zeros({3}), maps, 8, 10);
    CHECK(zero.raw.sum() == 0.0);
    CHECK(zero.values.sum() == 0.0);

    // one-hot weight on a non-negative map reproduces that map pre-upsample
    Tensor pos = randt({3, 4, 5}, 10, 0.0, 1.0);
    Tensor onehot({3}, {0.0, 1.0, 0.0});
    Heatmap sel = heatmap(onehot, pos, 4, 5);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) CHECK(sel.raw.at(i, j) == doctest::Approx(pos.at(1, i, j)));

    Heatmap any = heatmap(randt({3}, 3), maps, 16, 20);
    for (std::int64_t i = 0; i < any.values.numel(); ++i) CHECK(any.values[i] >= 0.0);

    CHECK_THROWS(heatmap(Tensor::zeros({2}), maps, 8, 10));
}

TEST_CASE("upsampling preserves total mass within 2%") {
    for (std::uint64_t seed : {1, 2, 3, 4}) {
        Tensor maps = randt({2, 8, 13}, seed, 0.0, 1.0);
        Tensor w = randt({2}, seed + 50, 0.1, 1.0);
        Heatmap hm = heatmap(w, maps, 128, 216);
        REQUIRE(hm.raw.sum() > 0);
        CHECK(std::abs(hm.values.sum() - hm.raw.sum()) / hm.raw.sum() <= 0.02);
    }
}

TEST_CASE("normalization variants") {
    Tensor h = randt({4, 6}, 12, 0.0, 2.0);
    Tensor mx = max_normalized(h);
    CHECK(mx.max() == doctest::Approx(1.0));
    Tensor ms = mass_normalized(h);
    CHECK(ms.sum() == doctest::Approx(1.0));
    Tensor z = Tensor::zeros({4, 6});
    CHECK(max_normalized(z).sum() == 0.0);
    CHECK(mass_normalized(z).sum() == 0.0);
}

TEST_CASE("overlay thresholds") {
    Tensor spec = randt({6, 8}, 20, 0.1, 1.0);
    Heatmap hm;
    hm.raw = randt({3, 4}, 21, 0.0, 1.0);
    hm.values = randt({6, 8}, 22, 0.0, 1.0);

    Tensor full = overlay(hm, spec, 0.0);
    CHECK(full.vec() == spec.vec());

    Tensor top = overlay(hm, spec, 1.0);
    int kept = 0;
    for (std::int64_t i = 0; i < top.numel(); ++i) kept += top[i] != 0.0;
    CHECK(kept == 1);  // only the max-heat pixel survives

    Heatmap uniform;
    uniform.values = Tensor::full({6, 8}, 0.37);
    Tensor all = overlay(uniform, spec, 0.5);
    CHECK(all.vec() == spec.vec());

    CHECK_THROWS(overlay(hm, randt({5, 8}, 1), 0.5));
    CHECK_THROWS(overlay(hm, spec, 1.5));
    CHECK_THROWS(overlay(hm, spec, -0.1));
}

TEST_CASE("write_explanation emits the image/CSV set") {
    namespace fs = std::filesystem;
    Tensor spec = randt({16, 20}, 30, 0.0, 1.0);
    Heatmap hm;
    hm.raw = randt({2, 3}, 31, 0.0, 1.0);
    hm.values = randt({16, 20}, 32, 0.0, 1.0);
    fs::create_directories("cam_out");
    write_explanation("cam_out/clip0_class1_conv4", spec, hm);
    for (const char* suffix : {"_spec.pgm", "_heat.pgm", "_overlay.ppm", "_heat.csv"})
        CHECK(fs::exists(std::string("cam_out/clip0_class1_conv4") + suffix));
    std::ifstream is("cam_out/clip0_class1_conv4_heat.csv");
    std::string line;
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 16);
    fs::remove_all("cam_out");
}
