#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "mg/datagen.hpp"

using namespace mg;
using namespace mg::data;

TEST_CASE("harmonic stack concentrates energy below 1 kHz") {
    GenreSpec spec{.name = "h", .kind = GeneratorKind::HarmonicStack, .f_lo = 110, .f_hi = 220};
    for (std::uint64_t seed : {1, 2, 3}) {
        auto clip = synth_clip(spec, 5.0, seed);
        CHECK(band_energy_fraction(clip, 0, 1000) >= 0.8);
    }
}

TEST_CASE("band noise stays in its band") {
    GenreSpec spec{.name = "n", .kind = GeneratorKind::BandNoise, .f_lo = 4000, .f_hi = 8000};
    for (std::uint64_t seed : {1, 2, 3}) {
        auto clip = synth_clip(spec, 5.0, seed);
        CHECK(band_energy_fraction(clip, 4000, 8000) >= 0.8);
    }
}

TEST_CASE("same (spec, seed) is bit-identical; different seeds differ") {
    GenreSpec spec = default_synthetic_specs()[0];
    auto a = synth_clip(spec, 5.0, 99);
    auto b = synth_clip(spec, 5.0, 99);
    REQUIRE(a.samples.size() == b.samples.size());
    CHECK(a.samples == b.samples);
    auto c = synth_clip(spec, 5.0, 100);
    CHECK(a.samples != c.samples);
}

TEST_CASE("clips are peak-bounded and finite") {
    for (const auto& spec : default_synthetic_specs()) {
        auto clip = synth_clip(spec, 5.0, 7);
        double peak = 0;
        for (double v : clip.samples) {
            REQUIRE(std::isfinite(v));
            peak = std::max(peak, std::abs(v));
        }
        CHECK(peak <= 0.9 + 1e-12);
        CHECK(peak > 0.1);
    }
}

TEST_CASE("invalid spec rejected") {
    GenreSpec bad{.name = "bad", .kind = GeneratorKind::BandNoise, .f_lo = 9000, .f_hi = 20000};
    CHECK_THROWS(synth_clip(bad, 5.0, 1));
    GenreSpec neg{.name = "neg", .kind = GeneratorKind::PulseTrain, .pulse_rate_hz = -1};
    CHECK_THROWS(synth_clip(neg, 5.0, 1));
    CHECK_THROWS(synth_clip(default_synthetic_specs()[0], 0.5, 1));
}

TEST_CASE("generate_dataset: counts and uniform class distribution") {
    auto ds = generate_dataset(default_synthetic_specs(), 10, 2.0, 42);
    CHECK(ds.size() == 40);
    std::map<int, int> counts;
    for (int l : ds.labels) counts[l]++;
    REQUIRE(counts.size() == 4);
    for (auto& [c, n] : counts) CHECK(n == 10);

    auto ds2 = generate_dataset(default_synthetic_specs(), 10, 2.0, 43);
    CHECK(ds.clips[0].samples != ds2.clips[0].samples);
}

TEST_CASE("generate_dataset preconditions") {
    CHECK_THROWS(generate_dataset({default_synthetic_specs()[0]}, 10, 2.0, 1));
    CHECK_THROWS(generate_dataset(default_synthetic_specs(), 1, 2.0, 1));
}

TEST_CASE("split arithmetic on 200 balanced clips") {
    auto specs = default_synthetic_specs();
    LabeledDataset ds;
    ds.class_names = {"a", "b", "c", "d"};
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 50; ++i) {
            ds.clips.push_back({});
            ds.labels.push_back(c);
            ds.source_ids.push_back(static_cast<int>(ds.labels.size()) - 1);
        }
    (void)specs;

    auto m = split_dataset(ds, 0.3, 0.5, 7);
    int n_test = std::count(m.test_mask.begin(), m.test_mask.end(), 1);
    int n_lab = std::count(m.train_mask.begin(), m.train_mask.end(), 1);
    int n_unl = std::count(m.unlabeled_mask.begin(), m.unlabeled_mask.end(), 1);
    CHECK(n_test == 60);
    CHECK(n_lab == 70);
    CHECK(n_unl == 70);

    auto full = split_dataset(ds, 0.3, 1.0, 7);
    CHECK(std::count(full.unlabeled_mask.begin(), full.unlabeled_mask.end(), 1) == 0);
    CHECK(std::count(full.train_mask.begin(), full.train_mask.end(), 1) == 140);

    // masks partition the nodes
    for (size_t i = 0; i < ds.size(); ++i)
        CHECK(m.test_mask[i] + m.train_mask[i] + m.unlabeled_mask[i] == 1);

    // per-class test counts equal on balanced data
    std::map<int, int> per_class;
    for (size_t i = 0; i < ds.size(); ++i)
        if (m.test_mask[i]) per_class[ds.labels[i]]++;
    for (auto& [c, n] : per_class) CHECK(n == 15);
}

TEST_CASE("split determinism and seed sensitivity") {
    auto ds = generate_dataset(default_synthetic_specs(), 5, 2.0, 1);
    auto a = split_dataset(ds, 0.3, 0.5, 11);
    auto b = split_dataset(ds, 0.3, 0.5, 11);
    CHECK(a.test_mask == b.test_mask);
    CHECK(a.train_mask == b.train_mask);
    auto c = split_dataset(ds, 0.3, 0.5, 12);
    CHECK(a.test_mask != c.test_mask);
}

TEST_CASE("split errors") {
    auto ds = generate_dataset(default_synthetic_specs(), 4, 2.0, 1);
    CHECK_THROWS(split_dataset(ds, 0.0, 1.0, 1));
    CHECK_THROWS(split_dataset(ds, 0.3, 0.0, 1));
    LabeledDataset tiny;
    tiny.class_names = {"a", "b"};
    tiny.clips.resize(3);
    tiny.labels = {0, 0, 1};  // class 1 has a single source
    tiny.source_ids = {0, 1, 2};
    CHECK_THROWS(split_dataset(tiny, 0.3, 1.0, 1));
}

TEST_CASE("segments of one source never straddle the test boundary") {
    LabeledDataset ds;
    ds.class_names = {"a", "b"};
    int node = 0;
    for (int c = 0; c < 2; ++c)
        for (int src = 0; src < 10; ++src)
            for (int seg = 0; seg < 6; ++seg) {
                ds.clips.push_back({});
                ds.labels.push_back(c);
                ds.source_ids.push_back(c * 10 + src);
                ++node;
            }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto m = split_dataset(ds, 0.3, 0.5, seed);
        std::map<int, std::set<int>> sides;
        for (size_t i = 0; i < ds.size(); ++i)
            sides[ds.source_ids[i]].insert(m.test_mask[i] ? 1 : 0);
        for (auto& [src, st] : sides) CHECK(st.size() == 1);
    }
}

TEST_CASE("gtzan layout loader") {
    namespace fs = std::filesystem;
    std::string root = "./gtzan_fixture";
    fs::remove_all(root);
    for (const char* genre : {"blues", "rock"}) {
        fs::create_directories(fs::path(root) / genre);
        for (int i = 0; i < 3; ++i) {
            auto clip = synth_clip(default_synthetic_specs()[0], 12.0, 1000 + i);
            audio::save_wav(clip, (fs::path(root) / genre / (std::to_string(i) + ".wav")).string());
        }
    }
    auto ds = load_gtzan_layout(root, 5.0);
    // 12 s clips at 5 s segments -> 2 segments each, 2 genres x 3 clips
    CHECK(ds.size() == 12);
    CHECK(ds.class_names == std::vector<std::string>{"blues", "rock"});
    CHECK(ds.num_warnings == 0);

    // corrupt one file: still loads, counts a warning
    {
        std::ofstream bad(fs::path(root) / "rock" / "zz_bad.wav");
        bad << "not a wav";
    }
    auto ds2 = load_gtzan_layout(root, 5.0);
    CHECK(ds2.size() == 12);
    CHECK(ds2.num_warnings == 1);

    CHECK_THROWS(load_gtzan_layout("./missing_dir"));
    fs::create_directories("./empty_root");
    CHECK_THROWS(load_gtzan_layout("./empty_root"));
    fs::remove_all(root);
    fs::remove_all("./empty_root");
}

TEST_CASE("centroid classifier separates the default synthetic suite") {
    // mean mel-band energy centroids must already separate the classes,
    // otherwise the deep pipeline targets are unattainable
    auto ds = generate_dataset(default_synthetic_specs(), 12, 5.0, 42);
    audio::SpectrogramConfig cfg;
    std::vector<std::vector<double>> feats;
    for (const auto& clip : ds.clips) {
        auto spec = audio::mel_spectrogram(clip, cfg);
        std::vector<double> f(cfg.n_mels, 0.0);
        for (int m = 0; m < cfg.n_mels; ++m) {
            for (int t = 0; t < spec.n_frames(); ++t) f[m] += spec.values.at(m, t);
            f[m] /= spec.n_frames();
        }
        feats.push_back(std::move(f));
    }
    auto masks = split_dataset(ds, 0.3, 1.0, 7);
    std::vector<std::vector<double>> centroid(4, std::vector<double>(cfg.n_mels, 0.0));
    std::vector<int> counts(4, 0);
    for (size_t i = 0; i < ds.size(); ++i)
        if (masks.train_mask[i]) {
            for (int m = 0; m < cfg.n_mels; ++m) centroid[ds.labels[i]][m] += feats[i][m];
            counts[ds.labels[i]]++;
        }
    for (int c = 0; c < 4; ++c)
        for (int m = 0; m < cfg.n_mels; ++m) centroid[c][m] /= counts[c];
    int correct = 0, total = 0;
    for (size_t i = 0; i < ds.size(); ++i) {
        if (!masks.test_mask[i]) continue;
        int best = 0;
        double best_d = 1e300;
        for (int c = 0; c < 4; ++c) {
            double d = 0;
            for (int m = 0; m < cfg.n_mels; ++m)
                d += (feats[i][m] - centroid[c][m]) * (feats[i][m] - centroid[c][m]);
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        correct += (best == ds.labels[i]);
        ++total;
    }
    CHECK(static_cast<double>(correct) / total >= 0.9);
}
