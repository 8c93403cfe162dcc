#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "mg/pipeline.hpp"

using namespace mg;
using namespace mg::pipe;
namespace fs = std::filesystem;

namespace {

std::string write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    os << text;
    return path;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// small but real end-to-end configuration
ExperimentConfig mini_config(const std::string& out) {
    ExperimentConfig c;
    c.source = "synthetic";
    c.clips_per_class = 8;
    c.duration_s = 2.0;
    c.siam.epochs = 2;
    c.siam.batch = 16;
    c.siam.max_pairs_per_epoch = 32;
    c.gnncfg.epochs = 30;
    c.labeled_fractions = {1.0};
    c.explain_clips = 2;
    c.seed = 4242;
    c.seed_set = true;
    c.out = out;
    return c;
}

}  // namespace

TEST_CASE("config file parsing and overrides") {
    std::string path = write_file("cfg_ok.ini",
                                  "# comment\n"
                                  "[dataset]\n"
                                  "source = synthetic-confusable\n"
                                  "clips_per_class = 12\n"
                                  "\n"
                                  "[split]\n"
                                  "labeled_fractions = 0.3,0.5,1.0\n"
                                  "test_fraction = 0.25\n"
                                  "[run]\n"
                                  "seed = 99\n"
                                  "out = some_dir\n");
    ExperimentConfig c = parse_config_file(path);
    CHECK(c.source == "synthetic-confusable");
    CHECK(c.clips_per_class == 12);
    CHECK(c.labeled_fractions == std::vector<double>{0.3, 0.5, 1.0});
    CHECK(c.test_fraction == 0.25);
    CHECK(c.seed == 99);
    CHECK(c.seed_set);
    c.validate();

    apply_override(c, "siamese.epochs", "7");
    CHECK(c.siam.epochs == 7);
    CHECK_THROWS_AS(apply_override(c, "siamese.epochs", "x"), ConfigError);
    CHECK_THROWS_AS(apply_override(c, "nosuch.key", "1"), ConfigError);
    CHECK_THROWS_AS(apply_override(c, "flat", "1"), ConfigError);
    fs::remove(path);
}

TEST_CASE("config parse errors cite the line") {
    std::string path = write_file("cfg_bad.ini", "[dataset]\nsource = synthetic\nbogus_key = 3\n");
    try {
        parse_config_file(path);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        CHECK(msg.find(":3") != std::string::npos);
        CHECK(msg.find("bogus_key") != std::string::npos);
    }
    fs::remove(path);

    path = write_file("cfg_bad2.ini", "key_without_section = 1\n");
    CHECK_THROWS_AS(parse_config_file(path), ConfigError);
    fs::remove(path);
    CHECK_THROWS_AS(parse_config_file("cfg_missing.ini"), ConfigError);
}

TEST_CASE("config validation") {
    ExperimentConfig c = mini_config("v_out");
    c.seed_set = false;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = mini_config("");
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = mini_config("v_out");
    c.labeled_fractions = {1.5};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = mini_config("v_out");
    c.test_fraction = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("pct_tag") {
    CHECK(pct_tag(0.3) == "30");
    CHECK(pct_tag(0.5) == "50");
    CHECK(pct_tag(1.0) == "100");
}

TEST_CASE("run_baseline_nn: chance level untrained, learns blobs") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g(0.0, 0.3);
    const int per = 30, d = 16;
    Tensor emb({4 * per, d});
    std::vector<int> labels;
    std::vector<std::uint8_t> train, test;
    for (int i = 0; i < 4 * per; ++i) {
        int cls = i % 4;
        labels.push_back(cls);
        bool is_test = (i / 4) % 3 == 0;
        train.push_back(!is_test);
        test.push_back(is_test);
        for (int k = 0; k < d; ++k)
            emb.at(i, k) = g(rng) + ((k % 4) == cls ? 2.0 : 0.0);
    }
    // chance-level sanity on structureless noise embeddings
    Tensor noise({4 * per, d});
    for (std::int64_t i = 0; i < noise.numel(); ++i) noise[i] = g(rng);
    BaselineResult untrained = run_baseline_nn(noise, labels, train, test, 4, 0, 3e-4, 7);
    CHECK(std::abs(untrained.accuracy - 0.25) <= 0.1 + 1e-12);

    BaselineResult trained = run_baseline_nn(emb, labels, train, test, 4, 300, 3e-3, 7);
    CHECK(trained.accuracy >= 0.9);
    CHECK(trained.epoch_loss.front() == doctest::Approx(std::log(4.0)).epsilon(0.1));
    CHECK(trained.epoch_loss.back() < trained.epoch_loss.front());
    long total = std::count(test.begin(), test.end(), 1);
    CHECK(static_cast<long>(trained.confusion.sum()) == total);

    BaselineResult again = run_baseline_nn(emb, labels, train, test, 4, 300, 3e-3, 7);
    CHECK(again.accuracy == trained.accuracy);

    std::vector<std::uint8_t> none(labels.size(), 0);
    CHECK_THROWS(run_baseline_nn(emb, labels, none, test, 4, 1, 3e-4, 7));
}

TEST_CASE("project_2d: identity on 2-d data, duplicates, degenerate") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor x({40, 2});
    double mx = 0, my = 0;
    for (int i = 0; i < 40; ++i) {
        x.at(i, 0) = 3.0 * g(rng);
        x.at(i, 1) = g(rng);
        mx += x.at(i, 0);
        my += x.at(i, 1);
    }
    for (int i = 0; i < 40; ++i) {
        x.at(i, 0) -= mx / 40;
        x.at(i, 1) -= my / 40;
    }
    Projection p = project_2d(x);
    CHECK(p.variance_ratio == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(!p.degenerate);
    // pairwise distances preserved (rotation/sign ambiguity only)
    for (int i = 0; i < 10; ++i)
        for (int j = i + 1; j < 10; ++j) {
            double orig = std::hypot(x.at(i, 0) - x.at(j, 0), x.at(i, 1) - x.at(j, 1));
            double proj = std::hypot(p.coords.at(i, 0) - p.coords.at(j, 0),
                                     p.coords.at(i, 1) - p.coords.at(j, 1));
            CHECK(proj == doctest::Approx(orig).epsilon(1e-6));
        }

    // duplicated points project identically
    Tensor dup({6, 5});
    for (int i = 0; i < 6; ++i)
        for (int k = 0; k < 5; ++k) dup.at(i, k) = (i % 3) * 1.7 + 0.2 * k;
    Projection pd = project_2d(dup);
    for (int k = 0; k < 2; ++k) {
        CHECK(pd.coords.at(0, k) == doctest::Approx(pd.coords.at(3, k)).epsilon(1e-9));
        CHECK(pd.coords.at(1, k) == doctest::Approx(pd.coords.at(4, k)).epsilon(1e-9));
    }
    CHECK(pd.variance_ratio >= 0.0);
    CHECK(pd.variance_ratio <= 1.0);

    Projection z = project_2d(Tensor::full({5, 4}, 3.3));
    CHECK(z.degenerate);
    CHECK(z.coords.sum() == 0.0);
    CHECK_THROWS(project_2d(Tensor::zeros({2, 4})));
}

TEST_CASE("mel band rows and heat mass") {
    audio::SpectrogramConfig cfg;
    std::vector<int> rows = mel_rows_in_band(cfg, 4000.0, 8000.0);
    REQUIRE(!rows.empty());
    for (size_t k = 1; k < rows.size(); ++k) CHECK(rows[k] == rows[k - 1] + 1);
    CHECK(rows.front() > cfg.n_mels / 2);  // mel scale pushes 4 kHz into the upper half

    Tensor heat = Tensor::zeros({cfg.n_mels, 10});
    for (int r : rows)
        for (int c = 0; c < 10; ++c) heat.at(r, c) = 1.0;
    CHECK(band_mass_fraction(heat, rows) == doctest::Approx(1.0));
    Tensor uniform = Tensor::full({cfg.n_mels, 10}, 0.5);
    CHECK(band_mass_fraction(uniform, rows) ==
          doctest::Approx(static_cast<double>(rows.size()) / cfg.n_mels));
    CHECK(band_mass_fraction(Tensor::zeros({cfg.n_mels, 10}), rows) == 0.0);
}

TEST_CASE("mini end-to-end pipeline: stages, artifacts, determinism, errors") {
    fs::remove_all("pipe_a");
    fs::remove_all("pipe_b");
    ExperimentConfig a = mini_config("pipe_a");

    // evaluate before anything: names the missing artifact and its producer
    fs::create_directories("pipe_a");
    try {
        run_stage(a, "evaluate");
        FAIL("expected PipelineError");
    } catch (const PipelineError& e) {
        std::string msg = e.what();
        CHECK(msg.find("dataset.csv") != std::string::npos);
        CHECK(msg.find("prepare") != std::string::npos);
    }

    run_stage(a, "all");
    for (const char* f : {"specs.mgtf", "dataset.csv", "split_100.csv", "manifest_100.csv",
                          "siamese_trace_100.csv", "embeddings_100.mgtf", "projection_100.csv",
                          "gnn_trace_100.csv", "metrics.json", "metrics.txt", "confusion_100.csv",
                          "confusion_100.pgm", "timings.json"})
        CHECK(fs::exists(std::string("pipe_a/") + f));
    CHECK(fs::exists("pipe_a/siamese_100/manifest.json"));
    CHECK(fs::exists("pipe_a/gnn_100/manifest.json"));
    CHECK(!fs::exists("pipe_a/.lock"));  // released
    int n_explained = 0;
    for (auto& entry : fs::directory_iterator("pipe_a/explain_100"))
        n_explained += entry.path().extension() == ".csv";
    CHECK(n_explained == 2);

    // second identical run: byte-identical metrics JSON
    ExperimentConfig b = mini_config("pipe_b");
    run_stage(b, "all");
    CHECK(slurp("pipe_a/metrics.json") == slurp("pipe_b/metrics.json"));
    CHECK(slurp("pipe_a/metrics.json").find("gnn_accuracy") != std::string::npos);

    // in-process report mirrors the JSON and satisfies the cross-checks
    MetricsReport rep = evaluate(a);
    REQUIRE(rep.rows.size() == 1);
    const FractionMetrics& row = rep.rows[0];
    CHECK(row.labeled_fraction == 1.0);
    CHECK(row.gnn_accuracy >= 0.0);
    CHECK(row.gnn_accuracy <= 1.0);
    long diag = 0, tot = 0;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            tot += static_cast<long>(row.confusion.at(i, j));
            if (i == j) diag += static_cast<long>(row.confusion.at(i, j));
        }
    CHECK(row.gnn_accuracy == doctest::Approx(static_cast<double>(diag) / tot));

    // lock file blocks a second concurrent run
    write_file("pipe_a/.lock", "locked\n");
    CHECK_THROWS_AS(run_stage(a, "prepare"), PipelineError);
    fs::remove("pipe_a/.lock");

    // stage isolation: rerunning prepare alone reproduces identical upstream artifacts
    std::string specs_before = slurp("pipe_a/specs.mgtf");
    run_stage(a, "prepare");
    CHECK(slurp("pipe_a/specs.mgtf") == specs_before);

    fs::remove_all("pipe_a");
    fs::remove_all("pipe_b");
}
