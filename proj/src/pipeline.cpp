#include "mg/pipeline.hpp"

#include <cblas.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mg::pipe {

using data::derive_seed;

int ExperimentConfig::target_frames() const {
    if (frames > 0) return frames;
    auto samples = static_cast<std::int64_t>(duration_s * spec.sample_rate);
    return audio::num_frames(samples, spec.n_fft, spec.hop);
}

void ExperimentConfig::validate() const {
    if (!seed_set) throw ConfigError("config: seed is mandatory (set [run] seed or pass --seed)");
    if (out.empty()) throw ConfigError("config: output dir is mandatory ([run] out or --out)");
    if (source.empty()) throw ConfigError("config: [dataset] source must not be empty");
    if (duration_s < 1.0) throw ConfigError("config: [dataset] duration_s must be >= 1");
    if (clips_per_class < 2) throw ConfigError("config: [dataset] clips_per_class must be >= 2");
    if (test_fraction <= 0.0 || test_fraction >= 1.0)
        throw ConfigError("config: [split] test_fraction must lie in (0,1)");
    if (labeled_fractions.empty())
        throw ConfigError("config: [split] labeled_fractions must not be empty");
    for (double f : labeled_fractions)
        if (f <= 0.0 || f > 1.0)
            throw ConfigError("config: [split] labeled fraction " + std::to_string(f) +
                              " outside (0,1]");
    if (explain_threshold < 0.0 || explain_threshold > 1.0)
        throw ConfigError("config: [explain] threshold must lie in [0,1]");
    if (siam.epochs < 1 || gnncfg.epochs < 1)
        throw ConfigError("config: epochs must be >= 1");
}

std::string pct_tag(double fraction) {
    return std::to_string(static_cast<int>(std::lround(fraction * 100.0)));
}

// ----------------------------------------------------------------- config IO

namespace {

void set_config_key(ExperimentConfig& c, const std::string& section, const std::string& key,
                    const std::string& value, const std::string& where) {
    auto bad = [&](const std::string& why) {
        throw ConfigError("config " + where + ": " + why + " for key [" + section + "] " + key +
                          " = '" + value + "'");
    };
    auto as_double = [&] {
        try {
            size_t pos = 0;
            double v = std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            bad("expected a number");
            return 0.0;
        }
    };
    auto as_int = [&] {
        double v = as_double();
        if (v != std::floor(v)) bad("expected an integer");
        return static_cast<int>(v);
    };

    const std::string full = section + "." + key;
    if (full == "dataset.source") c.source = value;
    else if (full == "dataset.clips_per_class") c.clips_per_class = as_int();
    else if (full == "dataset.duration_s") c.duration_s = as_double();
    else if (full == "spectrogram.sample_rate") c.spec.sample_rate = as_int();
    else if (full == "spectrogram.n_fft") c.spec.n_fft = as_int();
    else if (full == "spectrogram.hop") c.spec.hop = as_int();
    else if (full == "spectrogram.n_mels") c.spec.n_mels = as_int();
    else if (full == "spectrogram.f_min") c.spec.f_min = as_double();
    else if (full == "spectrogram.f_max") c.spec.f_max = as_double();
    else if (full == "spectrogram.frames") c.frames = as_int();
    else if (full == "siamese.epochs") c.siam.epochs = as_int();
    else if (full == "siamese.batch") c.siam.batch = as_int();
    else if (full == "siamese.lr") c.siam.lr = as_double();
    else if (full == "siamese.max_pairs_per_epoch") c.siam.max_pairs_per_epoch = as_int();
    else if (full == "gnn.epochs") c.gnncfg.epochs = as_int();
    else if (full == "gnn.lr") c.gnncfg.lr = as_double();
    else if (full == "gnn.max_nodes") c.gnncfg.max_nodes = as_int();
    else if (full == "split.test_fraction") c.test_fraction = as_double();
    else if (full == "split.labeled_fractions") {
        c.labeled_fractions.clear();
        std::istringstream ss(value);
        std::string part;
        while (std::getline(ss, part, ',')) {
            try {
                c.labeled_fractions.push_back(std::stod(part));
            } catch (...) {
                bad("expected comma-separated numbers");
            }
        }
        if (c.labeled_fractions.empty()) bad("expected comma-separated numbers");
    } else if (full == "explain.clips") c.explain_clips = as_int();
    else if (full == "explain.threshold") c.explain_threshold = as_double();
    else if (full == "run.seed") {
        try {
            c.seed = std::stoull(value);
            c.seed_set = true;
        } catch (...) {
            bad("expected an unsigned integer seed");
        }
    } else if (full == "run.out") c.out = value;
    else bad("unknown key");
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    ExperimentConfig c;
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::string where = path + ":" + std::to_string(lineno);
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError("config " + where + ": unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config " + where + ": expected 'key = value', got '" + t + "'");
        if (section.empty())
            throw ConfigError("config " + where + ": key outside any [section]");
        set_config_key(c, section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)), where);
    }
    return c;
}

void apply_override(ExperimentConfig& config, const std::string& key, const std::string& value) {
    size_t dot = key.find('.');
    if (dot == std::string::npos)
        throw ConfigError("override key must be 'section.key', got '" + key + "'");
    set_config_key(config, key.substr(0, dot), key.substr(dot + 1), value, "(override)");
}

// ------------------------------------------------------------------ helpers

namespace {

struct DatasetInfo {
    std::vector<int> labels, source_ids;
    std::vector<std::string> class_names;
};

std::string specs_path(const ExperimentConfig& c) { return c.out + "/specs.mgtf"; }
std::string dataset_path(const ExperimentConfig& c) { return c.out + "/dataset.csv"; }
std::string split_path(const ExperimentConfig& c, double f) {
    return c.out + "/split_" + pct_tag(f) + ".csv";
}
std::string siamese_dir(const ExperimentConfig& c, double f) {
    return c.out + "/siamese_" + pct_tag(f);
}
std::string embeddings_path(const ExperimentConfig& c, double f) {
    return c.out + "/embeddings_" + pct_tag(f) + ".mgtf";
}
std::string gnn_dir(const ExperimentConfig& c, double f) { return c.out + "/gnn_" + pct_tag(f); }

void require_artifact(const std::string& path, const std::string& producer) {
    if (!fs::exists(path))
        throw PipelineError("missing artifact " + path + "; run the `" + producer +
                            "` stage first");
}

class OutputLock {
public:
    explicit OutputLock(const std::string& out) : path_(out + "/.lock") {
        fs::create_directories(out);
        if (fs::exists(path_))
            throw PipelineError("output dir is locked by another run (" + path_ +
                                " exists; delete it if that run is dead)");
        std::ofstream(path_) << "locked\n";
    }
    ~OutputLock() { fs::remove(path_); }

private:
    std::string path_;
};

void record_timing(const ExperimentConfig& c, const std::string& stage, double seconds) {
    const std::string path = c.out + "/timings.json";
    json j = json::object();
    if (fs::exists(path)) {
        std::ifstream is(path);
        try {
            is >> j;
        } catch (...) {
            j = json::object();
        }
    }
    j[stage] = seconds;
    std::ofstream os(path);
    os << j.dump(2) << "\n";
}

void save_dataset_csv(const data::LabeledDataset& ds, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw PipelineError("cannot write " + path);
    os << "id,label,class_name,source_id\n";
    for (size_t i = 0; i < ds.size(); ++i)
        os << i << "," << ds.labels[i] << "," << ds.class_names[ds.labels[i]] << ","
           << ds.source_ids[i] << "\n";
}

DatasetInfo load_dataset_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw PipelineError("cannot read " + path);
    DatasetInfo info;
    std::string line;
    std::getline(is, line);  // header
    std::map<int, std::string> names;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string id, label, name, source;
        std::getline(ss, id, ',');
        std::getline(ss, label, ',');
        std::getline(ss, name, ',');
        std::getline(ss, source, ',');
        info.labels.push_back(std::stoi(label));
        info.source_ids.push_back(std::stoi(source));
        names[info.labels.back()] = name;
    }
    for (auto& [idx, name] : names) {
        if (idx != static_cast<int>(info.class_names.size()))
            throw PipelineError("dataset.csv: class indices not dense in " + path);
        info.class_names.push_back(name);
    }
    return info;
}

void save_split_csv(const data::SplitMasks& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw PipelineError("cannot write " + path);
    os << "id,role\n";
    for (size_t i = 0; i < m.test_mask.size(); ++i)
        os << i << ","
           << (m.test_mask[i] ? "test" : (m.train_mask[i] ? "labeled" : "unlabeled")) << "\n";
}

data::SplitMasks load_split_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw PipelineError("cannot read " + path);
    data::SplitMasks m;
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::string role = line.substr(line.find(',') + 1);
        m.test_mask.push_back(role == "test");
        m.train_mask.push_back(role == "labeled");
        m.unlabeled_mask.push_back(role == "unlabeled");
    }
    return m;
}

// graph masks: train = labeled nodes, test = every other transduction node
gnn::EmbeddingGraph build_graph(const Tensor& embeddings, const DatasetInfo& info,
                                const data::SplitMasks& masks) {
    gnn::EmbeddingGraph g;
    g.features = embeddings;
    g.labels = info.labels;
    for (size_t i = 0; i < masks.train_mask.size(); ++i) {
        g.train_mask.push_back(masks.train_mask[i]);
        g.test_mask.push_back(!masks.train_mask[i]);
    }
    return g;
}

data::LabeledDataset make_dataset(const ExperimentConfig& c) {
    if (c.source == "synthetic")
        return data::generate_dataset(data::default_synthetic_specs(), c.clips_per_class,
                                      c.duration_s, derive_seed(c.seed, "dataset"),
                                      c.spec.sample_rate);
    if (c.source == "synthetic-confusable")
        return data::generate_dataset(data::confusable_synthetic_specs(), c.clips_per_class,
                                      c.duration_s, derive_seed(c.seed, "dataset"),
                                      c.spec.sample_rate);
    return data::load_gtzan_layout(c.source, c.duration_s);
}

// ------------------------------------------------------------------- stages

void stage_prepare(const ExperimentConfig& c) {
    data::LabeledDataset ds = make_dataset(c);
    const int frames = c.target_frames();
    Tensor specs({static_cast<int>(ds.size()), c.spec.n_mels, frames});
    const std::int64_t plane = static_cast<std::int64_t>(c.spec.n_mels) * frames;
    for (size_t i = 0; i < ds.size(); ++i) {
        audio::MelSpectrogram mel =
            audio::fixed_size_crop(audio::mel_spectrogram(ds.clips[i], c.spec), frames);
        std::copy_n(mel.values.data(), plane, specs.data() + static_cast<std::int64_t>(i) * plane);
    }
    save_tensor(specs, specs_path(c));
    save_dataset_csv(ds, dataset_path(c));
    for (double f : c.labeled_fractions) {
        data::SplitMasks m = data::split_dataset(ds, c.test_fraction, f, derive_seed(c.seed, "split"));
        save_split_csv(m, split_path(c, f));
        data::save_manifest_csv(ds, m, c.out + "/manifest_" + pct_tag(f) + ".csv");
    }
}

void stage_train_siamese(const ExperimentConfig& c) {
    require_artifact(specs_path(c), "prepare");
    require_artifact(dataset_path(c), "prepare");
    Tensor specs = load_tensor(specs_path(c));
    DatasetInfo info = load_dataset_csv(dataset_path(c));
    for (double f : c.labeled_fractions) {
        require_artifact(split_path(c, f), "prepare");
        data::SplitMasks masks = load_split_csv(split_path(c, f));
        siamese::SiameseConfig sc = c.siam;
        sc.seed = derive_seed(derive_seed(c.seed, "siamese"), std::stoull(pct_tag(f)));
        siamese::SiameseModel model = siamese::SiameseModel::init(sc.seed);
        siamese::SiameseTrace trace =
            siamese::train_siamese(model, specs, info.labels, masks.train_mask, sc);
        fs::create_directories(siamese_dir(c, f));
        model.save(siamese_dir(c, f));
        std::ofstream os(c.out + "/siamese_trace_" + pct_tag(f) + ".csv");
        os << "epoch,loss,pair_accuracy\n";
        os.precision(17);
        for (size_t e = 0; e < trace.epoch_loss.size(); ++e)
            os << e << "," << trace.epoch_loss[e] << "," << trace.epoch_pair_accuracy[e] << "\n";
    }
}

void stage_embed(const ExperimentConfig& c) {
    require_artifact(specs_path(c), "prepare");
    Tensor specs = load_tensor(specs_path(c));
    DatasetInfo info = load_dataset_csv(dataset_path(c));
    for (double f : c.labeled_fractions) {
        require_artifact(siamese_dir(c, f) + "/manifest.json", "train-siamese");
        siamese::SiameseModel model = siamese::SiameseModel::load(siamese_dir(c, f));
        Tensor emb = siamese::embed_all(model, specs);
        save_tensor(emb, embeddings_path(c, f));

        Projection proj = project_2d(emb);
        std::ofstream os(c.out + "/projection_" + pct_tag(f) + ".csv");
        os << "# variance_ratio=" << proj.variance_ratio << "\n";
        os << "id,x,y,label\n";
        os.precision(17);
        for (int i = 0; i < emb.dim(0); ++i)
            os << i << "," << proj.coords.at(i, 0) << "," << proj.coords.at(i, 1) << ","
               << info.labels[i] << "\n";
    }
}

void stage_train_gnn(const ExperimentConfig& c) {
    DatasetInfo info = load_dataset_csv(dataset_path(c));
    const int n_classes = static_cast<int>(info.class_names.size());
    for (double f : c.labeled_fractions) {
        require_artifact(embeddings_path(c, f), "embed");
        require_artifact(split_path(c, f), "prepare");
        Tensor emb = load_tensor(embeddings_path(c, f));
        gnn::EmbeddingGraph graph = build_graph(emb, info, load_split_csv(split_path(c, f)));
        gnn::GnnConfig gc = c.gnncfg;
        gc.seed = derive_seed(derive_seed(c.seed, "gnn"), std::stoull(pct_tag(f)));
        gnn::GnnTrace trace;
        gnn::GnnModel model = gnn::train_gnn(graph, n_classes, gc, &trace);
        fs::create_directories(gnn_dir(c, f));
        model.save(gnn_dir(c, f));
        std::ofstream os(c.out + "/gnn_trace_" + pct_tag(f) + ".csv");
        os << "epoch,loss,train_accuracy\n";
        os.precision(17);
        for (size_t e = 0; e < trace.epoch_loss.size(); ++e)
            os << e << "," << trace.epoch_loss[e] << "," << trace.epoch_accuracy[e] << "\n";
    }
}

double final_value(const std::string& trace_csv, int column) {
    std::ifstream is(trace_csv);
    if (!is) throw PipelineError("cannot read " + trace_csv);
    std::string line, last;
    std::getline(is, line);
    while (std::getline(is, line))
        if (!line.empty()) last = line;
    std::istringstream ss(last);
    std::string cell;
    for (int k = 0; k <= column; ++k) std::getline(ss, cell, ',');
    return std::stod(cell);
}

}  // namespace

MetricsReport evaluate(const ExperimentConfig& c) {
    require_artifact(dataset_path(c), "prepare");
    require_artifact(specs_path(c), "prepare");
    DatasetInfo info = load_dataset_csv(dataset_path(c));
    Tensor specs = load_tensor(specs_path(c));
    const int n_classes = static_cast<int>(info.class_names.size());
    MetricsReport report;

    for (double f : c.labeled_fractions) {
        require_artifact(gnn_dir(c, f) + "/manifest.json", "train-gnn");
        require_artifact(embeddings_path(c, f), "embed");
        require_artifact(siamese_dir(c, f) + "/manifest.json", "train-siamese");
        data::SplitMasks masks = load_split_csv(split_path(c, f));
        Tensor emb = load_tensor(embeddings_path(c, f));
        gnn::EmbeddingGraph graph = build_graph(emb, info, masks);
        gnn::GnnModel model = gnn::GnnModel::load(gnn_dir(c, f));

        FractionMetrics row;
        row.labeled_fraction = f;
        gnn::Prediction pred = gnn::predict_and_score(model, graph, masks.test_mask);
        row.gnn_accuracy = pred.accuracy;
        row.confusion = pred.confusion;

        BaselineResult nn = run_baseline_nn(
            emb, info.labels, masks.train_mask, masks.test_mask, n_classes, c.gnncfg.epochs,
            c.gnncfg.lr, derive_seed(derive_seed(c.seed, "baseline"), std::stoull(pct_tag(f))));
        row.nn_accuracy = nn.accuracy;

        siamese::SiameseModel siam = siamese::SiameseModel::load(siamese_dir(c, f));
        siamese::PairSet test_pairs = siamese::sample_pairs(
            info.labels, masks.test_mask, 1.0, derive_seed(c.seed, "eval-pairs"));
        if (test_pairs.pairs.size() > 200) test_pairs.pairs.resize(200);
        row.pair_accuracy = siamese::pair_accuracy(siam, specs, test_pairs);

        row.siamese_final_loss = final_value(c.out + "/siamese_trace_" + pct_tag(f) + ".csv", 1);
        row.gnn_final_loss = final_value(c.out + "/gnn_trace_" + pct_tag(f) + ".csv", 1);
        {
            std::ifstream is(c.out + "/projection_" + pct_tag(f) + ".csv");
            std::string first;
            std::getline(is, first);
            size_t eq = first.find('=');
            if (eq != std::string::npos) row.projection_variance = std::stod(first.substr(eq + 1));
        }

        gnn::save_confusion_csv(row.confusion, info.class_names,
                                c.out + "/confusion_" + pct_tag(f) + ".csv");
        save_pgm(row.confusion, c.out + "/confusion_" + pct_tag(f) + ".pgm");
        report.rows.push_back(std::move(row));
    }

    json j;
    j["class_names"] = info.class_names;
    j["seed"] = c.seed;
    j["source"] = c.source;
    j["test_fraction"] = c.test_fraction;
    j["fractions"] = json::array();
    for (const auto& row : report.rows) {
        json r;
        r["labeled_fraction"] = row.labeled_fraction;
        r["gnn_accuracy"] = row.gnn_accuracy;
        r["nn_accuracy"] = row.nn_accuracy;
        r["pair_accuracy"] = row.pair_accuracy;
        r["siamese_final_loss"] = row.siamese_final_loss;
        r["gnn_final_loss"] = row.gnn_final_loss;
        r["projection_variance"] = row.projection_variance;
        std::vector<std::vector<long>> conf(n_classes, std::vector<long>(n_classes));
        for (int a = 0; a < n_classes; ++a)
            for (int b = 0; b < n_classes; ++b) conf[a][b] = static_cast<long>(row.confusion.at(a, b));
        r["confusion"] = conf;
        j["fractions"].push_back(r);
    }
    std::ofstream js(c.out + "/metrics.json");
    js << j.dump(2) << "\n";

    std::ofstream txt(c.out + "/metrics.txt");
    char buf[128];
    txt << "labeled%   2-layerNN        GNN   pair-acc\n";
    for (const auto& row : report.rows) {
        std::snprintf(buf, sizeof buf, "%7s%%  %9.4f  %9.4f  %9.4f\n", pct_tag(row.labeled_fraction).c_str(),
                      row.nn_accuracy, row.gnn_accuracy, row.pair_accuracy);
        txt << buf;
    }
    return report;
}

namespace {

void stage_explain(const ExperimentConfig& c) {
    DatasetInfo info = load_dataset_csv(dataset_path(c));
    Tensor specs = load_tensor(specs_path(c));
    const int rows = specs.dim(1), cols = specs.dim(2);
    const std::int64_t plane = static_cast<std::int64_t>(rows) * cols;
    for (double f : c.labeled_fractions) {
        require_artifact(siamese_dir(c, f) + "/manifest.json", "train-siamese");
        require_artifact(gnn_dir(c, f) + "/manifest.json", "train-gnn");
        require_artifact(embeddings_path(c, f), "embed");
        siamese::SiameseModel siam = siamese::SiameseModel::load(siamese_dir(c, f));
        gnn::GnnModel model = gnn::GnnModel::load(gnn_dir(c, f));
        data::SplitMasks masks = load_split_csv(split_path(c, f));
        gnn::EmbeddingGraph graph = build_graph(load_tensor(embeddings_path(c, f)), info, masks);
        gnn::Prediction pred = gnn::predict_and_score(model, graph, masks.test_mask);

        const std::string dir = c.out + "/explain_" + pct_tag(f);
        fs::create_directories(dir);
        int emitted = 0;
        for (int i = 0; i < graph.n() && emitted < c.explain_clips; ++i) {
            if (!masks.test_mask[i]) continue;
            Tensor spec({rows, cols});
            std::copy_n(specs.data() + i * plane, plane, spec.data());
            int cls = pred.pred[i];
            Tensor maps;
            Tensor grads = cam::class_score_gradients(siam, model, graph, spec, i, cls, &maps);
            cam::Heatmap hm = cam::heatmap(cam::cam_weights(grads), maps, rows, cols);
            hm.class_index = cls;
            cam::write_explanation(dir + "/clip" + std::to_string(i) + "_" + info.class_names[cls] +
                                       "_" + hm.layer_tag,
                                   spec, hm, c.explain_threshold);
            ++emitted;
        }
    }
}

}  // namespace

void run_stage(const ExperimentConfig& config, const std::string& stage) {
    config.validate();
    static const std::vector<std::string> order = {"prepare",   "train-siamese", "embed",
                                                   "train-gnn", "evaluate",      "explain"};
    std::vector<std::string> todo;
    if (stage == "all") todo = order;
    else if (std::find(order.begin(), order.end(), stage) != order.end()) todo = {stage};
    else throw ConfigError("unknown stage '" + stage + "'");

    OutputLock lock(config.out);
    for (const auto& s : todo) {
        auto t0 = std::chrono::steady_clock::now();
        if (s == "prepare") stage_prepare(config);
        else if (s == "train-siamese") stage_train_siamese(config);
        else if (s == "embed") stage_embed(config);
        else if (s == "train-gnn") stage_train_gnn(config);
        else if (s == "evaluate") evaluate(config);
        else stage_explain(config);
        double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        record_timing(config, s, dt);
    }
}

// ---------------------------------------------------------------- baselines

BaselineResult run_baseline_nn(const Tensor& embeddings, const std::vector<int>& labels,
                               const std::vector<std::uint8_t>& train_mask,
                               const std::vector<std::uint8_t>& test_mask, int n_classes,
                               int epochs, double lr, std::uint64_t seed) {
    const int n = embeddings.dim(0), d = embeddings.dim(1);
    if (labels.size() != static_cast<size_t>(n) || train_mask.size() != static_cast<size_t>(n) ||
        test_mask.size() != static_cast<size_t>(n))
        throw std::invalid_argument("run_baseline_nn: mask/label length mismatch");
    if (std::count(train_mask.begin(), train_mask.end(), 1) == 0)
        throw std::invalid_argument("run_baseline_nn: empty training mask");

    std::mt19937_64 rng(derive_seed(seed, "baseline-init"));
    ad::Var w1 = ad::param(ad::he_normal({64, d}, rng, d));
    ad::Var b1 = ad::param(Tensor::zeros({64}));
    ad::Var w2 = ad::param(ad::he_normal({n_classes, 64}, rng, 64));
    ad::Var b2 = ad::param(Tensor::zeros({n_classes}));
    std::vector<ad::Var> params = {w1, b1, w2, b2};
    ad::AdamState adam;

    std::vector<int> targets(labels.size(), 0);
    for (size_t i = 0; i < labels.size(); ++i)
        if (train_mask[i]) targets[i] = labels[i];

    BaselineResult res;
    auto forward = [&](bool frozen) {
        ad::Var x = ad::constant(embeddings);
        ad::Var vw1 = frozen ? ad::constant(w1.value()) : w1;
        ad::Var vb1 = frozen ? ad::constant(b1.value()) : b1;
        ad::Var vw2 = frozen ? ad::constant(w2.value()) : w2;
        ad::Var vb2 = frozen ? ad::constant(b2.value()) : b2;
        return ad::linear(ad::relu(ad::linear(x, vw1, vb1)), vw2, vb2);
    };
    for (int epoch = 0; epoch < epochs; ++epoch) {
        ad::Var logits = forward(false);
        ad::Var loss = ad::cross_entropy(logits, targets, train_mask);
        res.epoch_loss.push_back(loss.value()[0]);
        ad::backward(loss);
        ad::adam_step(params, adam, lr);
    }

    Tensor logits = forward(true).value();
    res.confusion = Tensor::zeros({n_classes, n_classes});
    long correct = 0, total = 0;
    for (int i = 0; i < n; ++i) {
        if (!test_mask[i]) continue;
        int best = 0;
        for (int cls = 1; cls < n_classes; ++cls)
            if (logits.at(i, cls) > logits.at(i, best)) best = cls;
        res.confusion.at(labels[i], best) += 1.0;
        correct += (best == labels[i]);
        ++total;
    }
    if (total == 0) throw std::invalid_argument("run_baseline_nn: empty test mask");
    res.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    return res;
}

Projection project_2d(const Tensor& embeddings) {
    if (embeddings.rank() != 2 || embeddings.dim(0) < 3)
        throw std::invalid_argument("project_2d: need an [n>=3, d] matrix, got " +
                                    shape_str(embeddings.shape()));
    const int n = embeddings.dim(0), d = embeddings.dim(1);
    Tensor centered = embeddings;
    for (int k = 0; k < d; ++k) {
        double mean = 0;
        for (int i = 0; i < n; ++i) mean += centered.at(i, k);
        mean /= n;
        for (int i = 0; i < n; ++i) centered.at(i, k) -= mean;
    }
    Tensor cov({d, d});
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, d, d, n, 1.0 / (n - 1), centered.data(), d,
                centered.data(), d, 0.0, cov.data(), d);
    double trace = 0;
    for (int k = 0; k < d; ++k) trace += cov.at(k, k);

    Projection proj;
    proj.coords = Tensor::zeros({n, 2});
    if (trace < 1e-12) {
        proj.degenerate = true;
        std::cerr << "project_2d: degenerate (all-identical) embeddings; emitting zeros\n";
        return proj;
    }

    std::vector<Tensor> dirs;
    double captured = 0;
    for (int comp = 0; comp < 2; ++comp) {
        Tensor v = Tensor::full({d}, 1.0 / std::sqrt(static_cast<double>(d)));
        Tensor tmp({d});
        double lambda = 0;
        for (int it = 0; it < 500; ++it) {
            cblas_dgemv(CblasRowMajor, CblasNoTrans, d, d, 1.0, cov.data(), d, v.data(), 1, 0.0,
                        tmp.data(), 1);
            double norm = std::sqrt(cblas_ddot(d, tmp.data(), 1, tmp.data(), 1));
            if (norm < 1e-300) break;
            for (int k = 0; k < d; ++k) v[k] = tmp[k] / norm;
            lambda = norm;
        }
        captured += lambda;
        // deflate
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b) cov.at(a, b) -= lambda * v[a] * v[b];
        dirs.push_back(v);
    }
    for (int i = 0; i < n; ++i)
        for (int comp = 0; comp < 2; ++comp) {
            double dot = 0;
            for (int k = 0; k < d; ++k) dot += centered.at(i, k) * dirs[comp][k];
            proj.coords.at(i, comp) = dot;
        }
    proj.variance_ratio = std::clamp(captured / trace, 0.0, 1.0);
    return proj;
}

std::vector<int> mel_rows_in_band(const audio::SpectrogramConfig& config, double f_lo, double f_hi) {
    audio::MelFilterbank fb = audio::mel_filterbank(config);
    std::vector<int> rows;
    for (size_t m = 0; m < fb.center_freqs_hz.size(); ++m)
        if (fb.center_freqs_hz[m] >= f_lo && fb.center_freqs_hz[m] <= f_hi)
            rows.push_back(static_cast<int>(m));
    return rows;
}

double band_mass_fraction(const Tensor& heat, const std::vector<int>& rows) {
    double total = heat.sum();
    if (total <= 0) return 0.0;
    double band = 0;
    for (int r : rows)
        for (int c = 0; c < heat.dim(1); ++c) band += heat.at(r, c);
    return band / total;
}

}  // namespace mg::pipe
